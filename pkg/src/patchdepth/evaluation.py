"""Depth and disparity error metrics and confidence calibration."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from .errors import ConfigError, NumericalError

MIN_DEPTH = 1e-3
METRIC_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1_all", "delta1", "delta2", "delta3", "n_valid")


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    d1_all: float
    delta1: float
    delta2: float
    delta3: float
    n_valid: int

    def row(self) -> list:
        return [getattr(self, c) for c in METRIC_COLUMNS]


def _valid_pixels(pred, gt, mask):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ConfigError(f"prediction {pred.shape} and ground truth {gt.shape} shapes differ")
    valid = np.isfinite(gt) & (gt > 0)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise ConfigError(f"mask {mask.shape} and ground truth {gt.shape} shapes differ")
        valid &= mask
    return pred, gt, valid


def depth_metrics(pred, gt, mask=None, cap: float = 80.0, d1: float = float("nan")) -> DepthMetrics:
    """Error and accuracy statistics over valid pixels.

    Ground truth outside ``(0, cap]`` is dropped; predictions are clamped to
    ``[MIN_DEPTH, cap]``.  ``d1`` is carried through from :func:`d1_all` (it is
    a disparity-space quantity).
    """
    pred, gt, valid = _valid_pixels(pred, gt, mask)
    valid &= gt <= cap
    n = int(valid.sum())
    if n == 0:
        raise NumericalError("no valid pixels to evaluate")
    g = gt[valid]
    e = np.clip(pred[valid], MIN_DEPTH, cap)
    diff = e - g
    ratio = np.maximum(e / g, g / e)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(diff) / g)),
        sq_rel=float(np.mean(diff**2 / g)),
        rmse=float(np.sqrt(np.mean(diff**2))),
        rmse_log=float(np.sqrt(np.mean((np.log(e) - np.log(g)) ** 2))),
        d1_all=float(d1),
        delta1=float(np.mean(ratio < 1.25)),
        delta2=float(np.mean(ratio < 1.25**2)),
        delta3=float(np.mean(ratio < 1.25**3)),
        n_valid=n,
    )


def d1_all(pred_disp, gt_disp, mask=None) -> float:
    """Fraction of valid pixels whose error exceeds both 3 px and 5% of gt."""
    pred, gt, valid = _valid_pixels(pred_disp, gt_disp, mask)
    n = int(valid.sum())
    if n == 0:
        raise NumericalError("no valid pixels to evaluate")
    err = np.abs(pred[valid] - gt[valid])
    return float(np.mean((err > 3.0) & (err > 0.05 * gt[valid])))


def disparity_mae(pred_disp, gt_disp, mask=None) -> float:
    pred, gt, valid = _valid_pixels(pred_disp, gt_disp, mask)
    if not valid.any():
        raise NumericalError("no valid pixels to evaluate")
    return float(np.mean(np.abs(pred[valid] - gt[valid])))


def aggregate(per_image: list[DepthMetrics]) -> DepthMetrics:
    """Pixel-weighted mean of per-image metrics; RMS terms combine in squares."""
    if not per_image:
        raise NumericalError("nothing to aggregate")
    w = np.array([m.n_valid for m in per_image], dtype=np.float64)
    tot = w.sum()

    def mean(attr):
        return float(np.sum(w * [getattr(m, attr) for m in per_image]) / tot)

    def rms(attr):
        return float(np.sqrt(np.sum(w * np.square([getattr(m, attr) for m in per_image])) / tot))

    return DepthMetrics(
        abs_rel=mean("abs_rel"), sq_rel=mean("sq_rel"), rmse=rms("rmse"), rmse_log=rms("rmse_log"),
        d1_all=mean("d1_all"), delta1=mean("delta1"), delta2=mean("delta2"), delta3=mean("delta3"),
        n_valid=int(tot),
    )


def write_metrics_csv(path, rows: list[tuple[str, DepthMetrics]], total: DepthMetrics | None = None) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(("image",) + METRIC_COLUMNS)
        for name, m in rows:
            wr.writerow([name] + [repr(v) for v in m.row()])
        if total is not None:
            wr.writerow(["aggregate"] + [repr(v) for v in total.row()])


def read_metrics_csv(path) -> list[tuple[str, DepthMetrics]]:
    out = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            vals = {c: float(rec[c]) for c in METRIC_COLUMNS}
            vals["n_valid"] = int(vals["n_valid"])
            out.append((rec["image"], DepthMetrics(**vals)))
    return out


@dataclass
class CalibrationReport:
    bin_abs_rel: list[float]
    bin_confidence: list[float]
    spearman: float
    n_valid: int


def _tie_averaged(sorted_keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Replace each run of equal keys by the mean of its values."""
    out = values.astype(np.float64).copy()
    starts = np.flatnonzero(np.r_[True, sorted_keys[1:] != sorted_keys[:-1]])
    ends = np.r_[starts[1:], len(sorted_keys)]
    for s, e in zip(starts, ends):
        if e - s > 1:
            out[s:e] = out[s:e].mean()
    return out


def spearman(a, b) -> float:
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size < 2 or np.all(a == a[0]) or np.all(b == b[0]):
        return 0.0
    return float(spearmanr(a, b).statistic)


def confidence_calibration(confidence, pred, gt, mask=None, n_bins: int = 10) -> CalibrationReport:
    """Equal-population confidence bins (ascending) with their mean abs_rel,
    plus the rank correlation between confidence and negative error.

    Pixels sharing a confidence value share their mean error, so ties never
    split arbitrarily across bins.
    """
    conf = np.asarray(confidence, dtype=np.float64)
    pred, gt, valid = _valid_pixels(pred, gt, mask)
    if conf.shape != gt.shape:
        raise ConfigError(f"confidence {conf.shape} and ground truth {gt.shape} shapes differ")
    n = int(valid.sum())
    if n < n_bins:
        raise NumericalError(f"{n} valid pixels is fewer than {n_bins} bins")
    c = conf[valid]
    err = np.abs(pred[valid] - gt[valid]) / gt[valid]
    order = np.argsort(c, kind="stable")
    cs, es = c[order], _tie_averaged(c[order], err[order])
    bins = np.array_split(np.arange(n), n_bins)
    return CalibrationReport(
        bin_abs_rel=[float(es[b].mean()) for b in bins],
        bin_confidence=[float(cs[b].mean()) for b in bins],
        spearman=spearman(c, -err),
        n_valid=n,
    )
