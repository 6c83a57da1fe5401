"""Constant-disparity loss sweeps comparing patch ZNCC with per-pixel L1."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .data import DisparitySpec, StereoSample, TextureSpec, gen_textured_scene
from .errors import ConfigError
from .fileio import warn
from .losses import patch_matching_loss, view_reconstruction_loss
from .stereo import warp_reconstruct

CSV_COLUMNS = ("disparity", "l_pm", "l1_photometric")


@dataclass
class CurveSummary:
    argmin: float
    distance: float
    local_minima: int


@dataclass
class Landscape:
    d_true: float
    hypotheses: np.ndarray
    l_pm: np.ndarray
    l1: np.ndarray

    @property
    def pm_summary(self) -> CurveSummary:
        return summarize(self.hypotheses, self.l_pm, self.d_true)

    @property
    def l1_summary(self) -> CurveSummary:
        return summarize(self.hypotheses, self.l1, self.d_true)

    def summary(self) -> dict:
        pm, l1 = self.pm_summary, self.l1_summary
        return {
            "d_true": self.d_true,
            "pm_argmin": pm.argmin,
            "pm_distance": pm.distance,
            "pm_local_minima": pm.local_minima,
            "l1_argmin": l1.argmin,
            "l1_distance": l1.distance,
            "l1_local_minima": l1.local_minima,
        }


def count_local_minima(curve) -> int:
    """Strict interior minima: lower than both neighbours."""
    c = np.asarray(curve, dtype=np.float64)
    if c.size < 3:
        return 0
    mid = c[1:-1]
    return int(np.sum((mid < c[:-2]) & (mid < c[2:])))


def summarize(hypotheses, curve, d_true: float) -> CurveSummary:
    i = int(np.argmin(curve))
    arg = float(hypotheses[i])
    return CurveSummary(arg, abs(arg - d_true), count_local_minima(curve))


def sweep_hypotheses(d_true: float, radius: float = 20.0, step: float = 0.25) -> np.ndarray:
    if step <= 0 or radius <= 0:
        raise ConfigError("sweep radius and step must be positive")
    n = int(round(2 * radius / step))
    return d_true - radius + step * np.arange(n + 1)


def sweep(
    sample: StereoSample,
    hypotheses,
    d_true: float | None = None,
    window_n: int = 9,
) -> Landscape:
    """Evaluate both losses for each globally constant disparity hypothesis.

    The patch loss is the symmetric patch-matching loss; the photometric loss
    averages the L1 error of both reconstructed views.
    """
    hyp = np.asarray(hypotheses, dtype=np.float64)
    if d_true is None:
        if sample.gt_disparity is None:
            raise ConfigError("sweep needs d_true or a sample with ground truth")
        d_true = float(np.median(sample.gt_disparity[sample.mask]))
    if not hyp.min() <= d_true <= hyp.max():
        warn(f"sweep range [{hyp.min():g}, {hyp.max():g}] does not contain d_true={d_true:g}")
    left = Tensor(sample.left.astype(np.float64))
    right = Tensor(sample.right.astype(np.float64))
    shape = (left.shape[0], 1) + left.shape[2:]
    pm = np.empty(hyp.size)
    l1 = np.empty(hyp.size)
    for i, d in enumerate(hyp):
        dm = Tensor(np.full(shape, d))
        pm[i] = float(patch_matching_loss(left, right, dm, dm, window_n)[0].data)
        rec_l = warp_reconstruct(right, dm, "reconstruct_left")
        rec_r = warp_reconstruct(left, dm, "reconstruct_right")
        l1[i] = 0.5 * (float(view_reconstruction_loss(left, rec_l).data)
                       + float(view_reconstruction_loss(right, rec_r).data))
    return Landscape(float(d_true), hyp, pm, l1)


def textured_landscape(
    d_true: float,
    seed: int,
    width: int = 96,
    height: int = 48,
    texture: TextureSpec = TextureSpec(),
    radius: float = 20.0,
    step: float = 0.25,
    window_n: int = 9,
) -> Landscape:
    sample = gen_textured_scene(width, height, texture, DisparitySpec.constant(d_true), seed=seed)
    return sweep(sample, sweep_hypotheses(d_true, radius, step), d_true, window_n)


def write_landscape_csv(path, land: Landscape) -> None:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(CSV_COLUMNS)
        for row in zip(land.hypotheses, land.l_pm, land.l1):
            w.writerow([repr(float(v)) for v in row])


def read_landscape_csv(path, d_true: float) -> Landscape:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    cols = {c: np.array([float(r[c]) for r in rows]) for c in CSV_COLUMNS}
    return Landscape(d_true, cols["disparity"], cols["l_pm"], cols["l1_photometric"])
