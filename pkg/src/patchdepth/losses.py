"""Self-supervised stereo losses and the confidence supervision signal.

Every term reduces to a per-pixel mean by default (``mode="mean"``) so the
loss weights keep their meaning across image sizes.  ``mode="paper-sum"``
uses plain sums for the patch-matching, view-reconstruction and confidence
terms, which are written as sums rather than means.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError
from .stereo import PatchSet, sample_patches, shifted_coords, warp_reconstruct

ZNCC_EPS = 1e-8
PAPER_PATCH_SIZES = (5, 5, 7, 9)
MODES = ("mean", "paper-sum")


@dataclass(frozen=True)
class LossWeights:
    w_p: float = 0.5
    w_v: float = 1.0
    w_d: float = 0.1
    w_c: float = 1.0

    def __post_init__(self):
        for name in ("w_p", "w_v", "w_d", "w_c"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"loss weight {name} must be finite and nonnegative, got {v}")


@dataclass
class LossBreakdown:
    l_pm: Tensor
    l_vr: Tensor
    l_ds: Tensor
    l_dc: Tensor
    l_total: Tensor
    pm_map: Tensor
    per_scale: list[dict[str, float]] = field(default_factory=list)

    def as_dict(self) -> dict[str, float]:
        return {k: float(getattr(self, k).data) for k in ("l_pm", "l_vr", "l_ds", "l_dc", "l_total")}


def _reduce(x: Tensor, mode: str) -> Tensor:
    if mode == "mean":
        return ad.reduce_mean(x)
    if mode == "paper-sum":
        return ad.reduce_sum(x)
    raise ConfigError(f"unknown loss mode {mode!r}; expected one of {MODES}")


def _patches(p) -> Tensor:
    return p.patches if isinstance(p, PatchSet) else p


def zncc(left_patches, right_patches, eps: float = ZNCC_EPS) -> Tensor:
    """Zero-mean normalised cross-correlation along the patch axis (axis 1).

    Returns ``[N,1,H,W]`` in ``[-1, 1]``; zero-variance patches give 0.
    """
    lp, rp = _patches(left_patches), _patches(right_patches)
    if lp.shape != rp.shape:
        raise ConfigError(f"zncc: patch shapes {lp.shape} and {rp.shape} differ")
    # shift by the centre sample first so flat windows centre to exact zeros
    k = lp.shape[1] // 2
    lp = lp - lp[:, k:k + 1]
    rp = rp - rp[:, k:k + 1]
    lc = lp - ad.reduce_mean(lp, over=1, keepdims=True)
    rc = rp - ad.reduce_mean(rp, over=1, keepdims=True)
    num = ad.reduce_sum(lc * rc, axis=1, keepdims=True)
    var_l = ad.reduce_sum(lc * lc, axis=1, keepdims=True)
    var_r = ad.reduce_sum(rc * rc, axis=1, keepdims=True)
    den = ad.sqrt(var_l * var_r + eps)
    return num / den


def matching_cost(z: Tensor) -> Tensor:
    """Similarity in [-1, 1] mapped to a loss in [0, 1]: ``1 - (1 + z)/2``."""
    return ad.scale(ad.sub(1.0, z), 0.5)


def patch_matching_loss(left, right, d_l, d_r, window_n: int, mode: str = "mean"):
    """Symmetric patch-ZNCC loss.

    Left pixels are matched to right patches centred at ``x - d_l``, right
    pixels to left patches centred at ``x + d_r``; the scalar averages both
    directions.  The returned map is the left-anchored per-pixel loss.
    """
    left_anchor = sample_patches(left, None, window_n, side="left")
    right_shift = sample_patches(right, d_l, window_n, sign=-1, side="right")
    pm_left = matching_cost(zncc(left_anchor, right_shift))

    right_anchor = sample_patches(right, None, window_n, side="right")
    left_shift = sample_patches(left, d_r, window_n, sign=1, side="left")
    pm_right = matching_cost(zncc(right_anchor, left_shift))

    scalar = ad.scale(_reduce(pm_left, mode) + _reduce(pm_right, mode), 0.5)
    return scalar, pm_left


def view_reconstruction_loss(target, reconstructed, mode: str = "mean") -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    reconstructed = reconstructed if isinstance(reconstructed, Tensor) else Tensor(reconstructed)
    if target.shape != reconstructed.shape:
        raise ConfigError(f"view reconstruction: shapes {target.shape} and {reconstructed.shape} differ")
    return _reduce(ad.absolute(target - reconstructed), mode)


def _edge_weights(image: np.ndarray):
    gx = np.abs(image[..., :, 1:] - image[..., :, :-1]).mean(axis=1, keepdims=True)
    gy = np.abs(image[..., 1:, :] - image[..., :-1, :]).mean(axis=1, keepdims=True)
    return np.exp(-gx), np.exp(-gy)


def disparity_smoothness_loss(d: Tensor, image) -> Tensor:
    """Edge-aware first-order smoothness with forward differences."""
    img = image.data if isinstance(image, Tensor) else np.asarray(image)
    if img.shape[0] != d.shape[0] or img.shape[2:] != d.shape[2:]:
        raise ConfigError(f"smoothness: disparity {d.shape} and image {img.shape} at different scales")
    wx, wy = _edge_weights(img.astype(d.dtype, copy=False))
    terms = []
    if d.shape[-1] > 1:
        dx = d[..., :, 1:] - d[..., :, :-1]
        terms.append(ad.reduce_mean(ad.absolute(dx) * Tensor(wx)))
    if d.shape[-2] > 1:
        dy = d[..., 1:, :] - d[..., :-1, :]
        terms.append(ad.reduce_mean(ad.absolute(dy) * Tensor(wy)))
    if not terms:
        return Tensor(np.zeros((), dtype=d.dtype))
    return terms[0] if len(terms) == 1 else terms[0] + terms[1]


def disparity_consistency_loss(d_l: Tensor, d_r: Tensor) -> Tensor:
    """Left-right coherence, averaged over the left- and right-anchored forms."""
    if d_l.shape != d_r.shape:
        raise ConfigError(f"consistency: disparity shapes {d_l.shape} and {d_r.shape} differ")
    r_at_l = ad.horizontal_bilinear_sample(d_r, shifted_coords(d_l, -1))
    l_at_r = ad.horizontal_bilinear_sample(d_l, shifted_coords(d_r, 1))
    left_term = ad.reduce_mean(ad.absolute(d_l - r_at_l))
    right_term = ad.reduce_mean(ad.absolute(d_r - l_at_r))
    return ad.scale(left_term + right_term, 0.5)


def downsample2x(image: np.ndarray) -> np.ndarray:
    """2x2 area average; odd trailing rows/columns are dropped."""
    n, c, h, w = image.shape
    h2, w2 = h // 2, w // 2
    if h2 < 1 or w2 < 1:
        raise ConfigError(f"cannot downsample image of size {h}x{w}")
    x = image[:, :, : 2 * h2, : 2 * w2]
    return x.reshape(n, c, h2, 2, w2, 2).mean(axis=(3, 5))


def image_pyramid(image: np.ndarray, n_scales: int = 4) -> list[np.ndarray]:
    """Coarse-to-fine list: ``[1/2^(n-1), ..., 1/2, 1]``."""
    levels = [image]
    for _ in range(n_scales - 1):
        levels.append(downsample2x(levels[-1]))
    return levels[::-1]


def weighted_total(weights: LossWeights, l_pm, l_vr, l_ds, l_dc):
    return (
        ad.scale(l_pm, weights.w_p)
        + ad.scale(l_vr, weights.w_v)
        + ad.scale(l_ds, weights.w_d)
        + ad.scale(l_dc, weights.w_c)
    )


def total_loss(
    left,
    right,
    pyramid,
    weights: LossWeights = LossWeights(),
    patch_sizes=PAPER_PATCH_SIZES,
    mode: str = "mean",
) -> LossBreakdown:
    """All four terms at each of the 4 scales, both views, averaged over scales.

    ``pyramid`` is a :class:`~patchdepth.networks.DisparityPyramid` (or any
    object with ``left``/``right`` lists ordered coarse to fine).
    """
    if mode not in MODES:
        raise ConfigError(f"unknown loss mode {mode!r}; expected one of {MODES}")
    left = left.data if isinstance(left, Tensor) else np.asarray(left)
    right = right.data if isinstance(right, Tensor) else np.asarray(right)
    n_scales = len(pyramid.left)
    if n_scales != 4 or len(pyramid.right) != 4:
        raise ConfigError(f"disparity pyramid must have 4 scales, got {n_scales}")
    if len(patch_sizes) != n_scales:
        raise ConfigError(f"need one patch size per scale, got {len(patch_sizes)}")
    dtype = pyramid.left[-1].dtype
    lefts = image_pyramid(left.astype(dtype, copy=False), n_scales)
    rights = image_pyramid(right.astype(dtype, copy=False), n_scales)

    pm_terms, vr_terms, ds_terms, dc_terms, per_scale = [], [], [], [], []
    pm_map = None
    for s in range(n_scales):
        il, ir = Tensor(lefts[s]), Tensor(rights[s])
        dl, dr = pyramid.left[s], pyramid.right[s]
        if dl.shape[2:] != il.shape[2:]:
            raise ConfigError(f"scale {s}: disparity {dl.shape[2:]} vs image {il.shape[2:]}")
        l_pm, pm_map = patch_matching_loss(il, ir, dl, dr, patch_sizes[s], mode)
        rec_r = warp_reconstruct(il, dr, "reconstruct_right")
        rec_l = warp_reconstruct(ir, dl, "reconstruct_left")
        l_vr = ad.scale(view_reconstruction_loss(ir, rec_r, mode) + view_reconstruction_loss(il, rec_l, mode), 0.5)
        l_ds = ad.scale(disparity_smoothness_loss(dl, il) + disparity_smoothness_loss(dr, ir), 0.5)
        l_dc = disparity_consistency_loss(dl, dr)
        pm_terms.append(l_pm)
        vr_terms.append(l_vr)
        ds_terms.append(l_ds)
        dc_terms.append(l_dc)
        per_scale.append({"l_pm": float(l_pm.data), "l_vr": float(l_vr.data),
                          "l_ds": float(l_ds.data), "l_dc": float(l_dc.data)})

    inv = 1.0 / n_scales
    l_pm = ad.scale(_sum(pm_terms), inv)
    l_vr = ad.scale(_sum(vr_terms), inv)
    l_ds = ad.scale(_sum(ds_terms), inv)
    l_dc = ad.scale(_sum(dc_terms), inv)
    l_total = weighted_total(weights, l_pm, l_vr, l_ds, l_dc)
    return LossBreakdown(l_pm, l_vr, l_ds, l_dc, l_total, pm_map, per_scale)


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def confidence_target(pm_map) -> Tensor:
    """``1 - L_PM`` per pixel as a constant: no gradient reaches the depth net."""
    data = pm_map.data if isinstance(pm_map, Tensor) else np.asarray(pm_map)
    return Tensor(1.0 - data)


def confidence_loss(target, predicted: Tensor, mode: str = "mean") -> Tensor:
    target = target if isinstance(target, Tensor) else Tensor(target)
    if target.shape != predicted.shape:
        raise ConfigError(f"confidence loss: shapes {target.shape} and {predicted.shape} differ")
    return _reduce(ad.absolute(ad.sub(target, predicted)), mode)
