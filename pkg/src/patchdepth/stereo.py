"""Rectified stereo geometry: triangulation, inverse warping, patch sampling.

Convention: a point at column ``x_l`` in the left view appears at
``x_r = x_l - d`` in the right view, with ``d >= 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, NumericalError

DISPARITY_EPS = 1e-3
D_MAX_FRACTION = 0.3


@dataclass(frozen=True)
class CameraRig:
    baseline: float  # metres
    focal: float  # pixels

    def __post_init__(self):
        for name in ("baseline", "focal"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v > 0):
                raise ConfigError(f"camera {name} must be positive and finite, got {v}")

    @property
    def bf(self) -> float:
        return self.baseline * self.focal


@dataclass
class PatchSet:
    patches: Tensor  # [N, n*n, H, W]
    window_n: int
    side: str
    shift_sign: int = 0

    @property
    def shape(self):
        return self.patches.shape


def disparity_to_depth(d, rig: CameraRig, d_eps: float = DISPARITY_EPS):
    """Depth ``b*f/d``; returns ``(depth, flagged)`` where ``flagged`` marks
    pixels whose disparity fell below ``d_eps`` and was floored."""
    d = np.asarray(d.data if isinstance(d, Tensor) else d, dtype=np.float64)
    if np.any(d < 0):
        raise ConfigError("disparity must be nonnegative")
    flagged = d < d_eps
    return rig.bf / np.maximum(d, d_eps), flagged


def depth_to_disparity(depth, rig: CameraRig):
    depth = np.asarray(depth.data if isinstance(depth, Tensor) else depth, dtype=np.float64)
    if np.any(~(depth > 0)):
        raise NumericalError("depth must be strictly positive to convert to disparity")
    return rig.bf / depth


def disparity_bound(width: int, fraction: float = D_MAX_FRACTION) -> float:
    return fraction * width


def _pixel_grid(width: int, dtype) -> Tensor:
    return Tensor(np.arange(width, dtype=dtype).reshape(1, 1, 1, width))


def shifted_coords(d: Tensor, sign: int) -> Tensor:
    """Horizontal sample positions ``x + sign*d`` on the grid of ``d``."""
    grid = _pixel_grid(d.shape[-1], d.dtype)
    if sign == 1:
        return ad.add(grid, d)
    if sign == -1:
        return ad.sub(grid, d)
    raise ConfigError(f"shift sign must be +1 or -1, got {sign}")


def _as_image(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def warp_reconstruct(source, d, direction: str) -> Tensor:
    """Backward-mapping view synthesis.

    ``reconstruct_right``: ``I_r(x) ~ source(x + d_r(x))`` with ``source`` the left
    image and ``d`` referenced on the right grid.
    ``reconstruct_left``: ``I_l(x) ~ source(x - d_l(x))`` with ``source`` the right
    image and ``d`` referenced on the left grid.
    """
    source = _as_image(source)
    d = _as_image(d)
    if source.ndim != 4 or d.ndim != 4 or d.shape[1] != 1:
        raise ConfigError(f"warp expects image [N,C,H,W] and disparity [N,1,H,W], got {source.shape}, {d.shape}")
    if source.shape[0] != d.shape[0] or source.shape[2:] != d.shape[2:]:
        raise ConfigError(f"warp: disparity resolution {d.shape[2:]} != image resolution {source.shape[2:]}")
    if direction == "reconstruct_right":
        sign = 1
    elif direction == "reconstruct_left":
        sign = -1
    else:
        raise ConfigError(f"unknown warp direction {direction!r}")
    return ad.horizontal_bilinear_sample(source, shifted_coords(d, sign))


def to_gray(image) -> Tensor:
    image = _as_image(image)
    if image.shape[1] == 1:
        return image
    return ad.reduce_mean(image, over=1, keepdims=True)


def sample_patches(image, d, window_n: int, sign: int = -1, side: str | None = None) -> PatchSet:
    """Vectorised ``window_n x window_n`` patches around every pixel.

    With ``d`` None the patch of pixel ``(x, y)`` is centred on ``(x, y)``.
    Otherwise it is centred on ``(x + sign*d(x,y), y)``; the default ``sign=-1``
    gives the right-image patches ``N_{x-d,y}`` matched against left pixels.
    Colour images are reduced to their channel mean first.
    """
    if window_n < 3 or window_n % 2 == 0:
        raise ConfigError(f"patch window must be odd and >= 3, got {window_n}")
    stack = ad.neighborhood(to_gray(image), window_n)
    if d is None:
        return PatchSet(stack, window_n, side or "anchor", 0)
    d = _as_image(d)
    if d.shape[2:] != stack.shape[2:]:
        raise ConfigError(f"patch sampling: disparity resolution {d.shape[2:]} != image {stack.shape[2:]}")
    patches = ad.horizontal_bilinear_sample(stack, shifted_coords(d, sign))
    return PatchSet(patches, window_n, side or "shifted", sign)
