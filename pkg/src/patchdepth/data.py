"""Stereo samples: synthetic generators with exact ground truth, disk
ingestion and photometric/flip augmentation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError
from .fileio import load_gt_disparity, read_image, resize_bilinear
from .stereo import D_MAX_FRACTION, CameraRig


@dataclass
class StereoSample:
    left: np.ndarray  # [1, 3, H, W] float32 in [0, 1]
    right: np.ndarray
    gt_disparity: np.ndarray | None = None  # [H, W], left-referenced
    mask: np.ndarray | None = None  # valid gt pixels
    gt_disparity_right: np.ndarray | None = None  # [H, W], right-referenced
    mask_right: np.ndarray | None = None
    rig: CameraRig | None = None
    id: str = ""

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise ConfigError(f"left {self.left.shape} and right {self.right.shape} image shapes differ")

    @property
    def height(self) -> int:
        return self.left.shape[2]

    @property
    def width(self) -> int:
        return self.left.shape[3]


def default_rig(width: int) -> CameraRig:
    # KITTI-like baseline and field of view, scaled to the image width
    return CameraRig(baseline=0.54, focal=width * 721.0 / 1242.0)


# ---------------------------------------------------------------------------
# disparity layouts


@dataclass(frozen=True)
class DisparitySpec:
    """Layered scene layout in left-view coordinates.

    ``constant``: one fronto-parallel plane at ``d``.
    ``two-plane``: background at ``d`` and a foreground rectangle at ``d_fg``;
    ``rect`` is ``(x0, y0, w, h)`` as fractions of the image.
    ``slanted``: a plane whose disparity runs from ``d`` on the top row to
    ``d_bottom`` on the bottom row, rounded to whole pixels per row.
    """

    kind: str = "constant"
    d: float = 4.0
    d_fg: float = 8.0
    rect: tuple[float, float, float, float] = (0.3125, 0.25, 0.375, 0.5)
    d_bottom: float = 8.0

    @classmethod
    def constant(cls, d: float) -> "DisparitySpec":
        return cls("constant", d=d)

    @classmethod
    def two_plane(cls, d_bg: float = 3.0, d_fg: float = 8.0, rect=None) -> "DisparitySpec":
        kw = {} if rect is None else {"rect": tuple(rect)}
        return cls("two-plane", d=d_bg, d_fg=d_fg, **kw)

    @classmethod
    def slanted(cls, d_top: float, d_bottom: float) -> "DisparitySpec":
        return cls("slanted", d=d_top, d_bottom=d_bottom)

    @classmethod
    def parse(cls, text: str) -> "DisparitySpec":
        """``constant:4``, ``two-plane:3,8`` or ``slanted:2,10``."""
        kind, _, args = text.partition(":")
        vals = [float(v) for v in args.split(",") if v.strip()]
        if kind == "constant" and len(vals) == 1:
            return cls.constant(vals[0])
        if kind == "two-plane" and len(vals) in (2, 6):
            return cls.two_plane(vals[0], vals[1], vals[2:] or None)
        if kind == "slanted" and len(vals) == 2:
            return cls.slanted(*vals)
        raise ConfigError(f"cannot parse disparity spec {text!r}")

    def max_disparity(self) -> float:
        return max(self.d, self.d_fg if self.kind == "two-plane" else 0.0,
                   self.d_bottom if self.kind == "slanted" else 0.0)

    def rect_pixels(self, width: int, height: int) -> tuple[int, int, int, int]:
        x0, y0, w, h = self.rect
        return (int(round(x0 * width)), int(round(y0 * height)),
                int(round((x0 + w) * width)), int(round((y0 + h) * height)))


def _background(spec: DisparitySpec, width: int, height: int) -> np.ndarray:
    if spec.kind == "slanted":
        t = np.arange(height) / max(height - 1, 1)
        rows = np.round(spec.d + (spec.d_bottom - spec.d) * t)
        return np.repeat(rows[:, None], width, axis=1).astype(np.float64)
    if spec.kind in ("constant", "two-plane"):
        return np.full((height, width), float(spec.d))
    raise ConfigError(f"unknown disparity spec kind {spec.kind!r}")


def _check_bounds(spec: DisparitySpec, width: int) -> None:
    bound = D_MAX_FRACTION * width
    vals = [spec.d] + ([spec.d_fg] if spec.kind == "two-plane" else []) + (
        [spec.d_bottom] if spec.kind == "slanted" else [])
    for v in vals:
        if not (0 <= abs(v) < bound):
            raise ConfigError(f"disparity {v} outside [0, {bound:g}) for width {width}")


def _interp_rows(image: np.ndarray, xs: np.ndarray) -> np.ndarray:
    """Horizontal linear interpolation of ``image [C,H,W]`` at ``xs [H,W]``."""
    c, h, w = image.shape
    xs = np.clip(xs, 0, w - 1)
    x0 = np.minimum(np.floor(xs).astype(int), w - 2)
    a = (xs - x0).astype(image.dtype)
    rows = np.arange(h)[:, None]
    v0 = image[:, rows, x0]
    v1 = image[:, rows, x0 + 1]
    return v0 + a * (v1 - v0)


def render_pair(left: np.ndarray, spec: DisparitySpec, fill: np.ndarray, rig=None, sample_id: str = "") -> StereoSample:
    """Build the right view from ``left [3,H,W]`` by exact horizontal shifts.

    Right pixels whose surface point is hidden or out of frame in the left view
    take their value from ``fill`` and are masked; left pixels without a visible
    right correspondence are masked likewise.
    """
    c, h, w = left.shape
    _check_bounds(spec, w)
    bg = _background(spec, w, h)
    xs = np.arange(w)[None, :].repeat(h, axis=0).astype(np.float64)

    fg_left = np.zeros((h, w), dtype=bool)
    if spec.kind == "two-plane":
        x0, y0, x1, y1 = spec.rect_pixels(w, h)
        fg_left[y0:y1, x0:x1] = True
    d_left = np.where(fg_left, spec.d_fg, bg)

    def in_fg(xq):
        # any left pixel touched by interpolation at xq belongs to the foreground
        lo = np.clip(np.floor(xq).astype(int), 0, w - 1)
        hi = np.clip(np.ceil(xq).astype(int), 0, w - 1)
        rows = np.arange(h)[:, None]
        inside = (xq >= 0) & (xq <= w - 1)
        return inside & (fg_left[rows, lo] | fg_left[rows, hi]), inside

    if spec.kind == "two-plane":
        hit_fg, fg_inside = in_fg(xs + spec.d_fg)
        # foreground pixels must hit the foreground with both interpolation taps
        rows = np.arange(h)[:, None]
        xq = xs + spec.d_fg
        lo = np.clip(np.floor(xq).astype(int), 0, w - 1)
        hi = np.clip(np.ceil(xq).astype(int), 0, w - 1)
        fg_right = fg_inside & fg_left[rows, lo] & fg_left[rows, hi]
    else:
        fg_right = np.zeros((h, w), dtype=bool)
    d_right = np.where(fg_right, spec.d_fg, bg)

    src_x = xs + d_right
    touches_fg, inside = in_fg(src_x)
    visible_r = inside & (fg_right | ~touches_fg)
    if spec.kind == "two-plane":
        # background right pixels covered by the shifted foreground are not background
        hidden_partial = ~fg_right & in_fg(xs + spec.d_fg)[0]
        visible_r &= ~hidden_partial
    right = np.where(visible_r[None], _interp_rows(left, src_x), fill)

    # left validity: the right pixel at x - d_l shows the same surface and is
    # visible (both interpolation taps, to keep the backward warp exact)
    tgt = xs - d_left
    inside_l = (tgt >= 0) & (tgt <= w - 1)
    lo = np.clip(np.floor(tgt).astype(int), 0, w - 1)
    hi = np.clip(np.ceil(tgt).astype(int), 0, w - 1)
    rows = np.arange(h)[:, None]
    same = (
        (d_right[rows, lo] == d_left) & (d_right[rows, hi] == d_left)
        & visible_r[rows, lo] & visible_r[rows, hi]
    )
    mask_l = inside_l & same

    return StereoSample(
        left=left[None].astype(np.float32),
        right=right[None].astype(np.float32),
        gt_disparity=d_left.astype(np.float32),
        mask=mask_l,
        gt_disparity_right=d_right.astype(np.float32),
        mask_right=visible_r,
        rig=rig,
        id=sample_id,
    )


def _dots(rng: np.random.Generator, h: int, w: int, density: float, dot_size: int) -> np.ndarray:
    hh, ww = -(-h // dot_size), -(-w // dot_size)
    on = rng.random((hh, ww)) < density
    level = rng.uniform(0.45, 1.0, size=(hh, ww))
    gray = np.where(on, level, 0.1)
    gray = gray.repeat(dot_size, axis=0).repeat(dot_size, axis=1)[:h, :w]
    tint = rng.uniform(0.9, 1.0, size=(3, 1, 1))
    return (gray[None] * tint).astype(np.float64)


def gen_random_dot_stereogram(
    width: int,
    height: int,
    disparity_spec: DisparitySpec | str = DisparitySpec(),
    density: float = 0.5,
    seed: int = 0,
    dot_size: int = 1,
) -> StereoSample:
    """Random-dot pair whose only depth cue is the disparity layout."""
    if isinstance(disparity_spec, str):
        disparity_spec = DisparitySpec.parse(disparity_spec)
    if not 0 <= density <= 1:
        raise ConfigError(f"density must be in [0, 1], got {density}")
    _check_bounds(disparity_spec, width)
    rng = np.random.default_rng(seed)
    left = _dots(rng, height, width, density, dot_size)
    fill = _dots(rng, height, width, density, dot_size)
    return render_pair(left, disparity_spec, fill, default_rig(width), f"rds-{seed}")


@dataclass(frozen=True)
class TextureSpec:
    """Sum of ``n_waves`` random plane sinusoids, spatial frequency (cycles
    per pixel) drawn from ``[f_min, f_max]``; ``amplitude`` 0 gives a flat image."""

    n_waves: int = 6
    f_min: float = 0.02
    f_max: float = 0.15
    amplitude: float = 1.0


def _texture(rng: np.random.Generator, h: int, w: int, spec: TextureSpec) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    img = np.zeros((h, w))
    for _ in range(spec.n_waves):
        f = rng.uniform(spec.f_min, spec.f_max)
        theta = rng.uniform(-np.pi / 3, np.pi / 3)
        phase = rng.uniform(0, 2 * np.pi)
        amp = rng.uniform(0.5, 1.0)
        img += amp * np.sin(2 * np.pi * f * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
    peak = np.abs(img).max()
    if peak > 0:
        img /= peak
    gray = 0.5 + 0.4 * spec.amplitude * img
    tint = rng.uniform(0.9, 1.0, size=(3, 1, 1))
    return gray[None] * tint


def gen_textured_scene(
    width: int,
    height: int,
    texture: TextureSpec = TextureSpec(),
    disparity_spec: DisparitySpec | str = DisparitySpec(),
    seed: int = 0,
) -> StereoSample:
    """Smooth band-limited texture with the same layout guarantees as the
    random-dot generator."""
    if isinstance(disparity_spec, str):
        disparity_spec = DisparitySpec.parse(disparity_spec)
    _check_bounds(disparity_spec, width)
    rng = np.random.default_rng(seed)
    left = _texture(rng, height, width, texture)
    fill = _texture(rng, height, width, texture)
    return render_pair(left, disparity_spec, fill, default_rig(width), f"tex-{seed}")


# ---------------------------------------------------------------------------
# disk ingestion


def load_stereo_pair(left_path, right_path, target_size: tuple[int, int] | None = None, sample_id: str | None = None) -> StereoSample:
    """Decode a pair to ``[1,3,H,W]`` floats; ``target_size`` is ``(W, H)``."""
    left = read_image(left_path)
    right = read_image(right_path)
    if left.shape != right.shape:
        raise ConfigError(f"pair extents differ: {left_path} {left.shape[1::-1]} vs {right_path} {right.shape[1::-1]}")
    if target_size is not None:
        w, h = target_size
        left = resize_bilinear(left, w, h)
        right = resize_bilinear(right, w, h)
    to_nchw = lambda a: np.ascontiguousarray(a.transpose(2, 0, 1)[None], dtype=np.float32)  # noqa: E731
    return StereoSample(to_nchw(left), to_nchw(right), id=sample_id or str(left_path))


def load_gt_for_sample(path, width: int, fmt: str | None = None, height: int | None = None):
    """Ground truth resized to ``width`` columns (values rescaled), nearest-neighbour.

    ``height`` defaults to keeping the aspect ratio.
    """
    d, mask = load_gt_disparity(path, fmt)
    h0, w0 = d.shape
    sx = width / w0
    if height is None:
        height = int(round(h0 * sx))
    if (h0, w0) == (height, width):
        return d, mask
    sy = height / h0
    ys = np.minimum((np.arange(height) + 0.5) / sy, h0 - 1).astype(int)
    xs = np.minimum((np.arange(width) + 0.5) / sx, w0 - 1).astype(int)
    return d[ys][:, xs] * sx, mask[ys][:, xs]


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentConfig:
    flip_probability: float = 0.5
    gamma: tuple[float, float] = (0.8, 1.2)
    brightness: tuple[float, float] = (0.8, 1.2)
    color: tuple[float, float] = (0.95, 1.05)

    def __post_init__(self):
        if not 0 <= self.flip_probability <= 1:
            raise ConfigError("flip_probability must be in [0, 1]")
        for name in ("gamma", "brightness", "color"):
            lo, hi = getattr(self, name)
            if not lo <= 1.0 <= hi:
                raise ConfigError(f"{name} range {lo, hi} must contain 1.0")

    @classmethod
    def identity(cls) -> "AugmentConfig":
        return cls(0.0, (1.0, 1.0), (1.0, 1.0), (1.0, 1.0))


def flip_pair(sample: StereoSample) -> StereoSample:
    """Mirror both views and swap them: the mirrored right view is the new left."""
    return replace(
        sample,
        left=np.ascontiguousarray(sample.right[..., ::-1]),
        right=np.ascontiguousarray(sample.left[..., ::-1]),
        gt_disparity=None, mask=None, gt_disparity_right=None, mask_right=None,
    )


def photometric(sample: StereoSample, gamma: float, brightness: float, color) -> StereoSample:
    color = np.asarray(color, dtype=np.float32).reshape(1, -1, 1, 1)

    def f(img):
        out = np.power(img, np.float32(gamma)) * np.float32(brightness) * color
        return np.clip(out, 0.0, 1.0).astype(np.float32)

    return replace(sample, left=f(sample.left), right=f(sample.right))


def augment(sample: StereoSample, cfg: AugmentConfig = AugmentConfig(), seed: int = 0) -> StereoSample:
    rng = np.random.default_rng(seed)
    flip = rng.random() < cfg.flip_probability
    gamma = rng.uniform(*cfg.gamma)
    brightness = rng.uniform(*cfg.brightness)
    color = rng.uniform(*cfg.color, size=sample.left.shape[1])
    if cfg == AugmentConfig.identity():
        return sample
    out = flip_pair(sample) if flip else sample
    return photometric(out, gamma, brightness, color)


def stack_batch(samples) -> tuple[np.ndarray, np.ndarray]:
    return (np.concatenate([s.left for s in samples], axis=0),
            np.concatenate([s.right for s in samples], axis=0))
