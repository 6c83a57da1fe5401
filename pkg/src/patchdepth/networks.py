"""DepthNet, ConfidenceNet, weight initialisation, Adam and checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ConfigError, DataIOError

N_OUTPUT_SCALES = 4


@dataclass
class DepthNetConfig:
    """Encoder-decoder layout.

    ``channels``/``kernels`` list one entry per stride-2 encoder stage; when
    omitted they follow ``base_channels * 2**i`` capped at ``max_channels`` and
    3x3 kernels except 7 and 5 for the first two stages.
    """

    encoder_depth: int = 4
    base_channels: int = 16
    max_channels: int = 64
    skip_connections: int | None = None
    output_scales: int = N_OUTPUT_SCALES
    d_max_fraction: float = 0.3
    disp_init: float = 0.5
    channels: tuple[int, ...] | None = None
    kernels: tuple[int, ...] | None = None
    decoder_final_channels: int | None = None

    def __post_init__(self):
        if self.output_scales != N_OUTPUT_SCALES:
            raise ConfigError(f"output_scales must be {N_OUTPUT_SCALES}, got {self.output_scales}")
        if self.encoder_depth < self.output_scales - 1:
            raise ConfigError(
                f"encoder_depth {self.encoder_depth} < output_scales - 1 = {self.output_scales - 1}"
            )
        if self.skip_connections is None:
            self.skip_connections = self.encoder_depth - 1
        if not 0 <= self.skip_connections <= self.encoder_depth - 1:
            raise ConfigError(f"skip_connections must be in [0, {self.encoder_depth - 1}]")
        if self.channels is None:
            self.channels = tuple(min(self.base_channels * 2**i, self.max_channels) for i in range(self.encoder_depth))
        if self.kernels is None:
            self.kernels = tuple(7 if i == 0 else 5 if i == 1 else 3 for i in range(self.encoder_depth))
        self.channels = tuple(self.channels)
        self.kernels = tuple(self.kernels)
        if len(self.channels) != self.encoder_depth or len(self.kernels) != self.encoder_depth:
            raise ConfigError("channels and kernels need one entry per encoder stage")
        if any(k % 2 == 0 for k in self.kernels):
            raise ConfigError(f"kernel sizes must be odd, got {self.kernels}")
        if self.decoder_final_channels is None:
            self.decoder_final_channels = max(self.channels[0] // 2, 1)
        if not 0 < self.d_max_fraction < 1:
            raise ConfigError("d_max_fraction must lie in (0, 1)")
        if not 0 < self.disp_init < 1:
            raise ConfigError("disp_init must lie in (0, 1)")

    @classmethod
    def toy(cls, **kw) -> "DepthNetConfig":
        kw.setdefault("kernels", (3, 3, 3, 3)[: kw.get("encoder_depth", 4)])
        # start below mid-range: small toy disparities sit in the lower quarter of d_max
        kw.setdefault("disp_init", 0.25)
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "DepthNetConfig":
        # 7 stages, 512-channel bottleneck, 6 skip connections
        base = dict(
            encoder_depth=7,
            base_channels=32,
            max_channels=512,
            skip_connections=6,
            channels=(32, 64, 128, 256, 512, 512, 512),
            kernels=(7, 5, 3, 3, 3, 3, 3),
            decoder_final_channels=16,
        )
        base.update(kw)
        return cls(**base)

    @property
    def divisor(self) -> int:
        return 2**self.encoder_depth


@dataclass
class ConfidenceNetConfig:
    depth: int = 3
    base_channels: int = 8
    max_channels: int = 32
    kernel: int = 3

    def __post_init__(self):
        if self.depth < 1:
            raise ConfigError("confidence net needs at least one stage")

    @classmethod
    def toy(cls, **kw) -> "ConfidenceNetConfig":
        return cls(**kw)

    @classmethod
    def paper(cls, **kw) -> "ConfidenceNetConfig":
        base = dict(depth=5, base_channels=32, max_channels=256)
        base.update(kw)
        return cls(**base)

    @property
    def channels(self) -> tuple[int, ...]:
        return tuple(min(self.base_channels * 2**i, self.max_channels) for i in range(self.depth))

    @property
    def divisor(self) -> int:
        return 2**self.depth


@dataclass
class NetworkParams:
    """Named parameters plus Adam moments."""

    tensors: dict[str, Tensor]
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __iter__(self):
        return iter(self.tensors.values())

    def __len__(self) -> int:
        return len(self.tensors)

    def names(self) -> list[str]:
        return list(self.tensors)

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    def zero_grad(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams({k: Tensor(t.data.astype(dtype), requires_grad=True, name=k)
                              for k, t in self.tensors.items()})

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}


@dataclass
class DisparityPyramid:
    """Per-scale disparities ordered coarse to fine (1/8, 1/4, 1/2, 1),
    each in pixels of its own resolution."""

    left: list[Tensor]
    right: list[Tensor]
    scales: tuple[float, ...] = (0.125, 0.25, 0.5, 1.0)

    def __len__(self) -> int:
        return len(self.left)

    @property
    def full(self) -> tuple[Tensor, Tensor]:
        return self.left[-1], self.right[-1]


# ---------------------------------------------------------------------------
# layer specs


def _depthnet_layers(cfg: DepthNetConfig, in_channels: int = 3):
    """(name, kernel shape) for every conv in the DepthNet."""
    layers = []
    prev = in_channels
    for i, (c, k) in enumerate(zip(cfg.channels, cfg.kernels)):
        layers.append((f"enc{i}a", (c, prev, k, k)))
        layers.append((f"enc{i}b", (c, c, k, k)))
        prev = c
    E = cfg.encoder_depth
    head_levels = _head_levels(cfg)
    if E in head_levels:
        layers.append((f"disp{E}", (2, prev, 3, 3)))
    for j in range(E - 1, -1, -1):
        c = cfg.channels[j - 1] if j >= 1 else cfg.decoder_final_channels
        layers.append((f"up{j}", (c, prev, 3, 3)))
        cin = c
        if _has_skip(cfg, j):
            cin += cfg.channels[j - 1]
        if j + 1 in head_levels:
            cin += 2
        layers.append((f"iconv{j}", (c, cin, 3, 3)))
        if j in head_levels:
            layers.append((f"disp{j}", (2, c, 3, 3)))
        prev = c
    return layers


def _head_levels(cfg) -> list[int]:
    # level j has resolution 1/2**j; outputs at 1/8, 1/4, 1/2, 1
    return [3, 2, 1, 0]


def _has_skip(cfg: DepthNetConfig, j: int) -> bool:
    # skips from the coarsest levels first; level j takes encoder stage j-1
    if j < 1:
        return False
    return j >= cfg.encoder_depth - cfg.skip_connections


def _confnet_layers(cfg: ConfidenceNetConfig, in_channels: int = 3):
    layers = []
    prev = in_channels
    k = cfg.kernel
    chans = cfg.channels
    for i, c in enumerate(chans):
        layers.append((f"enc{i}a", (c, prev, k, k)))
        layers.append((f"enc{i}b", (c, c, k, k)))
        prev = c
    for j in range(cfg.depth - 1, -1, -1):
        c = chans[j - 1] if j >= 1 else max(chans[0] // 2, 1)
        layers.append((f"up{j}", (c, prev, k, k)))
        layers.append((f"iconv{j}", (c, c, k, k)))
        prev = c
    layers.append(("conf", (1, prev, 3, 3)))
    return layers


def init_weights(cfg, seed: int, dtype=np.float32) -> NetworkParams:
    """He-normal kernels (std ``sqrt(2/fan_in)``) and zero biases."""
    if isinstance(cfg, DepthNetConfig):
        layers = _depthnet_layers(cfg)
    elif isinstance(cfg, ConfidenceNetConfig):
        layers = _confnet_layers(cfg)
    else:
        raise ConfigError(f"unsupported network config {type(cfg).__name__}")
    rng = np.random.default_rng(seed)
    tensors: dict[str, Tensor] = {}
    for name, shape in layers:
        fan_in = shape[1] * shape[2] * shape[3]
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        if name.startswith(("disp", "conf")):
            w *= 0.1
        tensors[f"{name}.w"] = Tensor(w.astype(dtype), requires_grad=True, name=f"{name}.w")
        tensors[f"{name}.b"] = Tensor(np.zeros(shape[0], dtype=dtype), requires_grad=True, name=f"{name}.b")
    return NetworkParams(tensors)


# ---------------------------------------------------------------------------
# forward passes


def _conv(x, p, name, stride=1):
    w = p[f"{name}.w"]
    return ad.conv2d(x, w, p[f"{name}.b"], stride=stride, padding=w.shape[-1] // 2)


def _upconv(x, p, name):
    return ad.upsample2x_conv(x, p[f"{name}.w"], p[f"{name}.b"])


def _check_extents(image: Tensor, divisor: int, what: str) -> None:
    if image.ndim != 4:
        raise ConfigError(f"{what}: expected [N,C,H,W] image, got {image.shape}")
    h, w = image.shape[2:]
    if h % divisor or w % divisor:
        raise ConfigError(
            f"{what}: input {w}x{h} not divisible by {divisor}; resize to a multiple of {divisor}"
        )


def _prepare(image, params: NetworkParams) -> Tensor:
    data = image.data if isinstance(image, Tensor) else np.asarray(image)
    dtype = next(iter(params)).dtype
    return Tensor(data.astype(dtype, copy=False) - dtype.type(0.5))


def depthnet_forward(image, params: NetworkParams, cfg: DepthNetConfig) -> DisparityPyramid:
    """Left image -> left and right disparities at 1/8, 1/4, 1/2 and full size."""
    x = _prepare(image, params)
    _check_extents(x, cfg.divisor, "depthnet")
    width = x.shape[-1]
    E = cfg.encoder_depth
    feats = []
    for i in range(E):
        x = ad.elu(_conv(x, params, f"enc{i}a", stride=2))
        x = ad.elu(_conv(x, params, f"enc{i}b"))
        feats.append(x)

    heads = _head_levels(cfg)
    disps: dict[int, Tensor] = {}

    # fixed pre-sigmoid offset: an untrained head outputs disp_init * d_max
    offset = float(np.log(cfg.disp_init / (1.0 - cfg.disp_init)))

    def head(feature, j):
        d_max = cfg.d_max_fraction * width / 2**j
        logits = _conv(feature, params, f"disp{j}")
        if offset:
            logits = ad.add(logits, offset)
        return ad.scale(ad.sigmoid(logits), d_max)

    if E in heads:
        disps[E] = head(x, E)
    for j in range(E - 1, -1, -1):
        up = ad.elu(_upconv(x, params, f"up{j}"))
        parts = [up]
        if _has_skip(cfg, j):
            parts.append(feats[j - 1])
        if j + 1 in disps:
            # coarser prediction, rescaled to this level's pixel units
            parts.append(ad.scale(ad.upsample_nearest2x(disps[j + 1]), 2.0))
        x = ad.elu(_conv(ad.concat(parts, axis=1) if len(parts) > 1 else up, params, f"iconv{j}"))
        if j in heads:
            disps[j] = head(x, j)
    ordered = [disps[j] for j in heads]
    return DisparityPyramid(left=[d[:, 0:1] for d in ordered], right=[d[:, 1:2] for d in ordered])


def confidencenet_forward(image, params: NetworkParams, cfg: ConfidenceNetConfig | None = None) -> Tensor:
    """Left image -> per-pixel confidence in (0, 1) at input resolution."""
    if cfg is None:
        cfg = ConfidenceNetConfig(depth=sum(1 for n in params.names() if n.startswith("enc") and n.endswith("a.w")))
    x = _prepare(image, params)
    _check_extents(x, cfg.divisor, "confidencenet")
    for i in range(cfg.depth):
        x = ad.elu(_conv(x, params, f"enc{i}a", stride=2))
        x = ad.elu(_conv(x, params, f"enc{i}b"))
    for j in range(cfg.depth - 1, -1, -1):
        x = ad.elu(_upconv(x, params, f"up{j}"))
        x = ad.elu(_conv(x, params, f"iconv{j}"))
    return ad.sigmoid(_conv(x, params, "conf"))


# ---------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def adam_step(params: NetworkParams, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> NetworkParams:
    """One bias-corrected Adam update, in place."""
    for name, t in params.tensors.items():
        if t.grad is None:
            raise ConfigError(f"parameter {name!r} has no gradient; run backward first")
    params.step += 1
    k = params.step
    c1 = 1.0 - beta1**k
    c2 = 1.0 - beta2**k
    for name, t in params.tensors.items():
        g = t.grad.astype(t.dtype, copy=False)
        m = params.m.get(name)
        v = params.v.get(name)
        if m is None:
            m = np.zeros_like(t.data)
            v = np.zeros_like(t.data)
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        params.m[name], params.v[name] = m.astype(t.dtype), v.astype(t.dtype)
        update = lr * (m / c1) / (np.sqrt(v / c2) + eps)
        t.data = (t.data - update).astype(t.dtype, copy=False)
    return params


def lr_schedule(step: int, total_steps: int, base_lr: float) -> float:
    """Base rate for the first half of training, half of it afterwards."""
    return base_lr if step < total_steps // 2 else base_lr * 0.5


# ---------------------------------------------------------------------------
# checkpoints

_MAGIC = b"PDCKPT1\n"


def save_checkpoint(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Manifest (JSON) followed by raw little-endian float32 buffers in manifest order."""
    entries = []
    buffers = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f4")
        entries.append({"name": name, "shape": list(a.shape)})
        buffers.append(a.tobytes())
    manifest = {"meta": meta or {}, "tensors": entries}
    blob = json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for b in buffers:
            fh.write(b)
    tmp.replace(path)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataIOError(f"cannot read checkpoint {path}: {exc}") from exc
    if not raw.startswith(_MAGIC):
        raise DataIOError(f"{path}: not a checkpoint file")
    off = len(_MAGIC)
    (n,) = struct.unpack_from("<Q", raw, off)
    off += 8
    try:
        manifest = json.loads(raw[off : off + n])
    except ValueError as exc:
        raise DataIOError(f"{path}: corrupt manifest") from exc
    off += n
    arrays = {}
    for e in manifest["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        nbytes = 4 * count
        if off + nbytes > len(raw):
            raise DataIOError(f"{path}: truncated buffer for {e['name']}")
        arrays[e["name"]] = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(e["shape"]).astype(np.float32)
        off += nbytes
    if off != len(raw):
        raise DataIOError(f"{path}: {len(raw) - off} trailing bytes")
    return arrays, manifest["meta"]


def params_to_arrays(params: NetworkParams, prefix: str = "", with_optimizer: bool = True) -> dict[str, np.ndarray]:
    out = {f"{prefix}{k}": t.data for k, t in params.tensors.items()}
    if with_optimizer:
        for k in params.tensors:
            if k in params.m:
                out[f"{prefix}adam_m/{k}"] = params.m[k]
                out[f"{prefix}adam_v/{k}"] = params.v[k]
    return out


def params_from_arrays(arrays: dict[str, np.ndarray], prefix: str = "", step: int = 0) -> NetworkParams:
    tensors, m, v = {}, {}, {}
    for key, arr in arrays.items():
        if not key.startswith(prefix):
            continue
        k = key[len(prefix):]
        if k.startswith("adam_m/"):
            m[k[7:]] = arr.copy()
        elif k.startswith("adam_v/"):
            v[k[7:]] = arr.copy()
        else:
            tensors[k] = Tensor(arr.copy(), requires_grad=True, name=k)
    if not tensors:
        raise DataIOError(f"no parameters with prefix {prefix!r} in checkpoint")
    return NetworkParams(tensors, m, v, step)


def config_to_dict(cfg) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
