"""Joint DepthNet / ConfidenceNet training and model evaluation helpers."""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .data import (
    AugmentConfig,
    DisparitySpec,
    StereoSample,
    augment,
    gen_random_dot_stereogram,
    load_stereo_pair,
    stack_batch,
)
from .errors import ConfigError, NumericalError
from .evaluation import d1_all, disparity_mae
from .fileio import read_manifest
from .losses import LossWeights, confidence_loss, confidence_target, total_loss
from .networks import (
    ConfidenceNetConfig,
    DepthNetConfig,
    NetworkParams,
    adam_step,
    confidencenet_forward,
    config_to_dict,
    depthnet_forward,
    init_weights,
    lr_schedule,
    params_from_arrays,
    params_to_arrays,
    load_checkpoint,
    save_checkpoint,
)

LOG_COLUMNS = ("step", "lr", "l_pm", "l_vr", "l_ds", "l_dc", "l_total", "l_conf")


@dataclass
class TrainConfig:
    preset: str = "toy"
    width: int = 64
    height: int = 32
    batch_size: int = 4
    steps: int = 2000
    lr: float = 1e-3
    conf_lr: float = 3e-3
    weights: LossWeights = field(default_factory=LossWeights)
    patch_sizes: tuple[int, ...] = (5, 5, 7, 9)
    loss_mode: str = "mean"
    seed: int = 0
    scene: str = "two-plane:3,8"
    density: float = 0.5
    dot_size: int = 1
    manifest: str | None = None
    augment: AugmentConfig = field(default_factory=lambda: AugmentConfig(flip_probability=0.0))
    conf_warmup: int = 0
    checkpoint_every: int = 500
    depth_cfg: DepthNetConfig | None = None
    conf_cfg: ConfidenceNetConfig | None = None

    def __post_init__(self):
        if self.preset not in ("toy", "paper"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        if self.depth_cfg is None:
            self.depth_cfg = DepthNetConfig.toy() if self.preset == "toy" else DepthNetConfig.paper()
        if self.conf_cfg is None:
            self.conf_cfg = ConfidenceNetConfig.toy() if self.preset == "toy" else ConfidenceNetConfig.paper()
        self.patch_sizes = tuple(self.patch_sizes)
        for div, what in ((self.depth_cfg.divisor, "DepthNet"), (self.conf_cfg.divisor, "ConfidenceNet")):
            if self.width % div or self.height % div:
                raise ConfigError(f"image size {self.width}x{self.height} must be divisible by {div} for {what}")
        if self.batch_size < 1 or self.steps < 1:
            raise ConfigError("batch_size and steps must be positive")

    @classmethod
    def paper(cls, **kw) -> "TrainConfig":
        base = dict(preset="paper", width=512, height=256, batch_size=4, lr=1e-4, conf_lr=1e-4,
                    augment=AugmentConfig())
        base.update(kw)
        return cls(**base)

    def as_dict(self) -> dict:
        out = {}
        for k in ("preset", "width", "height", "batch_size", "steps", "lr", "conf_lr", "loss_mode",
                  "seed", "scene", "density", "dot_size", "manifest", "conf_warmup", "checkpoint_every"):
            out[k] = getattr(self, k)
        out["patch_sizes"] = ",".join(map(str, self.patch_sizes))
        w = self.weights
        out["weights"] = f"{w.w_p},{w.w_v},{w.w_d},{w.w_c}"
        a = self.augment
        out["augment"] = f"flip={a.flip_probability};gamma={a.gamma};brightness={a.brightness};color={a.color}"
        out["depth_cfg"] = config_to_dict(self.depth_cfg)
        out["conf_cfg"] = config_to_dict(self.conf_cfg)
        return out


class DataSource:
    """Deterministic batch stream: synthetic scenes seeded by index, or a
    manifest of pairs drawn with a seeded generator."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.pairs: list[StereoSample] | None = None
        if cfg.manifest:
            rows = read_manifest(cfg.manifest)
            self.pairs = [load_stereo_pair(l, r, (cfg.width, cfg.height)) for l, r, _ in rows]
        else:
            self.spec = DisparitySpec.parse(cfg.scene)

    def sample(self, index: int) -> StereoSample:
        cfg = self.cfg
        if self.pairs is not None:
            rng = np.random.default_rng((cfg.seed, index))
            s = self.pairs[int(rng.integers(len(self.pairs)))]
        else:
            s = gen_random_dot_stereogram(cfg.width, cfg.height, self.spec, cfg.density,
                                          seed=_mix(cfg.seed, index), dot_size=cfg.dot_size)
        return augment(s, cfg.augment, seed=_mix(cfg.seed + 7919, index))

    def batch(self, step: int) -> tuple[np.ndarray, np.ndarray]:
        n = self.cfg.batch_size
        return stack_batch([self.sample(step * n + i) for i in range(n)])


def _mix(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass
class TrainResult:
    depth_params: NetworkParams
    conf_params: NetworkParams
    log: list[dict]
    config: TrainConfig
    seconds: float = 0.0


def depth_step(params: NetworkParams, cfg: TrainConfig, left, right, lr: float):
    params.zero_grad()
    with ad.Tape() as tape:
        pyramid = depthnet_forward(left, params, cfg.depth_cfg)
        losses = total_loss(left, right, pyramid, cfg.weights, cfg.patch_sizes, cfg.loss_mode)
    tape.backward(losses.l_total)
    adam_step(params, lr)
    return losses


def confidence_step(params: NetworkParams, cfg: TrainConfig, left, pm_map, lr: float) -> float:
    target = confidence_target(pm_map)
    params.zero_grad()
    with ad.Tape() as tape:
        pred = confidencenet_forward(left, params, cfg.conf_cfg)
        loss = confidence_loss(target, pred, cfg.loss_mode)
    tape.backward(loss)
    adam_step(params, lr)
    return float(loss.data)


def train(
    cfg: TrainConfig,
    out_dir: Path | None = None,
    progress: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Alternate one DepthNet step on ``L_total`` and one ConfidenceNet step on
    the detached patch-matching map; the rate halves after half the steps."""
    source = DataSource(cfg)
    depth = init_weights(cfg.depth_cfg, seed=cfg.seed)
    conf = init_weights(cfg.conf_cfg, seed=cfg.seed + 1)
    log: list[dict] = []
    log_fh = writer = None
    if out_dir is not None:
        (out_dir / "checkpoints").mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.csv", "w", newline="")
        writer = csv.writer(log_fh)
        writer.writerow(LOG_COLUMNS)
    t0 = time.perf_counter()
    try:
        for step in range(cfg.steps):
            left, right = source.batch(step)
            lr = lr_schedule(step, cfg.steps, cfg.lr)
            losses = depth_step(depth, cfg, left, right, lr)
            row = {"step": step, "lr": lr, **losses.as_dict()}
            if not all(math.isfinite(v) for v in row.values()):
                raise NumericalError(f"non-finite loss at step {step}")
            if step >= cfg.conf_warmup:
                row["l_conf"] = confidence_step(conf, cfg, left, losses.pm_map,
                                                lr_schedule(step, cfg.steps, cfg.conf_lr))
                if not math.isfinite(row["l_conf"]):
                    raise NumericalError(f"non-finite confidence loss at step {step}")
            else:
                row["l_conf"] = float("nan")
            log.append(row)
            if writer is not None:
                writer.writerow([repr(row[c]) if isinstance(row[c], float) else row[c] for c in LOG_COLUMNS])
            if progress is not None:
                progress(row)
            if out_dir is not None and (step + 1) % cfg.checkpoint_every == 0:
                write_checkpoint(out_dir / "checkpoints" / f"step_{step + 1:06d}.ckpt", depth, conf, cfg, step + 1)
    finally:
        if log_fh is not None:
            log_fh.close()
    if out_dir is not None:
        write_checkpoint(out_dir / "final.ckpt", depth, conf, cfg, cfg.steps)
    return TrainResult(depth, conf, log, cfg, time.perf_counter() - t0)


def write_checkpoint(path, depth: NetworkParams, conf: NetworkParams, cfg: TrainConfig, step: int) -> None:
    arrays = {**params_to_arrays(depth, "depth/"), **params_to_arrays(conf, "conf/")}
    meta = {
        "step": step,
        "depth_cfg": config_to_dict(cfg.depth_cfg),
        "conf_cfg": config_to_dict(cfg.conf_cfg),
        "width": cfg.width,
        "height": cfg.height,
        "depth_adam_step": depth.step,
        "conf_adam_step": conf.step,
    }
    save_checkpoint(path, arrays, meta)


def read_model(path):
    """Checkpoint -> (depth params, depth cfg, conf params, conf cfg, meta)."""
    arrays, meta = load_checkpoint(path)
    dcfg = DepthNetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in meta["depth_cfg"].items()})
    ccfg = ConfidenceNetConfig(**meta["conf_cfg"])
    depth = params_from_arrays(arrays, "depth/", meta.get("depth_adam_step", 0))
    conf = params_from_arrays(arrays, "conf/", meta.get("conf_adam_step", 0))
    return depth, dcfg, conf, ccfg, meta


def predict_disparity(params: NetworkParams, cfg: DepthNetConfig, left: np.ndarray) -> np.ndarray:
    """Full-resolution left disparity ``[N, H, W]``."""
    pyramid = depthnet_forward(left, params, cfg)
    return pyramid.left[-1].data[:, 0].astype(np.float64)


def predict_confidence(params: NetworkParams, cfg: ConfidenceNetConfig, left: np.ndarray) -> np.ndarray:
    return confidencenet_forward(left, params, cfg).data[:, 0].astype(np.float64)


def held_out_samples(cfg: TrainConfig, count: int, seed: int = 10_000) -> list[StereoSample]:
    spec = DisparitySpec.parse(cfg.scene)
    return [gen_random_dot_stereogram(cfg.width, cfg.height, spec, cfg.density, seed=_mix(seed, i),
                                      dot_size=cfg.dot_size)
            for i in range(count)]


def evaluate_disparity(params: NetworkParams, cfg: DepthNetConfig, samples: list[StereoSample]) -> dict:
    maes, d1s = [], []
    for s in samples:
        pred = predict_disparity(params, cfg, s.left)[0]
        maes.append(disparity_mae(pred, s.gt_disparity, s.mask))
        d1s.append(d1_all(pred, s.gt_disparity, s.mask))
    return {"mae": float(np.mean(maes)), "d1_all": float(np.mean(d1s))}
