"""Finite-difference gradient suite over the differentiable building blocks."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import FDReport, Tensor
from .data import TextureSpec, gen_textured_scene
from .losses import (
    confidence_loss,
    disparity_consistency_loss,
    disparity_smoothness_loss,
    patch_matching_loss,
    total_loss,
    view_reconstruction_loss,
    zncc,
)
from .networks import DepthNetConfig, depthnet_forward, init_weights
from .stereo import sample_patches

TOLERANCE = 1e-4


@dataclass
class CheckResult:
    name: str
    report: FDReport

    @property
    def passed(self) -> bool:
        return self.report.max_rel_error < TOLERANCE and self.report.n_checked > 0


def _t(a) -> Tensor:
    return Tensor(np.asarray(a, dtype=np.float64))


def _sq(x: Tensor) -> Tensor:
    return ad.reduce_sum(x * x)


def _merge(reports: list[FDReport]) -> FDReport:
    worst = max(reports, key=lambda r: r.max_rel_error)
    return FDReport(worst.max_rel_error, sum(r.n_checked for r in reports),
                    sum(r.n_excluded for r in reports), worst.worst_index)


def _op_checks(rng, step):
    img = _t(rng.random((1, 3, 6, 12)))
    img2 = _t(rng.random((1, 3, 6, 12)))
    disp = _t(rng.uniform(0.3, 3.7, (1, 1, 6, 12)))
    disp2 = _t(rng.uniform(0.3, 3.7, (1, 1, 6, 12)))
    probe = _t(rng.standard_normal((1, 3, 6, 12)))
    kernel = _t(rng.standard_normal((4, 3, 3, 3)) * 0.3)
    bias = _t(rng.standard_normal(4))
    up_k = _t(rng.standard_normal((2, 3, 3, 3)) * 0.3)
    pl = _t(rng.random((1, 49, 4, 4)))
    pr = _t(rng.random((1, 49, 4, 4)))
    tgt = _t(rng.random((1, 1, 6, 12)))
    pred = _t(rng.random((1, 1, 6, 12)))

    def sampled(src, xc):
        return ad.reduce_sum(ad.horizontal_bilinear_sample(src, xc) * probe)

    xc = _t(np.arange(12.0) - rng.uniform(0.2, 2.8, (1, 1, 6, 12)))
    checks: list[tuple[str, Callable, Tensor]] = [
        ("sampler/source", lambda v: sampled(v, xc), img),
        ("sampler/coords", lambda v: sampled(img, v), xc),
        ("conv2d/input", lambda v: _sq(ad.conv2d(v, kernel, bias, 1, 1)), img),
        ("conv2d/kernel", lambda v: _sq(ad.conv2d(img, v, bias, 2, 1)), kernel),
        ("conv2d/bias", lambda v: _sq(ad.conv2d(img, kernel, v, 1, 1)), bias),
        ("upsample2x_conv/input", lambda v: _sq(ad.upsample2x_conv(v, up_k, None)), img),
        ("upsample2x_conv/kernel", lambda v: _sq(ad.upsample2x_conv(img, v, None)), up_k),
        ("zncc", lambda v: ad.reduce_sum(zncc(v, pr)), pl),
        ("patch_matching/disparity",
         lambda v: patch_matching_loss(img, img2, v, disp2, 5)[0], disp),
        ("patch_matching/image",
         lambda v: patch_matching_loss(v, img2, disp, disp2, 5)[0], img),
        ("patch_sampling/disparity",
         lambda v: _sq(sample_patches(img, v, 3).patches), disp),
        ("view_reconstruction", lambda v: view_reconstruction_loss(img2, v), img),
        ("smoothness", lambda v: disparity_smoothness_loss(v, img.data), disp),
        ("consistency/left", lambda v: disparity_consistency_loss(v, disp2), disp),
        ("consistency/right", lambda v: disparity_consistency_loss(disp, v), disp2),
        ("confidence_loss", lambda v: confidence_loss(tgt, v), pred),
    ]
    return [CheckResult(name, ad.fd_report(f, x, step)) for name, f, x in checks]


def total_loss_check(step: float = 1e-5, seed: int = 0, height: int = 16, width: int = 32) -> CheckResult:
    """Every parameter of a 3-stage DepthNet through the full multi-scale loss."""
    scene = gen_textured_scene(width, height, TextureSpec(), "two-plane:2,4", seed=seed)
    left = scene.left.astype(np.float64)
    right = scene.right.astype(np.float64)
    cfg = DepthNetConfig.toy(encoder_depth=3, base_channels=1)
    params = init_weights(cfg, seed=seed, dtype=np.float64)
    reports = []
    for name in params.names():
        def f(v, name=name):
            saved = params.tensors[name]
            params.tensors[name] = v
            try:
                return total_loss(left, right, depthnet_forward(left, params, cfg)).l_total
            finally:
                params.tensors[name] = saved

        reports.append(ad.fd_report(f, Tensor(params[name].data.copy()), step))
    return CheckResult("total_loss/all_parameters", _merge(reports))


def gradient_suite(seed: int = 0, step: float = 1e-5, include_network: bool = True) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = _op_checks(rng, step)
    if include_network:
        results.append(total_loss_check(step, seed))
    return results
