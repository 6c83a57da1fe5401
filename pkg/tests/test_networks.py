import numpy as np
import pytest

from patchdepth import autodiff as ad
from patchdepth.autodiff import Tensor
from patchdepth.data import gen_random_dot_stereogram, stack_batch
from patchdepth.errors import ConfigError, DataIOError
from patchdepth.losses import total_loss
from patchdepth.networks import (
    ConfidenceNetConfig,
    DepthNetConfig,
    NetworkParams,
    adam_step,
    confidencenet_forward,
    depthnet_forward,
    init_weights,
    load_checkpoint,
    lr_schedule,
    params_from_arrays,
    params_to_arrays,
    save_checkpoint,
)


def toy_image(h=32, w=64, seed=0):
    return np.random.default_rng(seed).random((1, 3, h, w)).astype(np.float32)


# ---------------------------------------------------------------- DepthNet

def test_toy_pyramid_shapes_and_bounds():
    cfg = DepthNetConfig.toy()
    params = init_weights(cfg, seed=0)
    pyr = depthnet_forward(toy_image(), params, cfg)
    assert len(pyr) == 4
    for s, dl, dr in zip((8, 4, 2, 1), pyr.left, pyr.right):
        assert dl.shape == (1, 1, 32 // s, 64 // s) and dr.shape == dl.shape
        d_max = 0.3 * 64 / s
        for d in (dl, dr):
            assert d.data.min() > 0 and d.data.max() < d_max


def test_outputs_bounded_for_extreme_parameters():
    cfg = DepthNetConfig.toy(encoder_depth=3, base_channels=4)
    params = init_weights(cfg, seed=1)
    for t in params:
        t.data = t.data * 50.0
    pyr = depthnet_forward(toy_image(16, 32) * 10, params, cfg)
    for s, d in zip((8, 4, 2, 1), pyr.left + pyr.right[:0]):
        assert np.all(d.data >= 0) and np.all(d.data <= 0.3 * 32 / s)


def test_paper_preset_bookkeeping():
    cfg = DepthNetConfig.paper()
    assert cfg.encoder_depth == 7 and cfg.channels[-1] == 512 and cfg.skip_connections == 6
    assert cfg.divisor == 128
    # spatial bookkeeping without running the 512x256 forward pass
    assert (512 // cfg.divisor, 256 // cfg.divisor) == (4, 2)


@pytest.mark.slow
def test_paper_preset_forward_shapes():
    cfg = DepthNetConfig.paper(channels=(4, 4, 4, 4, 4, 4, 4), decoder_final_channels=2)
    params = init_weights(cfg, seed=0)
    pyr = depthnet_forward(toy_image(256, 512), params, cfg)
    assert [d.shape[2:] for d in pyr.left] == [(32, 64), (64, 128), (128, 256), (256, 512)]


def test_non_divisible_input_rejected():
    cfg = DepthNetConfig.toy()
    params = init_weights(cfg, seed=0)
    with pytest.raises(ConfigError, match="resize"):
        depthnet_forward(toy_image(30, 64), params, cfg)


def test_config_validation():
    with pytest.raises(ConfigError):
        DepthNetConfig(output_scales=3)
    with pytest.raises(ConfigError):
        DepthNetConfig(encoder_depth=2)
    with pytest.raises(ConfigError):
        DepthNetConfig(skip_connections=9)
    with pytest.raises(ConfigError):
        DepthNetConfig(disp_init=1.0)


def test_toy_forward_backward_all_grads_finite():
    cfg = DepthNetConfig.toy()
    params = init_weights(cfg, seed=0)
    s = gen_random_dot_stereogram(64, 32, seed=0)
    with ad.Tape() as tape:
        out = total_loss(s.left, s.right, depthnet_forward(s.left, params, cfg))
    tape.backward(out.l_total)
    for name, t in params.tensors.items():
        assert t.grad is not None and t.grad.shape == t.shape, name
        assert np.isfinite(t.grad).all(), name
    assert sum(np.abs(t.grad).sum() > 0 for t in params) == len(params)


def test_forward_deterministic():
    cfg = DepthNetConfig.toy()
    params = init_weights(cfg, seed=3)
    a = depthnet_forward(toy_image(), params, cfg).left[-1].data
    b = depthnet_forward(toy_image(), params, cfg).left[-1].data
    assert a.tobytes() == b.tobytes()


def test_initial_disparity_level():
    cfg = DepthNetConfig.toy(disp_init=0.25)
    params = init_weights(cfg, seed=0)
    d = depthnet_forward(toy_image(), params, cfg).left[-1].data
    assert abs(d.mean() - 0.25 * 0.3 * 64) < 1.0


# ---------------------------------------------------------------- ConfidenceNet

def test_confidencenet_shape_and_range():
    cfg = ConfidenceNetConfig.toy()
    params = init_weights(cfg, seed=0)
    out = confidencenet_forward(toy_image(), params, cfg)
    assert out.shape == (1, 1, 32, 64)
    assert out.data.min() > 0 and out.data.max() < 1
    with pytest.raises(ConfigError):
        confidencenet_forward(toy_image(20, 64), params, cfg)


def test_confidencenet_is_smaller_than_paper_depthnet():
    from patchdepth.networks import _confnet_layers, _depthnet_layers

    def count(layers):
        return sum(int(np.prod(s)) + s[0] for _, s in layers)

    assert count(_confnet_layers(ConfidenceNetConfig.paper())) < count(_depthnet_layers(DepthNetConfig.paper()))
    # no skip concatenations: every decoder conv takes the previous stage's width only
    for name, shape in _confnet_layers(ConfidenceNetConfig.paper()):
        if name.startswith("iconv"):
            assert shape[0] == shape[1]


# ---------------------------------------------------------------- init

def test_init_deterministic_and_zero_bias():
    cfg = DepthNetConfig.toy()
    a, b = init_weights(cfg, seed=7), init_weights(cfg, seed=7)
    for k in a.names():
        assert a[k].data.tobytes() == b[k].data.tobytes()
        if k.endswith(".b"):
            assert not np.any(a[k].data)
    c = init_weights(cfg, seed=8)
    assert a["enc0a.w"].data.tobytes() != c["enc0a.w"].data.tobytes()


def test_he_variance():
    cfg = DepthNetConfig.toy(base_channels=64, max_channels=64)
    params = init_weights(cfg, seed=0, dtype=np.float64)
    w = params["enc1b.w"].data
    assert w.size >= 10_000
    fan_in = w.shape[1] * w.shape[2] * w.shape[3]
    assert abs(w.var() / (2.0 / fan_in) - 1) < 0.2


# ---------------------------------------------------------------- Adam

def _single(values, grad):
    t = Tensor(np.asarray(values, dtype=np.float64), requires_grad=True)
    t.grad = np.asarray(grad, dtype=np.float64)
    return NetworkParams({"p": t})


def test_adam_zero_gradient_is_fixed_point():
    p = _single([1.0, -2.0], [0.0, 0.0])
    adam_step(p, 1e-3)
    np.testing.assert_array_equal(p["p"].data, [1.0, -2.0])
    np.testing.assert_array_equal(p.m["p"], 0.0)
    np.testing.assert_array_equal(p.v["p"], 0.0)


def test_adam_first_step_is_signed_lr():
    g = np.array([0.3, -5.0, 1e-2])
    p = _single([0.0, 0.0, 0.0], g)
    adam_step(p, 1e-4)
    np.testing.assert_allclose(p["p"].data, -1e-4 * np.sign(g), rtol=1e-3)


def test_adam_matches_reference_loop():
    rng = np.random.default_rng(0)
    x0 = rng.standard_normal(5)
    grads = rng.standard_normal((4, 5))
    p = _single(x0.copy(), grads[0])
    m = v = np.zeros(5)
    x = x0.copy()
    for k, g in enumerate(grads, start=1):
        p["p"].grad = g
        adam_step(p, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        x = x - 0.01 * (m / (1 - 0.9**k)) / (np.sqrt(v / (1 - 0.999**k)) + 1e-8)
    np.testing.assert_allclose(p["p"].data, x, rtol=1e-12)
    assert p.step == 4


def test_adam_missing_grad():
    t = Tensor(np.zeros(2), requires_grad=True)
    with pytest.raises(ConfigError):
        adam_step(NetworkParams({"p": t}), 1e-3)


def test_lr_schedule_halves_once():
    assert [lr_schedule(s, 10, 1e-4) for s in (0, 4, 5, 9)] == [1e-4, 1e-4, 5e-5, 5e-5]


@pytest.mark.parametrize("seed", range(10))
def test_small_step_decreases_total_loss(seed):
    cfg = DepthNetConfig.toy(encoder_depth=3, base_channels=4)
    params = init_weights(cfg, seed=seed, dtype=np.float64)
    samples = [gen_random_dot_stereogram(32, 16, "two-plane:2,4", seed=seed * 10 + i) for i in range(2)]
    left, right = (a.astype(np.float64) for a in stack_batch(samples))

    def loss():
        return float(total_loss(left, right, depthnet_forward(left, params, cfg)).l_total.data)

    params.zero_grad()
    with ad.Tape() as tape:
        out = total_loss(left, right, depthnet_forward(left, params, cfg))
    tape.backward(out.l_total)
    before = float(out.l_total.data)
    adam_step(params, 1e-6)
    assert loss() < before


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_round_trip_is_byte_exact(tmp_path):
    cfg = DepthNetConfig.toy()
    params = init_weights(cfg, seed=0)
    for t in params:
        t.grad = np.ones_like(t.data)
    adam_step(params, 1e-3)
    arrays = params_to_arrays(params, "depth/")
    save_checkpoint(tmp_path / "a.ckpt", arrays, {"step": 1})
    back, meta = load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"step": 1}
    assert list(back) == list(arrays)
    for k in arrays:
        assert back[k].tobytes() == np.ascontiguousarray(arrays[k], dtype="<f4").tobytes()
    restored = params_from_arrays(back, "depth/", step=1)
    save_checkpoint(tmp_path / "b.ckpt", params_to_arrays(restored, "depth/"), {"step": 1})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    assert restored.m.keys() == params.m.keys()


def test_checkpoint_corruption(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", {"w": np.ones((2, 2), np.float32)})
    raw = (tmp_path / "a.ckpt").read_bytes()
    (tmp_path / "trunc.ckpt").write_bytes(raw[:-3])
    (tmp_path / "magic.ckpt").write_bytes(b"XX" + raw[2:])
    for name in ("trunc.ckpt", "magic.ckpt", "missing.ckpt"):
        with pytest.raises(DataIOError):
            load_checkpoint(tmp_path / name)
