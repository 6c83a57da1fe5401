"""Command-line entry point: ``patchdepth <command> [options]``."""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path
from typing import Any, Callable

import numpy as np

from .errors import ConfigError, DataIOError, NumericalError

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3
OUT_ENV = "PATCHDEPTH_OUT"


class UsageError(Exception):
    pass


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# (key, type, default, help); keys double as config-file keys
COMMON = [
    ("out", str, None, f"output directory (default: ${OUT_ENV}/<command> or runs/<command>)"),
    ("seed", int, 0, "random seed"),
    ("preset", str, "toy", "toy or paper"),
    ("loss_mode", str, "mean", "mean or paper-sum"),
]

OPTIONS: dict[str, list[tuple[str, Callable, Any, str]]] = {
    "train": [
        ("width", int, None, "image width"),
        ("height", int, None, "image height"),
        ("batch_size", int, 4, "batch size"),
        ("steps", int, 2000, "optimisation steps"),
        ("lr", float, None, "DepthNet learning rate"),
        ("conf_lr", float, None, "ConfidenceNet learning rate"),
        ("weights", _floats, (0.5, 1.0, 0.1, 1.0), "loss weights w_p,w_v,w_d,w_c"),
        ("patch_sizes", _ints, (5, 5, 7, 9), "ZNCC window per scale, coarse to fine"),
        ("scene", str, "two-plane:3,8", "synthetic layout, e.g. constant:4, two-plane:3,8, slanted:2,10"),
        ("density", float, 0.5, "random-dot density"),
        ("manifest", str, None, "train on image pairs listed in this manifest instead"),
        ("conf_warmup", int, 0, "DepthNet-only steps before ConfidenceNet training starts"),
        ("checkpoint_every", int, 500, "steps between checkpoints"),
        ("flip", float, None, "flip-augmentation probability"),
        ("disp_init", float, None, "untrained disparity as a fraction of d_max"),
        ("log_every", int, 100, "progress print interval"),
    ],
    "infer": [
        ("checkpoint", str, None, "trained checkpoint"),
        ("resize", _bool, False, "resize inputs to the checkpoint's image size"),
    ],
    "eval": [
        ("manifest", str, None, "manifest with ground truth as third column"),
        ("checkpoint", str, None, "evaluate this checkpoint"),
        ("pred_dir", str, None, "or evaluate <stem>_disparity.pfm files in this directory"),
        ("cap", float, 80.0, "depth cap in metres"),
        ("bins", int, 10, "confidence calibration bins"),
    ],
    "landscape": [
        ("d_true", float, 8.0, "true constant disparity of the generated scene"),
        ("radius", float, 20.0, "sweep half-width in pixels"),
        ("step", float, 0.25, "sweep step in pixels"),
        ("width", int, 96, "scene width"),
        ("height", int, 48, "scene height"),
        ("window", int, 9, "ZNCC window size"),
        ("kind", str, "textured", "textured or rds"),
    ],
    "gen-data": [
        ("count", int, 8, "number of pairs"),
        ("kind", str, "rds", "rds or textured"),
        ("scene", str, "two-plane:3,8", "disparity layout"),
        ("width", int, 64, "image width"),
        ("height", int, 32, "image height"),
        ("density", float, 0.5, "random-dot density"),
        ("dot_size", int, 1, "random-dot size in pixels"),
    ],
    "grad-check": [
        ("step", float, 1e-5, "finite-difference step"),
        ("network", _bool, True, "include the full-network total-loss check"),
    ],
}

POSITIONAL = {"infer": ("inputs", "left images to run on")}
NO_OUT = {"grad-check"}


# ---------------------------------------------------------------------------
# argument and config resolution


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="patchdepth", description="Self-supervised stereo depth with a patch ZNCC loss.")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)
    for cmd, opts in OPTIONS.items():
        sp = sub.add_parser(cmd)
        sp.add_argument("--config", help="key=value settings file; flags override it")
        sp.add_argument("--force", action="store_true", help="allow writing into a non-empty output directory")
        if cmd in POSITIONAL:
            name, helptext = POSITIONAL[cmd]
            sp.add_argument(name, nargs="*", help=helptext)
        for key, typ, _default, helptext in COMMON + opts:
            flag = "--" + key.replace("_", "-")
            if typ is _bool:
                sp.add_argument(flag, dest=key, action=argparse.BooleanOptionalAction, default=None, help=helptext)
            else:
                sp.add_argument(flag, dest=key, type=typ, default=None, help=helptext)
    return p


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"config file not found: {path}")
    out = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip().replace("-", "_")] = v.strip()
    return out


def resolve(args: argparse.Namespace) -> dict[str, Any]:
    """Defaults, then config file, then explicit flags."""
    opts = COMMON + OPTIONS[args.command]
    types = {k: t for k, t, _, _ in opts}
    cfg = {k: d for k, _, d, _ in opts}
    if args.config:
        for k, v in read_config_file(args.config).items():
            if k not in types:
                raise ConfigError(f"unknown setting {k!r} in {args.config}")
            try:
                cfg[k] = types[k](v) if v != "" else None
            except ValueError as exc:
                raise ConfigError(f"bad value for {k}: {exc}") from exc
    for k in types:
        v = getattr(args, k, None)
        if v is not None:
            cfg[k] = v
    if args.command in POSITIONAL:
        cfg[POSITIONAL[args.command][0]] = getattr(args, POSITIONAL[args.command][0])
    cfg["force"] = args.force
    if cfg["preset"] not in ("toy", "paper"):
        raise ConfigError(f"preset must be toy or paper, got {cfg['preset']!r}")
    if cfg["loss_mode"] not in ("mean", "paper-sum"):
        raise ConfigError(f"loss-mode must be mean or paper-sum, got {cfg['loss_mode']!r}")
    return cfg


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(_fmt(x) for x in v)
    return "" if v is None else str(v)


def write_config_echo(out_dir: Path, command: str, cfg: dict) -> None:
    keys = [k for k, *_ in COMMON + OPTIONS[command]]
    lines = [f"# resolved settings for: patchdepth {command}"]
    lines += [f"{k}={_fmt(cfg[k])}" for k in keys if k != "out"]
    if command in POSITIONAL:
        lines.append(f"# {POSITIONAL[command][0]}: {' '.join(cfg[POSITIONAL[command][0]])}")
    (out_dir / "config.txt").write_text("\n".join(lines) + "\n")


def prepare_out_dir(cfg: dict, command: str) -> Path:
    out = cfg.get("out")
    if not out:
        out = Path(os.environ.get(OUT_ENV, "runs")) / command
    out = Path(out)
    if out.exists():
        if not out.is_dir():
            raise DataIOError(f"output path {out} exists and is not a directory")
        if any(out.iterdir()) and not cfg["force"]:
            raise UsageError(f"output directory {out} is not empty; pass --force to reuse it")
    out.mkdir(parents=True, exist_ok=True)
    cfg["out"] = str(out)
    write_config_echo(out, command, cfg)
    return out


# ---------------------------------------------------------------------------
# colour maps (display only)

# viridis anchor colours, dark to bright
_RAMP = np.array([
    [68, 1, 84], [72, 40, 120], [62, 74, 137], [49, 104, 142], [38, 130, 142],
    [31, 158, 137], [53, 183, 121], [109, 205, 89], [180, 222, 44], [253, 231, 37],
], dtype=np.float64)


def colorize_confidence(conf: np.ndarray) -> np.ndarray:
    """0 -> pure red, 1 -> pure yellow."""
    c = np.clip(np.nan_to_num(conf), 0.0, 1.0)
    rgb = np.zeros(c.shape + (3,), dtype=np.uint8)
    rgb[..., 0] = 255
    rgb[..., 1] = np.round(255.0 * c).astype(np.uint8)
    return rgb


def colorize_depth(depth: np.ndarray) -> np.ndarray:
    """Perceptual ramp over inverse depth: near is bright."""
    inv = 1.0 / np.clip(np.nan_to_num(depth, nan=np.inf), 1e-6, None)
    lo, hi = float(inv.min()), float(inv.max())
    t = (inv - lo) / (hi - lo) if hi > lo else np.zeros_like(inv)
    pos = t * (len(_RAMP) - 1)
    i0 = np.minimum(np.floor(pos).astype(int), len(_RAMP) - 2)
    a = (pos - i0)[..., None]
    return np.round((1 - a) * _RAMP[i0] + a * _RAMP[i0 + 1]).astype(np.uint8)


# ---------------------------------------------------------------------------
# commands


def _train_config(cfg: dict):
    from .data import AugmentConfig
    from .losses import LossWeights
    from .networks import DepthNetConfig
    from .training import TrainConfig

    kw: dict[str, Any] = dict(
        batch_size=cfg["batch_size"], steps=cfg["steps"], seed=cfg["seed"], scene=cfg["scene"],
        density=cfg["density"], manifest=cfg["manifest"], conf_warmup=cfg["conf_warmup"],
        checkpoint_every=cfg["checkpoint_every"], loss_mode=cfg["loss_mode"],
        patch_sizes=tuple(cfg["patch_sizes"]),
    )
    if len(cfg["weights"]) != 4:
        raise ConfigError("weights needs four values w_p,w_v,w_d,w_c")
    kw["weights"] = LossWeights(*cfg["weights"])
    for k in ("width", "height", "lr", "conf_lr"):
        if cfg[k] is not None:
            kw[k] = cfg[k]
    if cfg["disp_init"] is not None:
        base = DepthNetConfig.toy if cfg["preset"] == "toy" else DepthNetConfig.paper
        kw["depth_cfg"] = base(disp_init=cfg["disp_init"])
    if cfg["preset"] == "paper":
        tc = TrainConfig.paper(**kw)
    else:
        tc = TrainConfig(**kw)
    if cfg["flip"] is not None:
        a = tc.augment
        tc.augment = AugmentConfig(cfg["flip"], a.gamma, a.brightness, a.color)
    return tc


def cmd_train(cfg: dict) -> int:
    from .training import DataSource, evaluate_disparity, held_out_samples, train

    tc = _train_config(cfg)
    if tc.manifest:
        DataSource(tc)  # read every listed pair up front so bad paths fail before any work
    cfg.update(width=tc.width, height=tc.height, lr=tc.lr, conf_lr=tc.conf_lr,
               flip=tc.augment.flip_probability, disp_init=tc.depth_cfg.disp_init)
    out = prepare_out_dir(cfg, "train")
    every = max(int(cfg["log_every"]), 1)

    def progress(row):
        if row["step"] % every == 0 or row["step"] == tc.steps - 1:
            print(f"step {row['step']:6d}  lr {row['lr']:.2e}  total {row['l_total']:.4f}  "
                  f"pm {row['l_pm']:.4f}  vr {row['l_vr']:.4f}  ds {row['l_ds']:.4f}  "
                  f"dc {row['l_dc']:.4f}  conf {row['l_conf']:.4f}", flush=True)

    result = train(tc, out, progress)
    print(f"trained {tc.steps} steps in {result.seconds:.1f}s; checkpoint {out / 'final.ckpt'}")
    if not tc.manifest:
        ev = evaluate_disparity(result.depth_params, tc.depth_cfg, held_out_samples(tc, 16))
        (out / "validation.txt").write_text(f"mae={ev['mae']!r}\nd1_all={ev['d1_all']!r}\n")
        print(f"held-out disparity MAE {ev['mae']:.3f} px, d1_all {100 * ev['d1_all']:.2f}%")
    return EXIT_OK


def _load_left(path, width: int, height: int, resize: bool) -> np.ndarray:
    from .fileio import read_image, resize_bilinear

    img = read_image(path)
    h, w = img.shape[:2]
    if (w, h) != (width, height):
        if not resize:
            raise ConfigError(f"{path} is {w}x{h} but the model expects {width}x{height}; pass --resize")
        img = resize_bilinear(img, width, height)
    return np.ascontiguousarray(img.transpose(2, 0, 1)[None], dtype=np.float32)


def cmd_infer(cfg: dict) -> int:
    from .data import default_rig
    from .fileio import write_image, write_pfm
    from .stereo import disparity_to_depth
    from .training import predict_confidence, predict_disparity, read_model

    if not cfg["checkpoint"]:
        raise UsageError("infer needs --checkpoint")
    if not cfg["inputs"]:
        raise UsageError("infer needs at least one input image")
    for p in cfg["inputs"]:
        if not Path(p).is_file():
            raise DataIOError(f"input image not found: {p}")
    depth_p, dcfg, conf_p, ccfg, meta = read_model(cfg["checkpoint"])
    width, height = int(meta["width"]), int(meta["height"])
    out = prepare_out_dir(cfg, "infer")
    rig = default_rig(width)
    for p in cfg["inputs"]:
        left = _load_left(p, width, height, cfg["resize"])
        disp = predict_disparity(depth_p, dcfg, left)[0].astype(np.float32)
        conf = predict_confidence(conf_p, ccfg, left)[0].astype(np.float32)
        depth, _ = disparity_to_depth(disp.astype(np.float64), rig)
        stem = Path(p).stem
        write_pfm(out / f"{stem}_disparity.pfm", disp)
        write_pfm(out / f"{stem}_depth.pfm", depth.astype(np.float32))
        write_pfm(out / f"{stem}_confidence.pfm", conf)
        write_image(out / f"{stem}_depth.png", colorize_depth(depth))
        write_image(out / f"{stem}_confidence.png", colorize_confidence(conf))
        print(f"{p}: disparity range {disp.min():.2f}..{disp.max():.2f} px -> {out}/{stem}_*")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    from .data import default_rig, load_gt_for_sample, load_stereo_pair
    from .evaluation import aggregate, confidence_calibration, d1_all, depth_metrics, write_metrics_csv
    from .fileio import read_manifest, read_pfm, warn
    from .stereo import disparity_to_depth
    from .training import predict_confidence, predict_disparity, read_model

    if not cfg["manifest"]:
        raise UsageError("eval needs --manifest")
    if bool(cfg["checkpoint"]) == bool(cfg["pred_dir"]):
        raise UsageError("eval needs exactly one of --checkpoint or --pred-dir")
    rows = read_manifest(cfg["manifest"])
    model = read_model(cfg["checkpoint"]) if cfg["checkpoint"] else None
    if cfg["pred_dir"] and not Path(cfg["pred_dir"]).is_dir():
        raise DataIOError(f"prediction directory not found: {cfg['pred_dir']}")
    out = prepare_out_dir(cfg, "eval")

    results, confs, preds, gts, masks = [], [], [], [], []
    for left_path, right_path, gt_path in rows:
        name = Path(left_path).stem
        if gt_path is None or not Path(gt_path).is_file():
            warn(f"{name}: no ground truth, skipped")
            continue
        conf = None
        if model is not None:
            depth_p, dcfg, conf_p, ccfg, meta = model
            w, h = int(meta["width"]), int(meta["height"])
            sample = load_stereo_pair(left_path, right_path, (w, h))
            disp = predict_disparity(depth_p, dcfg, sample.left)[0]
            conf = predict_confidence(conf_p, ccfg, sample.left)[0]
        else:
            pred_file = Path(cfg["pred_dir"]) / f"{name}_disparity.pfm"
            if not pred_file.is_file():
                warn(f"{name}: no prediction {pred_file}, skipped")
                continue
            disp = read_pfm(pred_file).astype(np.float64)
            conf_file = Path(cfg["pred_dir"]) / f"{name}_confidence.pfm"
            if conf_file.is_file():
                conf = read_pfm(conf_file).astype(np.float64)
        h, w = disp.shape
        gt, mask = load_gt_for_sample(gt_path, w, height=h)
        if gt.shape != disp.shape:
            raise ConfigError(f"{name}: prediction {disp.shape} and ground truth {gt.shape} differ")
        rig = default_rig(w)
        pred_depth, _ = disparity_to_depth(disp, rig)
        gt = gt.astype(np.float64)
        mask = mask & (gt > 0)
        gt_depth = np.where(mask, disparity_to_depth(np.where(mask, gt, 1.0), rig)[0], 0.0)
        d1 = d1_all(disp, gt, mask)
        results.append((name, depth_metrics(pred_depth, gt_depth, mask, cap=cfg["cap"], d1=d1)))
        if conf is not None:
            confs.append(conf.ravel())
            preds.append(pred_depth.ravel())
            gts.append(gt_depth.ravel())
            masks.append(mask.ravel())
    if not results:
        raise DataIOError("no image had both a prediction and ground truth")
    total = aggregate([m for _, m in results])
    write_metrics_csv(out / "metrics.csv", results, total)
    print("aggregate: " + "  ".join(f"{k} {getattr(total, k):.4f}" for k in
                                    ("abs_rel", "sq_rel", "rmse", "rmse_log", "d1_all", "delta1", "delta2", "delta3")))
    if confs:
        gt_all = np.concatenate(gts)
        keep = np.concatenate(masks) & (gt_all > 0) & (gt_all <= cfg["cap"])
        rep = confidence_calibration(np.concatenate(confs), np.clip(np.concatenate(preds), 1e-3, cfg["cap"]),
                                     gt_all, keep, cfg["bins"])
        lines = ["bin,mean_confidence,mean_abs_rel"]
        lines += [f"{i},{c!r},{e!r}" for i, (c, e) in enumerate(zip(rep.bin_confidence, rep.bin_abs_rel))]
        (out / "calibration.csv").write_text("\n".join(lines) + "\n")
        (out / "calibration.txt").write_text(f"spearman={rep.spearman!r}\nn_valid={rep.n_valid}\n")
        print(f"confidence calibration: spearman {rep.spearman:.3f}; "
              f"abs_rel lowest bin {rep.bin_abs_rel[0]:.4f}, highest bin {rep.bin_abs_rel[-1]:.4f}")
    return EXIT_OK


def cmd_landscape(cfg: dict) -> int:
    from .data import DisparitySpec, gen_random_dot_stereogram, gen_textured_scene
    from .landscape import sweep, sweep_hypotheses, write_landscape_csv

    out = prepare_out_dir(cfg, "landscape")
    spec = DisparitySpec.constant(cfg["d_true"])
    if cfg["kind"] == "textured":
        from .data import TextureSpec

        sample = gen_textured_scene(cfg["width"], cfg["height"], TextureSpec(), spec, seed=cfg["seed"])
    elif cfg["kind"] == "rds":
        sample = gen_random_dot_stereogram(cfg["width"], cfg["height"], spec, seed=cfg["seed"])
    else:
        raise ConfigError(f"kind must be textured or rds, got {cfg['kind']!r}")
    land = sweep(sample, sweep_hypotheses(cfg["d_true"], cfg["radius"], cfg["step"]), cfg["d_true"], cfg["window"])
    write_landscape_csv(out / "landscape.csv", land)
    summary = land.summary()
    (out / "summary.txt").write_text("".join(f"{k}={v!r}\n" for k, v in summary.items()))
    for k, v in summary.items():
        print(f"{k}: {v:g}")
    return EXIT_OK


def cmd_gen_data(cfg: dict) -> int:
    from .data import DisparitySpec, TextureSpec, gen_random_dot_stereogram, gen_textured_scene
    from .fileio import save_gt_disparity, write_image, write_manifest

    if cfg["count"] < 1:
        raise ConfigError("count must be positive")
    spec = DisparitySpec.parse(cfg["scene"])
    out = prepare_out_dir(cfg, "gen-data")
    rows = []
    for i in range(cfg["count"]):
        seed = cfg["seed"] * 100_003 + i
        if cfg["kind"] == "rds":
            s = gen_random_dot_stereogram(cfg["width"], cfg["height"], spec, cfg["density"], seed=seed,
                                          dot_size=cfg["dot_size"])
        elif cfg["kind"] == "textured":
            s = gen_textured_scene(cfg["width"], cfg["height"], TextureSpec(), spec, seed=seed)
        else:
            raise ConfigError(f"kind must be rds or textured, got {cfg['kind']!r}")
        stem = f"pair_{i:04d}"
        write_image(out / f"{stem}_left.png", s.left[0].transpose(1, 2, 0))
        write_image(out / f"{stem}_right.png", s.right[0].transpose(1, 2, 0))
        save_gt_disparity(out / f"{stem}_gt.pfm", s.gt_disparity, s.mask)
        rows.append((f"{stem}_left.png", f"{stem}_right.png", f"{stem}_gt.pfm"))
    write_manifest(out / "manifest.txt", rows)
    print(f"wrote {len(rows)} pairs and manifest.txt to {out}")
    return EXIT_OK


def cmd_grad_check(cfg: dict) -> int:
    from .gradcheck import TOLERANCE, gradient_suite

    results = gradient_suite(seed=cfg["seed"], step=cfg["step"], include_network=cfg["network"])
    width = max(len(r.name) for r in results)
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        print(f"{status}  {r.name:<{width}}  max rel err {r.report.max_rel_error:.2e}  "
              f"checked {r.report.n_checked}  excluded {r.report.n_excluded}")
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks below {TOLERANCE:g}")
    return EXIT_NUMERIC if failed else EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "landscape": cmd_landscape,
    "gen-data": cmd_gen_data,
    "grad-check": cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        cfg = resolve(args)
        return COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataIOError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
