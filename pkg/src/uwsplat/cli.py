"""Command-line interface.

Subcommands: synth, train, render, restore, eval, gradcheck. Options resolve
as flags > config file (TOML) > defaults, and the resolved configuration is
echoed into the output directory as resolved.toml so every run is
reproducible from its artifacts alone.

Exit codes: 0 success, 2 usage/config error, 3 numerical divergence,
4 gradient-check failure.
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:
    import tomli as tomllib

import numpy as np

from . import adapt, attenuation, fileio, losses, renderer, report, scattering, synth, tape, train
from .checks import DEFAULT_SEEDS, GRAD_TOL, run_gradcheck
from .core import DivergedError
from .tape import ParamVector, Tensor


class UsageError(Exception):
    pass


SYNTH_DEFAULTS = {
    "seed": 0, "n_gaussians": 200, "width": 96, "height": 96, "n_views": 8,
    "water_class": "clear", "d_min": 4.0, "d_max": 9.0, "d_far": 20.0,
}

TRAIN_DEFAULTS = {
    "iterations": 2000, "enable_fraction": 1.0 / 3.0, "lr_gaussians": 1.6e-3,
    "seed": 0, "eval_interval": 100, "init_jitter": 0.02, "d_far": 20.0,
    "sigma_c": 1.0, "detach_depth": False,
    "w1": 1.0, "w2": 0.05, "w3": 0.05, "w4": 0.01, "w5": 0.2,
    "mu": 1.0, "lambda_edge": 0.1, "alpha_s": 10.0, "lambda_ms": 0.5,
    "gamma_wat": 1.0, "lambda_d": 0.2,
}


def _apply_thread_env() -> None:
    """DPGS_THREADS bounds worker threads (0 or unset = automatic)."""
    raw = os.environ.get("DPGS_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"DPGS_THREADS must be an integer, got {raw!r}")
    if n < 0:
        raise UsageError("DPGS_THREADS must be >= 0")
    if n > 0:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, str(n))


def resolve_config(defaults: dict, config_path, flag_values: dict) -> dict:
    """Flags override file values override defaults; unknown keys rejected."""
    resolved = dict(defaults)
    if config_path is not None:
        path = Path(config_path)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        with open(path, "rb") as f:
            try:
                loaded = tomllib.load(f)
            except tomllib.TOMLDecodeError as e:
                raise UsageError(f"invalid TOML in {path}: {e}")
        for key, val in loaded.items():
            if key not in defaults:
                raise UsageError(f"unknown config key: {key}")
            if not isinstance(val, type(defaults[key])) and not (
                    isinstance(defaults[key], float) and isinstance(val, int)):
                raise UsageError(f"config key {key}: expected "
                                 f"{type(defaults[key]).__name__}, got {type(val).__name__}")
            resolved[key] = type(defaults[key])(val)
    for key, val in flag_values.items():
        if val is not None:
            resolved[key] = type(defaults[key])(val)
    _validate_config(resolved)
    return resolved


def _validate_config(cfg: dict) -> None:
    checks = {
        "enable_fraction": lambda v: 0.0 < v < 1.0,
        "iterations": lambda v: v >= 1,
        "lr_gaussians": lambda v: v > 0.0,
        "eval_interval": lambda v: v >= 1,
        "n_gaussians": lambda v: v >= 1,
        "n_views": lambda v: v >= 1,
        "width": lambda v: v >= 8,
        "height": lambda v: v >= 8,
        "d_far": lambda v: v > 0.0,
        "sigma_c": lambda v: v > 0.0,
        "water_class": lambda v: v in synth.WATER_CLASSES,
    }
    for key, ok in checks.items():
        if key in cfg and not ok(cfg[key]):
            raise UsageError(f"config key {key}: value {cfg[key]!r} out of range")
    if "d_min" in cfg and not 0.0 < cfg["d_min"] < cfg["d_max"]:
        raise UsageError("config requires 0 < d_min < d_max")


def _toml_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    return repr(v)


def write_resolved(cfg: dict, out_dir) -> None:
    out = report.ensure_dir(out_dir)
    lines = [f"{k} = {_toml_value(cfg[k])}" for k in sorted(cfg)]
    (out / "resolved.toml").write_text("\n".join(lines) + "\n")


def _add_config_flags(parser: argparse.ArgumentParser, defaults: dict) -> None:
    parser.add_argument("--config", default=None, help="TOML config file")
    for key, val in defaults.items():
        flag = "--" + key.replace("_", "-")
        if isinstance(val, bool):
            parser.add_argument(flag, default=None, action=argparse.BooleanOptionalAction,
                                help=f"default: {val}")
        else:
            parser.add_argument(flag, type=type(val), default=None,
                                help=f"default: {val}")


def _flag_values(args, defaults: dict) -> dict:
    return {k: getattr(args, k) for k in defaults}


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    cfg = resolve_config(SYNTH_DEFAULTS, args.config, _flag_values(args, SYNTH_DEFAULTS))
    spec = synth.spec_for_class(cfg["water_class"], seed=cfg["seed"],
                                n_gaussians=cfg["n_gaussians"], width=cfg["width"],
                                height=cfg["height"], n_views=cfg["n_views"],
                                d_min=cfg["d_min"], d_max=cfg["d_max"], d_far=cfg["d_far"])
    bundle = synth.generate_scene(spec)
    synth.save_bundle(bundle, args.out)
    write_resolved(cfg, args.out)
    print(f"wrote {len(bundle.cameras)}-view bundle to {args.out}")
    return 0


def _train_config(cfg: dict) -> train.TrainConfig:
    weights = losses.LossWeights(
        w1=cfg["w1"], w2=cfg["w2"], w3=cfg["w3"], w4=cfg["w4"], w5=cfg["w5"],
        mu=cfg["mu"], lambda_edge=cfg["lambda_edge"], alpha_s=cfg["alpha_s"],
        lambda_ms=cfg["lambda_ms"], gamma_wat=cfg["gamma_wat"], lambda_d=cfg["lambda_d"])
    return train.TrainConfig(
        iterations=cfg["iterations"], enable_fraction=cfg["enable_fraction"],
        lr_gaussians=cfg["lr_gaussians"], seed=cfg["seed"],
        eval_interval=cfg["eval_interval"], init_jitter=cfg["init_jitter"],
        d_far=cfg["d_far"], sigma_c=cfg["sigma_c"], detach_depth=cfg["detach_depth"],
        weights=weights)


def cmd_train(args) -> int:
    cfg = resolve_config(TRAIN_DEFAULTS, args.config, _flag_values(args, TRAIN_DEFAULTS))
    bundle = synth.load_bundle(args.bundle)
    out = report.ensure_dir(args.out)
    write_resolved(cfg, out)
    ckpt, logs = train.train(bundle, _train_config(cfg))
    header = ["iter", "basic", "ab", "wat", "edge", "ms", "total", "psnr"]
    fileio.write_csv(out / "train_log.csv", header, logs)
    report.plot_training(logs, out / "train_log.png")
    slots = {n: ckpt.params.get(n).copy() for n in ckpt.params.names()}
    slots.update(ckpt.classifier.slots())
    fileio.save_checkpoint(out / "checkpoint.dpgs", ParamVector(slots), {
        "config": cfg,
        "iteration": ckpt.iteration,
        "profile": {"probs": ckpt.profile.probs.tolist(), "w": ckpt.profile.w,
                    "bg_ratio": ckpt.profile.bg_ratio},
    })
    final_psnr = logs[-1][7] if logs else float("nan")
    print(f"trained {ckpt.iteration} iterations, final PSNR {final_psnr:.2f} dB")
    if ckpt.iteration < cfg["iterations"]:
        raise DivergedError(f"training diverged at iteration {ckpt.iteration}")
    return 0


def _load_checkpoint_models(path):
    params, header = fileio.load_checkpoint(path)
    leaves = {n: params.get(n) for n in params.names()}
    prof = header["profile"]
    profile = adapt.WaterProfile(probs=np.array(prof["probs"]), w=prof["w"],
                                 bg_ratio=prof["bg_ratio"])
    return params, leaves, profile, header


def cmd_render(args) -> int:
    params, slots, profile, header = _load_checkpoint_models(args.checkpoint)
    bundle = synth.load_bundle(args.bundle)
    if not 0 <= args.view < len(bundle.cameras):
        raise UsageError(f"view {args.view} out of range [0, {len(bundle.cameras)})")
    cam = bundle.cameras[args.view]
    out = report.ensure_dir(args.out)
    d_far = header["config"].get("d_far", renderer.D_FAR_DEFAULT)
    leaves = {n: Tensor(v) for n, v in slots.items()}
    with tape.no_grad():
        render = renderer.rasterize_tensors(leaves, cam, d_far=d_far)
        j_hat = np.clip(render.color.value, 0.0, 1.0)
        depth = render.depth.value
        edge = attenuation.edge_factor(bundle.degraded[args.view], depth)
        a_map = attenuation.attenuation_map(depth, edge, leaves, t_mod=profile.t_mod).value
        b_map_t, b_s_t = scattering.scattering_map(depth, leaves)
        b_map, b_s = b_map_t.value, b_s_t.value
    i_hat = np.clip(j_hat * a_map + b_map, 0.0, 1.0)
    fileio.save_png(out / "i_hat.png", i_hat)
    fileio.save_png(out / "j_hat.png", j_hat)
    fileio.save_pfm(out / "depth.pfm", depth)
    fileio.save_pfm(out / "a_map.pfm", a_map)
    fileio.save_pfm(out / "b_map.pfm", b_map)
    if args.dump_fields:
        with tape.no_grad():
            conf = scattering.depth_confidence(depth).value
            dedge = scattering.depth_edge(depth).value
            feats = scattering.multiscale_features(depth, leaves).value
        fileio.save_pfm(out / "b_s.pfm", b_s)
        fileio.save_pfm(out / "edge.pfm", edge)
        fileio.save_pfm(out / "conf.pfm", conf)
        fileio.save_pfm(out / "depth_edge.pfm", dedge)
        fileio.save_pfm(out / "feats.pfm", feats)
    write_resolved(header["config"], out)
    print(f"rendered view {args.view} to {out}")
    return 0


def cmd_restore(args) -> int:
    params, slots, profile, header = _load_checkpoint_models(args.checkpoint)
    image = fileio.load_png(args.image)
    depth = fileio.load_pfm(args.depth)
    if depth.ndim != 2 or image.shape[:2] != depth.shape:
        raise UsageError(f"image dims {image.shape[:2]} do not match depth {depth.shape}")
    atten = attenuation.AttenuationParams.from_slots(slots)
    scat = scattering.ScatterParams.from_slots(slots)
    restored, valid = train.restore(image, depth, atten, scat, profile)
    out = report.ensure_dir(args.out)
    fileio.save_png(out / "restored.png", restored)
    fileio.save_pfm(out / "valid.pfm", valid.astype(np.float64))
    write_resolved(header["config"], out)
    print(f"restored image written to {out} ({int(valid.sum())}/{valid.size} valid pixels)")
    return 0


def cmd_eval(args) -> int:
    dir_a, dir_b = Path(args.dir_a), Path(args.dir_b)
    names = sorted(p.name for p in dir_a.glob("*.png"))
    names = [n for n in names if (dir_b / n).exists()]
    if not names:
        raise UsageError(f"no common PNG files between {dir_a} and {dir_b}")
    rows = []
    for name in names:
        a = fileio.load_png(dir_a / name)
        b = fileio.load_png(dir_b / name)
        if a.shape != b.shape:
            raise UsageError(f"{name}: dims differ ({a.shape} vs {b.shape})")
        rows.append((name, losses.psnr(a, b), losses.ssim_np(a, b)))
    mean_psnr = float(np.mean([r[1] for r in rows]))
    mean_ssim = float(np.mean([r[2] for r in rows]))
    rows.append(("mean", mean_psnr, mean_ssim))
    out = report.ensure_dir(args.out)
    fileio.write_csv(out / "metrics.csv", ["name", "psnr", "ssim"], rows)
    report.plot_metrics(rows, out / "metrics.png")
    print(f"mean PSNR {mean_psnr:.2f} dB, mean SSIM {mean_ssim:.4f} over {len(names)} images")
    return 0


def cmd_gradcheck(args) -> int:
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds else DEFAULT_SEEDS
    reports = run_gradcheck(seeds)
    out = report.ensure_dir(args.out)
    rows = [(r.op, r.argmax_slot, r.max_rel_err, r.fd_step) for r in reports]
    fileio.write_csv(out / "gradcheck.csv", ["op", "slot", "err", "step"], rows)
    worst = max(reports, key=lambda r: r.max_rel_err)
    failed = [r for r in reports if r.max_rel_err >= GRAD_TOL]
    print(f"{len(reports)} checks, worst {worst.op} err {worst.max_rel_err:.3g} "
          f"({worst.argmax_slot})")
    if failed:
        for r in failed:
            print(f"FAIL {r.op}: err {r.max_rel_err:.3g} at {r.argmax_slot}", file=sys.stderr)
        return 4
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uwsplat",
                                     description="Differentiable underwater scene "
                                                 "reconstruction toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic scene bundle")
    p.add_argument("--out", required=True)
    _add_config_flags(p, SYNTH_DEFAULTS)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="optimize scene and water parameters")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, TRAIN_DEFAULTS)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("render", help="render a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bundle", required=True)
    p.add_argument("--view", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--dump-fields", action="store_true",
                   help="also write scattering/attenuation diagnostic fields")
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("restore", help="invert the water model on one image")
    p.add_argument("--image", required=True)
    p.add_argument("--depth", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_restore)

    p = sub.add_parser("eval", help="PSNR/SSIM between two image directories")
    p.add_argument("--dir-a", required=True)
    p.add_argument("--dir-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient gate")
    p.add_argument("--out", required=True)
    p.add_argument("--seeds", default=None, help="comma-separated seed list")
    p.set_defaults(fn=cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        _apply_thread_env()
        return args.fn(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (synth.GenerationFailedError, FileNotFoundError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergedError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
