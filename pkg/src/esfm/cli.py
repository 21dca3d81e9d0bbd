"""Command-line front end.

Exit codes: 0 success, 1 failed gradient check, 2 usage error, 3 data
error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import scene_io
from .equinet import model_forward
from .errors import DataError, NumericalError
from .geometry import CALIBRATED, MODES, CameraSet, evaluate_metrics, triangulate_tracks
from .loss import compute_loss
from .optim import TrainConfig, smooth_gradient_check, train_multi_scene
from .pipeline import prepare, reconstruct, refine
from .synth import SynthConfig, generate_scene

log = logging.getLogger("esfm")

GRADCHECK_TOLERANCE = 1e-5

_metrics = {
    "type": ["object", "null"],
    "required": ["mean_reprojection_px", "rotation_error_deg", "location_error"],
    "properties": {
        "mean_reprojection_px": {"type": "number"},
        "rotation_error_deg": {"type": ["number", "null"]},
        "location_error": {"type": ["number", "null"]},
    },
}

REPORT_SCHEMA = {
    "$schema": "http://json-schema.org/draft-07/schema#",
    "title": "reconstruction report",
    "type": "object",
    "required": ["mode", "seed", "scene", "loss", "metrics", "ba", "timings", "config",
                 "cameras", "points"],
    "properties": {
        "mode": {"enum": list(MODES)},
        "seed": {"type": "integer"},
        "scene": {
            "type": "object",
            "required": ["m", "n", "p"],
            "properties": {k: {"type": "integer", "minimum": 0} for k in ("m", "n", "p")},
        },
        "loss": {
            "type": "object",
            "required": ["epochs", "initial", "final", "best"],
            "properties": {
                "epochs": {"type": "integer", "minimum": 0},
                "initial": {"type": ["number", "null"]},
                "final": {"type": ["number", "null"]},
                "best": {"type": ["number", "null"]},
            },
        },
        "metrics": {
            "type": "object",
            "required": ["before_ba", "after_ba"],
            "properties": {"before_ba": _metrics, "after_ba": _metrics},
        },
        "ba": {
            "type": ["object", "null"],
            "required": ["iterations", "termination", "initial_cost", "final_cost",
                         "excluded_measurements", "excluded_points"],
        },
        "timings": {"type": "object", "additionalProperties": {"type": "number"}},
        "config": {"type": "object"},
        "cameras": {"type": "array", "items": {"type": "array"}},
        "points": {"type": "array", "items": {"type": "array", "minItems": 3, "maxItems": 3}},
    },
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _threads():
    """Cap BLAS threads with ``ESFM_THREADS`` (0 or unset: library default)."""
    raw = os.environ.get("ESFM_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ESFM_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("ESFM_THREADS must be >= 0")
    if n == 0:
        return None
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


def _train_config(args, mode):
    cfg = scene_io.load_config(args.config) if getattr(args, "config", None) else {}
    cfg = dict(cfg.get("train", cfg))
    cfg["mode"] = mode
    if getattr(args, "epochs", None) is not None:
        cfg["epochs"] = args.epochs
    if getattr(args, "seed", None) is not None:
        cfg["seed"] = args.seed
    try:
        return TrainConfig.from_dict(cfg)
    except (TypeError, ValueError) as exc:
        raise DataError(f"bad train config: {exc}") from None


def _tolist(a):
    return np.asarray(a).tolist()


def _number(x):
    return None if x is None or not np.isfinite(x) else float(x)


def build_report(prep, rec, cfg: TrainConfig, seed: int) -> dict:
    t = prep.tensor
    hist = rec.fit.history
    ba = rec.ba
    return {
        "mode": prep.mode,
        "seed": int(seed),
        "scene": {"m": t.m, "n": t.n, "p": t.p},
        "loss": {
            "epochs": len(hist),
            "initial": _number(hist[0]) if hist else None,
            "final": _number(hist[-1]) if hist else None,
            "best": _number(min(hist)) if hist else None,
        },
        "metrics": {
            "before_ba": rec.before_ba.as_dict(),
            "after_ba": rec.after_ba.as_dict() if rec.after_ba is not None else None,
        },
        "ba": None if ba is None else {
            "iterations": ba.iterations,
            "termination": ba.termination,
            "initial_cost": ba.cost_history[0],
            "final_cost": ba.cost_history[-1],
            "excluded_measurements": len(ba.excluded_measurements),
            "excluded_points": len(ba.excluded_points),
        },
        "timings": dict(rec.timings),
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_dict().items()},
        "cameras": _tolist(rec.cameras.matrices),
        "points": _tolist(rec.points),
    }


def _fmt(x, spec=".4f"):
    return "-" if x is None else format(x, spec)


def print_row(report, out=None):
    """One table row: reprojection before / after BA, then rotation and
    location errors when known."""
    out = out or sys.stdout
    b = report["metrics"]["before_ba"]
    a = report["metrics"]["after_ba"] or {}
    final = a if a else b
    print(f"{'reproj_px(pre-BA)':>18} {'reproj_px(post-BA)':>19} {'R_err_deg':>10} {'t_err':>10}", file=out)
    print(f"{_fmt(b['mean_reprojection_px']):>18} {_fmt(a.get('mean_reprojection_px')):>19} "
          f"{_fmt(final.get('rotation_error_deg')):>10} {_fmt(final.get('location_error')):>10}", file=out)


def _write_outputs(args, report, rec):
    if getattr(args, "out_report", None):
        Path(args.out_report).write_text(json.dumps(report, indent=2) + "\n")
    if getattr(args, "out_ply", None):
        scene_io.write_ply(rec.points, rec.cameras, args.out_ply)


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth(args):
    cfg = scene_io.load_config(args.config) if args.config else {}
    cfg = dict(cfg.get("synth", cfg))
    if args.seed is not None:
        cfg["seed"] = args.seed
    scene = generate_scene(SynthConfig.from_dict(cfg))
    scene_io.write_tracks(scene, args.out)
    t = scene.tensor
    print(f"wrote {args.out}: m={t.m} n={t.n} p={t.p} mode={scene.mode}")
    return 0


def cmd_reconstruct(args):
    scene = scene_io.read_tracks(args.scene)
    prep = prepare(scene, args.mode)
    cfg = _train_config(args, prep.mode)
    seed = cfg.seed
    rec = reconstruct(prep, cfg, seed, sequential=args.sequential, run_ba=not args.no_ba)
    report = build_report(prep, rec, cfg, seed)
    _write_outputs(args, report, rec)
    print_row(report)
    return 0


def cmd_train(args):
    mode = args.mode
    cfg = _train_config(args, mode)
    scenes = []
    for d in (args.train_dir, args.val_dir):
        files = sorted(Path(d).glob("*.tracks"))
        if not files:
            raise DataError(f"no .tracks files in {d}")
        scenes.append([prepare(scene_io.read_tracks(f), mode).tensor for f in files])
    history = []
    t0 = time.perf_counter()
    params = train_multi_scene(scenes[0], scenes[1], cfg, history=history)
    scene_io.save_checkpoint(params, args.out, seed=cfg.seed)
    best = min(history, key=lambda r: r[1])
    print(f"trained {len(history)} validations in {time.perf_counter() - t0:.1f}s; "
          f"best validation loss {best[1]:.6g} at epoch {best[0]}; wrote {args.out}")
    return 0


def cmd_finetune(args):
    params, _, _ = scene_io.load_checkpoint(args.model)
    scene = scene_io.read_tracks(args.scene)
    prep = prepare(scene, args.mode or params.mode)
    cfg = _train_config(args, prep.mode)
    cfg.encoder_widths = tuple(params.widths["encoder"])
    cfg.head_widths = tuple(params.widths["cam_head"])
    rec = refine(prep, params, args.epochs, cfg, run_ba=not args.no_ba)
    report = build_report(prep, rec, cfg, cfg.seed)
    _write_outputs(args, report, rec)
    print_row(report)
    return 0


def cmd_eval(args):
    scene = scene_io.read_tracks(args.scene)
    src = Path(args.cameras_from)
    if src.suffix == ".json":
        rep = json.loads(src.read_text())
        prep = prepare(scene, rep["mode"])
        cams = CameraSet(np.array(rep["cameras"]), rep["mode"])
        pts = np.array(rep["points"])
    else:
        params, _, _ = scene_io.load_checkpoint(src)
        prep = prepare(scene, params.mode)
        cams, net_pts = model_forward(params, prep.tensor, record=False)
        pts, _ = triangulate_tracks(cams.matrices, prep.tensor, fallback=net_pts)
    t = prep.tensor
    if cams.matrices.shape[0] != t.m or pts.shape != (t.n, 3):
        raise DataError("cameras/points do not match the scene size")
    gt = scene.gt_cameras if prep.mode == CALIBRATED else None
    metrics = evaluate_metrics(cams, pts, gt, t, prep.transforms)
    out = metrics.as_dict()
    out["loss"] = compute_loss(cams, pts, t).total
    print(json.dumps(out, indent=2))
    return 0


def cmd_gradcheck(args):
    err, info = smooth_gradient_check(args.seed, args.mode, width=args.width, epsilon=args.epsilon)
    ok = err < GRADCHECK_TOLERANCE
    print(f"max relative error {err:.3e} (seed {info['seed']}, {info['warmup_epochs']} warm-up epochs, "
          f"{info['mode']}): {'ok' if ok else 'FAIL'}")
    return 0 if ok else 1


def build_parser():
    p = _Parser(prog="esfm", description="Permutation-equivariant structure from motion.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic scene")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    def recon_flags(s):
        s.add_argument("--scene", required=True)
        s.add_argument("--mode", choices=MODES)
        s.add_argument("--config")
        s.add_argument("--epochs", type=int)
        s.add_argument("--seed", type=int)
        s.add_argument("--no-ba", action="store_true")
        s.add_argument("--out-ply")
        s.add_argument("--out-report")

    r = sub.add_parser("reconstruct", help="optimize a network on one scene")
    recon_flags(r)
    r.add_argument("--sequential", action="store_true")
    r.set_defaults(func=cmd_reconstruct)

    t = sub.add_parser("train", help="learn from several scenes")
    t.add_argument("--train-dir", required=True)
    t.add_argument("--val-dir", required=True)
    t.add_argument("--config")
    t.add_argument("--mode", choices=MODES, default=CALIBRATED)
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    f = sub.add_parser("finetune", help="fine-tune a trained model on one scene")
    f.add_argument("--model", required=True)
    recon_flags(f)
    f.set_defaults(func=cmd_finetune, epochs=500)

    e = sub.add_parser("eval", help="recompute metrics")
    e.add_argument("--scene", required=True)
    e.add_argument("--cameras-from", required=True)
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference gradient check")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--mode", choices=MODES, default=CALIBRATED)
    g.add_argument("--width", type=int, default=16)
    g.add_argument("--epsilon", type=float, default=1e-6)
    g.set_defaults(func=cmd_gradcheck)
    return p


def dispatch(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        limiter = _threads()
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    stage = args.command
    try:
        with limiter if limiter is not None else contextlib.nullcontext():
            return args.func(args)
    except UsageError as exc:
        print(f"{stage}: usage error: {exc}", file=sys.stderr)
        return 2
    except DataError as exc:
        print(f"{stage}: data error [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"{stage}: numerical failure [{type(exc).__name__}]: {exc}", file=sys.stderr)
        return 4
    except OSError as exc:
        print(f"{stage}: data error [IOError]: {exc}", file=sys.stderr)
        return 3


def main():
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
