"""``sit`` command line: synth, train, eval, gradcheck, ablate.

Exit codes: 0 success, 1 check/metric failure or divergence, 2 usage or parse
error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .backbone import SyntheticBackbone, atomic_write_bytes
from .data import load_dataset, synthesize
from .errors import ConfigParseError, DegenerateVariance, DivergenceDetected, IoFailure, SITError
from .gradcheck import grad_check
from .metrics import compute_metrics_lenient
from .model import VARIANT_ORDER, SITModel, Variant, build_variant
from .model_io import load_model, save_model
from .nn import Conv2d, Dropout, GlobalAvgPool, GlobalMaxPool, LayerNorm, Linear, ReLU, Softmax
from .pyramid import ScalePyramid
from .rng import RngStream, StreamFactory
from .train import TrainConfig, train
from .transformer import FeedForward, MultiHeadAttention, TransformerBlock

log = logging.getLogger("sit")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO = 0, 1, 2, 3
GRADCHECK_TOL = 1e-4


def dumps(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=False) + "\n"


def write_json(path, obj) -> None:
    atomic_write_bytes(path, dumps(obj).encode("utf-8"))


def load_config(path) -> TrainConfig:
    if path is None:
        return TrainConfig()
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise IoFailure(f"cannot read config {path}: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigParseError(f"{path}: invalid JSON ({exc})") from exc
    return TrainConfig.from_dict(data)


def _resolve_config(args, x) -> TrainConfig:
    cfg = load_config(args.config)
    if getattr(args, "variant", None):
        cfg.variant = Variant.parse(args.variant).value
    if cfg.backbone_channels is None:
        cfg.backbone_channels = int(x.shape[-1])
    cfg.validate()
    return cfg


# -- synth --------------------------------------------------------------------

def cmd_synth(args) -> int:
    index = synthesize(args.n, args.seed, args.cb, args.out)
    print(f"wrote {len(index)} samples to {Path(args.out) / 'index.csv'}")
    return EXIT_OK


# -- train --------------------------------------------------------------------

def run_training(cfg: TrainConfig, x, y, val=None):
    model = build_variant(cfg.variant, cfg)
    return train(model, (x, y), cfg, val_dataset=val)


def cmd_train(args) -> int:
    x, y, _ = load_dataset(args.data)
    cfg = _resolve_config(args, x)
    val = None
    if args.val_data:
        xv, yv, _ = load_dataset(args.val_data, expected_shape=x.shape[1:])
        val = (xv, yv)
    t0 = time.perf_counter()
    result = run_training(cfg, x, y, val)
    elapsed = time.perf_counter() - t0
    save_model(result.model, args.out)
    report = {
        "engine_version": __version__,
        "config": cfg.to_dict(),
        "history": result.history.to_dict(),
        "val_metrics": result.val_metrics.to_dict(),
        "val_metrics_error": result.val_metrics_error,
        "wall_clock_seconds": elapsed,
    }
    report_path = args.report or f"{args.out}.report.json"
    write_json(report_path, report)
    sys.stdout.write(dumps(report))
    return EXIT_OK


# -- eval ---------------------------------------------------------------------

def cmd_eval(args) -> int:
    model = load_model(args.model)
    x, y, _ = load_dataset(args.data)
    metrics, err = compute_metrics_lenient(y, model.predict(x))
    out = metrics.to_dict()
    if err:
        out["error"] = f"DegenerateVariance: {err}"
    if args.out:
        write_json(args.out, out)
    sys.stdout.write(dumps(out))
    return EXIT_FAIL if err else EXIT_OK


# -- gradcheck ----------------------------------------------------------------

def gradcheck_cases(seed: int, cb: int):
    """``(name, layer, input, train, max_entries)`` for every layer type and model variant."""
    g = np.random.default_rng(seed)
    streams = StreamFactory(seed)
    fmap = g.random((7, 7, cb))
    seq = g.standard_normal((3, 128))
    away_from_kink = np.sign(g.standard_normal((3, 16))) * (0.1 + g.random((3, 16)))
    cases = [
        ("conv1x1", Conv2d(1, cb, 64, streams()), fmap, False, 100),
        ("conv3x3", Conv2d(3, cb, 64, streams()), fmap, False, 100),
        ("conv5x5", Conv2d(5, cb, 64, streams()), fmap, False, 100),
        ("relu", ReLU(), away_from_kink, False, None),
        ("layer_norm", LayerNorm(128), seq, False, None),
        ("softmax", Softmax(), g.standard_normal((3, 3)), False, None),
        ("attention", MultiHeadAttention(128, 4, streams), seq, False, 100),
        ("dropout_frozen", Dropout(0.1, streams()), g.standard_normal((3, 128)), True, None),
        ("gap", GlobalAvgPool(), fmap, False, None),
        ("gmp", GlobalMaxPool(), fmap, False, None),
        ("affine", Linear(128, 128, streams()), seq, False, 100),
        ("ffn", FeedForward(128, 512, streams), seq, False, 100),
        ("transformer_block", TransformerBlock(128, 4, 512, 0.1, streams), seq, True, 60),
        ("scale_pyramid", ScalePyramid(cb, streams), fmap, False, 60),
        # 64x64 keeps the row fast; the layer itself accepts any extent
        ("backbone", SyntheticBackbone(cb, streams), g.random((64, 64, 3)), False, 30),
    ]
    for v in VARIANT_ORDER:
        model = SITModel(v, backbone_channels=cb, seed=seed)
        cases.append((f"model:{v.value}", model, fmap, True, 25))
    return cases


def _corrupt(layer) -> None:
    original = layer.backward
    layer.backward = lambda dy: 2.0 * original(dy)


def run_gradcheck(seed: int = 0, cb: int = 8, corrupt: str | None = None, tol: float = GRADCHECK_TOL):
    rows = []
    for name, layer, x, train_mode, max_entries in gradcheck_cases(seed, cb):
        if corrupt == name:
            _corrupt(layer)
        t0 = time.perf_counter()
        rep = grad_check(layer, x, tol=tol, train=train_mode, max_entries=max_entries, seed=seed)
        rows.append({"layer": name, "max_rel_error": rep.max_error, "passed": rep.passed,
                     "entries_checked": sum(rep.checked.values()),
                     "entries_refined": sum(rep.refined.values()),
                     "seconds": round(time.perf_counter() - t0, 3)})
    return rows


def cmd_gradcheck(args) -> int:
    names = [c[0] for c in gradcheck_cases(args.seed, args.cb)]
    if args.corrupt and args.corrupt not in names:
        raise ConfigParseError(f"--corrupt must name one of: {', '.join(names)}")
    rows = run_gradcheck(args.seed, args.cb, args.corrupt)
    if args.json:
        sys.stdout.write(dumps({"tol": GRADCHECK_TOL, "rows": rows}))
    else:
        width = max(len(r["layer"]) for r in rows)
        for r in rows:
            status = "PASS" if r["passed"] else "FAIL"
            print(f"{r['layer']:<{width}}  {r['max_rel_error']:.3e}  {status}")
    return EXIT_OK if all(r["passed"] for r in rows) else EXIT_FAIL


# -- ablate -------------------------------------------------------------------

def run_ablation(cfg: TrainConfig, x, y):
    rows = []
    for v in VARIANT_ORDER:
        vcfg = TrainConfig.from_dict({**cfg.to_dict(), "variant": v.value})
        result = run_training(vcfg, x, y)
        m = result.val_metrics
        rows.append({"variant": v.value, "pearson": m.pearson, "mae": m.mae, "rmse": m.rmse,
                     "mse": m.rmse ** 2, "n_val": m.n, "best_epoch": result.history.best_epoch})
    return rows


def format_ablation(rows) -> str:
    lines = [f"{'variant':<16}{'PC':>10}{'MAE':>10}{'RMSE':>10}"]
    for r in rows:
        pc = "n/a" if r["pearson"] is None else f"{r['pearson']:.4f}"
        lines.append(f"{r['variant']:<16}{pc:>10}{r['mae']:>10.4f}{r['rmse']:>10.4f}")
    return "\n".join(lines) + "\n"


def cmd_ablate(args) -> int:
    x, y, _ = load_dataset(args.data)
    cfg = _resolve_config(args, x)
    rows = run_ablation(cfg, x, y)
    doc = {"engine_version": __version__, "config": cfg.to_dict(), "rows": rows}
    if args.out:
        write_json(args.out, doc)
    sys.stdout.write(dumps(doc) if args.json else format_ablation(rows))
    return EXIT_OK


# -- entry point --------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sit", description="Scale-interaction transformer engine")
    p.add_argument("-v", "--verbose", action="store_true")
    p.add_argument("--version", action="version", version=f"sit {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a seeded synthetic feature dataset")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--cb", type=int, default=64, help="feature channels")
    s.add_argument("--out", required=True, help="output directory")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model on an index.csv dataset")
    t.add_argument("--config", help="JSON file with TrainConfig keys")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True, help="SITM model path")
    t.add_argument("--variant", choices=[v.value for v in VARIANT_ORDER])
    t.add_argument("--val-data", help="explicit validation index (default: seeded split)")
    t.add_argument("--report", help="report path (default: MODEL.report.json)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a model on an index.csv dataset")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="also write the metrics JSON here")
    e.set_defaults(func=cmd_eval)

    g = sub.add_parser("gradcheck", help="finite-difference check of every layer and the model")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--cb", type=int, default=8)
    g.add_argument("--corrupt", help="test hook: double the backward of the named row")
    g.add_argument("--json", action="store_true")
    g.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and compare the four ablation variants")
    a.add_argument("--config")
    a.add_argument("--data", required=True)
    a.add_argument("--out", help="also write the JSON table here")
    a.add_argument("--json", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except DivergenceDetected as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    except DegenerateVariance as exc:
        log.error("%s", exc)
        return EXIT_FAIL
    except (IoFailure, OSError) as exc:
        log.error("%s", exc)
        return EXIT_IO
    except SITError as exc:
        log.error("%s: %s", type(exc).__name__, exc)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
