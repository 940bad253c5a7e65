"""Command-line entry point: gen-data, train, eval, gradcheck, verify-prop."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .errors import XtascError

GRADCHECK_BOUND = 1e-4


def _gen_data(args) -> int:
    from .data import GenConfig, generate_dataset, write_dataset

    cfg = GenConfig(height=args.height, width=args.width, num_classes=args.classes, seed=args.seed,
                    depth_mode=args.depth_mode)
    samples = generate_dataset(cfg, args.n, args.split)
    write_dataset(args.out, samples, cfg, args.split)
    print(json.dumps({"out": str(args.out), "count": len(samples), "split": args.split}))
    return 0


_TRAIN_FLAGS = ("variant", "epochs", "batch_size", "lr", "lr_halve_every", "lambda1", "lambda2", "weighting",
                "seed", "eval_every", "precision")


def _train(args) -> int:
    from .train import TrainConfig, train

    d = json.loads(Path(args.config).read_text()) if args.config else {}
    for key in _TRAIN_FLAGS:
        val = getattr(args, key)
        if val is not None:
            d[key] = val
    d["dataset_dir"] = args.data
    d["eval_dir"] = args.eval_data or d.get("eval_dir")
    d["out_dir"] = args.out
    if args.no_augment:
        d["augment"] = False
    cfg = TrainConfig.from_dict(d)
    res = train(cfg)
    summary = {"out": args.out, "steps": len(res.losses), "seconds": round(res.seconds, 2),
               "final_loss": res.losses[-1]["total"] if res.losses else None,
               "final_eval": res.evals[-1] if res.evals else None}
    print(json.dumps(summary))
    return 0


def _eval(args) -> int:
    from .data import read_dataset
    from .metrics import MetricsReport
    from .train import evaluate

    samples, _ = read_dataset(args.data)
    baseline = None
    if args.baseline:
        b = json.loads(Path(args.baseline).read_text())
        b = b.get("metrics", b)
        baseline = MetricsReport(b["miou"], b["pix_acc"], b["abs_err"], b["rel_err"], b.get("per_class_iou", []))
    res = evaluate(args.checkpoint, samples, baseline=baseline)
    text = json.dumps(res.to_dict())
    if args.out:
        Path(args.out).write_text(text)
    print(text)
    return 0


def _gradcheck(args) -> int:
    from .gradcheck import gradcheck

    rep = gradcheck(args.variant, size=args.size, seed=args.seed, per_tensor=args.per_tensor, weighting=args.weighting)
    print(json.dumps(rep.to_dict()))
    return 0 if rep.max_rel_error < GRADCHECK_BOUND else 1


def _verify_prop(args) -> int:
    from .proposition import sweep

    fields = ("xtc_gap", "align_gap", "xi_y", "xtc_gap_swap", "align_gap_swap", "xi_z")
    worst = {k: 0.0 for k in fields}
    xi_values = []
    violations = 0
    dump = open(args.ndjson, "w") if args.ndjson else None
    try:
        for i, (_, rep, steps) in enumerate(sweep(args.trials, args.max_support, args.seed, args.group_tol,
                                                  args.tie_prone)):
            ok = rep.chain_holds(args.tol)
            violations += not ok
            xi_values.append(rep.xi_y)
            for k in fields:
                worst[k] = max(worst[k], getattr(rep, k))
            if dump:
                dump.write(json.dumps({"trial": i, "ok": ok, **rep.to_dict(), **steps.to_dict()}) + "\n")
    finally:
        if dump:
            dump.close()
    xi = np.asarray(xi_values)
    print(f"{'quantity':<16}{'max':>14}")
    for k in fields:
        print(f"{k:<16}{worst[k]:>14.3e}")
    print(f"xi_y quartiles: {np.percentile(xi, [25, 50, 75]).round(4).tolist()}")
    print(f"trials={args.trials} violations={violations}")
    return 0 if violations == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xtasc", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n", type=int, default=256)
    g.add_argument("--height", type=int, default=32)
    g.add_argument("--width", type=int, default=64)
    g.add_argument("--classes", type=int, default=7)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--depth-mode", default="inverse_disparity", choices=("raw", "inverse_disparity"))
    g.add_argument("--split", default="train", help="seed stream; use 'eval' for a held-out set")
    g.set_defaults(func=_gen_data)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--config", help="JSON file with TrainConfig fields")
    t.add_argument("--data", required=True)
    t.add_argument("--eval-data")
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=("ST", "MT", "ALIGN", "XTC"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--lr-halve-every", type=int)
    t.add_argument("--lambda1", type=float)
    t.add_argument("--lambda2", type=float)
    t.add_argument("--weighting", choices=("equal", "uncertainty", "gradnorm"))
    t.add_argument("--seed", type=int)
    t.add_argument("--eval-every", type=int)
    t.add_argument("--precision", choices=("f32", "f64"))
    t.add_argument("--no-augment", action="store_true")
    t.set_defaults(func=_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint directory")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--baseline", help="JSON report of a baseline for the multi-task delta")
    e.add_argument("--out")
    e.set_defaults(func=_eval)

    c = sub.add_parser("gradcheck", help="finite-difference check of a tiny model")
    c.add_argument("--variant", default="XTC", choices=("ST", "MT", "ALIGN", "XTC"))
    c.add_argument("--size", type=int, default=8)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--per-tensor", type=int, default=6)
    c.add_argument("--weighting", default="uncertainty", choices=("equal", "uncertainty", "gradnorm"))
    c.set_defaults(func=_gradcheck)

    v = sub.add_parser("verify-prop", help="enumerate predictor gaps on random discrete models")
    v.add_argument("--trials", type=int, default=1000)
    v.add_argument("--max-support", type=int, default=5)
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--tol", type=float, default=1e-12, help="slack allowed in the inequalities")
    v.add_argument("--group-tol", type=float, default=1e-9, help="tolerance for grouping equal values")
    v.add_argument("--tie-prone", action="store_true", help="sample models with repeated E[Z|X] values")
    v.add_argument("--ndjson", help="write per-trial reports here")
    v.set_defaults(func=_verify_prop)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except XtascError as exc:
        print(json.dumps({"error": exc.category, "message": str(exc)}), file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(json.dumps({"error": "io", "message": str(exc)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
