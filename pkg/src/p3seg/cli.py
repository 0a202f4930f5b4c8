"""Command line entry point: ``p3seg <command> ...``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, report
from .data import Corpus, generate_corpus, generate_sample, write_pgm
from .mixer import default_epsilon, make_region_mask, mix_images, mix_labels
from .model import load_checkpoint
from .schedule import RampParams, dump_csv, solve_curve
from .trainer import NumericFailure, TrainConfig, evaluate, run_many, train

EXIT_CONFIG = 2
EXIT_NUMERIC = 3

AXES = ("curve", "period", "bounds", "components")


def ablation_variants(axis: str, base: TrainConfig) -> list[tuple[str, dict]]:
    """``(label, overrides)`` pairs for one ablation axis."""
    if axis == "curve":
        return [(f"curve={c}", {"curve": c}) for c in
                ("exp", "linear", "step", "early", "late", "constant")]
    if axis == "period":
        T = base.period_T
        periods = sorted({max(2, T // 2), T, T * 3 // 2, T * 2})
        out = [(f"T={t:06d}", {"period_T": t}) for t in periods if t < base.stage2_iters]
        return out + [(f"T={base.stage2_iters:06d} (single)", {"period_T": max(2, base.stage2_iters)})]
    if axis == "bounds":
        return [(f"bounds={lo:.2f}-{hi:.2f}", {"lower": lo, "upper": hi})
                for lo in (0.15, 0.25, 0.35) for hi in (0.8, 0.9, 1.0)]
    if axis == "components":
        return [("1 pre-warm", {"p3m": False}),
                ("2 pre-warm+mix", {"boundary_loss": False}),
                ("3 pre-warm+mix+boundary", {})]
    raise ValueError(f"unknown ablation axis {axis!r}")


def ablation_configs(axis: str, base: TrainConfig, seeds, out_root) -> list[TrainConfig]:
    configs = []
    for label, overrides in ablation_variants(axis, base):
        slug = label.split(" ")[0].replace("=", "_")
        for s in seeds:
            out = Path(out_root) / axis / slug / f"seed{s}"
            configs.append(dataclasses.replace(base, label=label, seed=s, out_dir=str(out), **overrides))
    return configs


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(args) -> int:
    m = generate_corpus(args.out, seed=args.seed, N=args.N, H=args.size, W=args.size,
                        n_classes=args.classes, labeled_fraction=args.labeled_fraction,
                        test_count=args.test_count)
    print(f"wrote {m.N} training samples ({m.N_s} labeled) and {len(m.test)} test samples to {args.out}")
    return 0


def load_config(path, overrides=()) -> TrainConfig:
    cfg = TrainConfig.from_json(path) if path else TrainConfig()
    d = dataclasses.asdict(cfg)
    for item in overrides:
        key, _, raw = item.partition("=")
        try:
            d[key] = json.loads(raw)
        except json.JSONDecodeError:
            d[key] = raw
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    cfg = load_config(args.config, args.set)
    _, summary = train(cfg)
    print(json.dumps({k: summary[k] for k in ("dice", "jaccard", "hd95", "asd")}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    params = load_checkpoint(args.ckpt)
    corpus = Corpus(args.corpus)
    out = args.out or Path(args.ckpt).with_name("metrics.csv")
    _, summary = evaluate(params, corpus, csv_path=out)
    print(f"dice {summary['dice']:.2f} jaccard {summary['jaccard']:.2f} "
          f"hd95 {summary['hd95']:.2f} asd {summary['asd']:.2f} -> {out}")
    return 0


def cmd_schedule(args) -> int:
    p = solve_curve(args.period, args.lower, args.upper, args.curve, args.constant)
    r = RampParams(max_iter=args.max_iter or args.iters)
    text = dump_csv(p, r, args.iters)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_mix(args) -> int:
    H = W = args.size
    a = generate_sample(args.seed, "preview-u", H, W, 4)
    b = generate_sample(args.seed, "preview-s", H, W, 4)
    eps = args.eps or default_epsilon(H, W)
    plan = make_region_mask(H, W, args.alpha, np.random.default_rng(args.seed), eps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    mixed = mix_images(a.image[0], b.image[0], plan)
    write_pgm(out / "mixed.pgm", np.round(mixed * 65535), 65535)
    write_pgm(out / "mixed_label.pgm", mix_labels(a.label, b.label, plan) * 85, 255)
    write_pgm(out / "region_mask.pgm", plan.region_mask * 255, 255)
    write_pgm(out / "band_mask.pgm", plan.band_mask * 255, 255)
    h0, w0, h1, w1 = plan.box
    print(f"box rows {h0}:{h1} cols {w0}:{w1}, epsilon {eps}, band pixels {int(plan.band_mask.sum())}"
          f" -> {out}")
    return 0


def cmd_gradcheck(args) -> int:
    results = gradcheck.run_all(args.instances, args.seed)
    print(gradcheck.format_table(results))
    return 0 if all(r.passed for r in results) else EXIT_NUMERIC


def cmd_ablate(args) -> int:
    base = load_config(args.config, args.set)
    configs = ablation_configs(args.axis, base, args.seeds, args.out)
    run_many(configs, Corpus(base.corpus))
    table = report.build_ablation_table([c.out_dir for c in configs], args.axis,
                                        Path(args.out) / args.axis / "ablation.md")
    print(table.to_markdown())
    return 0


def cmd_report(args) -> int:
    paths = report.write_report(args.runs, args.out, args.axis)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="p3seg", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="write a synthetic corpus")
    p.add_argument("--out", default="corpus")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--N", type=int, default=200)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--labeled-fraction", type=float, default=0.05)
    p.add_argument("--test-count", type=int, default=40)
    p.set_defaults(fn=cmd_gen_corpus)

    set_help = "override a config field, e.g. --set stage2_iters=200 (repeatable)"
    p = sub.add_parser("train", help="run both stages and evaluate")
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help=set_help)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("schedule", help="schedule tools")
    ssub = p.add_subparsers(dest="action", required=True)
    d = ssub.add_parser("dump", help="CSV of alpha, lambda and lr factor per iteration")
    d.add_argument("--period", type=int, default=8000)
    d.add_argument("--lower", type=float, default=0.25)
    d.add_argument("--upper", type=float, default=0.9)
    d.add_argument("--iters", type=int, default=16000)
    d.add_argument("--max-iter", type=int)
    d.add_argument("--curve", default="exp")
    d.add_argument("--constant", type=float, default=0.5)
    d.add_argument("--out")
    d.set_defaults(fn=cmd_schedule)

    p = sub.add_parser("mix", help="mixing tools")
    msub = p.add_subparsers(dest="action", required=True)
    m = msub.add_parser("preview", help="write a mixed pair and its masks as PGM")
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--alpha", type=float, default=0.5)
    m.add_argument("--eps", type=int)
    m.add_argument("--size", type=int, default=64)
    m.add_argument("--out", default="mix_preview")
    m.set_defaults(fn=cmd_mix)

    p = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train every variant of one axis over several seeds")
    p.add_argument("--axis", choices=AXES, required=True)
    p.add_argument("--config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help=set_help)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="ablation")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="summary, schedule plot and ablation table")
    p.add_argument("--runs", nargs="+", required=True)
    p.add_argument("--out", default="report")
    p.add_argument("--axis", default="variant")
    p.set_defaults(fn=cmd_report)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (NumericFailure, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
