"""``dsanet`` command line.

Subcommands::

    gradcheck   finite-difference check of every differentiable op
    gen-data    write a synthetic dataset (FMAP images + JSON annotations)
    train       train one config; writes checkpoint, metrics.csv, report.json, loss.png
    eval        evaluate a checkpoint on the val split
    ablate      train a preset or an axis grid and tabulate ablation.csv
    cost        analytic vs measured attention cost for a shape grid
    attnmap     export attention heatmaps for one image

Every subcommand writes under ``--out`` (default ``runs/<subcommand>``).
Exit status is 0 only when everything it checked passed. Errors print a
single ``dsanet: error: ...`` line and exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import analysis, plotting
from .config import ConfigError, parse_config, parse_override
from .detector.checkpoint import CheckpointError
from .detector.train import TrainingDiverged
from .gradcheck import SUITE, run_suite
from .tensor import ShapeError


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.exit(2, f"dsanet: error: {message}\n")


def _config_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value file, or a report.json to replay")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override one config key (repeatable, later wins)")


def _out_arg(p: argparse.ArgumentParser, default: str) -> None:
    p.add_argument("--out", default=default, help=f"output directory (default {default})")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="dsanet", description="Decoupled self-attention detector toolkit")
    ap.add_argument("-q", "--quiet", action="store_true", help="only print results and errors")
    sub = ap.add_subparsers(dest="command", required=True, metavar="SUBCOMMAND")

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--probes", type=int, default=20)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--op", action="append", choices=sorted(SUITE), help="restrict to one op (repeatable)")
    _out_arg(p, "runs/gradcheck")

    p = sub.add_parser("gen-data", help="write a synthetic dataset")
    _config_args(p)
    _out_arg(p, "data")

    p = sub.add_parser("train", help="train one configuration")
    _config_args(p)
    _out_arg(p, "runs/train")
    p.add_argument("--min-loss-drop", type=float, default=None,
                   help="fail (exit 1) unless the loss fell by at least this fraction")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the val split")
    _config_args(p)
    _out_arg(p, "runs/eval")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("ablate", help="train a grid of configurations")
    _config_args(p)
    _out_arg(p, "runs/ablate")
    p.add_argument("--preset", choices=["core", "full"], help="named config set")
    p.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2",
                   help="grid axis (repeatable; the grid is the cartesian product)")
    p.add_argument("--parallel", type=int, default=1, help="grid points run concurrently in N processes")

    p = sub.add_parser("cost", help="attention cost reports")
    _out_arg(p, "runs/cost")
    p.add_argument("--C", type=int, nargs="+", default=[256])
    p.add_argument("--H", type=int, nargs="+", default=[75])
    p.add_argument("--W", type=int, nargs="+", default=[125])
    p.add_argument("--strided", action="store_true")
    p.add_argument("--stride-kernel", type=int, choices=[1, 3], default=1)
    p.add_argument("--measure", choices=["auto", "always", "never"], default="auto",
                   help="run the instrumented kernels (auto: only when N' <= %d)" % analysis.MEASURE_LIMIT)

    p = sub.add_parser("attnmap", help="export attention heatmaps")
    _config_args(p)
    _out_arg(p, "runs/attnmap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", help="FMAP image file (default: a val scene)")
    p.add_argument("--index", type=int, default=0, help="val scene index when --image is absent")
    p.add_argument("--format", choices=["pgm", "csv"], default="pgm")
    p.add_argument("--query", type=int, default=None, help="query position (default: map centre)")
    return ap


def _config(args):
    return parse_config(args.config, args.overrides)


def cmd_gradcheck(args, say) -> int:
    reports = run_suite(args.instances, args.tolerance, args.probes, args.seed, args.op)
    lines = [f"{'op':<32} {'max_abs':>11} {'max_rel':>11} {'probes':>6}  status"] + [r.row() for r in reports]
    print("\n".join(lines))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text("\n".join(lines) + "\n")
    failed = [r.op for r in reports if not r.passed]
    say(f"{len(reports) - len(failed)}/{len(reports)} ops pass at rel < {args.tolerance:g}")
    return 1 if failed else 0


def cmd_gen_data(args, say) -> int:
    from .scenes import make_dataset
    cfg = _config(args)
    ds = make_dataset(cfg.scene(), cfg.n_train, cfg.n_val, args.out)
    short = sum(1 for s in ds.train + ds.val if s.meta["placed"] < s.meta["requested"])
    say(f"wrote {len(ds.train)} train / {len(ds.val)} val scenes to {args.out} ({short} placed fewer objects than requested)")
    return 0


def _print_metrics(metrics: dict) -> None:
    print(" ".join(f"{k}={v:.4f}" for k, v in metrics.items()))


def cmd_train(args, say) -> int:
    from .runner import train_run
    cfg = _config(args)
    rep = train_run(cfg, args.out, log=say)
    _print_metrics(rep["metrics"])
    drop = rep["loss_drop"]
    if drop is not None:
        print(f"loss {rep['initial_loss']:.4f} -> {rep['final_epoch_loss']:.4f} (drop {100 * drop:.1f}%)")
    say(f"outputs in {args.out}")
    if args.min_loss_drop is not None and (drop is None or drop < args.min_loss_drop):
        print(f"loss drop below required {args.min_loss_drop:g}")
        return 1
    return 0


def cmd_eval(args, say) -> int:
    from .runner import eval_run
    rep = eval_run(_config(args), args.checkpoint, args.out)
    _print_metrics(rep["metrics"])
    return 0


def cmd_ablate(args, say) -> int:
    from .runner import PRESETS, ablate, expand_axes
    base = _config(args)
    grid: dict[str, dict] = dict(PRESETS[args.preset]) if args.preset else {}
    if args.axis:
        axes = []
        for item in args.axis:
            key, raw = parse_override(item)
            values = [v for v in raw.split(",") if v]
            if not values:
                raise ConfigError(f"axis {key} has no values")
            axes.append((key, values))
        grid.update(expand_axes(axes))
    if not grid:
        raise ConfigError("ablate needs --preset or at least one --axis")
    reports = ablate(base, grid, args.out, args.parallel, log=say)
    print(f"{'config':<22} " + " ".join(f"{m:>6}" for m in ("AP", "AP50", "AP75")))
    for name in sorted(reports):
        m = reports[name]["metrics"]
        print(f"{name:<22} " + " ".join(f"{m[k]:6.4f}" for k in ("AP", "AP50", "AP75")))
    say(f"{len(reports)} runs, table in {Path(args.out) / 'ablation.csv'}")
    return 0


def cmd_cost(args, say) -> int:
    measure = {"auto": None, "always": True, "never": False}[args.measure]
    reports = [analysis.flops_self_attention(c, h, w, args.strided, args.stride_kernel, measure=measure)
               for c in args.C for h in args.H for w in args.W]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for r in reports:
        print(r.row())
    (out / "cost.json").write_text(json.dumps({"cost": [r.as_dict() for r in reports]}, indent=2))
    if len({r.N for r in reports}) > 1:
        plotting.plot_cost_scaling(reports, out / "cost.png")
    bad = [r for r in reports if r.matches is False]
    for r in bad:
        print(f"measured {r.measured_madds} != analytic {r.analytic_madds} for C={r.C} {r.H}x{r.W}")
    return 1 if bad else 0


def cmd_attnmap(args, say) -> int:
    from .runner import attnmap_run
    entries = attnmap_run(_config(args), args.checkpoint, args.out, args.image, args.index, args.format, args.query)
    for e in entries:
        extra = f" entropy {e['mean_entropy']:.3f}/{e['entropy_bound']:.3f}" if "mean_entropy" in e else ""
        print(f"P{e['level']} {e['branch']:<6} {e['kind']:<14} {e['grid'][0]}x{e['grid'][1]} -> {e['file']}{extra}")
    return 0


COMMANDS = {
    "gradcheck": cmd_gradcheck,
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "cost": cmd_cost,
    "attnmap": cmd_attnmap,
}

EXPECTED = (ConfigError, CheckpointError, ShapeError, TrainingDiverged, ValueError, IndexError, OSError, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="dsanet: warning: %(message)s")

    def say(msg: str) -> None:
        if not args.quiet:
            print(msg, file=sys.stderr)

    try:
        return COMMANDS[args.command](args, say)
    except EXPECTED as e:
        msg = str(e).splitlines()[0] if str(e) else type(e).__name__
        print(f"dsanet: error: {msg}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
