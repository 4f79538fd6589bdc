"""Train/eval/ablation runs with their on-disk outputs.

Layout of one run directory::

    checkpoint.dsackpt   parameters after the last epoch
    metrics.csv          one row per epoch (loss means, lr, eval metrics)
    report.json          config echo, seeds, metrics, loss digest, cost, gammas
    loss.png             per-step loss components

An ablation writes one run directory per config plus ``ablation.csv`` and
``ablation.png`` at its root.
"""
from __future__ import annotations

import csv
import hashlib
import json
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path
from typing import Callable

import numpy as np

from . import analysis, plotting
from .config import RunConfig, coerce
from .detector.checkpoint import load_into, save_checkpoint
from .detector.metrics import METRIC_NAMES
from .detector.model import Detector, forward
from .detector.train import TrainState, anchors_for, evaluate_ap, lr_at_epoch, train_epoch
from .scenes import Dataset, load_dataset, make_dataset
from .tensor import read_fmap

LOSS_FIELDS = ("total", "focal", "box", "confidence")
CSV_COLUMNS = ("epoch", "lr", "steps") + tuple(f"loss_{k}" for k in LOSS_FIELDS) + METRIC_NAMES

PRESETS: dict[str, dict[str, dict]] = {
    "core": {
        "baseline": {"placement": "none"},
        "dsa": {},
        "dsa-shared": {"shared": True},
        "dsa-after": {"placement": "after"},
        "dsa-gamma1": {"gamma_mode": "fixed"},
        "dsa-conf": {"with_confidence": True, "score_mode": "cls_x_conf"},
    },
}
PRESETS["full"] = {
    **PRESETS["core"],
    "dsa-conf-cls": {"with_confidence": True, "score_mode": "cls"},
    "dsa-3-7": {"dsa_levels": "3-7"},
    "cbam-3-7": {"variant": "cbam", "dsa_levels": "3-7"},
    "dsa-3-7-strided-k1": {"dsa_levels": "3-7", "strided": True, "stride_kernel": 1},
    "dsa-3-7-strided-k3": {"dsa_levels": "3-7", "strided": True, "stride_kernel": 3},
}

_DATA_CACHE: dict = {}


def get_dataset(cfg: RunConfig) -> Dataset:
    """Dataset named by ``data_dir``, or generated in memory from the scene keys."""
    if cfg.data_dir:
        root = Path(cfg.data_dir)
        if not (root / "manifest.json").exists():
            raise FileNotFoundError(f"no dataset manifest at {root / 'manifest.json'}")
        key = ("dir", str(root.resolve()))
    else:
        key = ("gen", json.dumps(asdict(cfg.scene()), sort_keys=True), cfg.n_train, cfg.n_val)
    ds = _DATA_CACHE.get(key)
    if ds is None:
        ds = load_dataset(cfg.data_dir) if cfg.data_dir else make_dataset(cfg.scene(), cfg.n_train, cfg.n_val)
        _DATA_CACHE.clear()
        _DATA_CACHE[key] = ds
    return ds


def trace_digest(values) -> str:
    return hashlib.sha256(" ".join(repr(float(v)) for v in values).encode()).hexdigest()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_metrics_csv(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(CSV_COLUMNS)
        for r in rows:
            wr.writerow([_fmt(r.get(c)) for c in CSV_COLUMNS])


def gammas(model: Detector) -> dict[str, float]:
    return {n: float(a) for n, a in model.params.items() if n.endswith(".gamma")}


def cost_section(model: Detector) -> list[dict]:
    out = []
    for r in analysis.model_cost(model.cfg):
        d = r.as_dict()
        if d not in out:
            out.append(d)
    return out


def train_run(cfg: RunConfig, out_dir=None, dataset: Dataset | None = None,
              log: Callable[[str], None] | None = None, plots: bool = True) -> dict:
    """Train ``cfg`` from scratch, evaluate on the val split and write outputs."""
    log = log or (lambda s: None)
    ds = dataset or get_dataset(cfg)
    model = Detector(cfg.detector(), cfg.seed)
    state = TrainState(model, cfg.optimizer(), cfg.seed)
    anchors = anchors_for(model)
    rows: list[dict] = []
    metrics: dict[str, float] = {}
    epochs = cfg.epochs
    steps_per_epoch = 0
    t0 = time.perf_counter()
    for ep in range(1, epochs + 1):
        lr = lr_at_epoch(ep, cfg.lr, epochs)
        parts = train_epoch(state, ds.train, lr, anchors)
        steps_per_epoch = len(parts)
        row = {"epoch": ep, "lr": lr, "steps": state.step}
        for k in LOSS_FIELDS:
            row[f"loss_{k}"] = float(np.mean([getattr(p, k) for p in parts]))
        if ep == epochs or (cfg.eval_every and ep % cfg.eval_every == 0):
            metrics = evaluate_ap(model, ds.val)
            row.update(metrics)
        rows.append(row)
        log(f"[{cfg.name}] epoch {ep}/{epochs} lr {lr:g} loss {row['loss_total']:.4f}"
            + (f" AP {metrics['AP']:.4f}" if "AP" in row else ""))
    if epochs == 0:
        metrics = evaluate_ap(model, ds.val)
        rows.append({"epoch": 0, "lr": 0.0, "steps": 0, **metrics})
    train_seconds = time.perf_counter() - t0

    totals = [t.total for t in state.trace]
    initial = totals[0] if totals else None
    final = rows[-1].get("loss_total") if totals else None
    report = {
        "name": cfg.name,
        "config": cfg.to_dict(),
        "seeds": {"seed": cfg.seed, "data_seed": cfg.data_seed},
        "epochs": epochs,
        "steps": state.step,
        "initial_loss": initial,
        "final_epoch_loss": final,
        "loss_drop": (1 - final / initial) if totals else None,
        "metrics": metrics,
        "loss_trace_sha256": trace_digest(totals),
        "loss_trace": [{k: getattr(t, k) for k in LOSS_FIELDS} for t in state.trace],
        "gammas": gammas(model),
        "dsa_param_count": model.dsa_param_count(),
        "cost": cost_section(model),
        "timing": {"train_seconds": train_seconds},
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(out / "checkpoint.dsackpt", model.params)
        write_metrics_csv(out / "metrics.csv", rows)
        if plots and totals:
            plotting.plot_loss_curve(report["loss_trace"], out / "loss.png", steps_per_epoch, cfg.name)
        (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


def load_model(cfg: RunConfig, checkpoint) -> Detector:
    model = Detector(cfg.detector(), cfg.seed)
    load_into(model, checkpoint)
    return model


def eval_run(cfg: RunConfig, checkpoint, out_dir=None) -> dict:
    model = load_model(cfg, checkpoint)
    metrics = evaluate_ap(model, get_dataset(cfg).val)
    report = {
        "name": cfg.name,
        "config": cfg.to_dict(),
        "seeds": {"seed": cfg.seed, "data_seed": cfg.data_seed},
        "checkpoint": str(checkpoint),
        "metrics": metrics,
        "gammas": gammas(model),
        "cost": cost_section(model),
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_metrics_csv(out / "metrics.csv", [{"epoch": "eval", **metrics}])
        (out / "report.json").write_text(json.dumps(report, indent=2))
    return report


# -- ablations -------------------------------------------------------------------

def expand_axes(axes: list[tuple[str, list[str]]]) -> dict[str, dict]:
    """Cartesian grid over ``key=v1,v2`` axes, named ``key-v1_key2-v2``."""
    grid: dict[str, dict] = {"": {}}
    for key, values in axes:
        coerce(key, values[0])  # fail early on unknown keys
        grid = {
            (f"{name}_" if name else "") + f"{key}-{v}": {**over, key: v}
            for name, over in grid.items() for v in values
        }
    return grid


def _run_job(job, log=None):
    base, name, over, out_dir = job
    cfg = base.with_overrides({**over, "name": name})
    return name, train_run(cfg, out_dir, log=log)


def ablate(base: RunConfig, grid: dict[str, dict], out_dir, parallel: int = 1,
           log: Callable[[str], None] | None = None) -> dict:
    """Train every grid point, then tabulate them into ``ablation.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    jobs = [(base, name, over, out / name) for name, over in grid.items()]
    for _, name, over, _ in jobs:
        base.with_overrides(over)  # validate every point before any training
    reports: dict[str, dict] = {}
    if parallel > 1:
        with ProcessPoolExecutor(max_workers=parallel) as ex:
            for name, rep in ex.map(_run_job, jobs):
                reports[name] = rep
                if log:
                    log(f"[{name}] done AP {rep['metrics']['AP']:.4f}")
    else:
        for job in jobs:
            name, rep = _run_job(job, log)
            reports[name] = rep
    runs = [analysis.RunSummary(n, r["metrics"], r["config"]) for n, r in reports.items()]
    analysis.ablation_report(runs, out / "ablation.csv")
    rows = [(r[0], dict(zip(METRIC_NAMES, r[1:-1]))) for r in analysis.ablation_rows(runs)]
    plotting.plot_ablation(rows, out / "ablation.png")
    summary = {
        "runs": {n: {"metrics": r["metrics"], "initial_loss": r["initial_loss"],
                     "final_epoch_loss": r["final_epoch_loss"], "config_digest": analysis.config_digest(r["config"])}
                 for n, r in sorted(reports.items())},
    }
    (out / "ablation.json").write_text(json.dumps(summary, indent=2))
    return reports


# -- attention maps --------------------------------------------------------------

def attnmap_run(cfg: RunConfig, checkpoint, out_dir, image=None, index: int = 0, fmt: str = "pgm",
                query: int | None = None) -> list[dict]:
    """Export every captured attention map for one image.

    ``image`` is an FMAP file; without it, val scene ``index`` is used.
    ``query`` defaults to the centre position of each map.
    """
    model = load_model(cfg, checkpoint)
    if image is not None:
        img = read_fmap(image)
    else:
        val = get_dataset(cfg).val
        if not 0 <= index < len(val):
            raise IndexError(f"val index {index} outside 0..{len(val) - 1}")
        img = val[index].image
    fr = forward(model, img, capture=True)
    if not fr.records:
        raise ValueError("model has no attention modules to export (placement none?)")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for rec in fr.records:
        h, w = rec.grid
        q = query if query is not None else (h // 2) * w + w // 2
        q = 0 if rec.kind == "cbam" else q
        stem = f"P{rec.level}_{rec.branch}"
        path = analysis.export_heatmap(rec, out / f"{stem}.{fmt}", fmt, q)
        values = analysis.heatmap_array(rec, q)
        marker = None if rec.kind == "cbam" else divmod(q, w)
        plotting.plot_heatmap(values, out / f"{stem}.png", f"P{rec.level} {rec.branch}", marker)
        entry = {"level": rec.level, "branch": rec.branch, "kind": rec.kind, "grid": [h, w],
                 "gamma": rec.gamma, "file": path.name}
        if rec.kind == "self-attention":
            st = analysis.attention_entropy(rec)
            entry.update(query=q, mean_entropy=st.mean_entropy, max_entropy=st.max_entropy, entropy_bound=st.bound)
        written.append(entry)
    (out / "attnmap.json").write_text(json.dumps(written, indent=2))
    return written
