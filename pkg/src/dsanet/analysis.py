"""Cost models for the attention variants, attention statistics, heatmap export
and ablation tables.

Costs are counted in multiply-accumulates (madds). Softmax exponentials are
kept in their own column. Memory counts only the attention-specific buffers
(Q, K, V and the weight matrix) at 8 bytes per real.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from . import attention as A
from . import tensor as T
from .attention import AttentionRecord
from .detector.metrics import METRIC_NAMES
from .rng import stream

BYTES_PER_REAL = 8
# above this many attention positions the instrumented run is skipped
MEASURE_LIMIT = 4096


@dataclass
class CostReport:
    level: int | None
    variant: str
    C: int
    H: int
    W: int
    N: int
    N_prime: int
    d_k: int
    analytic_madds: int
    projection_madds: int
    attention_madds: int
    softmax_exps: int
    measured_madds: int | None
    measured_exps: int | None
    attn_matrix_entries: int
    attn_matrix_bytes: int
    peak_memory_bytes: int
    paper_formula_value: int

    @property
    def matches(self) -> bool | None:
        """True when the instrumented count agrees with the formula, None if not measured."""
        if self.measured_madds is None:
            return None
        return self.measured_madds == self.analytic_madds and self.measured_exps == self.softmax_exps

    def as_dict(self) -> dict:
        d = asdict(self)
        d["matches"] = self.matches
        return d

    def row(self) -> str:
        measured = "skipped" if self.measured_madds is None else f"{self.measured_madds:,}"
        return (f"{self.variant:<22} C={self.C:<4} {self.H}x{self.W:<5} N={self.N:<7} N'={self.N_prime:<7} "
                f"madds={self.analytic_madds:,} measured={measured} attn={self.attn_matrix_entries:,} "
                f"({self.attn_matrix_bytes / 1e9:.3f} GB) cubic={self.paper_formula_value:,}")


def _variant_name(strided: bool, stride_kernel: int) -> str:
    return f"strided-k{stride_kernel}" if strided else "self-attention"


def measure_self_attention(C: int, H: int, W: int, strided: bool = False, stride_kernel: int = 1,
                           seed: int = 0) -> tuple[int, int]:
    """Run one attention branch on a random input and return (madds, exps) counted by the kernels."""
    rng = stream(seed, "cost", C, H, W, strided, stride_kernel)
    p = A.make_self_attention_params(C, rng, strided, stride_kernel)
    f = T.Graph().input(rng.standard_normal((C, H, W)))
    with T.count_madds() as tally:
        A.branch_attention(f, p)
    return tally["madds"], tally["exps"]


def flops_self_attention(C: int, H: int, W: int, strided: bool = False, stride_kernel: int = 1,
                         level: int | None = None, measure: bool | None = None) -> CostReport:
    """Analytic and (for small maps) measured cost of one self-attention branch.

    Projections cost ``3 C^2 k^2 N'``; ``QK^T`` and ``AV`` cost ``N'^2 C`` each.
    ``N' = N`` for the plain branch and ``ceil(H/2) ceil(W/2)`` when strided.
    ``measure`` defaults to running the kernels only when ``N' <= MEASURE_LIMIT``.
    """
    if min(C, H, W) < 1:
        raise ValueError(f"C, H, W must be >= 1, got {C}, {H}, {W}")
    if strided and (H < 2 or W < 2):
        raise ValueError(f"strided attention needs H, W >= 2, got {H}x{W}")
    n = H * W
    k = stride_kernel if strided else 1
    n_eff = math.ceil(H / 2) * math.ceil(W / 2) if strided else n
    proj = 3 * C * C * k * k * n_eff
    core = 2 * n_eff * n_eff * C
    measured = exps = None
    if measure is None:
        measure = n_eff <= MEASURE_LIMIT
    if measure:
        measured, exps = measure_self_attention(C, H, W, strided, stride_kernel)
    entries = n_eff * n_eff
    return CostReport(
        level=level, variant=_variant_name(strided, stride_kernel), C=C, H=H, W=W, N=n, N_prime=n_eff, d_k=C,
        analytic_madds=proj + core, projection_madds=proj, attention_madds=core, softmax_exps=entries,
        measured_madds=measured, measured_exps=exps, attn_matrix_entries=entries,
        attn_matrix_bytes=BYTES_PER_REAL * entries,
        peak_memory_bytes=BYTES_PER_REAL * (entries + 3 * n_eff * C),
        paper_formula_value=C * n ** 3,
    )


def cost_grid(Cs: Sequence[int], Hs: Sequence[int], Ws: Sequence[int], strided: bool = False,
              stride_kernel: int = 1) -> list[CostReport]:
    return [flops_self_attention(c, h, w, strided, stride_kernel) for c in Cs for h in Hs for w in Ws]


def model_cost(cfg) -> list[CostReport]:
    """Cost of every self-attention branch a detector config instantiates."""
    if cfg.placement == "none" or cfg.variant != "self-attention":
        return []
    branches = 1 if cfg.shared else 2
    out = []
    for lv in cfg.active_dsa_levels:
        h, w = cfg.level_shapes()[lv - 3]
        strided = cfg.strided and lv in cfg.strided_levels and h >= 2 and w >= 2
        r = flops_self_attention(cfg.channels, h, w, strided, cfg.stride_kernel, level=lv)
        out.extend([r] * branches)
    return out


# -- attention statistics ------------------------------------------------------

@dataclass
class AttentionStats:
    row_entropy: np.ndarray  # nats, one per query
    mean_entropy: float
    max_entropy: float
    gamma: float
    n: int

    @property
    def bound(self) -> float:
        return math.log(self.n)


def row_entropy(weights: np.ndarray) -> np.ndarray:
    w = np.asarray(weights, dtype=float)
    logs = np.log(np.where(w > 0, w, 1.0))  # 0 ln 0 = 0
    return -(w * logs).sum(axis=1)


def attention_entropy(record: AttentionRecord) -> AttentionStats:
    if record.kind != "self-attention":
        raise ValueError(f"entropy needs row-stochastic self-attention weights, got a {record.kind} record")
    h = row_entropy(record.weights)
    return AttentionStats(h, float(h.mean()), float(h.max()), float(record.gamma), record.weights.shape[1])


# -- heatmaps ------------------------------------------------------------------

def heatmap_array(record: AttentionRecord, query: int = 0) -> np.ndarray:
    """H x W map: the weight row of ``query`` for self attention, the gate for CBAM."""
    h, w = record.grid
    if record.kind == "cbam":
        return np.asarray(record.weights).reshape(h, w)
    n = record.weights.shape[0]
    if not 0 <= query < n:
        raise IndexError(f"query {query} outside 0..{n - 1}")
    return np.asarray(record.weights[query]).reshape(h, w)


def write_pgm(path, values: np.ndarray) -> None:
    """ASCII PGM (P2), scaled so the file's maximum maps to 255."""
    values = np.asarray(values, dtype=float)
    top = values.max()
    scaled = np.zeros(values.shape, dtype=int) if top <= 0 else np.rint(np.clip(values, 0, None) / top * 255).astype(int)
    h, w = values.shape
    lines = ["P2", f"{w} {h}", "255"] + [" ".join(map(str, row)) for row in scaled.tolist()]
    _write(path, "\n".join(lines) + "\n")


def read_pgm(path) -> np.ndarray:
    tokens = [t for line in Path(path).read_text().splitlines() if not line.startswith("#") for t in line.split()]
    if not tokens or tokens[0] != "P2":
        raise ValueError(f"{path}: not an ASCII PGM file")
    w, h = int(tokens[1]), int(tokens[2])
    return np.array(tokens[4:4 + w * h], dtype=int).reshape(h, w)


def write_csv_map(path, values: np.ndarray) -> None:
    rows = [",".join(f"{v:.17g}" for v in row) for row in np.asarray(values, dtype=float).tolist()]
    _write(path, "\n".join(rows) + "\n")


def read_csv_map(path) -> np.ndarray:
    return np.loadtxt(path, delimiter=",", ndmin=2)


def _write(path, text: str) -> None:
    try:
        Path(path).write_text(text)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def export_heatmap(record: AttentionRecord, path, fmt: str = "pgm", query: int = 0) -> Path:
    values = heatmap_array(record, query)
    if fmt == "pgm":
        write_pgm(path, values)
    elif fmt == "csv":
        write_csv_map(path, values)
    else:
        raise ValueError(f"heatmap format must be pgm or csv, got {fmt!r}")
    return Path(path)


# -- ablation tables -------------------------------------------------------------

def config_digest(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class RunSummary:
    name: str
    metrics: dict[str, float]
    config: dict


ABLATION_COLUMNS = ("config",) + METRIC_NAMES + ("config_digest",)


def ablation_rows(runs: Sequence[RunSummary]) -> list[list]:
    if not runs:
        raise ValueError("ablation report needs at least one run")
    keys = {frozenset(r.metrics) for r in runs}
    if len(keys) != 1:
        raise ValueError("runs report different metric sets; cannot tabulate them together")
    missing = set(METRIC_NAMES) - set(next(iter(keys)))
    if missing:
        raise ValueError(f"runs lack metrics {sorted(missing)}")
    rows = []
    for r in sorted(runs, key=lambda r: r.name):
        rows.append([r.name] + [r.metrics[m] for m in METRIC_NAMES] + [config_digest(r.config)])
    return rows


def ablation_report(runs: Sequence[RunSummary], path) -> Path:
    rows = ablation_rows(runs)
    try:
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(ABLATION_COLUMNS)
            for row in rows:
                wr.writerow([row[0]] + [repr(float(v)) for v in row[1:-1]] + [row[-1]])
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e
    return Path(path)
