"""Spatial attention branches and the two-branch decoupled module.

Two ways of weighting spatial positions live here:

* ``cbam_spatial_attention``: a 7x7 conv over the channel max/mean maps,
  squashed by a sigmoid into a per-position gate shared by all channels.
* ``self_attention_branch``: 1x1 query/key/value projections and row-softmax
  of ``QK^T / sqrt(d_k)`` so every output position mixes all input positions.

Either branch output is merged back as ``f + gamma * att`` with gamma
starting at zero, so a fresh module is the identity.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import ConvWeights, Graph, Node, ShapeError

VARIANTS = ("self-attention", "cbam")


@dataclass
class SelfAttentionParams:
    wq: ConvWeights
    wk: ConvWeights
    wv: ConvWeights
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(()))
    name: str = "sa"

    def __post_init__(self):
        shapes = {(c.weight.shape, c.stride, c.padding) for c in (self.wq, self.wk, self.wv)}
        if len(shapes) != 1:
            raise ShapeError(f"q/k/v projections differ in shape or stride: {sorted(shapes)}")
        self.gamma = T.as_real(self.gamma)

    @property
    def strided(self) -> bool:
        return self.wq.stride == 2

    @property
    def n_params(self) -> int:
        return self.wq.n_params + self.wk.n_params + self.wv.n_params + 1

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for key in ("wq", "wk", "wv"):
            cw = getattr(self, key)
            out[f"{self.name}.{key}.w"] = cw.weight
            out[f"{self.name}.{key}.b"] = cw.bias
        out[f"{self.name}.gamma"] = self.gamma
        return out


@dataclass
class CbamParams:
    w7: ConvWeights
    gamma: np.ndarray = field(default_factory=lambda: np.zeros(()))
    name: str = "cbam"

    def __post_init__(self):
        if self.w7.weight.shape != (1, 2, 7, 7) or self.w7.padding != 3:
            raise ShapeError(f"CBAM conv must be 1x2x7x7 with padding 3, got {self.w7.weight.shape}")
        self.gamma = T.as_real(self.gamma)

    @property
    def n_params(self) -> int:
        return self.w7.n_params + 1

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            f"{self.name}.w7.w": self.w7.weight,
            f"{self.name}.w7.b": self.w7.bias,
            f"{self.name}.gamma": self.gamma,
        }


@dataclass
class DsaModuleParams:
    """Parameters of one module: a classification and a localization branch.

    In shared mode both fields hold the same object.
    """

    cls_branch: SelfAttentionParams | CbamParams
    loc_branch: SelfAttentionParams | CbamParams
    shared: bool = False
    variant: str = "self-attention"
    strided: bool = False
    stride_kernel: int = 1

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.shared and self.cls_branch is not self.loc_branch:
            raise ValueError("shared module must use one parameter object for both branches")
        if not self.shared and self.cls_branch is self.loc_branch:
            raise ValueError("decoupled module needs distinct branch parameters")

    def branches(self):
        return [self.cls_branch] if self.shared else [self.cls_branch, self.loc_branch]

    @property
    def n_params(self) -> int:
        return sum(b.n_params for b in self.branches())

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for b in self.branches():
            out.update(b.arrays())
        return out


@dataclass
class AttentionRecord:
    level: int | None
    branch: str
    kind: str  # "self-attention" or "cbam"
    weights: np.ndarray  # (N, N) row-stochastic, or (1, H, W) mask
    grid: tuple[int, int]  # spatial dims the weights index
    gamma: float


def init_uniform(rng: np.random.Generator, cout: int, cin: int, k: int) -> np.ndarray:
    bound = 1.0 / math.sqrt(cin * k * k)
    return rng.uniform(-bound, bound, size=(cout, cin, k, k))


def make_self_attention_params(channels: int, rng: np.random.Generator, strided: bool = False,
                               stride_kernel: int = 1, name: str = "sa", gamma: float = 0.0) -> SelfAttentionParams:
    if strided:
        if stride_kernel not in (1, 3):
            raise ValueError(f"stride kernel must be 1 or 3, got {stride_kernel}")
        k, s, p = stride_kernel, 2, (1 if stride_kernel == 3 else 0)
    else:
        k, s, p = 1, 1, 0
    proj = [ConvWeights(init_uniform(rng, channels, channels, k), np.zeros(channels), s, p) for _ in range(3)]
    return SelfAttentionParams(*proj, gamma=np.array(float(gamma)), name=name)


def make_cbam_params(rng: np.random.Generator, name: str = "cbam", gamma: float = 0.0) -> CbamParams:
    return CbamParams(ConvWeights(init_uniform(rng, 1, 2, 7), np.zeros(1), 1, 3), gamma=np.array(float(gamma)), name=name)


def make_dsa_params(channels: int, rng: np.random.Generator, variant: str = "self-attention", shared: bool = False,
                    strided: bool = False, stride_kernel: int = 1, name: str = "dsa", gamma: float = 0.0,
                    rng_loc: np.random.Generator | None = None) -> DsaModuleParams:
    def build(branch, r):
        if variant == "cbam":
            return make_cbam_params(r, f"{name}.{branch}", gamma)
        return make_self_attention_params(channels, r, strided, stride_kernel, f"{name}.{branch}", gamma)

    if shared:
        p = build("shared", rng)
        return DsaModuleParams(p, p, True, variant, strided, stride_kernel)
    return DsaModuleParams(build("cls", rng), build("loc", rng_loc or rng), False, variant, strided, stride_kernel)


# -- operations ---------------------------------------------------------------

def cbam_spatial_attention(f: Node, p: CbamParams) -> tuple[Node, Node]:
    """Return (mask 1xHxW, gated features) for CBAM-style spatial attention."""
    pooled = T.channel_pool_concat(f)
    mask = T.sigmoid(T.conv(pooled, p.w7, f"{p.name}.w7"))
    return mask, T.mul(f, mask)


def scaled_dot_attention(q: Node, k: Node, v: Node) -> tuple[Node, Node]:
    """``softmax(q k^T / sqrt(d_k)) v`` for (N, d_k) inputs; returns (output, weights)."""
    n, dk = q.shape
    if n == 0 or dk == 0:
        raise ShapeError(f"attention needs N >= 1 and d_k >= 1, got N={n}, d_k={dk}")
    if k.shape != (n, dk) or v.shape != (n, dk):
        raise ShapeError(f"q/k/v shapes disagree: {q.shape}, {k.shape}, {v.shape}")
    scores = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(dk))
    weights = T.softmax_rows(scores)
    return T.matmul(weights, v), weights


def _tokens(x: Node) -> Node:
    c, h, w = x.shape
    return T.transpose(T.reshape(x, (c, h * w)))


def _attend(f: Node, p: SelfAttentionParams) -> tuple[Node, Node, tuple[int, int]]:
    if f.shape[0] != p.wq.in_channels:
        raise ShapeError(f"channels: input has {f.shape[0]}, projections expect {p.wq.in_channels}")
    q = T.conv(f, p.wq, f"{p.name}.wq")
    k = T.conv(f, p.wk, f"{p.name}.wk")
    v = T.conv(f, p.wv, f"{p.name}.wv")
    c, h, w = v.shape
    out, weights = scaled_dot_attention(_tokens(q), _tokens(k), _tokens(v))
    return T.reshape(T.transpose(out), (c, h, w)), weights, (h, w)


def self_attention_branch(f: Node, p: SelfAttentionParams, capture: bool = False):
    """Plain (stride 1) self attention over all H*W positions of ``f``."""
    if p.strided:
        raise ValueError("self_attention_branch needs stride-1 projections; use strided_self_attention_branch")
    att, weights, grid = _attend(f, p)
    rec = AttentionRecord(None, p.name, "self-attention", weights.value.copy(), grid, float(p.gamma)) if capture else None
    return att, rec


def strided_self_attention_branch(f: Node, p: SelfAttentionParams, capture: bool = False):
    """Attention on stride-2 projections, nearest-upsampled back to f's size."""
    if not p.strided:
        raise ValueError("strided branch needs stride-2 projections")
    _, h, w = f.shape
    if h < 2 or w < 2:
        raise ShapeError(f"height/width: strided attention needs both >= 2, got {h}x{w}")
    small, weights, grid = _attend(f, p)
    att = T.crop(T.nearest_upsample(small, 2), h, w)
    rec = AttentionRecord(None, p.name, "self-attention", weights.value.copy(), grid, float(p.gamma)) if capture else None
    return att, rec


def residual_combine(f: Node, att: Node, gamma) -> Node:
    """``f + gamma * att``; gamma may be a scalar node or a float."""
    if f.shape != att.shape:
        raise ShapeError(f"residual shapes differ: {f.shape} vs {att.shape}")
    if not isinstance(gamma, Node):
        gamma = f.graph.const(float(gamma))
    return T.add(f, T.mul(gamma, att))


def branch_attention(f: Node, p, capture: bool = False):
    if isinstance(p, CbamParams):
        mask, att = cbam_spatial_attention(f, p)
        rec = None
        if capture:
            _, h, w = f.shape
            rec = AttentionRecord(None, p.name, "cbam", mask.value.copy(), (h, w), float(p.gamma))
        return att, rec
    if p.strided:
        return strided_self_attention_branch(f, p, capture)
    return self_attention_branch(f, p, capture)


def apply_branch(f: Node, p, capture: bool = False, gamma_trainable: bool = True):
    att, rec = branch_attention(f, p, capture)
    g = f.graph
    gamma = g.param(p.gamma, f"{p.name}.gamma") if gamma_trainable else g.const(p.gamma)
    return residual_combine(f, att, gamma), rec


def dsa_forward(f: Node, p: DsaModuleParams, capture: bool = False, gamma_trainable: bool = True):
    """Return (cls_feature, loc_feature, records)."""
    cls_out, rec_c = apply_branch(f, p.cls_branch, capture, gamma_trainable)
    if p.shared:
        return cls_out, cls_out, [r for r in (rec_c,) if r]
    loc_out, rec_l = apply_branch(f, p.loc_branch, capture, gamma_trainable)
    return cls_out, loc_out, [r for r in (rec_c, rec_l) if r]


def dsa_numpy(f: np.ndarray, p: DsaModuleParams) -> tuple[np.ndarray, np.ndarray]:
    """Forward-only convenience wrapper on a plain array."""
    g = Graph()
    c, l, _ = dsa_forward(g.input(f), p)
    return c.value, l.value
