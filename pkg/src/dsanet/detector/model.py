"""Toy FPN + RetinaNet-style heads with optional DSA modules.

Backbone (all 3x3 stride-2 convs, ReLU)::

    image 3xSxS -> c1 (S/2) -> c2 (S/4) -> C3 (S/8) -> C4 (S/16) -> C5 (S/32)
    P6 = conv(C5), P7 = conv(relu(P6))

Top-down fusion with 1x1 laterals: ``P5 = L5``, ``P4 = L4 + up(P5)``,
``P3 = L3 + up(P4)``. Heads are stacks of 1x1 convs shared over levels, so
they run once over all pyramid positions laid side by side.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .. import tensor as T
from ..attention import (
    CbamParams,
    DsaModuleParams,
    SelfAttentionParams,
    apply_branch,
    init_uniform,
)
from ..rng import stream
from ..tensor import ConvWeights, Graph, Node, ShapeError

LEVELS = (3, 4, 5, 6, 7)
PLACEMENTS = ("before", "after", "none")
SCORE_MODES = ("cls", "cls_x_conf")
PRIOR = 0.01


@dataclass
class DetectorConfig:
    image_size: int = 64
    channels: int = 16
    classes: int = 4
    anchors: int = 3
    head_depth: int = 4
    dsa_levels: tuple[int, ...] = (4, 5, 6, 7)
    placement: str = "before"
    variant: str = "self-attention"
    shared: bool = False
    strided: bool = False
    stride_kernel: int = 1
    strided_levels: tuple[int, ...] = (3,)
    gamma_mode: str = "learned"
    with_confidence: bool = False
    nms_iou: float = 0.5
    score_mode: str = "cls"
    score_floor: float = 0.05
    max_dets: int = 100
    pre_nms_top: int = 1000
    pos_iou: float = 0.5
    neg_iou: float = 0.4
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    smooth_l1_beta: float = 1.0

    def __post_init__(self):
        self.dsa_levels = tuple(sorted(set(self.dsa_levels)))
        self.strided_levels = tuple(sorted(set(self.strided_levels)))
        if not set(self.dsa_levels) <= set(LEVELS):
            raise ValueError(f"dsa_levels {self.dsa_levels} not within pyramid levels {LEVELS}")
        if self.placement not in PLACEMENTS:
            raise ValueError(f"placement must be one of {PLACEMENTS}, got {self.placement!r}")
        if self.score_mode not in SCORE_MODES:
            raise ValueError(f"score_mode must be one of {SCORE_MODES}, got {self.score_mode!r}")
        if self.score_mode == "cls_x_conf" and not self.with_confidence:
            raise ValueError("score_mode cls_x_conf requires with_confidence")
        if self.gamma_mode not in ("learned", "fixed"):
            raise ValueError(f"gamma_mode must be learned or fixed, got {self.gamma_mode!r}")
        if self.stride_kernel not in (1, 3):
            raise ValueError(f"stride_kernel must be 1 or 3, got {self.stride_kernel}")
        if self.head_depth < 1 or self.channels < 1 or self.classes < 1 or self.anchors < 1:
            raise ValueError("head_depth, channels, classes and anchors must be >= 1")
        if not 0 <= self.neg_iou <= self.pos_iou <= 1:
            raise ValueError(f"need 0 <= neg_iou <= pos_iou <= 1, got {self.neg_iou}, {self.pos_iou}")

    @property
    def active_dsa_levels(self) -> tuple[int, ...]:
        return () if self.placement == "none" else self.dsa_levels

    def level_shapes(self) -> list[tuple[int, int]]:
        return [level_shape(self.image_size, lv) for lv in LEVELS]


def level_shape(image_size: int, level: int) -> tuple[int, int]:
    n = max(1, math.ceil(image_size / 2 ** level))
    return n, n


@dataclass
class FeaturePyramid:
    levels: list[tuple[int, int, Node]]  # (level, stride, map)

    def maps(self) -> list[Node]:
        return [m for _, _, m in self.levels]

    def ids(self) -> list[int]:
        return [lv for lv, _, _ in self.levels]

    def arrays(self) -> list[np.ndarray]:
        return [m.value for m in self.maps()]


# -- parameters ---------------------------------------------------------------

def _he(rng, cout, cin, k):
    return rng.normal(0.0, math.sqrt(2.0 / (cin * k * k)), size=(cout, cin, k, k))


class Detector:
    """All parameters of one detector. ``params`` maps names to the live arrays."""

    def __init__(self, cfg: DetectorConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        self.params: dict[str, np.ndarray] = {}
        c, a, k = cfg.channels, cfg.anchors, cfg.classes

        def conv_w(name, cout, cin, ksize, stride, pad, init="he", bias=0.0):
            rng = stream(seed, "param", name)
            if init == "he":
                w = _he(rng, cout, cin, ksize)
            elif init == "small":
                w = rng.normal(0.0, 0.01, size=(cout, cin, ksize, ksize))
            else:
                w = init_uniform(rng, cout, cin, ksize)
            cw = ConvWeights(w, np.full(cout, bias), stride, pad)
            self.params[f"{name}.w"] = cw.weight
            self.params[f"{name}.b"] = cw.bias
            return cw

        self.backbone = {
            "c1": conv_w("bb.c1", c, 3, 3, 2, 1),
            "c2": conv_w("bb.c2", c, c, 3, 2, 1),
            "c3": conv_w("bb.c3", c, c, 3, 2, 1),
            "c4": conv_w("bb.c4", c, c, 3, 2, 1),
            "c5": conv_w("bb.c5", c, c, 3, 2, 1),
            "p6": conv_w("bb.p6", c, c, 3, 2, 1),
            "p7": conv_w("bb.p7", c, c, 3, 2, 1),
        }
        self.laterals = {lv: conv_w(f"fpn.l{lv}", c, c, 1, 1, 0, init="uniform") for lv in (3, 4, 5)}

        prior_bias = -math.log((1 - PRIOR) / PRIOR)
        self.heads: dict[str, list[ConvWeights]] = {}
        outs = {"cls": (a * k, prior_bias), "loc": (a * 4, 0.0)}
        if cfg.with_confidence:
            outs["conf"] = (a, prior_bias)
        for branch, (n_out, bias) in outs.items():
            convs = [conv_w(f"head.{branch}.{i}", c, c, 1, 1, 0) for i in range(cfg.head_depth)]
            convs.append(conv_w(f"head.{branch}.out", n_out, c, 1, 1, 0, init="small", bias=bias))
            self.heads[branch] = convs

        gamma0 = 1.0 if cfg.gamma_mode == "fixed" else 0.0
        self.dsa: dict[int, DsaModuleParams] = {}
        for lv in cfg.active_dsa_levels:
            strided = cfg.strided and lv in cfg.strided_levels
            names = ["shared"] if cfg.shared else ["cls", "loc"]
            branches = [self._branch(f"dsa.{lv}.{nm}", strided, gamma0) for nm in names]
            cls_b = branches[0]
            loc_b = cls_b if cfg.shared else branches[1]
            self.dsa[lv] = DsaModuleParams(cls_b, loc_b, cfg.shared, cfg.variant, strided, cfg.stride_kernel)
            for b in self.dsa[lv].branches():
                self.params.update(b.arrays())

    def _branch(self, name: str, strided: bool, gamma0: float):
        cfg = self.cfg
        if cfg.variant == "cbam":
            rng = stream(self.seed, "param", f"{name}.w7")
            return CbamParams(ConvWeights(init_uniform(rng, 1, 2, 7), np.zeros(1), 1, 3), np.array(gamma0), name)
        k, s, p = (cfg.stride_kernel, 2, 1 if cfg.stride_kernel == 3 else 0) if strided else (1, 1, 0)
        proj = []
        for key in ("wq", "wk", "wv"):
            rng = stream(self.seed, "param", f"{name}.{key}")
            proj.append(ConvWeights(init_uniform(rng, cfg.channels, cfg.channels, k), np.zeros(cfg.channels), s, p))
        return SelfAttentionParams(*proj, gamma=np.array(gamma0), name=name)

    def trainable(self) -> list[str]:
        if self.cfg.gamma_mode == "fixed":
            return [n for n in self.params if not n.endswith(".gamma")]
        return list(self.params)

    def dsa_param_count(self) -> int:
        return sum(m.n_params for m in self.dsa.values())

    def head_output_channels(self) -> dict[str, int]:
        return {b: convs[-1].out_channels for b, convs in self.heads.items()}


# -- forward pieces -----------------------------------------------------------

def check_image(image: np.ndarray) -> None:
    if image.ndim != 3 or image.shape[0] != 3:
        raise ShapeError(f"image must be 3xHxW, got {image.shape}")
    _, h, w = image.shape
    for name, n in (("height", h), ("width", w)):
        if n < 8 or n % 8:
            raise ShapeError(f"image {name} {n} must be a positive multiple of 8")


def top_down_fusion(laterals: list[Node]) -> list[Node]:
    """Fuse laterals ordered fine-to-coarse: each gets the upsampled coarser result added."""
    out = [laterals[-1]]
    for lat in reversed(laterals[:-1]):
        _, h, w = lat.shape
        up = T.crop(T.nearest_upsample(out[0], 2), h, w)
        out.insert(0, T.add(lat, up))
    return out


def build_toy_fpn(image: Node, model: Detector) -> FeaturePyramid:
    check_image(image.value)
    bb = model.backbone
    c1 = T.relu(T.conv(image, bb["c1"], "bb.c1"))
    c2 = T.relu(T.conv(c1, bb["c2"], "bb.c2"))
    c3 = T.relu(T.conv(c2, bb["c3"], "bb.c3"))
    c4 = T.relu(T.conv(c3, bb["c4"], "bb.c4"))
    c5 = T.relu(T.conv(c4, bb["c5"], "bb.c5"))
    p6 = T.conv(c5, bb["p6"], "bb.p6")
    p7 = T.conv(T.relu(p6), bb["p7"], "bb.p7")
    lats = [T.conv(cx, model.laterals[lv], f"fpn.l{lv}") for lv, cx in ((3, c3), (4, c4), (5, c5))]
    p3, p4, p5 = top_down_fusion(lats)
    return FeaturePyramid([(lv, 2 ** lv, m) for lv, m in zip(LEVELS, (p3, p4, p5, p6, p7))])


def apply_dsa(pyramid: FeaturePyramid, modules: dict[int, DsaModuleParams], cfg: DetectorConfig,
              loc_pyramid: FeaturePyramid | None = None, capture: bool = False):
    """Run the per-level DSA modules.

    With one pyramid (before-head placement) both branches read it. With
    ``loc_pyramid`` (after-head placement) the cls branch reads ``pyramid``
    and the loc branch reads ``loc_pyramid``. Returns (cls, loc, records).
    """
    if set(modules) != set(cfg.active_dsa_levels):
        raise ValueError(f"DSA modules exist for levels {sorted(modules)}, config wants {list(cfg.active_dsa_levels)}")
    if not set(modules) <= set(pyramid.ids()):
        raise ValueError(f"DSA levels {sorted(modules)} not all in pyramid {pyramid.ids()}")
    src_loc = loc_pyramid or pyramid
    trainable = cfg.gamma_mode == "learned"
    cls_levels, loc_levels, records = [], [], []
    for (lv, stride, f), (_, _, fl) in zip(pyramid.levels, src_loc.levels):
        p = modules.get(lv)
        if p is None:
            cls_levels.append((lv, stride, f))
            loc_levels.append((lv, stride, fl))
            continue
        out_c, rec_c = apply_branch(f, p.cls_branch, capture, trainable)
        if p.shared and loc_pyramid is None:
            out_l, rec_l = out_c, None
        else:
            out_l, rec_l = apply_branch(fl, p.loc_branch, capture, trainable)
        for rec, branch in ((rec_c, "shared" if p.shared else "cls"), (rec_l, "loc")):
            if rec is not None:
                rec.level, rec.branch = lv, branch
                records.append(rec)
        cls_levels.append((lv, stride, out_c))
        loc_levels.append((lv, stride, out_l))
    return FeaturePyramid(cls_levels), FeaturePyramid(loc_levels), records


def head_trunk(f: Node, convs: list[ConvWeights], name: str) -> Node:
    for i, cw in enumerate(convs[:-1]):
        f = T.relu(T.conv(f, cw, f"{name}.{i}"))
    return f


def head_predict(f: Node, convs: list[ConvWeights], name: str) -> Node:
    return T.conv(f, convs[-1], f"{name}.out")


def head_forward(f: Node, convs: list[ConvWeights], name: str = "head") -> Node:
    """Hidden 1x1 conv+ReLU layers followed by a linear prediction conv."""
    return head_predict(head_trunk(f, convs, name), convs, name)


def per_anchor(x: Node, anchors: int) -> Node:
    """(A*K, 1, M) head output -> (M*A, K), rows ordered position-major."""
    ak, _, m = x.shape
    k = ak // anchors
    return T.reshape(T.transpose(T.reshape(x, (anchors, k, m)), (2, 0, 1)), (m * anchors, k))


@dataclass
class ForwardResult:
    graph: Graph
    pyramid: FeaturePyramid
    cls_pyramid: FeaturePyramid
    loc_pyramid: FeaturePyramid
    cls_logits: Node  # (M*A, K)
    box_deltas: Node  # (M*A, 4)
    conf_logits: Node | None  # (M*A, 1)
    head_maps: dict[str, Node] = field(default_factory=dict)
    records: list = field(default_factory=list)


def forward(model: Detector, image: np.ndarray, capture: bool = False, graph: Graph | None = None) -> ForwardResult:
    cfg = model.cfg
    g = graph or Graph()
    pyr = build_toy_fpn(g.input(image), model)
    shapes = [m.shape[1:] for m in pyr.maps()]
    heads = model.heads
    records = []
    if cfg.placement == "after":
        flat = T.flatten_levels(pyr.maps())
        trunk_c = head_trunk(flat, heads["cls"], "head.cls")
        trunk_l = head_trunk(flat, heads["loc"], "head.loc")
        tp_c = FeaturePyramid([(lv, s, m) for (lv, s, _), m in zip(pyr.levels, T.unflatten_levels(trunk_c, shapes))])
        tp_l = FeaturePyramid([(lv, s, m) for (lv, s, _), m in zip(pyr.levels, T.unflatten_levels(trunk_l, shapes))])
        cls_pyr, loc_pyr, records = apply_dsa(tp_c, model.dsa, cfg, loc_pyramid=tp_l, capture=capture)
        cls_map = head_predict(T.flatten_levels(cls_pyr.maps()), heads["cls"], "head.cls")
        loc_map = head_predict(T.flatten_levels(loc_pyr.maps()), heads["loc"], "head.loc")
        conf_src = flat
    else:
        if cfg.placement == "before":
            cls_pyr, loc_pyr, records = apply_dsa(pyr, model.dsa, cfg, capture=capture)
        else:
            cls_pyr = loc_pyr = pyr
        cls_flat = T.flatten_levels(cls_pyr.maps())
        loc_flat = cls_flat if loc_pyr is cls_pyr else T.flatten_levels(loc_pyr.maps())
        cls_map = head_forward(cls_flat, heads["cls"], "head.cls")
        loc_map = head_forward(loc_flat, heads["loc"], "head.loc")
        conf_src = loc_flat
    head_maps = {"cls": cls_map, "loc": loc_map}
    conf = None
    if cfg.with_confidence:
        conf_map = head_forward(conf_src, heads["conf"], "head.conf")
        head_maps["conf"] = conf_map
        conf = per_anchor(conf_map, cfg.anchors)
    return ForwardResult(
        g, pyr, cls_pyr, loc_pyr,
        per_anchor(cls_map, cfg.anchors), per_anchor(loc_map, cfg.anchors), conf,
        head_maps, records,
    )
