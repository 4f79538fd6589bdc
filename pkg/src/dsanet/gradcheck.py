"""Central-difference gradient checks for every differentiable primitive.

``gradient_check`` contracts the op output with a fixed random tensor ``R``,
seeds backprop with ``R`` and compares each probed partial derivative
against ``(f(v + h) - f(v - h)) / 2h`` where ``f = sum(R * out)`` and
``h = 1e-5 * max(1, |v|)``.

The finite differences are evaluated in ``numpy.longdouble``. In float64
the rounding noise of ``f`` divided by ``2h`` is about 1e-11, which swamps
derivatives that are exactly zero (a bias added to every key, for one) once
the relative error denominator bottoms out at 1e-8.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import attention as A
from . import tensor as T
from .detector import losses as L
from .rng import stream
from .tensor import ConvWeights, Graph

BuildFn = Callable[[Graph, dict], T.Node]


@dataclass
class GradCheckReport:
    op: str
    max_abs_err: float
    max_rel_err: float
    probe_count: int
    passed: bool
    valid: bool = True
    tolerance: float = 1e-4

    def row(self) -> str:
        status = "PASS" if self.passed else ("INVALID" if not self.valid else "FAIL")
        return f"{self.op:<32} {self.max_abs_err:11.3e} {self.max_rel_err:11.3e} {self.probe_count:6d}  {status}"


def _find_node(g: Graph, arr: np.ndarray):
    for n in g.nodes:
        if n.value is arr:
            return n
    return None


def gradient_check(fn: BuildFn, inputs: dict[str, np.ndarray], tolerance: float = 1e-4, probes: int = 20,
                   rng: np.random.Generator | None = None, name: str = "op",
                   numeric_dtype=np.longdouble) -> GradCheckReport:
    """Check analytic gradients of ``fn`` w.r.t. every array in ``inputs``.

    ``fn`` receives a fresh graph and the input arrays and must bind the
    arrays themselves (``g.param(arr)`` or ``g.input(arr, requires_grad=True)``),
    so in-place perturbation is seen on the next call.
    """
    rng = rng or np.random.default_rng(0)
    arrays = {k: np.array(v, dtype=T.DTYPE) for k, v in inputs.items()}

    g = Graph()
    out = fn(g, arrays)
    weights = rng.standard_normal(out.shape)
    g.backward(out, weights)
    analytic = {}
    for k, arr in arrays.items():
        node = _find_node(g, arr)
        grad = None if node is None else node.grad
        analytic[k] = np.zeros_like(arr) if grad is None else grad.copy()

    wide = {k: v.astype(numeric_dtype) for k, v in arrays.items()}
    wide_weights = weights.astype(numeric_dtype)

    def f():
        with np.errstate(invalid="ignore", over="ignore"):
            return (fn(Graph(), wide).value * wide_weights).sum()

    keys = list(arrays)
    sizes = np.array([arrays[k].size for k in keys])
    picks = rng.choice(sizes.sum(), size=probes, replace=bool(sizes.sum() < probes))
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    max_abs = max_rel = 0.0
    valid = bool(np.all(np.isfinite(out.value)))
    for p in picks:
        ki = int(np.searchsorted(offsets, p, side="right") - 1)
        key, idx = keys[ki], int(p - offsets[ki])
        arr = wide[key]
        v = arr.flat[idx]
        h = numeric_dtype(1e-5 * max(1.0, abs(float(v))))
        arr.flat[idx] = v + h
        fp = f()
        arr.flat[idx] = v - h
        fm = f()
        arr.flat[idx] = v
        if not (np.isfinite(fp) and np.isfinite(fm)):
            valid = False
            continue
        numeric = float((fp - fm) / (2 * h))
        a = float(analytic[key].flat[idx])
        err = abs(a - numeric)
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / max(abs(a), abs(numeric), 1e-8))
    return GradCheckReport(name, max_abs, max_rel, len(picks), valid and max_rel < tolerance, valid, tolerance)


# -- suite --------------------------------------------------------------------

def _dims(rng, lo=1, hi=4, n=1):
    return [int(x) for x in rng.integers(lo, hi + 1, size=n)]


def _case_conv(k, s, p):
    def make(rng):
        cin, cout, h, w = _dims(rng, n=4)
        if k == 3:
            h, w = max(h, 2), max(w, 2)
        inputs = {
            "x": rng.standard_normal((cin, h, w)),
            "w": rng.standard_normal((cout, cin, k, k)) * 0.5,
            "b": rng.standard_normal(cout),
        }

        def fn(g, a):
            return T.conv2d(g.input(a["x"], True), g.param(a["w"]), g.param(a["b"]), s, p)
        return fn, inputs
    return make


def _case_unary(op, shape_fn):
    def make(rng):
        inputs = {"x": rng.standard_normal(shape_fn(rng)) * 2}
        return (lambda g, a: op(g.input(a["x"], True))), inputs
    return make


def _sa_inputs(rng, c, h, w, k=1):
    inputs = {"f": rng.standard_normal((c, h, w))}
    for key in ("q", "k", "v"):
        inputs[f"w{key}"] = rng.standard_normal((c, c, k, k)) * 0.5
        inputs[f"b{key}"] = rng.standard_normal(c) * 0.1
    inputs["gamma"] = rng.standard_normal(()) + 0.5
    return inputs


def _sa_params(a, stride=1, pad=0):
    # float64 arrays pass through np.asarray uncopied, so perturbations reach the bound params
    cw = [ConvWeights(a[f"w{key}"], a[f"b{key}"], stride, pad) for key in "qkv"]
    return A.SelfAttentionParams(*cw, gamma=a["gamma"])


def _case_self_attention(rng):
    c, h, w = _dims(rng, n=3)
    inputs = _sa_inputs(rng, c, h, w)

    def fn(g, a):
        out, _ = A.apply_branch(g.input(a["f"], True), _sa_params(a))
        return out
    return fn, inputs


def _case_strided(k):
    def make(rng):
        c = _dims(rng)[0]
        h, w = _dims(rng, 2, 4, 2)
        inputs = _sa_inputs(rng, c, h, w, k)

        def fn(g, a):
            out, _ = A.apply_branch(g.input(a["f"], True), _sa_params(a, 2, 1 if k == 3 else 0))
            return out
        return fn, inputs
    return make


def _case_cbam(rng):
    c, h, w = _dims(rng, n=3)
    inputs = {
        "f": rng.standard_normal((c, h, w)),
        "w7": rng.standard_normal((1, 2, 7, 7)) * 0.3,
        "b7": rng.standard_normal(1) * 0.1,
        "gamma": rng.standard_normal(()) + 0.5,
    }

    def fn(g, a):
        f = g.input(a["f"], True)
        mask = T.sigmoid(T.conv2d(T.channel_pool_concat(f), g.param(a["w7"]), g.param(a["b7"]), 1, 3))
        return A.residual_combine(f, T.mul(f, mask), g.param(a["gamma"]))
    return fn, inputs


def _case_residual(rng):
    shape = tuple(_dims(rng, n=3))
    inputs = {"f": rng.standard_normal(shape), "att": rng.standard_normal(shape), "gamma": rng.standard_normal(())}

    def fn(g, a):
        return A.residual_combine(g.input(a["f"], True), g.input(a["att"], True), g.param(a["gamma"]))
    return fn, inputs


def _case_matmul(rng):
    n, k, m = _dims(rng, n=3)
    inputs = {"a": rng.standard_normal((n, k)), "b": rng.standard_normal((k, m))}
    return (lambda g, a: T.matmul(g.input(a["a"], True), g.input(a["b"], True))), inputs


def _case_upsample(rng):
    shape = tuple(_dims(rng, n=3))
    factor = int(rng.integers(1, 4))
    inputs = {"x": rng.standard_normal(shape)}
    return (lambda g, a: T.nearest_upsample(g.input(a["x"], True), factor)), inputs


def _case_focal(rng):
    n, k = _dims(rng, n=2)
    targets = rng.random((n, k)) < 0.3
    valid = rng.random(n) < 0.8
    inputs = {"z": rng.standard_normal((n, k)) * 2}
    return (lambda g, a: L.focal_loss_node(g.input(a["z"], True), targets, valid, 2.0)), inputs


def _case_smooth_l1(rng):
    n = _dims(rng)[0]
    target = rng.standard_normal((n, 4))
    mask = rng.random(n) < 0.7
    inputs = {"x": rng.standard_normal((n, 4)) * 2}
    return (lambda g, a: L.smooth_l1_node(g.input(a["x"], True), target, mask, 1.5, 1.0)), inputs


def _case_bce(rng):
    n = _dims(rng)[0]
    target = (rng.random(n) < 0.5).astype(float)
    valid = rng.random(n) < 0.8
    inputs = {"z": rng.standard_normal((n, 1)) * 2}
    return (lambda g, a: L.bce_logits_node(g.input(a["z"], True), target, valid, 1.0)), inputs


SUITE: dict[str, Callable] = {
    "conv2d 1x1 s1": _case_conv(1, 1, 0),
    "conv2d 1x1 s2": _case_conv(1, 2, 0),
    "conv2d 3x3 s2 p1": _case_conv(3, 2, 1),
    "conv2d 7x7 s1 p3": _case_conv(7, 1, 3),
    "channel_pool_concat": _case_unary(T.channel_pool_concat, lambda r: tuple(_dims(r, n=3))),
    "softmax_rows": _case_unary(T.softmax_rows, lambda r: tuple(_dims(r, n=2))),
    "sigmoid_map": _case_unary(T.sigmoid, lambda r: tuple(_dims(r, n=3))),
    "relu": _case_unary(T.relu, lambda r: tuple(_dims(r, n=3))),
    "nearest_upsample": _case_upsample,
    "matmul": _case_matmul,
    "residual_combine": _case_residual,
    "self_attention_branch": _case_self_attention,
    "strided_self_attention k1": _case_strided(1),
    "strided_self_attention k3": _case_strided(3),
    "cbam_spatial_attention": _case_cbam,
    "focal_loss": _case_focal,
    "smooth_l1": _case_smooth_l1,
    "confidence_bce": _case_bce,
}


def _param_slots(model):
    """(owner, attribute, name) for every parameter array a detector holds."""
    by_id = {id(a): n for n, a in model.params.items()}
    owners = list(model.backbone.values()) + list(model.laterals.values())
    owners += [cw for convs in model.heads.values() for cw in convs]
    for module in model.dsa.values():
        for b in module.branches():
            owners.append(b)
            owners += [b.w7] if isinstance(b, A.CbamParams) else [b.wq, b.wk, b.wv]
    slots = []
    for obj in owners:
        for attr in ("weight", "bias", "gamma"):
            arr = getattr(obj, attr, None)
            if arr is not None and id(arr) in by_id:
                slots.append((obj, attr, by_id[id(arr)]))
    return slots


def detector_loss_check(model, scene, tolerance: float = 1e-4, probes: int = 40,
                        rng: np.random.Generator | None = None) -> GradCheckReport:
    """Gradient check of the full training loss of one image w.r.t. all parameters."""
    from .detector.losses import detection_loss
    from .detector.model import forward
    from .detector.train import anchors_for

    slots = _param_slots(model)
    anchors = anchors_for(model)
    original = [getattr(obj, attr) for obj, attr, _ in slots]

    def fn(g, a):
        for obj, attr, name in slots:
            setattr(obj, attr, a[name])
        total, _ = detection_loss(forward(model, scene.image, graph=g), anchors, scene.gts, model.cfg)
        return total

    try:
        return gradient_check(fn, {name: model.params[name] for _, _, name in slots}, tolerance, probes,
                              rng, "detector_total_loss")
    finally:
        for (obj, attr, _), arr in zip(slots, original):
            setattr(obj, attr, arr)


def run_suite(instances: int = 20, tolerance: float = 1e-4, probes: int = 20, seed: int = 0,
              ops=None) -> list[GradCheckReport]:
    """Worst-case report per op over ``instances`` random instances."""
    reports = []
    for name, make in SUITE.items():
        if ops is not None and name not in ops:
            continue
        worst = None
        valid = True
        for i in range(instances):
            rng = stream(seed, "gradcheck", name, i)
            fn, inputs = make(rng)
            r = gradient_check(fn, inputs, tolerance, probes, rng, name)
            valid &= r.valid
            if worst is None or r.max_rel_err > worst.max_rel_err:
                worst = r
        worst.probe_count = instances * probes
        worst.valid = valid
        worst.passed = valid and worst.max_rel_err < tolerance
        reports.append(worst)
    return reports
