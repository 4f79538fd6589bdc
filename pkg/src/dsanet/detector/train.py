"""SGD training loop, inference and evaluation for the toy detector."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..rng import stream
from .anchors import generate_anchors
from .losses import LossBreakdown, detection_loss
from .metrics import coco_metrics
from .model import LEVELS, Detector, forward
from .nms import Detection, postprocess


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"non-finite loss {loss} at step {step}")
        self.step = step
        self.loss = loss


@dataclass
class OptimizerConfig:
    lr: float = 0.01
    momentum: float = 0.0
    weight_decay: float = 0.0
    epochs: int = 12
    batch_size: int = 8
    grad_clip: float = 0.0  # global-norm clip, 0 disables


def decay_epochs(budget: int) -> list[int]:
    """Epochs after which the learning rate drops 10x: 75% and 100% of the budget."""
    return [int(round(0.75 * budget)), budget]


def lr_at_epoch(epoch: int, base_lr: float, budget: int) -> float:
    """Learning rate for 1-based ``epoch``."""
    drops = sum(1 for d in decay_epochs(budget) if epoch > d)
    return base_lr * 0.1 ** drops


@dataclass
class TrainState:
    model: Detector
    opt: OptimizerConfig
    seed: int = 0
    step: int = 0
    epoch: int = 0
    velocity: dict[str, np.ndarray] = field(default_factory=dict)
    trace: list[LossBreakdown] = field(default_factory=list)


def anchors_for(model: Detector):
    cfg = model.cfg
    shapes = [(lv, h, w) for lv, (h, w) in zip(LEVELS, cfg.level_shapes())]
    return generate_anchors(shapes, cfg.anchors)


def image_loss_and_grads(model: Detector, scene, anchors):
    fr = forward(model, scene.image)
    total, lb = detection_loss(fr, anchors, scene.gts, model.cfg)
    fr.graph.backward(total)
    grads = {}
    for node in fr.graph.params():
        if node.name is not None and node.grad is not None:
            grads[node.name] = node.grad
    return lb, grads


def sgd_step(state: TrainState, grads: dict[str, np.ndarray], lr: float) -> None:
    opt = state.opt
    names = [n for n in state.model.trainable() if n in grads]
    if opt.grad_clip > 0:
        norm = math.sqrt(sum(float((grads[n] ** 2).sum()) for n in names))
        if norm > opt.grad_clip:
            grads = {n: grads[n] * (opt.grad_clip / norm) for n in names}
    for n in names:
        p = state.model.params[n]
        g = grads[n]
        if opt.weight_decay:
            g = g + opt.weight_decay * p
        if opt.momentum:
            v = state.velocity.get(n)
            v = g.copy() if v is None else opt.momentum * v + g
            state.velocity[n] = v
            g = v
        p -= lr * g


def train_epoch(state: TrainState, scenes, lr: float | None = None, anchors=None) -> list[LossBreakdown]:
    """One pass over ``scenes`` in a seed-determined order; updates parameters in place."""
    state.epoch += 1
    if lr is None:
        lr = lr_at_epoch(state.epoch, state.opt.lr, state.opt.epochs)
    anchors = anchors or anchors_for(state.model)
    order = stream(state.seed, "shuffle", state.epoch).permutation(len(scenes))
    bs = max(1, state.opt.batch_size)
    out = []
    for start in range(0, len(order), bs):
        batch = order[start:start + bs]
        acc: dict[str, np.ndarray] = {}
        parts = []
        # fixed image order keeps the gradient sum bitwise reproducible
        for i in batch:
            lb, grads = image_loss_and_grads(state.model, scenes[i], anchors)
            parts.append(lb)
            for name, g in grads.items():
                if name in acc:
                    acc[name] += g
                else:
                    acc[name] = g.copy()
        n = len(batch)
        mean = LossBreakdown(*(sum(getattr(p, f) for p in parts) / n for f in ("focal", "box", "confidence", "total")))
        state.step += 1
        if not math.isfinite(mean.total):
            raise TrainingDiverged(state.step, mean.total)
        if lr != 0.0:
            sgd_step(state, {k: v / n for k, v in acc.items()}, lr)
        state.trace.append(mean)
        out.append(mean)
    return out


def detect(model: Detector, image: np.ndarray, anchors=None) -> list[Detection]:
    anchors = anchors or anchors_for(model)
    fr = forward(model, image)
    conf = fr.conf_logits.value if fr.conf_logits is not None else None
    return postprocess(fr.cls_logits.value, fr.box_deltas.value, conf, anchors.boxes, model.cfg, image.shape[1:])


def evaluate_ap(model: Detector, scenes) -> dict[str, float]:
    if not scenes:
        raise ValueError("empty dataset")
    anchors = anchors_for(model)
    dets, gts = [], []
    for sc in scenes:
        dets.append([(d.box, d.cls, d.final_score) for d in detect(model, sc.image, anchors)])
        gts.append([(g.box, g.cls) for g in sc.gts])
    return coco_metrics(dets, gts, model.cfg.classes, model.cfg.max_dets)
