"""Deterministic synthetic detection scenes.

Each object is an axis-aligned rectangle with a 1-px border of the same
intensity for every class. The class is carried only by the interior fill:

====  ===================
id    interior pattern
====  ===================
0     solid
1     horizontal stripes
2     vertical stripes
3     checkerboard
====  ===================

Stripes and checks are 2 px wide. Each object also gets a random RGB tint on
its interior, drawn independently of the class. A scene is a pure function
of ``(cfg.seed, index)``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .boxes import iou
from .rng import stream
from .tensor import read_fmap, write_fmap

PATTERNS = ("solid", "hstripes", "vstripes", "checker")
BORDER = 1.0
HI, LO = 1.0, 0.3
MAX_ATTEMPTS = 1000


@dataclass
class SceneConfig:
    image_size: int = 64
    objects_min: int = 1
    objects_max: int = 4
    classes: int = 4
    size_min: int = 8
    size_max: int = 40
    overlap_cap: float = 0.3
    noise: float = 0.05
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.objects_min <= self.objects_max:
            raise ValueError(f"objects range {self.objects_min}..{self.objects_max} is empty")
        if not 3 <= self.size_min <= self.size_max <= self.image_size:
            raise ValueError(f"size range {self.size_min}..{self.size_max} invalid for image {self.image_size}")
        if not 1 <= self.classes <= len(PATTERNS):
            raise ValueError(f"classes must be in 1..{len(PATTERNS)}, got {self.classes}")
        if self.noise < 0:
            raise ValueError("noise amplitude must be >= 0")


@dataclass(frozen=True)
class GroundTruth:
    box: tuple[float, float, float, float]
    cls: int

    def __post_init__(self):
        x1, y1, x2, y2 = self.box
        if not (x2 > x1 and y2 > y1):
            raise ValueError(f"ground truth box must have positive area: {self.box}")


@dataclass
class Scene:
    image: np.ndarray
    gts: list[GroundTruth]
    meta: dict = field(default_factory=dict)


def pattern(cls: int, h: int, w: int) -> np.ndarray:
    """Interior template of shape (h, w) with values in {HI, LO}."""
    yy, xx = np.mgrid[0:h, 0:w]
    if cls == 0:
        on = np.ones((h, w), bool)
    elif cls == 1:
        on = (yy // 2) % 2 == 0
    elif cls == 2:
        on = (xx // 2) % 2 == 0
    elif cls == 3:
        on = (yy // 2 + xx // 2) % 2 == 0
    else:
        raise ValueError(f"no pattern for class {cls}")
    return np.where(on, HI, LO)


def render(size: int, objects, noise_field: np.ndarray | None = None) -> np.ndarray:
    """Paint ``(box, cls, tint)`` objects in order onto a black 3xSxS canvas."""
    img = np.zeros((3, size, size))
    for (x1, y1, x2, y2), cls, tint in objects:
        x1, y1, x2, y2 = int(x1), int(y1), int(x2), int(y2)
        img[:, y1:y2, x1:x2] = BORDER
        inner = pattern(cls, y2 - y1 - 2, x2 - x1 - 2)
        img[:, y1 + 1:y2 - 1, x1 + 1:x2 - 1] = np.asarray(tint)[:, None, None] * inner
    if noise_field is not None:
        img += noise_field
    return img


def generate_scene(cfg: SceneConfig, index: int) -> Scene:
    rng = stream(cfg.seed, "scene", index)
    s = cfg.image_size
    wanted = int(rng.integers(cfg.objects_min, cfg.objects_max + 1))
    objects = []
    attempts = 0
    while len(objects) < wanted and attempts < MAX_ATTEMPTS:
        attempts += 1
        w, h = (int(v) for v in rng.integers(cfg.size_min, cfg.size_max + 1, size=2))
        x1 = int(rng.integers(0, s - w + 1))
        y1 = int(rng.integers(0, s - h + 1))
        cls = int(rng.integers(0, cfg.classes))
        tint = rng.uniform(0.5, 1.0, size=3)
        box = (x1, y1, x1 + w, y1 + h)
        if all(iou(box, o[0]) <= cfg.overlap_cap for o in objects):
            objects.append((box, cls, tint))
    noise = rng.uniform(-cfg.noise, cfg.noise, size=(3, s, s)) if cfg.noise > 0 else None
    image = render(s, objects, noise)
    gts = [GroundTruth(tuple(float(v) for v in box), cls) for box, cls, _ in objects]
    meta = {"index": index, "requested": wanted, "placed": len(objects), "attempts": attempts}
    return Scene(image, gts, meta)


def generate_split(cfg: SceneConfig, indices) -> list[Scene]:
    return [generate_scene(cfg, int(i)) for i in indices]


# -- persisted dataset --------------------------------------------------------

@dataclass
class Dataset:
    cfg: SceneConfig
    train: list[Scene]
    val: list[Scene]


def split_indices(n_train: int, n_val: int) -> tuple[range, range]:
    return range(0, n_train), range(n_train, n_train + n_val)


def make_dataset(cfg: SceneConfig, n_train: int = 500, n_val: int = 100, out_dir=None) -> Dataset:
    """Generate train/val scenes and, when ``out_dir`` is given, write them.

    Layout: ``manifest.json``, ``images/NNNN.fmap`` (FMAP v1), ``annotations.json``.
    """
    if n_train < 1 or n_val < 1:
        raise ValueError("n_train and n_val must both be >= 1")
    tr, va = split_indices(n_train, n_val)
    ds = Dataset(cfg, generate_split(cfg, tr), generate_split(cfg, va))
    if out_dir is not None:
        save_dataset(ds, out_dir)
    return ds


def save_dataset(ds: Dataset, out_dir) -> None:
    root = Path(out_dir)
    try:
        (root / "images").mkdir(parents=True, exist_ok=True)
        annotations = []
        for split, scenes in (("train", ds.train), ("val", ds.val)):
            for sc in scenes:
                idx = sc.meta["index"]
                write_fmap(root / "images" / f"{idx:04d}.fmap", sc.image)
                annotations.append({
                    "index": idx,
                    "split": split,
                    "objects": [{"box": list(g.box), "class": g.cls} for g in sc.gts],
                })
        manifest = {
            "format": "dsanet-scenes v1",
            "config": asdict(ds.cfg),
            "seed": ds.cfg.seed,
            "train": [ds.train[0].meta["index"], ds.train[-1].meta["index"] + 1],
            "val": [ds.val[0].meta["index"], ds.val[-1].meta["index"] + 1],
            "short_scenes": [sc.meta for sc in ds.train + ds.val if sc.meta["placed"] < sc.meta["requested"]],
        }
        (root / "annotations.json").write_text(json.dumps(annotations, indent=1))
        (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    except OSError as e:
        raise OSError(f"failed writing dataset under {root}: {e}") from e


def load_dataset(root) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    cfg = SceneConfig(**manifest["config"])
    annotations = {a["index"]: a for a in json.loads((root / "annotations.json").read_text())}
    out = {"train": [], "val": []}
    for split in ("train", "val"):
        lo, hi = manifest[split]
        for idx in range(lo, hi):
            a = annotations[idx]
            gts = [GroundTruth(tuple(o["box"]), o["class"]) for o in a["objects"]]
            out[split].append(Scene(read_fmap(root / "images" / f"{idx:04d}.fmap"), gts, {"index": idx}))
    return Dataset(cfg, out["train"], out["val"])
