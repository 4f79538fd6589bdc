import collections
import itertools
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dsanet import boxes as B
from dsanet.rng import stream
from dsanet.scenes import (BORDER, PATTERNS, GroundTruth, SceneConfig, generate_scene, load_dataset, make_dataset,
                           pattern, render)

from oracles import iou_oracle

# -- iou ------------------------------------------------------------------------------

def test_iou_cases():
    assert B.iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert B.iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert B.iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0  # touching edge
    # intersection 1, union 4 + 4 - 1
    assert B.iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7, rel=1e-15)


def test_iou_rejects_zero_area():
    with pytest.raises(ValueError, match="zero-area"):
        B.iou((0, 0, 0, 2), (0, 0, 1, 1))
    with pytest.raises(ValueError):
        GroundTruth((3.0, 1.0, 3.0, 5.0), 0)


box = st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 30), st.floats(0.5, 30)).map(
    lambda t: (t[0], t[1], t[0] + t[2], t[1] + t[3]))


@settings(max_examples=100)
@given(box, box)
def test_iou_matches_oracle_and_matrix(a, b):
    v = B.iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou_oracle(a, b), abs=1e-12)
    assert v == pytest.approx(B.iou(b, a), abs=1e-15)
    assert B.iou_matrix(np.array([a]), np.array([b]))[0, 0] == pytest.approx(v, abs=1e-12)


# -- encode / decode -------------------------------------------------------------------

def test_encode_known_values():
    d = B.encode_boxes(np.array([10.0, 10.0, 4.0, 4.0]), np.array([8.0, 6.0, 16.0, 14.0]))
    assert d[0] == 0.5 and d[1] == 0.0
    assert d[2] == pytest.approx(0.69314718055994530942, rel=1e-15)  # ln 2


@settings(max_examples=100)
@given(st.integers(0, 2**32 - 1))
def test_encode_decode_round_trip(seed):
    rng = np.random.default_rng(seed)
    anchors = np.column_stack([rng.uniform(0, 64, (5, 2)), rng.uniform(2, 100, (5, 2))])
    xy = rng.uniform(0, 60, (5, 2))
    boxes = np.column_stack([xy, xy + rng.uniform(1, 60, (5, 2))])
    back = B.decode_boxes(anchors, B.encode_boxes(anchors, boxes))
    np.testing.assert_allclose(back, boxes, rtol=0, atol=1e-9)


def test_decode_clips_scale_and_image():
    out = B.decode_boxes(np.array([32.0, 32.0, 16.0, 16.0]), np.array([0.0, 0.0, 50.0, 0.0]))
    assert out[2] - out[0] == pytest.approx(1000.0)
    clipped = B.decode_boxes(np.array([32.0, 32.0, 16.0, 16.0]), np.array([0.0, 0.0, 50.0, 0.0]), (64, 64))
    assert clipped[0] == 0.0 and clipped[2] == 64.0


# -- rng --------------------------------------------------------------------------------

def test_streams_are_keyed_and_stable():
    a = stream(7, "scene", 3).integers(0, 2**62, 4)
    assert np.array_equal(a, stream(7, "scene", 3).integers(0, 2**62, 4))
    assert not np.array_equal(a, stream(7, "scene", 4).integers(0, 2**62, 4))
    assert not np.array_equal(a, stream(8, "scene", 3).integers(0, 2**62, 4))


# -- scenes -----------------------------------------------------------------------------

def test_scene_determinism():
    cfg = SceneConfig(seed=5)
    a, b = generate_scene(cfg, 17), generate_scene(cfg, 17)
    assert np.array_equal(a.image, b.image) and a.gts == b.gts
    assert not np.array_equal(a.image, generate_scene(cfg, 18).image)


def test_overlap_cap_and_bounds_over_1000_scenes():
    cfg = SceneConfig()
    for i in range(1000):
        sc = generate_scene(cfg, i)
        assert 1 <= len(sc.gts) <= 4
        for g in sc.gts:
            x1, y1, x2, y2 = g.box
            assert 0 <= x1 < x2 <= 64 and 0 <= y1 < y2 <= 64
            assert 8 <= x2 - x1 <= 40 and 8 <= y2 - y1 <= 40
        for a, b in itertools.combinations(sc.gts, 2):
            assert iou_oracle(a.box, b.box) <= 0.3


def test_noiseless_single_object_matches_template():
    cfg = SceneConfig(noise=0.0, objects_min=1, objects_max=1, seed=2)
    for i in range(8):
        sc = generate_scene(cfg, i)
        (g,) = sc.gts
        x1, y1, x2, y2 = (int(v) for v in g.box)
        inner = sc.image[:, y1 + 1:y2 - 1, x1 + 1:x2 - 1]
        tmpl = pattern(g.cls, y2 - y1 - 2, x2 - x1 - 2)
        for ch in range(3):
            tint = inner[ch].max()
            np.testing.assert_array_equal(inner[ch], tint * tmpl)
        mask = np.ones((64, 64), bool)
        mask[y1:y2, x1:x2] = False
        assert np.all(sc.image[:, mask] == 0)


def test_border_statistics_identical_across_classes():
    rng = np.random.default_rng(3)
    stats = []
    for cls in range(len(PATTERNS)):
        img = render(32, [((4, 6, 24, 20), cls, rng.uniform(0.5, 1, 3))])
        ring = np.ones((14, 20), bool)
        ring[1:-1, 1:-1] = False
        stats.append(img[:, 6:20, 4:24][:, ring])
    for s in stats:
        assert np.all(s == BORDER)


def test_patterns_differ_by_class():
    tiles = [pattern(c, 6, 6) for c in range(4)]
    for a, b in itertools.combinations(tiles, 2):
        assert not np.array_equal(a, b)
    with pytest.raises(ValueError):
        pattern(4, 2, 2)


def test_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(objects_min=3, objects_max=2)
    with pytest.raises(ValueError):
        SceneConfig(size_min=50, size_max=40)
    with pytest.raises(ValueError):
        SceneConfig(classes=5)


def test_crowded_scene_records_shortfall():
    cfg = SceneConfig(objects_min=4, objects_max=4, size_min=40, size_max=40, overlap_cap=0.0)
    sc = generate_scene(cfg, 0)
    assert sc.meta["placed"] == len(sc.gts) == 1
    assert sc.meta["requested"] == 4 and sc.meta["attempts"] == 1000


def test_class_histogram_near_uniform():
    counts = collections.Counter(g.cls for i in range(500) for g in generate_scene(SceneConfig(), i).gts)
    expected = sum(counts.values()) / 4
    for c in range(4):
        assert abs(counts[c] - expected) <= 0.2 * expected


# -- persisted dataset --------------------------------------------------------------------

def test_dataset_round_trip(tmp_path):
    ds = make_dataset(SceneConfig(seed=9), 500, 100, tmp_path)
    assert len(list((tmp_path / "images").glob("*.fmap"))) == 600
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 9 and manifest["train"] == [0, 500] and manifest["val"] == [500, 600]
    back = load_dataset(tmp_path)
    assert back.cfg == ds.cfg
    for a, b in zip(ds.train + ds.val, back.train + back.val):
        assert np.array_equal(a.image, b.image) and a.gts == b.gts


def test_dataset_errors(tmp_path):
    with pytest.raises(ValueError):
        make_dataset(SceneConfig(), 0, 1)
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match=str(blocker)):
        make_dataset(SceneConfig(), 1, 1, blocker / "sub")


def test_noise_is_bounded():
    sc = generate_scene(SceneConfig(noise=0.05), 0)
    clean = generate_scene(SceneConfig(noise=0.0), 0)
    assert clean.gts == sc.gts
    assert math.isclose(np.abs(sc.image - clean.image).max(), 0.05, abs_tol=0.001)
