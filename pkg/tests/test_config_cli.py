import csv
import json
import logging

import numpy as np
import pytest

from dsanet.cli import main
from dsanet.config import DEFAULTS, ConfigError, RunConfig, parse_config, parse_int_set, parse_text
from dsanet.detector import DetectorConfig
from dsanet.detector.metrics import METRIC_NAMES
from dsanet.tensor import write_fmap

TINY = ["n_train=6", "n_val=3", "epochs=2", "channels=4", "head_depth=1", "batch_size=3", "image_size=32",
        "size_max=24"]


def tiny_args():
    out = []
    for item in TINY:
        out += ["--set", item]
    return out


# -- parsing ------------------------------------------------------------------------------

def test_empty_file_gives_defaults(tmp_path):
    (tmp_path / "c.cfg").write_text("# nothing\n\n")
    cfg = parse_config(tmp_path / "c.cfg")
    assert cfg.values == DEFAULTS
    assert cfg.detector() == DetectorConfig()
    assert cfg.momentum == 0.9 and cfg.weight_decay == 1e-4 and cfg.epochs == 12


def test_duplicate_key_last_wins_with_warning(caplog):
    with caplog.at_level(logging.WARNING):
        vals = parse_text("lr = 0.1\nlr = 0.02\n", "x.cfg")
    assert vals["lr"] == 0.02
    assert "x.cfg:2" in caplog.text and "duplicate" in caplog.text


def test_level_set_notation():
    assert parse_int_set("4-7") == (4, 5, 6, 7)
    assert parse_int_set("3, 5") == (3, 5) and parse_int_set("3-4 6") == (3, 4, 6)
    assert parse_text("dsa_levels = 4-7")["dsa_levels"] == (4, 5, 6, 7)
    with pytest.raises(ValueError):
        parse_int_set("7-4")


def test_typed_values_and_errors():
    vals = parse_text("with_confidence = yes\nlr = 1e-3\nchannels = 8\nplacement = after  # trailing\n")
    assert vals == {"with_confidence": True, "lr": 1e-3, "channels": 8, "placement": "after"}
    with pytest.raises(ConfigError, match="unknown config key 'colour'"):
        parse_text("lr = 0.1\ncolour = red\n")
    with pytest.raises(ConfigError, match=r"c:2: bad value for channels"):
        parse_text("lr = 0.1\nchannels = many\n", "c")
    with pytest.raises(ConfigError, match="c:1: expected"):
        parse_text("just words\n", "c")


def test_overrides_and_validation(tmp_path):
    (tmp_path / "c.cfg").write_text("lr = 0.1\n")
    cfg = parse_config(tmp_path / "c.cfg", ["lr=0.2", "lr=0.3"])
    assert cfg.lr == 0.3
    with pytest.raises(ConfigError, match="unknown config key"):
        parse_config(None, ["nope=1"])
    with pytest.raises(ConfigError, match="multiple of 8"):
        parse_config(None, ["image_size=60", "size_max=40"])
    with pytest.raises(ConfigError, match="placement"):
        parse_config(None, ["placement=sideways"])
    with pytest.raises(ConfigError, match="cannot read"):
        parse_config(tmp_path / "missing.cfg")


def test_text_and_json_round_trip(tmp_path):
    cfg = parse_config(None, ["dsa_levels=3,5", "shared=true", "name=x"])
    (tmp_path / "a.cfg").write_text(cfg.to_text())
    assert parse_config(tmp_path / "a.cfg").values == cfg.values
    (tmp_path / "r.json").write_text(json.dumps({"config": cfg.to_dict(), "metrics": {}}))
    assert parse_config(tmp_path / "r.json").values == cfg.values
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(ConfigError, match="malformed JSON"):
        parse_config(tmp_path / "bad.json")


def test_scene_and_detector_share_keys():
    cfg = RunConfig(dict(DEFAULTS)).with_overrides({"classes": "3", "data_seed": "4", "seed": "9"})
    assert cfg.detector().classes == cfg.scene().classes == 3
    assert cfg.scene().seed == 4


# -- CLI ----------------------------------------------------------------------------------

def test_cli_usage_errors(capsys):
    with pytest.raises(SystemExit) as e:
        main(["frobnicate"])
    assert e.value.code == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("dsanet: error:")


def test_cli_unknown_key_and_missing_file(tmp_path, capsys):
    assert main(["gen-data", "--set", "bogus=1", "--out", str(tmp_path)]) == 2
    assert "bogus" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp_path / "none.dsackpt"), *tiny_args()]) == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and "none.dsackpt" in err[0]


def test_cli_gradcheck_subset(tmp_path, capsys):
    argv = ["-q", "gradcheck", "--instances", "3", "--op", "softmax_rows", "--op", "sigmoid_map"]
    assert main(argv + ["--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "softmax_rows" in out and "FAIL" not in out
    assert (tmp_path / "gradcheck.txt").read_text().strip() == out.strip()


def test_cli_cost_matches_formula(tmp_path, capsys):
    assert main(["cost", "--C", "256", "--H", "75", "--W", "125", "--out", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    assert "N=9375" in out and "87,890,625" in out and "0.703 GB" in out
    (rep,) = json.loads((tmp_path / "cost.json").read_text())["cost"]
    assert rep["attn_matrix_entries"] == 87_890_625 and rep["matches"] is None


def test_cli_cost_grid_measures(tmp_path, capsys):
    args = ["cost", "--C", "2", "4", "--H", "3", "6", "--W", "4", "--strided", "--stride-kernel", "3"]
    assert main(args + ["--out", str(tmp_path)]) == 0
    reps = json.loads((tmp_path / "cost.json").read_text())["cost"]
    assert len(reps) == 4 and all(r["matches"] is True for r in reps)
    assert (tmp_path / "cost.png").exists()


def test_cli_gen_data(tmp_path):
    assert main(["-q", "gen-data", "--set", "n_train=3", "--set", "n_val=2", "--out", str(tmp_path)]) == 0
    assert len(list((tmp_path / "images").glob("*.fmap"))) == 5


def test_cli_train_eval_attnmap(tmp_path, capsys):
    run = tmp_path / "run"
    assert main(["-q", "train", *tiny_args(), "--set", "dsa_levels=3-4", "--out", str(run)]) == 0
    for f in ("checkpoint.dsackpt", "metrics.csv", "report.json", "loss.png"):
        assert (run / f).exists()
    rep = json.loads((run / "report.json").read_text())
    assert set(rep["metrics"]) == set(METRIC_NAMES) and rep["steps"] == 4
    ck = str(run / "checkpoint.dsackpt")

    assert main(["-q", "eval", "--config", str(run / "report.json"), "--checkpoint", ck,
                 "--out", str(tmp_path / "ev")]) == 0
    ev = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert ev["metrics"] == rep["metrics"]

    img = tmp_path / "img.fmap"
    write_fmap(img, np.random.default_rng(0).uniform(size=(3, 32, 32)))
    maps = tmp_path / "maps"
    assert main(["-q", "attnmap", "--config", str(run / "report.json"), "--checkpoint", ck, "--image", str(img),
                 "--format", "csv", "--out", str(maps)]) == 0
    names = sorted(p.name for p in maps.glob("*.csv"))
    assert names == ["P3_cls.csv", "P3_loc.csv", "P4_cls.csv", "P4_loc.csv"]
    entries = json.loads((maps / "attnmap.json").read_text())
    for e in entries:
        assert 0 <= e["mean_entropy"] <= e["entropy_bound"] + 1e-12
        row = np.loadtxt(maps / e["file"], delimiter=",", ndmin=2)
        assert abs(row.sum() - 1) <= 1e-9

    assert main(["-q", "train", *tiny_args(), "--set", "epochs=1", "--min-loss-drop", "0.99",
                 "--out", str(tmp_path / "r2")]) == 1


def test_cli_ablate_placement_axis(tmp_path, capsys):
    out = tmp_path / "abl"
    assert main(["-q", "ablate", *tiny_args(), "--set", "epochs=1", "--axis", "placement=before,after,none",
                 "--out", str(out)]) == 0
    rows = list(csv.reader(open(out / "ablation.csv")))
    assert rows[0][0] == "config" and len(rows) == 4
    assert [r[0] for r in rows[1:]] == ["placement-after", "placement-before", "placement-none"]
    assert len({r[-1] for r in rows[1:]}) == 3
    for name in ("placement-after", "placement-before", "placement-none"):
        assert (out / name / "report.json").exists()
    assert (out / "ablation.png").exists()


def test_cli_ablate_needs_grid(capsys):
    assert main(["ablate", *tiny_args()]) == 2


def test_report_replay_is_bitwise(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["-q", "train", *tiny_args(), "--set", "with_confidence=true", "--out", str(a)]) == 0
    assert main(["-q", "train", "--config", str(a / "report.json"), "--out", str(b)]) == 0
    assert (a / "metrics.csv").read_bytes() == (b / "metrics.csv").read_bytes()
    ra, rb = (json.loads((d / "report.json").read_text()) for d in (a, b))
    ra.pop("timing"), rb.pop("timing")
    assert ra == rb
