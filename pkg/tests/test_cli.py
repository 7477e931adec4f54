import csv
import hashlib
import json

import numpy as np
import pytest

from malafide import cli
from malafide.attack import AttackDiverged, default_attack_lr, load_filter
from malafide.detector import load_detector

SMALL = ["--n-bona", "8", "--height", "32", "--width", "32"]


def run(*argv):
    return cli.main([str(a) for a in argv])


def tree_digest(root):
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file():
            h.update(str(p.relative_to(root)).encode())
            h.update(p.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def pipeline(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipe")
    data, out = root / "data", root / "run"
    assert run("gen-data", "--out", data, "--seed", 1, *SMALL) == 0
    for arch in "AB":
        assert run("train-detector", "--data", data, "--arch", arch, "--epochs", 2, "--out", out, "--quiet") == 0
    return root, data, out


def test_gen_data_defaults_write_full_corpus(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d") == 0
    rows = list(csv.DictReader(open(tmp_path / "d" / "manifest.csv")))
    assert sum(r["label"] == "bona_fide" for r in rows) == 200
    assert sum(r["label"] == "spoof" for r in rows) == 600
    assert len(list((tmp_path / "d" / "images").iterdir())) == 800


def test_gen_data_is_reproducible(tmp_path):
    for name in ("a", "b"):
        assert run("gen-data", "--out", tmp_path / name, "--seed", 4, *SMALL) == 0
    assert (tmp_path / "a" / "manifest.csv").read_bytes() == (tmp_path / "b" / "manifest.csv").read_bytes()
    assert tree_digest(tmp_path / "a" / "images") == tree_digest(tmp_path / "b" / "images")


def test_gen_data_invalid_attack_leaves_nothing(tmp_path, capsys):
    out = tmp_path / "d"
    assert run("gen-data", "--out", out, "--attacks", "region_swap,morph", *SMALL) == 2
    assert "morph" in capsys.readouterr().err
    assert not out.exists()
    assert list(tmp_path.iterdir()) == []


def test_gen_data_unwritable_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert run("gen-data", "--out", blocker / "sub", *SMALL) == 2


def test_train_detector_outputs(pipeline):
    _, _, out = pipeline
    for arch in "AB":
        det = load_detector(out / f"detector_{arch}.json")
        assert det.frozen and det.architecture_id == arch
        meta = json.loads((out / f"detector_{arch}.meta.json").read_text())
        assert meta["train_config"]["epochs"] == 2 and meta["effective"]["arch"] == arch


def test_train_filter_size_and_log(pipeline, tmp_path):
    _, data, out = pipeline
    det = out / "detector_A.json"
    before = det.read_bytes()
    data_digest = tree_digest(data)
    code = run("train-filter", "--data", data, "--detector", det, "--attack", "texture_noise",
               "--size", 27, "--max-epochs", 1, "--out", tmp_path, "--quiet")  # fmt: skip
    assert code == 0
    f = load_filter(tmp_path / "filter_texture_noise_L27_A.json")
    assert f.size == 27 and f.coefficients.shape == (27, 27) and f.trained_on == "A"
    log = (tmp_path / "filter_texture_noise_L27_A_log.csv").read_text().splitlines()
    assert log[0] == "epoch,objective,eer" and len(log) == 2
    assert det.read_bytes() == before
    assert tree_digest(data) == data_digest


def test_train_filter_even_size_rejected(pipeline, tmp_path):
    _, data, out = pipeline
    with pytest.raises(SystemExit) as exc:
        run("train-filter", "--data", data, "--detector", out / "detector_A.json", "--attack", "color_shift",
            "--size", 4, "--out", tmp_path)  # fmt: skip
    assert exc.value.code == 2


def test_train_filter_missing_checkpoint(pipeline, tmp_path, capsys):
    _, data, _ = pipeline
    code = run("train-filter", "--data", data, "--detector", tmp_path / "nope.json", "--attack", "color_shift",
               "--size", 3, "--out", tmp_path)  # fmt: skip
    assert code == 2
    assert "nope.json" in capsys.readouterr().err


def test_train_filter_unknown_attack(pipeline, tmp_path):
    _, data, out = pipeline
    code = run("train-filter", "--data", data, "--detector", out / "detector_A.json", "--attack", "blur",
               "--size", 3, "--out", tmp_path)  # fmt: skip
    assert code == 2


def test_train_filter_divergence_exit_code(pipeline, tmp_path, monkeypatch):
    _, data, out = pipeline

    def boom(*a, **k):
        raise AttackDiverged("non-finite objective")

    monkeypatch.setattr(cli, "optimize_filter", boom)
    code = run("train-filter", "--data", data, "--detector", out / "detector_A.json", "--attack", "color_shift",
               "--size", 3, "--out", tmp_path)  # fmt: skip
    assert code == 3


def test_eval_lists_every_missing_filter(pipeline, tmp_path, capsys):
    _, data, out = pipeline
    code = run("eval", "--data", data, "--detectors", out / "detector_A.json", out / "detector_B.json",
               "--sizes", 3, 27, "--filters", tmp_path, "--out", tmp_path / "r")  # fmt: skip
    assert code == 2
    err = capsys.readouterr().err
    assert err.count("filter_") == 3 * 2 * 2
    assert not (tmp_path / "r" / "report.csv").exists()


def test_eval_lists_missing_checkpoint_and_filters_together(pipeline, tmp_path, capsys):
    _, data, out = pipeline
    code = run("eval", "--data", data, "--detectors", out / "detector_A.json", tmp_path / "gone.json",
               "--sizes", 3, "--filters", tmp_path, "--out", tmp_path)  # fmt: skip
    assert code == 2
    err = capsys.readouterr().err
    assert "gone.json" in err and err.count("filter_") == 3


def test_eval_identity_filters_match_baseline(pipeline, tmp_path):
    _, data, out = pipeline
    code = run("eval", "--data", data, "--detectors", out / "detector_A.json", out / "detector_B.json",
               "--sizes", 3, 9, "--identity-filters", "--out", tmp_path)  # fmt: skip
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "report.csv")))
    base = {(r["detector"], r["attack"]): r["eer_percent"] for r in rows if r["setting"] == "baseline"}
    for r in rows:
        if r["setting"] == "white":
            assert r["eer_percent"] == base[(r["detector"], r["attack"])]
        if r["setting"] == "black":
            other = "B" if r["detector"] == "A" else "A"
            assert r["eer_percent"] == base[(other, r["attack"])]
    assert len(rows) == 2 * 3 * (2 * 2 + 1)
    assert (tmp_path / "report.txt").read_text().startswith("EER [%]")


def test_gradcam_one_map_per_category_and_label(pipeline, tmp_path):
    _, data, out = pipeline
    assert run("train-filter", "--data", data, "--detector", out / "detector_B.json", "--attack", "region_swap",
               "--size", 3, "--max-epochs", 1, "--out", tmp_path, "--quiet") == 0  # fmt: skip
    code = run("gradcam", "--data", data, "--detector", out / "detector_B.json", "--filters", tmp_path,
               "--size", 3, "--attack", "region_swap", "--out", tmp_path)  # fmt: skip
    assert code == 0
    rows = list(csv.DictReader(open(tmp_path / "gradcam_B_manifest.csv")))
    combos = {(r["category"], r["label"]) for r in rows}
    assert combos == {(c, l) for c in ("bona_fide", "spoof", "spoof_malafide") for l in ("bona_fide", "spoof")}
    assert len(rows) == 6
    for r in rows:
        assert (tmp_path / r["path"]).read_bytes().startswith(b"P5\n32 32\n255\n")


def test_config_file_supplies_and_flags_override(pipeline, tmp_path):
    _, data, out = pipeline
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"data": str(data), "detector": str(out / "detector_A.json"),
                               "attack": "color_shift", "size": 5, "max_epochs": 3}))  # fmt: skip
    assert run("train-filter", "--config", cfg, "--max-epochs", 1, "--out", tmp_path, "--quiet") == 0
    meta = json.loads((tmp_path / "filter_color_shift_L5_A.meta.json").read_text())
    assert meta["attack_config"]["max_epochs"] == 1
    assert meta["effective"]["size"] == 5
    assert meta["attack_config"]["learning_rate"] == default_attack_lr("A", 5)


def test_config_unknown_key_rejected(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"n_bona": 8, "colour": "red"}))
    assert run("gen-data", "--config", cfg, "--out", tmp_path / "d") == 2
    assert "colour" in capsys.readouterr().err
    assert not (tmp_path / "d").exists()


def test_config_bad_value_rejected(tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"size": 4}))
    assert run("train-filter", "--config", cfg, "--data", tmp_path, "--detector", tmp_path / "d.json",
               "--attack", "x", "--out", tmp_path) == 2  # fmt: skip


def test_threads_flag(tmp_path):
    assert run("gen-data", "--out", tmp_path / "d", "--threads", 1, *SMALL) == 0
    assert run("gen-data", "--out", tmp_path / "e", "--threads", 0, *SMALL) == 2


def test_console_entry_point_help(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["--help"])
    assert exc.value.code == 0
    out = capsys.readouterr().out
    for name in ("gen-data", "train-detector", "train-filter", "eval", "gradcam"):
        assert name in out


def test_metadata_echo_has_no_timestamps(pipeline):
    _, data, _ = pipeline
    meta = json.loads((data / "gen-data.meta.json").read_text())
    assert meta["command"] == "gen-data" and meta["effective"]["seed"] == 1
    assert np.all(["time" not in k for k in meta["effective"]])
