import csv
import hashlib
import json

import numpy as np
import pytest

from flowgate import cli
from flowgate import model as M
from flowgate.data import read_manifest
from flowgate.fileio import load_image
from flowgate.scoring import ScoreRecord, read_scores, write_scores
from flowgate.trainer import TrainResult

from oracles import exhaustive_youden, mann_whitney_auc

TINY = ["--levels", "1", "--depth", "1", "--width", "4", "--epochs", "1", "--batch", "8", "--warmup", "1"]
SMALL = ["--n-normal-train", "12", "--n-mixture-normal", "6", "--n-mixture-abnormal", "6",
         "--n-test-normal", "4", "--n-test-abnormal", "4"]


def run(*argv):
    return cli.main(["-q", *map(str, argv)])


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """A tiny 8x8 dataset with both models trained and scored."""
    root = tmp_path_factory.mktemp("cli")
    assert run("synth", "--out", root / "data", "--shape", "8x8x1", "--seed", 3, *SMALL) == 0
    manifest = root / "data" / "manifest.csv"
    for which in ("m0", "m1"):
        assert run("train", which, "--manifest", manifest, "--out", root / which, "--seed", 1, *TINY) == 0
    assert run("score", "--m0", root / "m0/model.fgck", "--m1", root / "m1/model.fgck",
               "--manifest", manifest, "--out", root / "score") == 0
    return root


# synth -------------------------------------------------------------------------------


def test_synth_default_counts(tmp_path):
    assert run("synth", "--out", tmp_path) == 0
    lines = (tmp_path / "manifest.csv").read_text().splitlines()
    body = [ln for ln in lines if not ln.startswith("#")][1:]
    splits = [row.split(",")[1] for row in body]
    assert splits.count("normal_train") == 250
    assert splits.count("mixture_train") == 1000
    assert splits.count("test") == 200
    labels = [row.split(",")[2] for row in body if row.split(",")[1] == "test"]
    assert sum(lab == "normal" for lab in labels) == 100
    assert sum(lab.startswith("abnormal") for lab in labels) == 100


def test_synth_is_reproducible_per_seed(tmp_path):
    for name in ("a", "b"):
        assert run("synth", "--out", tmp_path / name, "--seed", 5, *SMALL) == 0
    assert digest(tmp_path / "a/manifest.csv") == digest(tmp_path / "b/manifest.csv")
    for e in read_manifest(tmp_path / "a/manifest.csv").entries:
        assert digest(tmp_path / "a" / e.file) == digest(tmp_path / "b" / e.file)
    assert run("synth", "--out", tmp_path / "c", "--seed", 6, *SMALL) == 0
    first = read_manifest(tmp_path / "a/manifest.csv").entries[0].file
    assert digest(tmp_path / "a" / first) != digest(tmp_path / "c" / first)


def test_synth_shape_flag(tmp_path):
    assert run("synth", "--out", tmp_path, "--shape", "16x16x1", *SMALL) == 0
    m = read_manifest(tmp_path / "manifest.csv")
    assert m.shape == (16, 16, 1)
    assert all(load_image(tmp_path / e.file).shape == (16, 16, 1) for e in m.entries)


def test_synth_volumes(tmp_path):
    assert run("synth", "--out", tmp_path, "--preset", "desk3d", "--n-normal-train", 1, "--n-mixture-normal", 1,
               "--n-mixture-abnormal", 1, "--n-test-normal", 1, "--n-test-abnormal", 1) == 0
    m = read_manifest(tmp_path / "manifest.csv")
    assert m.shape == (8, 16, 16, 1) and m.n_bits == 7
    assert load_image(tmp_path / m.entries[0].file).shape == (8, 16, 16, 1)


def test_non_empty_output_needs_force(tmp_path):
    (tmp_path / "keep.txt").write_text("x")
    assert run("synth", "--out", tmp_path, *SMALL) == 2
    assert run("synth", "--out", tmp_path, "--force", *SMALL) == 0


# train --------------------------------------------------------------------------------


def test_train_outputs(workspace):
    for which in ("m0", "m1"):
        with open(workspace / which / "history.csv") as f:
            rows = list(csv.DictReader(f))
        assert len(rows) == 1
        meta = json.loads((workspace / which / "run.json").read_text())
        assert meta["split"] == {"m0": "normal_train", "m1": "mixture_train"}[which]
        assert meta["architecture"]["levels"] == 1


def test_train_is_deterministic(workspace, tmp_path):
    manifest = workspace / "data/manifest.csv"
    assert run("train", "m0", "--manifest", manifest, "--out", tmp_path, "--seed", 1, *TINY) == 0
    assert digest(tmp_path / "model.fgck") == digest(workspace / "m0/model.fgck")


def test_m0_refuses_abnormal_labels(workspace, tmp_path):
    text = (workspace / "data/manifest.csv").read_text()
    bad = text.replace(",normal_train,normal\n", ",normal_train,abnormal:bright\n", 1)
    assert bad != text
    (workspace / "data/bad.csv").write_text(bad)
    assert run("train", "m0", "--manifest", workspace / "data/bad.csv", "--out", tmp_path, *TINY) == 3
    assert not (tmp_path / "model.fgck").exists()


def test_training_abort_exit_code(workspace, tmp_path, monkeypatch):
    def diverged(model, images, cfg):
        return TrainResult(model, [], 0, float("inf"), aborted=True, reason="loss diverged at step 1")

    monkeypatch.setattr(cli, "train", diverged)
    manifest = workspace / "data/manifest.csv"
    assert run("train", "m1", "--manifest", manifest, "--out", tmp_path, *TINY) == 4


def test_missing_manifest_is_data_error(tmp_path):
    assert run("train", "m0", "--manifest", tmp_path / "none.csv", "--out", tmp_path / "o", *TINY) == 3


def test_unknown_preset_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("synth", "--out", tmp_path, "--preset", "huge")
    assert exc.value.code == 2


# score --------------------------------------------------------------------------------


def test_score_rows_match_test_split(workspace):
    records = read_scores(workspace / "score/scores.csv")
    assert len(records) == 8
    assert sum(r.label == "normal" for r in records) == 4
    meta = json.loads((workspace / "score/run.json").read_text())
    assert any("same population" in a for a in meta["assumptions"])


def test_score_twice_is_identical(workspace, tmp_path):
    assert run("score", "--m0", workspace / "m0/model.fgck", "--m1", workspace / "m1/model.fgck",
               "--manifest", workspace / "data/manifest.csv", "--out", tmp_path, "--threads", 1) == 0
    assert (tmp_path / "scores.csv").read_bytes() == (workspace / "score/scores.csv").read_bytes()


def test_swapping_models_negates_score(workspace, tmp_path):
    assert run("score", "--m0", workspace / "m1/model.fgck", "--m1", workspace / "m0/model.fgck",
               "--manifest", workspace / "data/manifest.csv", "--out", tmp_path) == 0
    ab = read_scores(workspace / "score/scores.csv")
    ba = read_scores(tmp_path / "scores.csv")
    assert [r.id for r in ab] == [r.id for r in ba]
    for x, y in zip(ab, ba):
        assert x.posterior_score == -y.posterior_score


def test_incompatible_checkpoints(workspace, tmp_path):
    other = M.build_glow((16, 16, 1), levels=1, depth=1, width=2)
    M.save(other, tmp_path / "other.fgck")
    code = run("score", "--m0", workspace / "m0/model.fgck", "--m1", tmp_path / "other.fgck",
               "--manifest", workspace / "data/manifest.csv", "--out", tmp_path / "s")
    assert code == 3


def test_corrupt_checkpoint(workspace, tmp_path):
    (tmp_path / "junk.fgck").write_bytes(b"FGCK\x00")
    code = run("score", "--m0", tmp_path / "junk.fgck", "--m1", workspace / "m1/model.fgck",
               "--manifest", workspace / "data/manifest.csv", "--out", tmp_path / "s")
    assert code == 3


# eval ---------------------------------------------------------------------------------


def test_eval_four_row_file(tmp_path):
    recs = [
        ScoreRecord("a", -9.0, 0.0, -9.0, 0.1, "abnormal:bright"),
        ScoreRecord("b", -3.0, 0.0, -3.0, 0.2, "abnormal:dark"),
        ScoreRecord("c", -5.0, 0.0, -5.0, 0.3, "normal"),
        ScoreRecord("d", 1.0, 0.0, 1.0, 0.4, "normal"),
    ]
    write_scores(tmp_path / "scores.csv", recs)
    assert run("eval", "--scores", tmp_path / "scores.csv", "--out", tmp_path / "ev") == 0
    summary = json.loads((tmp_path / "ev/summary.json").read_text())
    stat = [-r.posterior_score for r in recs]
    positive = [r.label != "normal" for r in recs]
    assert summary["posterior"]["overall"]["auc"] == mann_whitney_auc(stat, positive) == 0.75
    assert set(summary["posterior"]["per_label"]) == {"bright", "dark"}
    j, _, t = exhaustive_youden(stat, positive)
    assert summary["posterior"]["overall"]["youden_j"] == j
    assert summary["posterior"]["overall"]["youden_threshold"] == -t
    for name in ("roc.csv", "roc.svg", "hist_posterior.svg", "zero_pixels.svg"):
        assert (tmp_path / "ev" / name).stat().st_size > 0


def test_eval_without_labels_fails(tmp_path):
    write_scores(tmp_path / "s.csv", [ScoreRecord("a", 0.0, 0.0, 0.0, 0.0), ScoreRecord("b", 1.0, 0.0, 1.0, 0.0)])
    assert run("eval", "--scores", tmp_path / "s.csv", "--out", tmp_path / "ev") == 3


def test_eval_unreadable_scores(tmp_path):
    (tmp_path / "s.csv").write_text("nope\n1\n")
    assert run("eval", "--scores", tmp_path / "s.csv", "--out", tmp_path / "ev") == 3


# sample -------------------------------------------------------------------------------


def test_sample_reproducible(workspace, tmp_path):
    ckpt = workspace / "m0/model.fgck"
    for name in ("a", "b"):
        assert run("sample", "--checkpoint", ckpt, "--out", tmp_path / name, "--seed", 4) == 0
    assert digest(tmp_path / "a/sample_0000.pgm") == digest(tmp_path / "b/sample_0000.pgm")
    assert not (tmp_path / "a/sample_0001.pgm").exists()


def test_sample_zero_temperature_ignores_seed(workspace, tmp_path):
    ckpt = workspace / "m0/model.fgck"
    for seed in (1, 2):
        assert run("sample", "--checkpoint", ckpt, "--out", tmp_path / str(seed), "--seed", seed,
                   "--temperature", 0, "--n", 2) == 0
    for i in range(2):
        a = load_image(tmp_path / f"1/sample_{i:04d}.pgm")
        assert np.array_equal(a, load_image(tmp_path / f"2/sample_{i:04d}.pgm"))
        assert a.shape == (8, 8, 1) and a.max() < 256


# run.json ------------------------------------------------------------------------------


def test_every_subcommand_writes_run_json(workspace, tmp_path, monkeypatch):
    monkeypatch.setenv("FLOWGATE_DATA_ROOT", str(workspace / "data"))
    assert run("sample", "--checkpoint", workspace / "m0/model.fgck", "--out", tmp_path, "--seed", 9) == 0
    for sub in ("data", "m0", "m1", "score"):
        meta = json.loads((workspace / sub / "run.json").read_text())
        assert set(meta["versions"]) == {"flowgate", "python", "numpy", "scipy"}
        assert "config" in meta and "seed" in meta
    meta = json.loads((tmp_path / "run.json").read_text())
    assert meta["subcommand"] == "sample" and meta["seed"] == 9
    assert meta["config"]["temperature"] == 0.7
    assert meta["data_root_env"] == str(workspace / "data")
