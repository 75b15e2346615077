from __future__ import annotations

import json

import numpy as np
import pytest

from signsynth.cli import run
from signsynth.core import DatasetManifest, Provenance, read_image
from signsynth.toy import count_shaped_detection, default_taxonomy

TINY = ["--set", "inpaint.channels=4", "--set", "inpaint.res_blocks=1", "--set", "styled.channels=8",
        "--set", "placement.map_size=16"]


def test_no_arguments_is_usage_error(capsys):
    assert run([]) == 2
    assert "usage" in capsys.readouterr().err


@pytest.mark.parametrize("argv", [["bogus"], ["generate", "--approach", "stacked"], ["evaluate"]])
def test_bad_flags_exit_two(argv):
    assert run(argv) == 2


def test_runtime_failure_exits_one(tmp_path, capsys):
    assert run(["validate-data", "--train", str(tmp_path / "none.txt"), "--test", str(tmp_path / "none.txt")]) == 1
    assert "error" in capsys.readouterr().err
    assert run(["--set", "loss.bogus=1", "make-toy", "--out", str(tmp_path)]) == 1


def test_validate_data_on_detection_shaped_fixture(tmp_path, capsys):
    tax = default_taxonomy()
    for split in ("train", "test"):
        count_shaped_detection(split, tax, seed=0).save(tmp_path / f"{split}.txt")
    assert run(["validate-data", "--train", str(tmp_path / "train.txt"), "--test", str(tmp_path / "test.txt")]) == 0
    out = capsys.readouterr().out
    assert "Train         47639    80277" in out and "Test          11389    25232" in out
    assert "205 total, 106 train-present, 99 rare" in out and "PASS" in out


@pytest.fixture(scope="module")
def toy(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert run(["make-toy", "--out", str(root / "toy"), "--train-frames", "4", "--test-frames", "2"]) == 0
    return root


def _common(toy):
    t = toy / "toy"
    return ["--manifest", str(t / "train.txt"), "--images", str(t)]


def test_validate_data_on_toy_corpus(toy, capsys):
    t = toy / "toy"
    argv = ["validate-data", "--train", str(t / "train.txt"), "--test", str(t / "test.txt"),
            "--taxonomy", str(t / "taxonomy.json")]
    assert run(argv) == 0
    assert "8 total, 6 train-present, 2 rare" in capsys.readouterr().out
    # the test split contains rare classes, so using it for training is a violation
    bad = ["validate-data", "--train", str(t / "test.txt"), "--test", str(t / "test.txt"),
           "--taxonomy", str(t / "taxonomy.json")]
    manifest = DatasetManifest.load(t / "test.txt")
    if any(a.class_id in (6, 7) for a in manifest.annotations()):
        assert run(bad) == 1


@pytest.fixture(scope="module")
def trained(toy):
    t = toy / "toy"
    log = str(toy / "log.jsonl")
    c = _common(toy)
    assert run([*TINY, "--log", log, "train-inpaint", *c, "--steps", "2", "--patches", "8",
                "--out", str(toy / "inp.npz")]) == 0
    assert run([*TINY, "--log", log, "train-embed", "--approach", "cycled", *c, "--icons", str(t / "icons"),
                "--steps", "2", "--patches", "8", "--out", str(toy / "cyc.npz")]) == 0
    assert run([*TINY, "--log", log, "--set", "styled.steps_per_stage=1", "--set", "styled.batch=2", "train-styled",
                *c, "--icons", str(t / "icons"), "--inpaint", str(toy / "inp.npz"), "--out",
                str(toy / "sty.npz")]) == 0
    assert run([*TINY, "--log", log, "train-placement", "--manifest", str(t / "train.txt"), "--maps",
                str(t / "maps"), "--steps", "2", "--batch", "2", "--out", str(toy / "where.npz")]) == 0
    return toy


def test_training_logs_config_hash_and_diversity(trained):
    records = [json.loads(line) for line in (trained / "log.jsonl").read_text().splitlines()]
    starts = [r for r in records if r["event"] == "start"]
    assert len(starts) == 4 and all(len(r["config_hash"]) == 16 for r in starts)
    assert any(r["event"] == "diversity" for r in records)
    assert all(r["code"] == 0 for r in records if r["event"] == "end")


def _generate(toy, out, seed, *extra):
    t = toy / "toy"
    return run([*TINY, "generate", *_common(toy), "--icons", str(t / "icons"), "--seed", str(seed),
                "--out", str(out), *extra])


def test_generate_same_seed_same_manifest_hash(trained, tmp_path, capsys):
    args = ("--approach", "cycled", "--embed", str(trained / "cyc.npz"))
    assert _generate(trained, tmp_path / "a", 7, *args) == 0
    assert _generate(trained, tmp_path / "b", 7, *args) == 0
    h1, h2 = capsys.readouterr().out.split()
    assert h1 == h2 == DatasetManifest.load(tmp_path / "a" / "manifest.txt").sha256()


def test_generate_styled_nn_only_synt(trained, tmp_path):
    t = trained / "toy"
    args = ("--approach", "styled", "--mode", "nn", "--variant", "only-synt", "--styled", str(trained / "sty.npz"),
            "--inpaint", str(trained / "inp.npz"), "--where", str(trained / "where.npz"), "--maps", str(t / "maps"),
            "--balance", "--taxonomy", str(t / "taxonomy.json"))
    assert _generate(trained, tmp_path, 1, *args) == 0
    m = DatasetManifest.load(tmp_path / "manifest.txt")
    assert all(a.provenance is Provenance.SYNTHETIC for a in m.annotations())
    expected = 0 if m.sign_count else 1  # an empty grid is an error
    assert run(["render-grid", "--manifest", str(tmp_path / "manifest.txt"), "--images", str(tmp_path),
                "--out", str(tmp_path / "grid.png"), "--tile", "32"]) == expected


@pytest.mark.parametrize("method", ["kde", "nn"])
def test_sample_placements(method, trained, tmp_path):
    t = trained / "toy"
    out = tmp_path / "boxes.txt"
    argv = ["sample-placements", "--method", method, "--manifest", str(t / "train.txt"), "--out", str(out),
            "--heatmap", str(tmp_path / "heat.png"), "--keep-existing"]
    if method == "nn":
        argv += ["--where", str(trained / "where.npz"), "--maps", str(t / "maps")]
    assert run([*TINY, *argv]) == 0
    for line in out.read_text().splitlines():
        _, x, y, w, h = line.split()
        assert int(x) >= 0 and int(y) >= 0 and int(x) + int(w) <= 192 and int(y) + int(h) <= 128
    assert read_image(tmp_path / "heat.png").shape == (144, 256, 3)
    if method == "nn":
        assert run(argv[:-4] + ["--keep-existing"]) == 1  # nn without a where module


def test_render_grid_of_real_signs(toy, tmp_path):
    t = toy / "toy"
    assert run(["render-grid", "--manifest", str(t / "train.txt"), "--images", str(t), "--provenance", "real",
                "--tile", "32", "--cols", "2", "--out", str(tmp_path / "g.png")]) == 0
    grid = read_image(tmp_path / "g.png")
    assert grid.shape[1] == 64 and grid.shape[0] % 32 == 0
    assert run(["render-grid", "--manifest", str(t / "train.txt"), "--images", str(t), "--provenance", "synthetic",
                "--out", str(tmp_path / "h.png")]) == 1


def test_evaluate_classification_and_detection(toy, tmp_path, capsys):
    t = toy / "toy"
    (tmp_path / "labels.txt").write_text("a 0\nb 6\nc 1\n")
    (tmp_path / "pred.txt").write_text("a 0 0.9\nb 0 0.8\nc 1 0.7\n")
    assert run(["evaluate", "--predictions", str(tmp_path / "pred.txt"), "--labels", str(tmp_path / "labels.txt"),
                "--taxonomy", str(t / "taxonomy.json"), "--name", "toy"]) == 0
    out = capsys.readouterr().out
    assert "toy" in out and "66.67" in out
    m = DatasetManifest.load(t / "test.txt")
    lines = [f"{f.frame_id} {a.bbox.x} {a.bbox.y} {a.bbox.w} {a.bbox.h} 1.0 {a.class_id}\n"
             for f in m.frames for a in f.annotations]
    (tmp_path / "det.txt").write_text("".join(lines))
    assert run(["evaluate", "--detections", str(tmp_path / "det.txt"), "--ground-truth", str(t / "test.txt")]) == 0
    assert "AUC@0.50: 100.00" in capsys.readouterr().out
    (tmp_path / "short.txt").write_text("a 0 0.9\n")
    assert run(["evaluate", "--predictions", str(tmp_path / "short.txt"), "--labels",
                str(tmp_path / "labels.txt")]) == 1


def test_make_toy_is_seeded(tmp_path):
    for name in ("a", "b"):
        assert run(["make-toy", "--out", str(tmp_path / name), "--train-frames", "2", "--test-frames", "1"]) == 0
    a = read_image(tmp_path / "a" / "images" / "train_00000.png")
    assert np.array_equal(a, read_image(tmp_path / "b" / "images" / "train_00000.png"))


def test_paths_come_from_flags_or_config(tmp_path):
    assert run(["make-toy", "--train-frames", "1", "--test-frames", "1"]) == 2
    out = tmp_path / "from_config"
    assert run(["--set", f"paths.out={out}", "make-toy", "--train-frames", "1", "--test-frames", "1"]) == 0
    assert (out / "train.txt").exists()
