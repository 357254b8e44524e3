import json

import numpy as np
import pytest

from lgseg.cli import run
from lgseg.scene import read_prediction, read_scene, write_prediction

GEN = ["--scenes", "3", "--categories", "8", "--density", "300", "--seed", "5"]


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    out = tmp_path_factory.mktemp("gen")
    assert run(["gen", "--out", str(out), *GEN]) == 0
    return out


def test_gen_writes_files_and_manifest(corpus):
    assert len(sorted(corpus.glob("*.sc3d"))) == 3
    assert (corpus / "catalog.tsv").exists()
    manifest = (corpus / "manifest.txt").read_text()
    assert "command=gen" in manifest and "seed=5" in manifest and "version.numpy=" in manifest


def test_gen_is_byte_deterministic(corpus, tmp_path):
    assert run(["gen", "--out", str(tmp_path), *GEN]) == 0
    for f in corpus.glob("*.sc3d"):
        assert (tmp_path / f.name).read_bytes() == f.read_bytes()


def test_eval_perfect_prediction(corpus, tmp_path, capsys):
    preds = tmp_path / "pred"
    preds.mkdir()
    for f in sorted(corpus.glob("*.sc3d")):
        s = read_scene(f)
        write_prediction(np.where(s.semantic == 0xFFFF, 0, s.semantic), preds / (f.stem + ".sprd"))
    code = run(["eval", "--gt", str(corpus), "--pred", str(preds),
                "--catalog", str(corpus / "catalog.tsv"), "--out", str(tmp_path / "ev")])
    assert code == 0
    assert "mIoU 1.000000" in capsys.readouterr().out
    report = json.loads((tmp_path / "ev" / "report.json").read_text())
    assert report["means"]["all"] == 1.0


def test_eval_inst_perfect(corpus, tmp_path, capsys):
    preds = tmp_path / "pred"
    preds.mkdir()
    for f in sorted(corpus.glob("*.sc3d")):
        write_prediction(read_scene(f).semantic, preds / (f.stem + ".sprd"))
    code = run(["eval-inst", "--gt", str(corpus), "--pred", str(preds),
                "--catalog", str(corpus / "catalog.tsv"), "--out", str(tmp_path / "ev")])
    assert code == 0
    assert (tmp_path / "ev" / "report_inst.txt").exists()


def test_corrupted_scene_is_data_error(corpus, tmp_path):
    bad = tmp_path / "bad.sc3d"
    data = bytearray(next(corpus.glob("*.sc3d")).read_bytes())
    data[0] ^= 0xFF
    bad.write_bytes(bytes(data))
    code = run(["stats", "--scenes", str(bad), "--catalog", str(corpus / "catalog.tsv"),
                "--out", str(tmp_path / "o")])
    assert code == 2


def test_usage_errors(tmp_path):
    assert run([]) == 1
    assert run(["gen"]) == 1
    assert run(["gen", "--out", str(tmp_path), "--bogus"]) == 1
    assert run(["stats", "--scenes", str(tmp_path / "missing"), "--catalog", "x",
                "--out", str(tmp_path)]) == 1


def test_config_file_and_flag_precedence(tmp_path):
    conf = tmp_path / "c.txt"
    conf.write_text("scenes=1\ncategories=6\ndensity=200\nseed=3\n")
    assert run(["gen", "--config", str(conf), "--seed", "4", "--out", str(tmp_path / "o")]) == 0
    manifest = (tmp_path / "o" / "manifest.txt").read_text()
    assert "seed=4" in manifest and "categories=6" in manifest
    conf.write_text("nonsense=1\n")
    assert run(["gen", "--config", str(conf), "--out", str(tmp_path / "o")]) == 1


def test_stats_and_annotate(corpus, tmp_path):
    assert run(["stats", "--scenes", str(corpus), "--catalog", str(corpus / "catalog.tsv"),
                "--out", str(tmp_path / "st")]) == 0
    rows = (tmp_path / "st" / "stats.tsv").read_text().splitlines()
    points = [int(r.split("\t")[3]) for r in rows[1:]]
    assert points == sorted(points, reverse=True)
    assert run(["annotate", "--scenes", str(corpus), "--fraction", "0.1",
                "--out", str(tmp_path / "m")]) == 0
    for f in corpus.glob("*.sc3d"):
        mask = read_prediction(tmp_path / "m" / (f.stem + ".mask"))
        assert len(mask) == len(read_scene(f)) and set(np.unique(mask)) <= {0, 1}


def test_train_predict_pipeline(corpus, tmp_path):
    common = ["--epochs", "2", "--max-cells", "64", "--hidden", "16"]
    cat = str(corpus / "catalog.tsv")
    assert run(["pretrain", "--train", str(corpus), "--catalog", cat, "--dim", "16",
                "--out", str(tmp_path / "pre"), *common]) == 0
    init = ["--init", str(tmp_path / "pre" / "encoder.ckpt"), "--samples", "1"]
    # the tiny corpus leaves a category with under two points, which cfocal rejects
    assert run(["finetune", "--train", str(corpus), "--catalog", cat, *init,
                "--out", str(tmp_path / "bad"), *common]) == 2
    assert run(["finetune", "--train", str(corpus), "--catalog", cat, *init, "--loss", "ce",
                "--out", str(tmp_path / "ft"), *common]) == 0
    assert run(["predict", "--model", str(tmp_path / "ft" / "model.ckpt"), "--scenes", str(corpus),
                "--out", str(tmp_path / "pred")]) == 0
    assert len(list((tmp_path / "pred").glob("*.sprd"))) == 3
    # an encoder checkpoint has no head
    assert run(["predict", "--model", str(tmp_path / "pre" / "encoder.ckpt"),
                "--scenes", str(corpus), "--out", str(tmp_path / "p2")]) == 2


def test_augment_command(corpus, tmp_path):
    assert run(["augment", "--scenes", str(corpus), "--catalog", str(corpus / "catalog.tsv"),
                "--samples", "2", "--out", str(tmp_path / "aug")]) == 0
    for f in corpus.glob("*.sc3d"):
        assert len(read_scene(tmp_path / "aug" / f.name)) >= len(read_scene(f))


def test_experiment_command(tmp_path, capsys):
    conf = tmp_path / "exp.txt"
    conf.write_text("n_categories=6\ntrain_scenes=2\nval_scenes=1\nseeds=0\n"
                    "pretrain_epochs=1\nfinetune_epochs=1\nmax_cells=32\nhidden=8\n"
                    "anchor_dim=8\nn_samples=1\n")
    assert run(["experiment", str(conf), "--out", str(tmp_path / "e")]) == 0
    table = (tmp_path / "e" / "table.txt").read_text()
    assert "ours" in table and "scratch+ce" in table
    assert "experiment.n_categories=6" in (tmp_path / "e" / "manifest.txt").read_text()
    assert run(["experiment", str(tmp_path / "nope.txt"), "--out", str(tmp_path / "e")]) == 1
