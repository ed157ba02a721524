import json
from pathlib import Path

import numpy as np
import pytest

from metriclab import cli


BASE = {
    "seed": 3,
    "dataset": {"kind": "blobs", "class_count": 4, "per_class": 40,
                "dim": 8, "separation": 8.0},
    "split": {"kind": "holdout", "test_fraction": 0.25},
    "model": {"embedding_dim": 16},
    "train": {"loss_kind": "hybrid", "epochs": 3, "learning_rate": 0.05,
              "batch_p": 4, "batch_k": 4},
    "partitioner": {"kind": "knn", "k": 5},
    "tsne": {"perplexity": 10.0, "iterations": 300},
    "openset": {"withheld_classes": [3], "k": 5},
}


def write_config(tmp_path, **overrides):
    cfg = json.loads(json.dumps(BASE))
    for key, val in overrides.items():
        if isinstance(val, dict) and isinstance(cfg.get(key), dict):
            cfg[key].update(val)
        else:
            cfg[key] = val
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return path


def read_metrics(path: Path) -> dict:
    rows = [line.split(",") for line in path.read_text().splitlines()[1:]]
    return {name: value for name, value in rows}


@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    tmp = tmp_path_factory.mktemp("clirun")
    cfg = write_config(tmp)
    out = tmp / "run"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out)]) == 0
    return cfg, out


# -------------------------------------------------------------------- train

def test_train_outputs(trained):
    _, out = trained
    assert (out / "checkpoint.bin").exists()
    assert (out / "config.echo.json").exists()
    lines = (out / "history.csv").read_text().splitlines()
    assert lines[0] == "epoch,softmax_loss,rtl_loss,val_accuracy"
    assert len(lines) == 1 + BASE["train"]["epochs"]
    for line in lines[1:]:
        epoch, sm, rtl, acc = line.split(",")
        assert np.isfinite(float(sm)) and np.isfinite(float(rtl))
        assert 0.0 <= float(acc) <= 1.0


def test_train_rerun_byte_identical(trained, tmp_path):
    cfg, out = trained
    out2 = tmp_path / "again"
    assert cli.main(["train", "--config", str(cfg), "--out", str(out2)]) == 0
    assert (out / "checkpoint.bin").read_bytes() == \
        (out2 / "checkpoint.bin").read_bytes()
    assert (out / "history.csv").read_bytes() == \
        (out2 / "history.csv").read_bytes()


def test_config_echo_carries_version_and_resolved_seed(trained):
    _, out = trained
    echo = json.loads((out / "config.echo.json").read_text())
    assert echo["version"]
    assert echo["seed"] == 3
    assert echo["model"]["num_classes"] == 4


# ----------------------------------------------------------------- evaluate

def test_evaluate_outputs(trained):
    cfg, out = trained
    assert cli.main(["evaluate", "--config", str(cfg),
                     "--out", str(out)]) == 0
    vals = read_metrics(out / "metrics.csv")
    assert set(vals) == {"accuracy_weighted", "precision_macro",
                         "recall_macro", "f1_macro", "rand_index"}
    for v in vals.values():
        assert 0.0 <= float(v) <= 100.0
        assert len(v.split(".")[1]) == 1  # one decimal place

    conf = (out / "confusion.csv").read_text().splitlines()
    assert conf[0] == "true,0,1,2,3"
    assert len(conf) == 5
    total = sum(int(v) for line in conf[1:] for v in line.split(",")[1:])
    assert total == 4 * 40 * 0.25


def test_evaluate_rerun_identical(trained, tmp_path):
    cfg, out = trained
    first = (out / "metrics.csv").read_bytes()
    assert cli.main(["evaluate", "--config", str(cfg),
                     "--out", str(out)]) == 0
    assert (out / "metrics.csv").read_bytes() == first


def test_evaluate_gmm_accuracy_na(trained):
    cfg, out = trained
    assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out),
                     "--partitioner", "gmm"]) == 0
    vals = read_metrics(out / "metrics.csv")
    assert vals["accuracy_weighted"] == "n/a"
    assert vals["f1_macro"] == "n/a"
    assert 0.0 <= float(vals["rand_index"]) <= 100.0
    # restore the knn metrics for later tests
    assert cli.main(["evaluate", "--config", str(cfg),
                     "--out", str(out)]) == 0


def test_evaluate_partitioner_flag(trained):
    cfg, out = trained
    assert cli.main(["evaluate", "--config", str(cfg), "--out", str(out),
                     "--partitioner", "lr"]) == 0
    echo = json.loads((out / "config.echo.json").read_text())
    assert echo["partitioner"]["kind"] == "lr"
    assert cli.main(["evaluate", "--config", str(cfg),
                     "--out", str(out)]) == 0


def test_evaluate_without_checkpoint_is_config_error(tmp_path):
    cfg = write_config(tmp_path)
    assert cli.main(["evaluate", "--config", str(cfg),
                     "--out", str(tmp_path / "empty")]) == 2


# ------------------------------------------------------------------ project

def test_project_outputs(trained):
    cfg, out = trained
    assert cli.main(["project", "--config", str(cfg),
                     "--out", str(out)]) == 0
    lines = (out / "layout.csv").read_text().splitlines()
    assert lines[0] == "id,x,y,true_label,predicted_label"
    assert len(lines) == 1 + 160  # train + test points
    svg = (out / "plot.svg").read_text()
    assert svg.count('class="legend"') == 4
    assert "RandIndex=" in svg


def test_project_bad_tsne_config(trained, tmp_path):
    cfg, out = trained
    bad = write_config(tmp_path, tsne={"iterations": 100})
    assert cli.main(["project", "--config", str(bad),
                     "--out", str(out)]) == 2


# ------------------------------------------------------------------ openset

def test_openset_outputs(trained):
    cfg, out = trained
    assert cli.main(["openset", "--config", str(cfg),
                     "--out", str(out)]) == 0
    seen = read_metrics(out / "metrics.seen.csv")
    unseen = read_metrics(out / "metrics.unseen.csv")
    for vals in (seen, unseen):
        assert vals["withheld_classes"] == "3"
        assert "accuracy_weighted" in vals
        assert "accuracy_macro" in vals
    assert float(unseen["accuracy_weighted"]) >= 0.0


def test_openset_withhold_all_rejected(tmp_path):
    cfg = write_config(tmp_path, openset={"withheld_classes": [0, 1, 2, 3]})
    assert cli.main(["openset", "--config", str(cfg),
                     "--out", str(tmp_path / "o")]) == 2


def test_openset_without_section_rejected(tmp_path):
    cfg = json.loads(json.dumps(BASE))
    del cfg["openset"]
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["openset", "--config", str(path),
                     "--out", str(tmp_path / "o")]) == 2


# ------------------------------------------------------------------- ablate

def test_ablate_loss_subset_matches_evaluate(trained, tmp_path):
    cfg_path, out = trained
    cfg = write_config(tmp_path, ablate={"sweep": "loss",
                                         "variants": ["hybrid"]})
    aout = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(cfg),
                     "--out", str(aout)]) == 0
    lines = (aout / "ablation.csv").read_text().splitlines()
    assert lines[0].startswith("variant,")
    assert len(lines) == 2
    cells = lines[1].split(",")
    assert cells[0] == "hybrid"
    # the same seed and pipeline as train+evaluate must give the same number
    evaluated = read_metrics(out / "metrics.csv")
    assert cells[1] == evaluated["accuracy_weighted"]


def test_ablate_partitioner_sweep_rows(trained, tmp_path):
    cfg = write_config(tmp_path, ablate={"sweep": "partitioner",
                                         "variants": ["knn", "gmm"]})
    aout = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(cfg),
                     "--out", str(aout)]) == 0
    lines = (aout / "ablation.csv").read_text().splitlines()
    names = [line.split(",")[0] for line in lines[1:]]
    assert names == ["knn", "gmm"]
    gmm_cells = lines[2].split(",")
    assert gmm_cells[1] == "n/a" and gmm_cells[5] != "n/a"


def test_ablate_failed_variant_recorded_in_row(tmp_path):
    # rotation needs image data, so R on vector blobs fails in its row
    cfg = write_config(tmp_path, ablate={"sweep": "augmentation",
                                         "variants": ["R", "none"]},
                       train={"epochs": 2})
    aout = tmp_path / "abl"
    assert cli.main(["ablate", "--config", str(cfg),
                     "--out", str(aout)]) == 0
    lines = (aout / "ablation.csv").read_text().splitlines()
    r_row = lines[1].split(",")
    none_row = lines[2].split(",")
    assert r_row[0] == "R" and r_row[1] == "n/a" and r_row[6] != ""
    assert none_row[0] == "none" and none_row[6] == ""


def test_ablate_resolution_needs_glyphs(tmp_path):
    cfg = write_config(tmp_path, ablate={"sweep": "resolution",
                                         "sizes": [8, 12]})
    assert cli.main(["ablate", "--config", str(cfg),
                     "--out", str(tmp_path / "a")]) == 2


def test_ablate_unknown_sweep(tmp_path):
    cfg = write_config(tmp_path, ablate={"sweep": "optimizers"})
    assert cli.main(["ablate", "--config", str(cfg),
                     "--out", str(tmp_path / "a")]) == 2


# -------------------------------------------------------------- exit codes

def test_missing_manifest_exit_2(tmp_path):
    cfg = write_config(tmp_path,
                       dataset={"kind": "manifest",
                                "path": str(tmp_path / "nope.csv")})
    assert cli.main(["train", "--config", str(cfg),
                     "--out", str(tmp_path / "r")]) == 2


def test_bad_json_exit_2(tmp_path):
    path = tmp_path / "broken.json"
    path.write_text("{not json")
    assert cli.main(["train", "--config", str(path),
                     "--out", str(tmp_path / "r")]) == 2


def test_missing_seed_exit_2(tmp_path):
    cfg = json.loads(json.dumps(BASE))
    del cfg["seed"]
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["train", "--config", str(path),
                     "--out", str(tmp_path / "r")]) == 2


def test_seed_flag_fills_in(tmp_path):
    cfg = json.loads(json.dumps(BASE))
    del cfg["seed"]
    cfg["train"]["epochs"] = 1
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    out = tmp_path / "r"
    assert cli.main(["train", "--config", str(path), "--out", str(out),
                     "--seed", "11"]) == 0
    echo = json.loads((out / "config.echo.json").read_text())
    assert echo["seed"] == 11


def test_unknown_config_key_exit_2(tmp_path):
    cfg = write_config(tmp_path, optimzer={"kind": "sgd"})
    assert cli.main(["train", "--config", str(cfg),
                     "--out", str(tmp_path / "r")]) == 2


def test_runtime_failure_exit_3(tmp_path):
    cfg = write_config(tmp_path, train={"loss_kind": "triplet", "epochs": 2,
                                        "learning_rate": 1e12})
    with np.errstate(over="ignore", invalid="ignore"):
        code = cli.main(["train", "--config", str(cfg),
                         "--out", str(tmp_path / "r")])
    assert code == 3


def test_vector_rotation_rejected_at_validation(tmp_path):
    cfg = write_config(tmp_path, train={"augment_ops": ["R"]})
    assert cli.main(["train", "--config", str(cfg),
                     "--out", str(tmp_path / "r")]) == 2
