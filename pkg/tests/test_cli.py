"""End-to-end command-line runs: verbs, artifacts, and exit codes.

Everything drives ``dhat.cli.main`` in-process; a module-scoped pipeline
run provides the checkpoints that the read-only verbs inspect.
"""

import csv
import json
import math

import numpy as np
import pytest
from PIL import Image

from dhat.checkpoint import read_header
from dhat.cli import main
from dhat.data import load_idx

NUM_CLASSES = 3
EPS = 0.1


def config_doc(out_dir: str) -> dict:
    return {
        "seed": 0,
        "output_dir": out_dir,
        "data": {"source": "synth", "num_classes": NUM_CLASSES,
                 "image_size": 8, "sigma": 0.05, "train_per_class": 10,
                 "val_per_class": 4, "test_per_class": 6},
        "arch": {"family": "smallconv", "depth": 2,
                 "num_classes": NUM_CLASSES, "input_channels": 1,
                 "input_size": 8},
        "attach": {"group": 1, "merge_init": "average"},
        "stages": [
            {"stage": "main_head",
             "objective": {"kind": "sat",
                           "attack": {"epsilon": EPS, "num_steps": 2,
                                      "step_size": 0.05}},
             "epochs": 2, "optimizer": {"lr": 0.05}, "batch_size": 10},
            {"stage": "second_head",
             "objective": {"kind": "trades", "inv_lambda": 3.0,
                           "attack": {"epsilon": EPS, "num_steps": 2,
                                      "step_size": 0.05, "loss_mode": "kl"}},
             "epochs": 1, "optimizer": {"lr": 0.05}, "batch_size": 10},
            {"stage": "merge",
             "objective": {"kind": "trades", "inv_lambda": 2.0,
                           "attack": {"epsilon": EPS, "num_steps": 2,
                                      "step_size": 0.05, "loss_mode": "kl"}},
             "epochs": 1, "optimizer": {"lr": 0.02}, "batch_size": 10,
             "select": "best"},
        ],
        "eval": [{"name": "pgd4", "epsilon": EPS, "num_steps": 4}],
    }


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One trained pipeline shared by every read-only CLI test."""
    root = tmp_path_factory.mktemp("cli")
    out = root / "run"
    config = root / "run.json"
    config.write_text(json.dumps(config_doc(str(out))))
    assert main(["train", "--config", str(config)]) == 0
    return {"root": root, "config": str(config), "out": out}


class TestTrain:
    def test_writes_all_stage_checkpoints(self, workspace):
        for name in ("stage1.dhat", "stage2.dhat", "stage3.dhat"):
            assert (workspace["out"] / name).is_file()

    def test_log_columns_and_finite_losses(self, workspace):
        with open(workspace["out"] / "log_stage1.csv") as f:
            rows = list(csv.DictReader(f))
        assert list(rows[0]) == ["stage", "epoch", "train_loss", "val_clean",
                                 "val_robust", "lr"]
        assert [r["epoch"] for r in rows] == ["1", "2"]
        for r in rows:
            assert math.isfinite(float(r["train_loss"]))
            assert float(r["lr"]) == 0.05

    def test_checkpoints_carry_the_config_digest(self, workspace):
        h1 = read_header(workspace["out"] / "stage1.dhat")
        h3 = read_header(workspace["out"] / "stage3.dhat")
        digest = h1["metadata"]["config_digest"]
        assert digest and digest == h3["metadata"]["config_digest"]

    def test_single_stage_rerun_is_byte_identical(self, workspace, tmp_path):
        a, b = tmp_path / "a", tmp_path / "b"
        for out in (a, b):
            code = main(["train", "--config", workspace["config"],
                         "--stage", "1", "--output-dir", str(out)])
            assert code == 0
        assert (a / "stage1.dhat").read_bytes() == (b / "stage1.dhat").read_bytes()

    def test_stagewise_run_matches_the_pipeline(self, workspace, tmp_path):
        out = tmp_path / "stepwise"
        for n in ("1", "2", "3"):
            assert main(["train", "--config", workspace["config"],
                         "--stage", n, "--output-dir", str(out)]) == 0
        want = (workspace["out"] / "stage3.dhat").read_bytes()
        assert (out / "stage3.dhat").read_bytes() == want

    def test_stage_two_without_stage_one_artifact(self, workspace, tmp_path):
        code = main(["train", "--config", workspace["config"],
                     "--stage", "2", "--output-dir", str(tmp_path / "empty")])
        assert code == 3

    def test_unknown_config_key_exits_2(self, workspace, tmp_path, capsys):
        doc = config_doc(str(tmp_path))
        doc["arch"]["familyy"] = "oops"
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        assert main(["train", "--config", str(bad)]) == 2
        assert "arch.familyy" in capsys.readouterr().err

    def test_missing_required_key_names_the_path(self, workspace, tmp_path,
                                                 capsys):
        doc = config_doc(str(tmp_path))
        del doc["arch"]["family"]
        bad = tmp_path / "bad.json"
        bad.write_text(json.dumps(doc))
        assert main(["train", "--config", str(bad)]) == 2
        assert "arch.family" in capsys.readouterr().err


class TestEval:
    def test_clean_only_report(self, workspace, tmp_path):
        report = tmp_path / "r.json"
        code = main(["eval", str(workspace["out"] / "stage3.dhat"),
                     "--config", workspace["config"], "--attack", "none",
                     "--report", str(report)])
        assert code == 0
        doc = json.loads(report.read_text())
        assert doc["attacks"] == []
        assert 0.0 <= doc["clean_accuracy"] <= 1.0
        assert doc["mode"] == "merged"

    def test_zero_epsilon_robust_equals_clean(self, workspace, tmp_path):
        report = tmp_path / "r.json"
        code = main(["eval", str(workspace["out"] / "stage1.dhat"),
                     "--config", workspace["config"], "--attack", "pgd",
                     "--eps", "0", "--steps", "3", "--report", str(report)])
        assert code == 0
        doc = json.loads(report.read_text())
        assert doc["attacks"][0]["robust_accuracy"] == doc["clean_accuracy"]

    def test_derived_step_size_is_recorded(self, workspace, tmp_path):
        report = tmp_path / "r.json"
        code = main(["eval", str(workspace["out"] / "stage1.dhat"),
                     "--config", workspace["config"], "--attack", "pgd",
                     "--eps", str(8 / 255), "--steps", "40",
                     "--report", str(report)])
        assert code == 0
        entry = json.loads(report.read_text())["attacks"][0]
        assert entry["step_size"] == pytest.approx(0.00196078, abs=1e-8)

    def test_config_eval_list_is_the_default(self, workspace, tmp_path):
        report = tmp_path / "r.json"
        code = main(["eval", str(workspace["out"] / "stage3.dhat"),
                     "--config", workspace["config"],
                     "--report", str(report)])
        assert code == 0
        doc = json.loads(report.read_text())
        assert [a["name"] for a in doc["attacks"]] == ["pgd4"]

    def test_worker_count_does_not_change_the_answer(self, workspace,
                                                     tmp_path):
        args = ["eval", str(workspace["out"] / "stage3.dhat"),
                "--config", workspace["config"], "--attack", "pgd",
                "--eps", "0.15", "--steps", "3", "--batch-size", "4",
                "--heads", "second"]
        values = []
        for workers in ("1", "3"):
            report = tmp_path / f"w{workers}.json"
            assert main(args + ["--workers", workers,
                                "--report", str(report)]) == 0
            values.append(json.loads(report.read_text())
                          ["attacks"][0]["robust_accuracy"])
        assert values[0] == values[1]

    def test_env_var_overrides_worker_flag(self, workspace, tmp_path,
                                           monkeypatch):
        monkeypatch.setenv("DHAT_THREADS", "not-a-number")
        code = main(["eval", str(workspace["out"] / "stage3.dhat"),
                     "--config", workspace["config"], "--attack", "none"])
        assert code == 2

    def test_merged_mode_on_single_head_exits_2(self, workspace):
        code = main(["eval", str(workspace["out"] / "stage1.dhat"),
                     "--config", workspace["config"], "--attack", "none",
                     "--heads", "merged"])
        assert code == 2

    def test_corrupt_checkpoint_exits_3(self, workspace, tmp_path):
        bad = tmp_path / "bad.dhat"
        bad.write_bytes(b"not a checkpoint")
        code = main(["eval", str(bad), "--config", workspace["config"],
                     "--attack", "none"])
        assert code == 3

    def test_missing_checkpoint_exits_3(self, workspace, tmp_path):
        code = main(["eval", str(tmp_path / "gone.dhat"),
                     "--config", workspace["config"], "--attack", "none"])
        assert code == 3


class TestCrossEval:
    def test_same_model_gives_identical_rows(self, workspace, tmp_path):
        report = tmp_path / "x.json"
        ckpt = str(workspace["out"] / "stage1.dhat")
        code = main(["cross-eval", ckpt, ckpt, "--config",
                     workspace["config"], "--attack", "pgd", "--eps",
                     str(EPS), "--steps", "3", "--report", str(report)])
        assert code == 0
        acc = json.loads(report.read_text())["accuracy"]
        assert acc["a"] == acc["b"]

    def test_zero_epsilon_cells_all_equal_clean(self, workspace, tmp_path):
        report = tmp_path / "x.json"
        clean_report = tmp_path / "c.json"
        a = str(workspace["out"] / "stage1.dhat")
        b = str(workspace["out"] / "stage3.dhat")
        assert main(["cross-eval", a, b, "--config", workspace["config"],
                     "--attack", "pgd", "--eps", "0", "--steps", "2",
                     "--heads-b", "main", "--report", str(report)]) == 0
        assert main(["eval", a, "--config", workspace["config"],
                     "--attack", "none", "--report", str(clean_report)]) == 0
        acc = json.loads(report.read_text())["accuracy"]
        clean = json.loads(clean_report.read_text())["clean_accuracy"]
        # stage-3 main head is byte-frozen at its stage-1 state, so all
        # four cells collapse to the same clean accuracy
        for source in ("a", "b"):
            for target in ("a", "b"):
                assert acc[source][target] == clean


class TestInspect:
    def test_single_head_reports_zero_second_head(self, workspace, capsys):
        assert main(["inspect", str(workspace["out"] / "stage1.dhat")]) == 0
        out = capsys.readouterr().out
        assert "params head_second: 0" in out
        assert "kind: single" in out

    def test_json_dump_has_counts_and_ratios(self, workspace, capsys):
        assert main(["inspect", str(workspace["out"] / "stage3.dhat"),
                     "--json"]) == 0
        doc = json.loads(capsys.readouterr().out)
        assert doc["kind"] == "dual"
        assert doc["counts"]["head_second"] > 0
        assert doc["counts"]["total"] == sum(
            doc["counts"][k] for k in ("stem", "head_main", "head_second",
                                       "merge"))
        assert 0.0 < doc["ratios"]["second_over_main"] <= 1.5
        assert set(doc["frozen_regions"]) == {"stem", "head_main",
                                              "head_second"}


class TestExportNoise:
    def test_zero_perturbation_renders_mid_gray(self, workspace, tmp_path):
        out = tmp_path / "n.png"
        code = main(["export-noise", str(workspace["out"] / "stage1.dhat"),
                     "--config", workspace["config"], "--attack", "pgd",
                     "--eps", "0", "--steps", "1", "--out", str(out)])
        assert code == 0
        pixels = np.asarray(Image.open(out))
        assert np.all(pixels == 128)
        assert (tmp_path / "n_adv.png").is_file()

    def test_adversarial_image_is_written(self, workspace, tmp_path):
        out = tmp_path / "n.png"
        code = main(["export-noise", str(workspace["out"] / "stage3.dhat"),
                     "--config", workspace["config"], "--attack", "pgd",
                     "--eps", str(EPS), "--steps", "3", "--index", "2",
                     "--gain", "20", "--out", str(out)])
        assert code == 0
        noise = np.asarray(Image.open(out))
        adv = np.asarray(Image.open(tmp_path / "n_adv.png"))
        assert noise.shape == adv.shape == (8, 8)
        assert noise.std() > 0

    def test_out_of_range_index_exits_2(self, workspace, tmp_path):
        code = main(["export-noise", str(workspace["out"] / "stage1.dhat"),
                     "--config", workspace["config"], "--attack", "pgd",
                     "--eps", str(EPS), "--index", "999",
                     "--out", str(tmp_path / "n.png")])
        assert code == 2


class TestSynthData:
    def test_written_idx_pair_loads_back(self, tmp_path):
        code = main(["synth-data", "--out-images", str(tmp_path / "i.idx"),
                     "--out-labels", str(tmp_path / "l.idx"),
                     "--num-classes", "3", "--per-class", "5",
                     "--image-size", "8", "--sigma", "0.02", "--seed", "4"])
        assert code == 0
        ds = load_idx(tmp_path / "i.idx", tmp_path / "l.idx", num_classes=3)
        assert len(ds) == 15
        assert sorted(np.unique(ds.labels)) == [0, 1, 2]

    def test_same_seed_reproduces_the_files(self, tmp_path):
        for tag in ("a", "b"):
            assert main(["synth-data",
                         "--out-images", str(tmp_path / f"{tag}.idx"),
                         "--out-labels", str(tmp_path / f"{tag}l.idx"),
                         "--num-classes", "2", "--per-class", "3",
                         "--image-size", "8", "--seed", "9"]) == 0
        assert (tmp_path / "a.idx").read_bytes() == (tmp_path / "b.idx").read_bytes()
