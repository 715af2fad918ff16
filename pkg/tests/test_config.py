"""Run-config schema validation and dataset materialization."""

import copy
import json

import numpy as np
import pytest

from dhat.architectures import ArchSpec
from dhat.config import (load_datasets, load_run_config, parse_run_config)
from dhat.data import load_idx, save_idx, synth_dataset, SynthSpec
from dhat.errors import ConfigError


def base_config() -> dict:
    return {
        "seed": 7,
        "output_dir": "out",
        "data": {"source": "synth", "num_classes": 3, "image_size": 8,
                 "sigma": 0.05, "train_per_class": 10, "val_per_class": 4,
                 "test_per_class": 6},
        "arch": {"family": "smallconv", "depth": 2, "num_classes": 3,
                 "input_channels": 1, "input_size": 8},
        "attach": {"group": 1, "merge_init": "average"},
        "stages": [
            {"stage": "main_head",
             "objective": {"kind": "sat",
                           "attack": {"epsilon": 0.1, "num_steps": 2,
                                      "step_size": 0.05}},
             "epochs": 2,
             "optimizer": {"lr": 0.05, "momentum": 0.9,
                           "milestones": [[2, 0.1]]},
             "batch_size": 10},
            {"stage": "second_head",
             "objective": {"kind": "trades", "inv_lambda": 3.0,
                           "attack": {"epsilon": 0.1, "num_steps": 2,
                                      "step_size": 0.05, "loss_mode": "kl"}},
             "epochs": 1,
             "optimizer": {"lr": 0.05}},
            {"stage": "merge",
             "objective": {"kind": "trades", "inv_lambda": 2.0,
                           "attack": {"epsilon": 0.1, "num_steps": 2,
                                      "step_size": 0.05, "loss_mode": "kl"}},
             "epochs": 1,
             "optimizer": {"lr": 0.02},
             "select": "best"},
        ],
        "eval": [{"name": "pgd5", "epsilon": 0.1, "num_steps": 5},
                 {"epsilon": 0.1, "num_steps": 20}],
    }


class TestParsing:
    def test_happy_path_builds_typed_sections(self):
        cfg = parse_run_config(base_config())
        assert cfg.seed == 7
        assert cfg.output_dir == "out"
        assert isinstance(cfg.arch, ArchSpec)
        assert cfg.arch.family == "smallconv"
        assert [p.stage for p in cfg.stages] == ["main_head", "second_head",
                                                 "merge"]
        assert cfg.stages[0].objective.kind == "sat"
        assert cfg.stages[1].objective.inv_lambda == 3.0
        assert cfg.stages[0].optimizer.milestones == ((2, 0.1),)
        assert cfg.attach_group == 1
        assert cfg.merge_init == "average"

    def test_eval_attacks_get_default_names(self):
        cfg = parse_run_config(base_config())
        assert [name for name, _ in cfg.eval_attacks] == ["pgd5", "pgd20"]
        assert cfg.eval_attacks[1][1].num_steps == 20

    def test_stage_seed_defaults_to_run_seed(self):
        cfg = parse_run_config(base_config())
        assert all(p.seed == 7 for p in cfg.stages)

    def test_explicit_stage_seed_wins(self):
        doc = base_config()
        doc["stages"][0]["seed"] = 99
        cfg = parse_run_config(doc)
        assert cfg.stages[0].seed == 99
        assert cfg.stages[1].seed == 7

    def test_defaults_for_optional_sections(self):
        doc = base_config()
        del doc["seed"], doc["output_dir"], doc["attach"], doc["eval"]
        cfg = parse_run_config(doc)
        assert cfg.seed == 0
        assert cfg.output_dir == "."
        assert cfg.attach_group == 1
        assert cfg.merge_init == "random"
        assert cfg.eval_attacks == []

    def test_snapshots_follow_the_selection_policy(self):
        cfg = parse_run_config(base_config())
        assert cfg.stages[0].keep_snapshots is False
        assert cfg.stages[2].keep_snapshots is True


class TestRejection:
    def test_unknown_top_level_key(self):
        doc = base_config()
        doc["outputdir"] = "typo"
        with pytest.raises(ConfigError, match="outputdir"):
            parse_run_config(doc)

    @pytest.mark.parametrize("section", ["data", "arch", "stages"])
    def test_missing_required_section(self, section):
        doc = base_config()
        del doc[section]
        with pytest.raises(ConfigError, match=section):
            parse_run_config(doc)

    def test_missing_arch_family_names_the_path(self):
        doc = base_config()
        del doc["arch"]["family"]
        with pytest.raises(ConfigError, match=r"arch\.family"):
            parse_run_config(doc)

    def test_unknown_stage_key_names_the_index(self):
        doc = base_config()
        doc["stages"][1]["lr"] = 0.01
        with pytest.raises(ConfigError, match=r"stages\[1\]\.lr"):
            parse_run_config(doc)

    def test_unknown_attack_key_inside_objective(self):
        doc = base_config()
        doc["stages"][0]["objective"]["attack"]["alpha"] = 0.01
        with pytest.raises(ConfigError,
                           match=r"stages\[0\]\.objective\.attack\.alpha"):
            parse_run_config(doc)

    def test_missing_optimizer_lr(self):
        doc = base_config()
        del doc["stages"][2]["optimizer"]["lr"]
        with pytest.raises(ConfigError, match=r"stages\[2\]\.optimizer\.lr"):
            parse_run_config(doc)

    def test_wrong_stage_order(self):
        doc = base_config()
        doc["stages"][0], doc["stages"][1] = doc["stages"][1], doc["stages"][0]
        with pytest.raises(ConfigError, match="pipeline order"):
            parse_run_config(doc)

    def test_seed_must_be_an_integer(self):
        doc = base_config()
        doc["seed"] = "0"
        with pytest.raises(ConfigError, match="seed"):
            parse_run_config(doc)

    def test_bool_is_not_an_integer(self):
        doc = base_config()
        doc["stages"][0]["epochs"] = True
        with pytest.raises(ConfigError, match=r"stages\[0\]\.epochs"):
            parse_run_config(doc)

    def test_invalid_epsilon_is_a_config_error(self):
        doc = base_config()
        doc["eval"][0]["epsilon"] = 2.0
        with pytest.raises(ConfigError, match=r"eval\[0\]"):
            parse_run_config(doc)

    def test_invalid_merge_init(self):
        doc = base_config()
        doc["attach"]["merge_init"] = "identity"
        with pytest.raises(ConfigError, match="merge_init"):
            parse_run_config(doc)

    def test_bad_milestone_shape(self):
        doc = base_config()
        doc["stages"][0]["optimizer"]["milestones"] = [[2, 0.1, 0.5]]
        with pytest.raises(ConfigError, match="milestones"):
            parse_run_config(doc)

    def test_unknown_data_key_for_source(self):
        doc = base_config()
        doc["data"]["train_images"] = "x.idx"
        with pytest.raises(ConfigError, match=r"data\.train_images"):
            parse_run_config(doc)

    def test_bad_data_source(self):
        doc = base_config()
        doc["data"] = {"source": "mnist"}
        with pytest.raises(ConfigError, match=r"data\.source"):
            parse_run_config(doc)

    def test_non_object_document(self):
        with pytest.raises(ConfigError, match="object"):
            parse_run_config([1, 2, 3])

    def test_too_many_stages(self):
        doc = base_config()
        doc["stages"].append(copy.deepcopy(doc["stages"][2]))
        with pytest.raises(ConfigError, match="stages"):
            parse_run_config(doc)


class TestFileLoading:
    def test_round_trip_through_a_file(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text(json.dumps(base_config()))
        cfg = load_run_config(path)
        assert cfg.seed == 7

    def test_invalid_json_is_a_config_error(self, tmp_path):
        path = tmp_path / "run.json"
        path.write_text("{nope")
        with pytest.raises(ConfigError, match="JSON"):
            load_run_config(path)

    def test_missing_file_is_a_config_error(self, tmp_path):
        with pytest.raises(ConfigError, match="cannot read"):
            load_run_config(tmp_path / "nothere.json")


class TestDatasets:
    def test_synth_splits_have_the_configured_sizes(self):
        cfg = parse_run_config(base_config())
        train, val, test = load_datasets(cfg)
        assert len(train) == 30 and train.split == "train"
        assert len(val) == 12 and val.split == "val"
        assert len(test) == 18 and test.split == "test"
        assert train.num_classes == 3
        assert not np.array_equal(train.images[:12], val.images)

    def test_synth_uses_the_run_seed(self):
        doc = base_config()
        a, _, _ = load_datasets(parse_run_config(doc))
        doc["seed"] = 8
        b, _, _ = load_datasets(parse_run_config(doc))
        assert not np.array_equal(a.images, b.images)
        doc["seed"] = 7
        c, _, _ = load_datasets(parse_run_config(doc))
        assert np.array_equal(a.images, c.images)

    def test_idx_source_with_val_carving(self, tmp_path):
        ds = synth_dataset(SynthSpec(num_classes=3, per_class=8, image_size=8,
                                     sigma=0.05, seed=1))
        save_idx(ds, tmp_path / "tr.idx", tmp_path / "trl.idx")
        doc = base_config()
        doc["data"] = {"source": "idx", "num_classes": 3,
                       "train_images": str(tmp_path / "tr.idx"),
                       "train_labels": str(tmp_path / "trl.idx"),
                       "val_count": 6}
        train, val, test = load_datasets(parse_run_config(doc))
        assert len(train) == 18 and len(val) == 6
        assert test is None
        reloaded = load_idx(tmp_path / "tr.idx", tmp_path / "trl.idx",
                            num_classes=3)
        assert np.array_equal(np.concatenate([train.images, val.images]),
                              reloaded.images)

    def test_idx_source_without_val(self, tmp_path):
        ds = synth_dataset(SynthSpec(num_classes=2, per_class=4, image_size=8))
        save_idx(ds, tmp_path / "a.idx", tmp_path / "al.idx")
        doc = base_config()
        doc["data"] = {"source": "idx", "num_classes": 2,
                       "train_images": str(tmp_path / "a.idx"),
                       "train_labels": str(tmp_path / "al.idx")}
        train, val, test = load_datasets(parse_run_config(doc))
        assert val is None and test is None
        assert len(train) == 8
