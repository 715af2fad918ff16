"""JSON run configurations: strict schema checking plus object building.

A run config is one JSON document with sections ``data``, ``arch``,
``attach``, ``stages``, ``eval``, ``seed``, and ``output_dir``.  The
validator walks the document before any work starts and rejects unknown
or missing keys by their dotted path (``arch.family``, ``stages[1].lr``),
so typos fail fast instead of silently training with defaults.  Type
errors from the underlying dataclasses are re-raised as ``ConfigError``
with the same path prefix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace

from .architectures import ArchSpec
from .attacks import AttackConfig
from .data import (Dataset, SynthSpec, load_cifar_binary, load_idx,
                   split_dataset, synth_dataset)
from .errors import ArchitectureError, ArgumentError, ConfigError
from .objectives import Objective
from .training import STAGES, OptimizerConfig, TrainPlan

DATA_SOURCES = ("synth", "idx", "cifar")

_TOP_KEYS = {"data", "arch", "attach", "stages", "eval", "seed", "output_dir"}
_ATTACH_KEYS = {"group", "second_arch", "merge_init"}
_ARCH_KEYS = {"family", "depth", "num_classes", "widen_factor",
              "group_sizes", "input_channels", "input_size"}
_ATTACK_KEYS = {"name", "epsilon", "num_steps", "step_size", "restarts",
                "random_start", "loss_mode"}
_OBJECTIVE_KEYS = {"kind", "inv_lambda", "attack"}
_OPTIMIZER_KEYS = {"lr", "momentum", "weight_decay", "milestones"}
_STAGE_KEYS = {"stage", "objective", "epochs", "optimizer", "seed",
               "batch_size", "init_second", "select", "augment",
               "freeze_regions", "eval_attack"}
_DATA_KEYS = {
    "synth": {"source", "num_classes", "image_size", "sigma", "channels",
              "train_per_class", "val_per_class", "test_per_class", "seed"},
    "idx": {"source", "num_classes", "train_images", "train_labels",
            "val_images", "val_labels", "test_images", "test_labels",
            "val_count"},
    "cifar": {"source", "num_classes", "train", "test", "val_count"},
}


def _join(path: str, key) -> str:
    if isinstance(key, int):
        return f"{path}[{key}]"
    return f"{path}.{key}" if path else str(key)


def _as_object(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path or 'config'} must be an object, "
                          f"got {type(value).__name__}")
    return value

def _as_list(value, path: str) -> list:
    if not isinstance(value, list):
        raise ConfigError(f"{path} must be an array, got {type(value).__name__}")
    return value


def _check_keys(obj: dict, allowed: set, path: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown key {_join(path, key)}")


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ConfigError(f"missing required key {_join(path, key)}")
    return obj[key]


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path} must be an integer, got {value!r}")
    return value


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path} must be a number, got {value!r}")
    return float(value)


def _as_str(value, path: str) -> str:
    if not isinstance(value, str):
        raise ConfigError(f"{path} must be a string, got {value!r}")
    return value


def _as_bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{path} must be true or false, got {value!r}")
    return value


def build_arch(obj, path: str = "arch") -> ArchSpec:
    obj = _as_object(obj, path)
    _check_keys(obj, _ARCH_KEYS, path)
    for key in ("family", "depth", "num_classes"):
        _require(obj, key, path)
    try:
        return ArchSpec.from_dict(obj)
    except (ArchitectureError, TypeError) as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def build_attack(obj, path: str) -> AttackConfig:
    obj = _as_object(obj, path)
    _check_keys(obj, _ATTACK_KEYS, path)
    kwargs = {"epsilon": _as_number(_require(obj, "epsilon", path),
                                    _join(path, "epsilon"))}
    if "num_steps" in obj:
        kwargs["num_steps"] = _as_int(obj["num_steps"], _join(path, "num_steps"))
    if obj.get("step_size") is not None:
        kwargs["step_size"] = _as_number(obj["step_size"], _join(path, "step_size"))
    if "restarts" in obj:
        kwargs["restarts"] = _as_int(obj["restarts"], _join(path, "restarts"))
    if "random_start" in obj:
        kwargs["random_start"] = _as_bool(obj["random_start"],
                                          _join(path, "random_start"))
    if "loss_mode" in obj:
        kwargs["loss_mode"] = _as_str(obj["loss_mode"], _join(path, "loss_mode"))
    try:
        return AttackConfig(**kwargs)
    except ArgumentError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _build_objective(obj, path: str) -> Objective:
    obj = _as_object(obj, path)
    _check_keys(obj, _OBJECTIVE_KEYS, path)
    kind = _as_str(_require(obj, "kind", path), _join(path, "kind"))
    attack = build_attack(_require(obj, "attack", path), _join(path, "attack"))
    inv_lambda = _as_number(obj.get("inv_lambda", 0.0), _join(path, "inv_lambda"))
    try:
        return Objective(kind, attack, inv_lambda=inv_lambda)
    except ArgumentError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _build_optimizer(obj, path: str) -> OptimizerConfig:
    obj = _as_object(obj, path)
    _check_keys(obj, _OPTIMIZER_KEYS, path)
    lr = _as_number(_require(obj, "lr", path), _join(path, "lr"))
    milestones = []
    for i, pair in enumerate(_as_list(obj.get("milestones", []),
                                      _join(path, "milestones"))):
        pair_path = _join(_join(path, "milestones"), i)
        if not isinstance(pair, list) or len(pair) != 2:
            raise ConfigError(f"{pair_path} must be an [epoch, multiplier] pair")
        milestones.append((_as_int(pair[0], pair_path),
                           _as_number(pair[1], pair_path)))
    try:
        return OptimizerConfig(
            lr=lr,
            momentum=_as_number(obj.get("momentum", 0.9), _join(path, "momentum")),
            weight_decay=_as_number(obj.get("weight_decay", 0.0),
                                    _join(path, "weight_decay")),
            milestones=tuple(milestones))
    except ArgumentError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _build_plan(obj, path: str, default_seed: int) -> TrainPlan:
    obj = _as_object(obj, path)
    _check_keys(obj, _STAGE_KEYS, path)
    stage = _as_str(_require(obj, "stage", path), _join(path, "stage"))
    kwargs = {
        "stage": stage,
        "objective": _build_objective(_require(obj, "objective", path),
                                      _join(path, "objective")),
        "epochs": _as_int(_require(obj, "epochs", path), _join(path, "epochs")),
        "optimizer": _build_optimizer(_require(obj, "optimizer", path),
                                      _join(path, "optimizer")),
        "seed": _as_int(obj.get("seed", default_seed), _join(path, "seed")),
    }
    if "batch_size" in obj:
        kwargs["batch_size"] = _as_int(obj["batch_size"], _join(path, "batch_size"))
    if "init_second" in obj:
        kwargs["init_second"] = _as_str(obj["init_second"],
                                        _join(path, "init_second"))
    if "select" in obj:
        kwargs["select"] = _as_str(obj["select"], _join(path, "select"))
    if "augment" in obj:
        kwargs["augment"] = _as_bool(obj["augment"], _join(path, "augment"))
    if "freeze_regions" in obj:
        regions = _as_list(obj["freeze_regions"], _join(path, "freeze_regions"))
        kwargs["freeze_regions"] = tuple(
            _as_str(r, _join(_join(path, "freeze_regions"), i))
            for i, r in enumerate(regions))
    if obj.get("eval_attack") is not None:
        kwargs["eval_attack"] = build_attack(obj["eval_attack"],
                                             _join(path, "eval_attack"))
    # Stage checkpoints land on disk anyway; in-memory snapshots are only
    # needed when the plan rolls back to its best epoch.
    kwargs["keep_snapshots"] = kwargs.get("select", "last") == "best"
    try:
        return TrainPlan(**kwargs)
    except ArgumentError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _validate_data(obj, path: str = "data") -> dict:
    obj = _as_object(obj, path)
    source = _as_str(_require(obj, "source", path), _join(path, "source"))
    if source not in DATA_SOURCES:
        raise ConfigError(f"{_join(path, 'source')} must be one of "
                          f"{DATA_SOURCES}, got {source!r}")
    _check_keys(obj, _DATA_KEYS[source], path)
    if source == "synth":
        for key in ("num_classes", "image_size"):
            _require(obj, key, path)
    elif source == "idx":
        for key in ("train_images", "train_labels"):
            _require(obj, key, path)
    else:
        _require(obj, "train", path)
    return dict(obj)


@dataclass
class RunConfig:
    """A validated run: typed sections ready for the pipeline and eval."""

    seed: int
    output_dir: str
    data: dict
    arch: ArchSpec
    stages: list
    attach_group: int = 1
    second_arch: ArchSpec | None = None
    merge_init: str = "random"
    eval_attacks: list = field(default_factory=list)
    raw: dict = field(default_factory=dict, repr=False)


def parse_run_config(obj) -> RunConfig:
    """Validate a decoded JSON document and build the typed sections."""
    obj = _as_object(obj, "")
    _check_keys(obj, _TOP_KEYS, "")
    seed = _as_int(obj.get("seed", 0), "seed")
    output_dir = _as_str(obj.get("output_dir", "."), "output_dir")

    data = _validate_data(_require(obj, "data", ""))
    arch = build_arch(_require(obj, "arch", ""))

    attach = _as_object(obj.get("attach", {}), "attach")
    _check_keys(attach, _ATTACH_KEYS, "attach")
    attach_group = _as_int(attach.get("group", 1), "attach.group")
    second_arch = None
    if attach.get("second_arch") is not None:
        second_arch = build_arch(attach["second_arch"], "attach.second_arch")
    merge_init = _as_str(attach.get("merge_init", "random"), "attach.merge_init")
    if merge_init not in ("random", "average"):
        raise ConfigError(f"attach.merge_init must be 'random' or 'average', "
                          f"got {merge_init!r}")

    stage_objs = _as_list(_require(obj, "stages", ""), "stages")
    if not 1 <= len(stage_objs) <= len(STAGES):
        raise ConfigError(f"stages must hold 1 to {len(STAGES)} entries, "
                          f"got {len(stage_objs)}")
    stages = []
    for i, stage_obj in enumerate(stage_objs):
        plan = _build_plan(stage_obj, _join("stages", i), seed)
        if plan.stage != STAGES[i]:
            raise ConfigError(f"{_join(_join('stages', i), 'stage')} must be "
                              f"{STAGES[i]!r} (stages run in pipeline order), "
                              f"got {plan.stage!r}")
        stages.append(plan)

    eval_attacks = []
    for i, attack_obj in enumerate(_as_list(obj.get("eval", []), "eval")):
        path = _join("eval", i)
        attack_obj = _as_object(attack_obj, path)
        name = _as_str(attack_obj.get("name", f"pgd{attack_obj.get('num_steps', 10)}"),
                       _join(path, "name"))
        cfg = build_attack({k: v for k, v in attack_obj.items() if k != "name"}, path)
        eval_attacks.append((name, cfg))

    return RunConfig(seed=seed, output_dir=output_dir, data=data, arch=arch,
                     stages=stages, attach_group=attach_group,
                     second_arch=second_arch, merge_init=merge_init,
                     eval_attacks=eval_attacks, raw=obj)


def load_run_config(path) -> RunConfig:
    """Read and validate a JSON run config file."""
    try:
        with open(path) as f:
            text = f.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
    return parse_run_config(obj)


def _synth_splits(data: dict, default_seed: int):
    base = SynthSpec(num_classes=data["num_classes"],
                     per_class=1,
                     image_size=data["image_size"],
                     sigma=data.get("sigma", 0.05),
                     seed=data.get("seed", default_seed),
                     channels=data.get("channels", 1))
    def make(per_class: int, split: str):
        return synth_dataset(replace(base, per_class=per_class), split=split)
    return (make(data.get("train_per_class", 100), "train"),
            make(data.get("val_per_class", 20), "val"),
            make(data.get("test_per_class", 50), "test"))


def _idx_splits(data: dict):
    num_classes = data.get("num_classes")
    train = load_idx(data["train_images"], data["train_labels"],
                     num_classes=num_classes, split="train")
    if "val_images" in data:
        val = load_idx(data["val_images"], data["val_labels"],
                       num_classes=num_classes, split="val")
    elif data.get("val_count"):
        train, val = split_dataset(train, len(train) - data["val_count"],
                                   "train", "val")
    else:
        val = None
    test = None
    if "test_images" in data:
        test = load_idx(data["test_images"], data["test_labels"],
                        num_classes=num_classes, split="test")
    return train, val, test


def _cifar_splits(data: dict):
    num_classes = data.get("num_classes", 10)
    train = load_cifar_binary(data["train"], num_classes, split="train")
    val = None
    if data.get("val_count"):
        train, val = split_dataset(train, len(train) - data["val_count"],
                                   "train", "val")
    if data.get("test"):
        test = load_cifar_binary(data["test"], num_classes, split="test")
    else:
        test = None
    return train, val, test


def load_datasets(cfg: RunConfig) -> tuple[Dataset, Dataset | None, Dataset | None]:
    """Materialize (train, val, test) from the config's data section.

    File-backed sources may omit the validation or test split, in which
    case the corresponding slot is None; training requires a validation
    split and says so.
    """
    source = cfg.data["source"]
    if source == "synth":
        return _synth_splits(cfg.data, cfg.seed)
    if source == "idx":
        return _idx_splits(cfg.data)
    return _cifar_splits(cfg.data)
