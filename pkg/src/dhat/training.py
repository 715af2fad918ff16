"""SGD with a milestone schedule, the epoch loop, and the 3-stage pipeline.

Stages: train the main head as a plain single-head net, bolt on the
second head and train it with the stem frozen, then bolt on the merge
CNN and train it with everything else frozen.  Each stage validates
after every epoch and can roll the network back to its best-robustness
epoch before the next stage starts.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace

import numpy as np

from .architectures import (ArchSpec, DualHeadNetwork, SingleHeadNet,
                            attach_merge, attach_second_head, build_network,
                            set_freeze)
from .attacks import AttackConfig
from .checkpoint import load_checkpoint, save_checkpoint
from .data import Dataset, augment_batch, batch_iter
from .errors import ArgumentError, CheckpointError, StateError
from .evaluation import evaluate_clean, evaluate_robust
from .objectives import Objective, objective_loss

STAGES = ("main_head", "second_head", "merge")

STAGE_FILES = {
    "main_head": "stage1.dhat",
    "second_head": "stage2.dhat",
    "merge": "stage3.dhat",
}

REQUIRED_FREEZES = {
    "main_head": (),
    "second_head": ("stem",),
    "merge": ("stem", "head_main", "head_second"),
}


@dataclass
class OptimizerConfig:
    """SGD hyperparameters plus a multiplicative decay schedule.

    Milestones are (epoch, multiplier) pairs; each multiplier applies
    cumulatively from the start of its epoch (1-indexed), so the
    schedule is piecewise constant and non-increasing.
    """

    lr: float
    momentum: float = 0.9
    weight_decay: float = 0.0
    milestones: tuple = ()

    def __post_init__(self):
        if self.lr <= 0:
            raise ArgumentError(f"lr must be positive, got {self.lr}")
        if self.momentum < 0:
            raise ArgumentError(f"momentum must be >= 0, got {self.momentum}")
        if self.weight_decay < 0:
            raise ArgumentError(f"weight_decay must be >= 0, got {self.weight_decay}")
        self.milestones = tuple((int(e), float(m)) for e, m in self.milestones)
        for e, m in self.milestones:
            if e < 1:
                raise ArgumentError(f"milestone epochs are 1-indexed, got {e}")
            if not 0 < m <= 1:
                raise ArgumentError(f"milestone multipliers must lie in (0, 1], got {m}")

    def lr_at(self, epoch: int) -> float:
        lr = self.lr
        for ms_epoch, mult in self.milestones:
            if epoch >= ms_epoch:
                lr *= mult
        return lr


class SGD:
    """Momentum SGD: v <- m*v + (g + wd*w); w <- w - lr(epoch)*v."""

    def __init__(self, params, cfg: OptimizerConfig):
        self.params = list(params)
        self.cfg = cfg
        self.velocities = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, epoch: int) -> None:
        lr = self.cfg.lr_at(epoch)
        for p, v in zip(self.params, self.velocities):
            if not p.requires_grad or p.grad is None:
                continue
            v *= self.cfg.momentum
            v += p.grad + self.cfg.weight_decay * p.data
            p.data -= lr * v


@dataclass
class CheckpointRecord:
    """Per-epoch validation results plus a full tensor snapshot."""

    epoch: int
    clean_val_acc: float
    robust_val_acc: float
    train_loss: float = float("nan")
    snapshot: dict | None = None

    def __post_init__(self):
        if not 0.0 <= self.robust_val_acc <= 1.0:
            raise ArgumentError(
                f"robust_val_acc must lie in [0, 1], got {self.robust_val_acc}")
        if not 0.0 <= self.clean_val_acc <= 1.0:
            raise ArgumentError(
                f"clean_val_acc must lie in [0, 1], got {self.clean_val_acc}")


@dataclass
class TrainPlan:
    stage: str
    objective: Objective
    epochs: int
    optimizer: OptimizerConfig
    seed: int = 0
    batch_size: int = 32
    init_second: str = "copy"
    freeze_regions: tuple | None = None
    eval_attack: AttackConfig | None = None
    select: str = "last"
    augment: bool = False
    keep_snapshots: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ArgumentError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.epochs < 0:
            raise ArgumentError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ArgumentError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.init_second not in ("copy", "fresh"):
            raise ArgumentError(
                f"init_second must be 'copy' or 'fresh', got {self.init_second!r}")
        if self.select not in ("last", "best"):
            raise ArgumentError(f"select must be 'last' or 'best', got {self.select!r}")
        required = REQUIRED_FREEZES[self.stage]
        if self.freeze_regions is None:
            self.freeze_regions = required
        else:
            self.freeze_regions = tuple(self.freeze_regions)
            missing = [r for r in required if r not in self.freeze_regions]
            if missing:
                raise ArgumentError(
                    f"stage {self.stage} must freeze {missing}")
        if self.select == "best" and not self.keep_snapshots:
            raise ArgumentError("select='best' needs keep_snapshots=True")


def snapshot_tensors(net) -> dict:
    snap = {name: p.data.copy() for name, p in net.named_parameters()}
    snap.update({name: b.copy() for name, b in net.named_buffers()})
    return snap


def restore_snapshot(net, snap: dict) -> None:
    for name, p in net.named_parameters():
        p.data[...] = snap[name]
    for name, b in net.named_buffers():
        b[...] = snap[name]


def _stage_view(net, stage: str):
    if stage == "main_head":
        return net
    return net.head_view("second" if stage == "second_head" else "merged")


def _check_stage_state(net, plan: TrainPlan) -> None:
    if plan.stage == "main_head":
        if not isinstance(net, SingleHeadNet):
            raise ArgumentError("main_head stage trains a single-head network")
        if any(getattr(p, "frozen", False) for p in net.parameters()):
            raise StateError("main_head stage expects no frozen parameters")
        return
    if not isinstance(net, DualHeadNetwork):
        raise ArgumentError(f"{plan.stage} stage trains a dual-head network")
    regions = net.regions()
    if plan.stage == "merge" and "merge" not in regions:
        raise StateError("merge stage needs a merge CNN attached")
    for name in plan.freeze_regions:
        if name not in regions:
            raise StateError(f"plan freezes unknown region {name!r}")
        if not regions[name].frozen:
            raise StateError(f"stage {plan.stage} requires region {name!r} frozen")
    for name, module in regions.items():
        if name not in plan.freeze_regions and module.frozen:
            raise StateError(
                f"region {name!r} is frozen but stage {plan.stage} trains it")


def _epoch_attack_seed(plan_seed: int, epoch: int) -> int:
    return plan_seed * 1_000_003 + epoch


def train_stage(net, plan: TrainPlan, train_ds: Dataset,
                val_ds: Dataset) -> list[CheckpointRecord]:
    """Run one stage's epochs; returns the per-epoch validation history.

    The network's freeze flags must already match the plan (the
    pipeline sets them); a mismatch raises a state error rather than
    silently training the wrong region.

    With ``select="best"`` the incoming state joins the history as an
    epoch-0 record, so selection can conclude that no amount of
    training improved on the starting point and roll back to it.
    """
    _check_stage_state(net, plan)
    view = _stage_view(net, plan.stage)
    opt = SGD([p for _, p in net.named_parameters()], plan.optimizer)
    eval_attack = plan.eval_attack or replace(plan.objective.attack, loss_mode="ce")

    history: list[CheckpointRecord] = []
    if plan.select == "best":
        history.append(CheckpointRecord(
            epoch=0,
            clean_val_acc=evaluate_clean(view, val_ds, batch_size=plan.batch_size),
            robust_val_acc=evaluate_robust(view, val_ds, eval_attack,
                                           seed=plan.seed, batch_size=plan.batch_size),
            snapshot=snapshot_tensors(net),
        ))
    for epoch in range(1, plan.epochs + 1):
        rng = np.random.default_rng((plan.seed, epoch))
        attack_seed = _epoch_attack_seed(plan.seed, epoch)
        batch_losses = []
        for x, y, idx in batch_iter(train_ds, plan.batch_size, shuffle=True, rng=rng):
            if plan.augment:
                x = augment_batch(x, rng)
            opt.zero_grad()
            loss = objective_loss(view, x, y, plan.objective, seed=attack_seed,
                                  sample_indices=idx, train=True)
            loss.backward()
            opt.step(epoch)
            batch_losses.append(loss.item())
        history.append(CheckpointRecord(
            epoch=epoch,
            clean_val_acc=evaluate_clean(view, val_ds, batch_size=plan.batch_size),
            robust_val_acc=evaluate_robust(view, val_ds, eval_attack,
                                           seed=plan.seed, batch_size=plan.batch_size),
            train_loss=float(np.mean(batch_losses)) if batch_losses else float("nan"),
            snapshot=snapshot_tensors(net) if plan.keep_snapshots else None,
        ))
    return history


def select_best_checkpoint(history) -> int:
    """Epoch with the highest robust validation accuracy, earliest tie."""
    records = list(history)
    if not records:
        raise ArgumentError("cannot select from an empty history")
    robust = [r.robust_val_acc for r in records]
    return records[int(np.argmax(robust))].epoch


def apply_selection(net, plan: TrainPlan, history) -> int | None:
    """Roll the net back to its best epoch when the plan asks for it."""
    if plan.select != "best" or not history:
        return history[-1].epoch if history else None
    epoch = select_best_checkpoint(history)
    record = next(r for r in history if r.epoch == epoch)
    if record.snapshot is None:
        raise StateError("best-epoch selection needs snapshots")
    restore_snapshot(net, record.snapshot)
    return epoch


@dataclass
class PipelineConfig:
    """Everything the staged pipeline needs beyond the datasets."""

    arch: ArchSpec
    attach_group: int
    stage1: TrainPlan
    stage2: TrainPlan
    stage3: TrainPlan
    second_arch: ArchSpec | None = None
    pretrained_main: str | None = None
    checkpoint_dir: str | None = None
    build_seed: int = 0
    merge_init: str = "random"
    config_digest: str | None = None

    def __post_init__(self):
        for plan, stage in ((self.stage1, "main_head"),
                            (self.stage2, "second_head"),
                            (self.stage3, "merge")):
            if plan.stage != stage:
                raise ArgumentError(
                    f"pipeline expects a {stage} plan, got {plan.stage!r}")
        if self.merge_init not in ("random", "average"):
            raise ArgumentError(
                f"merge_init must be 'random' or 'average', got {self.merge_init!r}")


def _save_stage(net, cfg: PipelineConfig, stage: str, epoch: int | None,
                seed: int, paths: dict) -> None:
    if cfg.checkpoint_dir is None:
        return
    os.makedirs(cfg.checkpoint_dir, exist_ok=True)
    path = os.path.join(cfg.checkpoint_dir, STAGE_FILES[stage])
    meta = {"stage": stage, "epoch": epoch or 0, "seed": seed}
    if cfg.config_digest:
        meta["config_digest"] = cfg.config_digest
    save_checkpoint(net, meta, path)
    paths[stage] = path


def dhat_pipeline(cfg: PipelineConfig, train_ds: Dataset, val_ds: Dataset):
    """Run the three stages; returns (net, histories, checkpoint paths)."""
    paths: dict = {}

    if cfg.pretrained_main:
        net1, meta = load_checkpoint(cfg.pretrained_main, spec=cfg.arch)
        if not isinstance(net1, SingleHeadNet):
            raise CheckpointError("stage 1 needs a single-head checkpoint")
        hist1: list[CheckpointRecord] = []
        epoch1 = meta.get("epoch")
    else:
        net1 = build_network(cfg.arch, seed=cfg.build_seed)
        hist1 = train_stage(net1, cfg.stage1, train_ds, val_ds)
        epoch1 = apply_selection(net1, cfg.stage1, hist1)
    _save_stage(net1, cfg, "main_head", epoch1, cfg.stage1.seed, paths)

    net = attach_second_head(net1, cfg.attach_group, second_spec=cfg.second_arch,
                             init=cfg.stage2.init_second, seed=cfg.build_seed + 1)
    for region in cfg.stage2.freeze_regions:
        set_freeze(net, region, True)
    hist2 = train_stage(net, cfg.stage2, train_ds, val_ds)
    epoch2 = apply_selection(net, cfg.stage2, hist2)
    _save_stage(net, cfg, "second_head", epoch2, cfg.stage2.seed, paths)

    attach_merge(net, seed=cfg.build_seed + 2, init=cfg.merge_init)
    for region in cfg.stage3.freeze_regions:
        set_freeze(net, region, True)
    hist3 = train_stage(net, cfg.stage3, train_ds, val_ds)
    epoch3 = apply_selection(net, cfg.stage3, hist3)
    _save_stage(net, cfg, "merge", epoch3, cfg.stage3.seed, paths)

    histories = {"main_head": hist1, "second_head": hist2, "merge": hist3}
    return net, histories, paths
