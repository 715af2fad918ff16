"""Desk-scale dual-head experiments on synthetic blob data.

Two reusable drivers live here, shared by the experiment scripts and the
acceptance suite:

``different_lambda_run``
    Trains the full three-stage pipeline with the two heads using
    different KL weights, then scores every output mode on a held-out
    test split under a PGD attack.

``best_last_run``
    Trains a single head with best-epoch selection, continues training
    past the best epoch to obtain a later checkpoint, mirrors that
    continuation into a second head, fuses the heads, and compares the
    fused model against the later checkpoint.  Also cross-attacks the
    best and later checkpoints to measure how well adversarial examples
    transfer between them.

Everything is deterministic given (config, seed).  Runs are sized for
commodity hardware: a three-seed sweep of ``different_lambda_run``
takes under ten minutes on one CPU core, ``best_last_run`` about half
an hour.
"""

from dataclasses import dataclass
from statistics import median

from .architectures import (ArchSpec, attach_merge, attach_second_head,
                            build_network, set_freeze)
from .attacks import AttackConfig
from .data import Dataset, SynthSpec, synth_dataset
from .evaluation import cross_evaluate, evaluate_clean, evaluate_robust
from .objectives import Objective
from .training import (OptimizerConfig, PipelineConfig, TrainPlan,
                       apply_selection, dhat_pipeline, restore_snapshot,
                       snapshot_tensors, train_stage)

SEEDS = (0, 1, 2)


@dataclass(frozen=True)
class DeskScale:
    """Data, model, attack, and optimizer knobs for the desk runs."""

    num_classes: int = 8
    image_size: int = 16
    sigma: float = 0.30
    train_per_class: int = 625
    val_per_class: int = 40
    test_per_class: int = 125

    depth: int = 2
    attach_group: int = 1

    epsilon: float = 0.2
    train_steps: int = 10
    train_step_size: float = 0.05
    eval_steps: int = 20

    lr: float = 0.05
    merge_lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 2e-4
    batch_size: int = 125


@dataclass(frozen=True)
class DifferentLambdaPlan:
    """Stage lengths and KL weights for the two-lambda experiment."""

    head_epochs: tuple = (5, 4)
    merge_epochs: int = 2
    inv_lambdas: tuple = (6.0, 3.0)
    merge_inv_lambda: float = 2.0


@dataclass(frozen=True)
class BestLastPlan:
    """Stage lengths and schedule for the best-vs-last experiment.

    Both heads share one KL weight; what differs is how long they
    train.  The learning rate decays by ``lr_decay`` at ``decay_epoch``
    of the main stage, so the best validation epoch lands on the
    post-decay plateau.  The main head keeps that best epoch; the
    continuation and the second head train ``extra_epochs`` further at
    the decayed rate, where robust accuracy drifts instead of climbing.
    """

    main_epochs: int = 12
    decay_epoch: int = 8
    lr_decay: float = 0.1
    extra_epochs: int = 10
    merge_epochs: int = 2
    inv_lambda: float = 3.0
    merge_inv_lambda: float = 2.0


def arch(desk: DeskScale) -> ArchSpec:
    return ArchSpec(family="smallconv", depth=desk.depth,
                    num_classes=desk.num_classes, input_channels=1,
                    input_size=desk.image_size)


def desk_datasets(desk: DeskScale, seed: int):
    """Train/val/test blob datasets, all derived from one seed."""
    def make(per_class, split):
        spec = SynthSpec(num_classes=desk.num_classes,
                         per_class=per_class,
                         image_size=desk.image_size,
                         sigma=desk.sigma, seed=seed)
        return synth_dataset(spec, split=split)
    return (make(desk.train_per_class, "train"),
            make(desk.val_per_class, "val"),
            make(desk.test_per_class, "test"))


def train_attack(desk: DeskScale, loss_mode: str) -> AttackConfig:
    return AttackConfig(epsilon=desk.epsilon, num_steps=desk.train_steps,
                        step_size=desk.train_step_size, loss_mode=loss_mode)


def eval_attack(desk: DeskScale) -> AttackConfig:
    return AttackConfig(epsilon=desk.epsilon, num_steps=desk.eval_steps)


def _trades(desk: DeskScale, inv_lambda: float) -> Objective:
    return Objective("trades", train_attack(desk, "kl"), inv_lambda=inv_lambda)


def _plan(desk: DeskScale, stage: str, epochs: int, inv_lambda: float,
          seed: int, lr: float | None = None, milestones: tuple = (),
          **kw) -> TrainPlan:
    if lr is None:
        lr = desk.merge_lr if stage == "merge" else desk.lr
    opt = OptimizerConfig(lr=lr, momentum=desk.momentum,
                          weight_decay=desk.weight_decay,
                          milestones=milestones)
    return TrainPlan(stage=stage, objective=_trades(desk, inv_lambda),
                     epochs=epochs, optimizer=opt, seed=seed,
                     batch_size=desk.batch_size, **kw)


def _mode_scores(net, test: Dataset, atk: AttackConfig, seed: int,
                 modes=("main", "second", "merged")) -> dict:
    clean = {m: evaluate_clean(net, test, mode=m) for m in modes}
    robust = {m: evaluate_robust(net, test, atk, mode=m, seed=seed)
              for m in modes}
    return {"clean": clean, "robust": robust}


def different_lambda_run(desk: DeskScale, plan: DifferentLambdaPlan,
                         seed: int, checkpoint_dir=None) -> dict:
    """One full pipeline run plus test-set scores for every mode."""
    train, val, test = desk_datasets(desk, seed)
    cfg = PipelineConfig(
        arch=arch(desk),
        attach_group=desk.attach_group,
        stage1=_plan(desk, "main_head", plan.head_epochs[0],
                     plan.inv_lambdas[0], seed),
        stage2=_plan(desk, "second_head", plan.head_epochs[1],
                     plan.inv_lambdas[1], seed + 1, select="best"),
        stage3=_plan(desk, "merge", plan.merge_epochs,
                     plan.merge_inv_lambda, seed + 2, select="best"),
        checkpoint_dir=str(checkpoint_dir) if checkpoint_dir else None,
        build_seed=seed,
        merge_init="average",
    )
    net, histories, paths = dhat_pipeline(cfg, train, val)
    out = _mode_scores(net, test, eval_attack(desk), seed)
    out.update({"seed": seed, "net": net, "histories": histories,
                "paths": paths})
    return out


def _clone(spec: ArchSpec, source_net) -> "object":
    fresh = build_network(spec, seed=0)
    restore_snapshot(fresh, snapshot_tensors(source_net))
    return fresh


def best_last_run(desk: DeskScale, plan: BestLastPlan, seed: int) -> dict:
    """Fuse a best checkpoint with its own continued training.

    Returns test-set robust accuracies for the best checkpoint, the
    checkpoint ``extra_epochs`` later, and the fused model, plus the
    self/transfer accuracies from cross-attacking the two checkpoints.
    """
    spec = arch(desk)
    train, val, test = desk_datasets(desk, seed)
    atk = eval_attack(desk)

    net = build_network(spec, seed=seed)
    main_plan = _plan(desk, "main_head", plan.main_epochs, plan.inv_lambda,
                      seed, select="best",
                      milestones=((plan.decay_epoch, plan.lr_decay),))
    history = train_stage(net, main_plan, train, val)
    best_epoch = apply_selection(net, main_plan, history)
    best_net = _clone(spec, net)

    decayed_lr = desk.lr * plan.lr_decay
    last_net = _clone(spec, net)
    cont_plan = _plan(desk, "main_head", plan.extra_epochs, plan.inv_lambda,
                      seed + 1, lr=decayed_lr, keep_snapshots=False)
    cont_hist = train_stage(last_net, cont_plan, train, val)

    dual = attach_second_head(net, desk.attach_group, init="copy")
    set_freeze(dual, "stem", True)
    second_plan = _plan(desk, "second_head", plan.extra_epochs,
                        plan.inv_lambda, seed + 1, lr=decayed_lr,
                        keep_snapshots=False)
    second_hist = train_stage(dual, second_plan, train, val)

    attach_merge(dual, seed=seed + 2, init="average")
    set_freeze(dual, "head_main", True)
    set_freeze(dual, "head_second", True)
    merge_plan = _plan(desk, "merge", plan.merge_epochs,
                       plan.merge_inv_lambda, seed + 2, select="best")
    merge_hist = train_stage(dual, merge_plan, train, val)
    apply_selection(dual, merge_plan, merge_hist)

    cross = cross_evaluate(best_net, last_net, test, atk, seed=seed)
    acc = cross["accuracy"]
    robust_curves = {
        "main": [r.robust_val_acc for r in history],
        "continuation": [r.robust_val_acc for r in cont_hist],
        "second": [r.robust_val_acc for r in second_hist],
        "merge": [r.robust_val_acc for r in merge_hist],
    }
    return {
        "seed": seed,
        "best_epoch": best_epoch,
        "robust_curves": robust_curves,
        "best_robust": evaluate_robust(best_net, test, atk, seed=seed),
        "last_robust": evaluate_robust(last_net, test, atk, seed=seed),
        "merged_robust": evaluate_robust(dual, test, atk, mode="merged",
                                         seed=seed),
        "merged_clean": evaluate_clean(dual, test, mode="merged"),
        "self_accuracy": (acc["a"]["a"] + acc["b"]["b"]) / 2.0,
        "transfer_accuracy": (acc["a"]["b"] + acc["b"]["a"]) / 2.0,
        "net": dual,
    }


def run_seeds(fn, desk, plan, seeds=SEEDS, **kw) -> list:
    return [fn(desk, plan, seed, **kw) for seed in seeds]


def median_of(results, *keys) -> float:
    """Median of a possibly nested result field across runs."""
    values = []
    for r in results:
        v = r
        for k in keys:
            v = v[k]
        values.append(v)
    return float(median(values))


def summarize_different_lambda(results) -> dict:
    out = {}
    for kind in ("clean", "robust"):
        for mode in ("main", "second", "merged"):
            out[f"{kind}_{mode}"] = median_of(results, kind, mode)
    return out


def summarize_best_last(results) -> dict:
    keys = ("best_robust", "last_robust", "merged_robust", "merged_clean",
            "self_accuracy", "transfer_accuracy")
    return {k: median_of(results, k) for k in keys}
