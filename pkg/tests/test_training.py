"""Optimizer schedule, epoch loop, freeze soundness, staged pipeline."""

import numpy as np
import pytest

from dhat.architectures import (ArchSpec, attach_merge, attach_second_head,
                                build_network, set_freeze)
from dhat.attacks import AttackConfig
from dhat.checkpoint import load_checkpoint, save_checkpoint
from dhat.data import SynthSpec, synth_dataset
from dhat.errors import ArgumentError, CheckpointError, StateError
from dhat.objectives import Objective
from dhat.tensor import Tensor
from dhat.training import (CheckpointRecord, OptimizerConfig, PipelineConfig,
                           SGD, TrainPlan, apply_selection, dhat_pipeline,
                           restore_snapshot, select_best_checkpoint,
                           snapshot_tensors, train_stage)


def small_spec(**kw):
    base = dict(family="smallconv", depth=2, num_classes=3,
                input_channels=1, input_size=8)
    base.update(kw)
    return ArchSpec(**base)


def datasets(seed=0, per_class=8, val_per_class=3):
    spec = SynthSpec(num_classes=3, per_class=per_class, image_size=8,
                     sigma=0.05, seed=seed)
    train = synth_dataset(spec, split="train")
    val_spec = SynthSpec(num_classes=3, per_class=val_per_class, image_size=8,
                         sigma=0.05, seed=seed)
    val = synth_dataset(val_spec, split="val")
    return train, val


def sat_objective(eps=0.05, steps=1):
    return Objective("sat", AttackConfig(epsilon=eps, num_steps=steps,
                                         step_size=0.02))


def trades_objective(eps=0.05, steps=1, inv_lambda=2.0):
    return Objective("trades", AttackConfig(epsilon=eps, num_steps=steps,
                                            step_size=0.02, loss_mode="kl"),
                     inv_lambda=inv_lambda)


def quick_plan(stage="main_head", epochs=1, objective=None, **kw):
    defaults = dict(optimizer=OptimizerConfig(lr=0.05, momentum=0.9,
                                              weight_decay=2e-4),
                    seed=1, batch_size=8)
    defaults.update(kw)
    return TrainPlan(stage=stage, objective=objective or sat_objective(),
                     epochs=epochs, **defaults)


def tensor_bytes(net):
    out = {name: p.data.tobytes() for name, p in net.named_parameters()}
    out.update({name: b.tobytes() for name, b in net.named_buffers()})
    return out


def region_bytes(net, region):
    mod = net.regions()[region]
    out = {name: p.data.tobytes() for name, p in mod.named_parameters()}
    out.update({name: b.tobytes() for name, b in mod.named_buffers()})
    return out


class TestSchedule:
    def test_milestone_decay_matches_published_schedule(self):
        cfg = OptimizerConfig(lr=0.1, milestones=((75, 0.1), (90, 0.1), (100, 0.1)))
        assert cfg.lr_at(74) == pytest.approx(0.1)
        assert cfg.lr_at(75) == pytest.approx(0.01)
        assert cfg.lr_at(76) == pytest.approx(0.01)
        assert cfg.lr_at(95) == pytest.approx(0.001)
        assert cfg.lr_at(120) == pytest.approx(0.0001)

    def test_piecewise_constant_non_increasing(self):
        cfg = OptimizerConfig(lr=0.1, milestones=((75, 0.1), (90, 0.1), (100, 0.1)))
        jumps = {75, 90, 100}
        for epoch in range(2, 121):
            prev, cur = cfg.lr_at(epoch - 1), cfg.lr_at(epoch)
            assert cur <= prev
            if epoch not in jumps:
                assert cur == prev

    @pytest.mark.parametrize("kw", [
        dict(lr=0.0),
        dict(lr=-0.1),
        dict(lr=0.1, momentum=-0.5),
        dict(lr=0.1, weight_decay=-1e-4),
        dict(lr=0.1, milestones=((0, 0.1),)),
        dict(lr=0.1, milestones=((5, 1.5),)),
        dict(lr=0.1, milestones=((5, 0.0),)),
    ])
    def test_rejects_bad_config(self, kw):
        with pytest.raises(ArgumentError):
            OptimizerConfig(**kw)


class TestSgd:
    def one_param(self, value):
        p = Tensor(np.array([value]), requires_grad=True)
        return p

    def test_plain_step(self):
        p = self.one_param(1.0)
        p.grad = np.array([0.5])
        SGD([p], OptimizerConfig(lr=0.1, momentum=0.0)).step(1)
        assert p.data[0] == pytest.approx(0.95)

    def test_weight_decay_step(self):
        p = self.one_param(1.0)
        p.grad = np.array([0.5])
        SGD([p], OptimizerConfig(lr=0.1, momentum=0.0, weight_decay=2e-4)).step(1)
        assert p.data[0] == pytest.approx(0.94998, rel=1e-12)

    def test_momentum_accumulates(self):
        p = self.one_param(0.0)
        opt = SGD([p], OptimizerConfig(lr=0.1, momentum=0.9))
        p.grad = np.array([1.0])
        opt.step(1)
        assert p.data[0] == pytest.approx(-0.1)
        p.grad = np.array([1.0])
        opt.step(1)
        assert p.data[0] == pytest.approx(-0.29)

    def test_skips_frozen_and_gradless_params(self):
        frozen = self.one_param(1.0)
        frozen.requires_grad = False
        frozen.grad = np.array([1.0])
        gradless = self.one_param(2.0)
        opt = SGD([frozen, gradless], OptimizerConfig(lr=0.1, momentum=0.0))
        opt.step(1)
        assert frozen.data[0] == 1.0
        assert gradless.data[0] == 2.0


class TestPlanTypes:
    def test_checkpoint_record_validates_accuracies(self):
        with pytest.raises(ArgumentError):
            CheckpointRecord(1, 0.5, 1.2)
        with pytest.raises(ArgumentError):
            CheckpointRecord(1, -0.1, 0.5)

    def test_plan_fills_required_freezes(self):
        assert quick_plan("main_head").freeze_regions == ()
        assert quick_plan("second_head").freeze_regions == ("stem",)
        assert set(quick_plan("merge",
                              objective=trades_objective()).freeze_regions) == {
            "stem", "head_main", "head_second"}

    def test_plan_rejects_missing_required_freeze(self):
        with pytest.raises(ArgumentError):
            quick_plan("second_head", freeze_regions=())

    def test_plan_rejects_best_without_snapshots(self):
        with pytest.raises(ArgumentError):
            quick_plan(select="best", keep_snapshots=False)

    def test_plan_rejects_unknown_stage(self):
        with pytest.raises(ArgumentError):
            quick_plan(stage="warmup")


class TestSelection:
    def record(self, epoch, robust):
        return CheckpointRecord(epoch, 0.5, robust)

    def test_argmax(self):
        hist = [self.record(1, 0.50), self.record(2, 0.56), self.record(3, 0.54)]
        assert select_best_checkpoint(hist) == 2

    def test_earliest_tie(self):
        hist = [self.record(e, 0.4) for e in (1, 2, 3)]
        assert select_best_checkpoint(hist) == 1

    @pytest.mark.parametrize("k", [1, 3, 5])
    def test_rise_then_fall_returns_peak(self, k):
        hist = [self.record(e, 0.5 + 0.05 * min(e, k) - 0.07 * max(0, e - k))
                for e in range(1, 6)]
        assert select_best_checkpoint(hist) == k

    def test_empty_history_rejected(self):
        with pytest.raises(ArgumentError):
            select_best_checkpoint([])

    def test_apply_selection_restores_best_bytes(self):
        net = build_network(small_spec(), seed=1)
        history = []
        for epoch, robust in ((1, 0.3), (2, 0.7), (3, 0.5)):
            for _, p in net.named_parameters():
                p.data += 0.01
                break
            history.append(CheckpointRecord(epoch, 0.5, robust,
                                            snapshot=snapshot_tensors(net)))
        want = {k: v.tobytes() for k, v in history[1].snapshot.items()}
        chosen = apply_selection(net, quick_plan(select="best"), history)
        assert chosen == 2
        assert {k: v.tobytes() for k, v in snapshot_tensors(net).items()} == want


class TestTrainStage:
    def test_zero_epochs_is_identity(self):
        net = build_network(small_spec(), seed=2)
        before = tensor_bytes(net)
        train, val = datasets(seed=2)
        history = train_stage(net, quick_plan(epochs=0), train, val)
        assert history == []
        assert tensor_bytes(net) == before

    def test_one_epoch_updates_and_records(self):
        net = build_network(small_spec(), seed=3)
        before = tensor_bytes(net)
        train, val = datasets(seed=3)
        history = train_stage(net, quick_plan(), train, val)
        assert len(history) == 1
        rec = history[0]
        assert rec.epoch == 1
        assert 0.0 <= rec.clean_val_acc <= 1.0
        assert 0.0 <= rec.robust_val_acc <= 1.0
        assert np.isfinite(rec.train_loss)
        assert tensor_bytes(net) != before

    def test_same_seed_reproduces_final_bytes(self):
        train, val = datasets(seed=4)
        results = []
        for _ in range(2):
            net = build_network(small_spec(), seed=4)
            train_stage(net, quick_plan(), train, val)
            results.append(tensor_bytes(net))
        assert results[0] == results[1]

    def test_freeze_mismatch_raises(self):
        base = build_network(small_spec(), seed=5)
        net = attach_second_head(base, 1, init="copy")
        train, val = datasets(seed=5)
        plan = quick_plan("second_head")
        with pytest.raises(StateError):
            train_stage(net, plan, train, val)
        set_freeze(net, "stem", True)
        set_freeze(net, "head_main", True)
        with pytest.raises(StateError):
            train_stage(net, plan, train, val)

    def test_second_head_stage_touches_only_second_head(self):
        base = build_network(small_spec(), seed=6)
        net = attach_second_head(base, 1, init="copy")
        set_freeze(net, "stem", True)
        train, val = datasets(seed=6)
        stem_before = region_bytes(net, "stem")
        main_before = region_bytes(net, "head_main")
        second_before = region_bytes(net, "head_second")
        train_stage(net, quick_plan("second_head"), train, val)
        assert region_bytes(net, "stem") == stem_before
        assert region_bytes(net, "head_main") == main_before
        assert region_bytes(net, "head_second") != second_before

    def test_merge_stage_touches_only_merge(self):
        base = build_network(small_spec(), seed=7)
        net = attach_second_head(base, 1, init="copy")
        attach_merge(net, seed=8)
        for region in ("stem", "head_main", "head_second"):
            set_freeze(net, region, True)
        train, val = datasets(seed=7)
        before = {r: region_bytes(net, r) for r in ("stem", "head_main",
                                                    "head_second", "merge")}
        plan = quick_plan("merge", objective=trades_objective())
        train_stage(net, plan, train, val)
        assert region_bytes(net, "stem") == before["stem"]
        assert region_bytes(net, "head_main") == before["head_main"]
        assert region_bytes(net, "head_second") == before["head_second"]
        assert region_bytes(net, "merge") != before["merge"]

    def test_main_head_stage_rejects_dual_net(self):
        base = build_network(small_spec(), seed=9)
        net = attach_second_head(base, 1, init="copy")
        train, val = datasets(seed=9)
        with pytest.raises(ArgumentError):
            train_stage(net, quick_plan("main_head"), train, val)

    def test_best_selection_history_starts_at_epoch_zero(self):
        net = build_network(small_spec(), seed=21)
        before = tensor_bytes(net)
        train, val = datasets(seed=21)
        history = train_stage(net, quick_plan(select="best"), train, val)
        assert [r.epoch for r in history] == [0, 1]
        assert np.isnan(history[0].train_loss)
        assert history[0].snapshot is not None
        zero = {k: v.tobytes() for k, v in history[0].snapshot.items()}
        assert zero == before

    def test_selection_can_roll_back_to_the_initial_state(self):
        net = build_network(small_spec(), seed=22)
        before = tensor_bytes(net)
        train, val = datasets(seed=22)
        plan = quick_plan(select="best")
        history = train_stage(net, plan, train, val)
        history[0] = CheckpointRecord(0, 1.0, 1.0, snapshot=history[0].snapshot)
        chosen = apply_selection(net, plan, history)
        assert chosen == 0
        assert tensor_bytes(net) == before


class TestPipeline:
    def pipeline_config(self, tmp_path=None, **kw):
        base = dict(
            arch=small_spec(),
            attach_group=1,
            stage1=quick_plan("main_head"),
            stage2=quick_plan("second_head",
                              objective=trades_objective(inv_lambda=3.0)),
            stage3=quick_plan("merge", objective=trades_objective(inv_lambda=2.0)),
            checkpoint_dir=str(tmp_path) if tmp_path else None,
            build_seed=3,
        )
        base.update(kw)
        return PipelineConfig(**base)

    def test_stage_plan_kinds_are_checked(self):
        with pytest.raises(ArgumentError):
            self.pipeline_config(stage1=quick_plan("second_head"))

    def test_full_pipeline_emits_checkpoints_and_freezes_hold(self, tmp_path):
        train, val = datasets(seed=10, per_class=6, val_per_class=2)
        cfg = self.pipeline_config(tmp_path)
        net, histories, paths = dhat_pipeline(cfg, train, val)
        assert set(histories) == {"main_head", "second_head", "merge"}
        assert set(paths) == {"main_head", "second_head", "merge"}
        assert all(len(h) == 1 for h in histories.values())

        stage1_net, _ = load_checkpoint(paths["main_head"])
        x = Tensor(np.random.default_rng(11).uniform(0, 1, (3, 1, 8, 8)))
        want = stage1_net(x, train=False).data
        got = net.forward(x, mode="main", train=False).data
        assert np.array_equal(got, want)

        merged = net.forward(x, mode="merged", train=False).data
        assert merged.shape == (3, 3)
        assert np.allclose(merged.sum(axis=1), 1.0)

    def test_pretrained_main_is_passed_through_bit_exact(self, tmp_path):
        pre = build_network(small_spec(), seed=12)
        pre_path = tmp_path / "pre.dhat"
        save_checkpoint(pre, {"stage": "main_head", "epoch": 5}, pre_path)
        train, val = datasets(seed=12, per_class=6, val_per_class=2)
        cfg = self.pipeline_config(tmp_path / "out",
                                   pretrained_main=str(pre_path))
        net, histories, paths = dhat_pipeline(cfg, train, val)
        assert histories["main_head"] == []
        x = Tensor(np.random.default_rng(13).uniform(0, 1, (2, 1, 8, 8)))
        assert np.array_equal(net.forward(x, mode="main", train=False).data,
                              pre(x, train=False).data)

    def test_pretrained_main_with_wrong_spec_rejected(self, tmp_path):
        pre = build_network(small_spec(depth=3, input_size=16), seed=14)
        pre_path = tmp_path / "pre.dhat"
        save_checkpoint(pre, {}, pre_path)
        train, val = datasets(seed=14, per_class=4, val_per_class=2)
        cfg = self.pipeline_config(pretrained_main=str(pre_path))
        with pytest.raises(CheckpointError):
            dhat_pipeline(cfg, train, val)

    def test_pipeline_is_deterministic(self, tmp_path):
        train, val = datasets(seed=15, per_class=5, val_per_class=2)
        digests = []
        for run in range(2):
            cfg = self.pipeline_config()
            net, _, _ = dhat_pipeline(cfg, train, val)
            digests.append(tensor_bytes(net))
        assert digests[0] == digests[1]
