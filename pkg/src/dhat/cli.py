"""Command-line front end.

Verbs: ``train`` (the staged pipeline or one stage of it), ``eval``,
``cross-eval``, ``inspect``, ``export-noise``, and ``synth-data``.
Every command reads inputs without mutating them and exits with a
stable code: 0 on success, 2 for configuration problems, 3 for broken
checkpoints or data files, 4 when a computation produced non-finite
numbers.

``--workers N`` (or the DHAT_THREADS environment variable, which wins)
splits attack generation during evaluation across threads.  Chunks are
cut on batch boundaries and per-sample attack streams are keyed by
dataset-global indices, so the adversarial examples and the reported
accuracy are identical for every worker count.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import tensor as T
from .architectures import (DualHeadNetwork, SingleHeadNet, attach_merge,
                            attach_second_head, build_network,
                            parameter_census, set_freeze)
from .attacks import AttackConfig, _inference_only, pgd
from .checkpoint import digest_json, load_checkpoint, save_checkpoint
from .config import RunConfig, load_datasets, load_run_config
from .data import SynthSpec, batch_iter, save_idx, synth_dataset
from .errors import (ArgumentError, CheckpointError, ConfigError, FormatError,
                     NumericError, StateError)
from .evaluation import (EvalReport, attack_entry, cross_evaluate, dataset_id,
                         evaluate_clean, evaluate_robust, export_noise,
                         model_digest, predict, resolve_view)
from .tensor import Tensor
from .training import (STAGE_FILES, STAGES, PipelineConfig, apply_selection,
                       dhat_pipeline, train_stage)


def resolve_workers(flag_value) -> int:
    """Worker count: DHAT_THREADS overrides the --workers flag."""
    env = os.environ.get("DHAT_THREADS")
    if env is not None:
        try:
            return max(1, int(env))
        except ValueError:
            raise ConfigError(f"DHAT_THREADS must be an integer, got {env!r}")
    return max(1, flag_value or 1)


def _chunk_correct(view, dataset, cfg, seed, batch_size, offset) -> int:
    """Kept-correct count for one contiguous chunk of the dataset."""
    correct = 0
    for x, y, idx in batch_iter(dataset, batch_size):
        if cfg.loss_mode == "kl":
            reference = T.softmax(view.logits(Tensor(x), train=False)).data
        else:
            reference = y
        adv = pgd(view, x, reference, cfg, seed=seed,
                  sample_indices=idx + offset)
        preds = predict(view, adv.data, None, batch_size)
        correct += int(np.sum(preds == y))
    return correct


def robust_accuracy(model, dataset, cfg, mode=None, seed=0,
                    batch_size=64, workers=1) -> float:
    """evaluate_robust, optionally with chunked parallel attack runs.

    Chunk edges land on batch-size multiples and attack randomness is
    keyed by global sample index, so every worker count reproduces the
    serial result bit for bit; counts are reduced in chunk order.
    """
    if workers <= 1:
        return evaluate_robust(model, dataset, cfg, mode=mode, seed=seed,
                               batch_size=batch_size)
    view = resolve_view(model, mode)
    n = len(dataset)
    per = -(-n // workers)
    per = max(batch_size, -(-per // batch_size) * batch_size)
    starts = list(range(0, n, per))
    chunks = [dataset.subset(np.arange(s, min(s + per, n))) for s in starts]
    with _inference_only(view):
        with ThreadPoolExecutor(max_workers=workers) as pool:
            counts = list(pool.map(
                lambda sc: _chunk_correct(view, sc[1], cfg, seed, batch_size, sc[0]),
                zip(starts, chunks)))
    return sum(counts) / n


def _load_config(args) -> RunConfig:
    if not args.config:
        raise ConfigError("this command needs --config")
    cfg = load_run_config(args.config)
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.stages = [replace(p, seed=args.seed) for p in cfg.stages]
    if getattr(args, "output_dir", None):
        cfg.output_dir = args.output_dir
    return cfg


def _split_dataset(cfg: RunConfig, split: str):
    train, val, test = load_datasets(cfg)
    ds = {"train": train, "val": val, "test": test}[split]
    if ds is None:
        raise ConfigError(f"data section provides no {split} split")
    return ds


def _default_mode(net) -> str | None:
    if isinstance(net, DualHeadNetwork):
        return "merged" if net.merge is not None else "main"
    return None


def _attacks_from_flags(args, fallback) -> list:
    """[(name, AttackConfig)] from eval flags, or the config's list."""
    if args.attack is None:
        return list(fallback)
    if args.attack == "none":
        return []
    if args.eps is None:
        raise ConfigError(f"--attack {args.attack} needs --eps")
    try:
        if args.attack == "fgsm":
            return [("fgsm", AttackConfig(
                epsilon=args.eps, num_steps=1, step_size=args.eps or None,
                random_start=False, loss_mode=args.loss_mode))]
        return [(f"pgd{args.steps}", AttackConfig(
            epsilon=args.eps, num_steps=args.steps, step_size=args.step_size,
            restarts=args.restarts, random_start=not args.no_random_start,
            loss_mode=args.loss_mode))]
    except ArgumentError as exc:
        raise ConfigError(str(exc)) from exc


def _single_attack(args, fallback) -> tuple:
    attacks = _attacks_from_flags(args, fallback)
    if len(attacks) != 1:
        raise ConfigError("this command needs exactly one attack; "
                          "pass --attack with --eps")
    return attacks[0]


def _write_log(out_dir: str, stage_num: int, plan, history) -> str:
    path = os.path.join(out_dir, f"log_stage{stage_num}.csv")
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["stage", "epoch", "train_loss", "val_clean",
                         "val_robust", "lr"])
        for rec in history:
            if rec.epoch < 1:
                continue
            writer.writerow([plan.stage, rec.epoch,
                             f"{rec.train_loss:.10g}",
                             f"{rec.clean_val_acc:.10g}",
                             f"{rec.robust_val_acc:.10g}",
                             f"{plan.optimizer.lr_at(rec.epoch):.10g}"])
    return path


def cmd_train(args) -> int:
    cfg = _load_config(args)
    train_ds, val_ds, _ = load_datasets(cfg)
    if val_ds is None:
        raise ConfigError("training needs a validation split; add val files "
                          "or val_count to the data section")
    os.makedirs(cfg.output_dir, exist_ok=True)
    config_digest = digest_json(cfg.raw)

    if args.stage is None:
        if len(cfg.stages) != len(STAGES):
            raise ConfigError(f"a full pipeline run needs {len(STAGES)} "
                              f"stages, config has {len(cfg.stages)}")
        pipe = PipelineConfig(
            arch=cfg.arch, attach_group=cfg.attach_group,
            stage1=cfg.stages[0], stage2=cfg.stages[1], stage3=cfg.stages[2],
            second_arch=cfg.second_arch, checkpoint_dir=cfg.output_dir,
            build_seed=cfg.seed, merge_init=cfg.merge_init,
            config_digest=config_digest)
        _, histories, paths = dhat_pipeline(pipe, train_ds, val_ds)
        for i, stage in enumerate(STAGES, start=1):
            log = _write_log(cfg.output_dir, i, cfg.stages[i - 1],
                             histories[stage])
            history = histories[stage]
            if history:
                last = history[-1]
                print(f"stage {i} ({stage}): val clean "
                      f"{last.clean_val_acc:.4f} robust "
                      f"{last.robust_val_acc:.4f}")
            print(f"  checkpoint {paths[stage]}")
            print(f"  log {log}")
        return 0

    n = args.stage
    if n > len(cfg.stages):
        raise ConfigError(f"--stage {n} but config defines only "
                          f"{len(cfg.stages)} stage(s)")
    plan = cfg.stages[n - 1]
    if n == 1:
        net = build_network(cfg.arch, seed=cfg.seed)
    elif n == 2:
        prev_path = os.path.join(cfg.output_dir, STAGE_FILES["main_head"])
        prev, _ = load_checkpoint(prev_path, spec=cfg.arch)
        if not isinstance(prev, SingleHeadNet):
            raise CheckpointError(f"{prev_path} is not a single-head "
                                  "stage-1 checkpoint")
        net = attach_second_head(prev, cfg.attach_group,
                                 second_spec=cfg.second_arch,
                                 init=plan.init_second, seed=cfg.seed + 1)
    else:
        prev_path = os.path.join(cfg.output_dir, STAGE_FILES["second_head"])
        net, _ = load_checkpoint(prev_path)
        if not isinstance(net, DualHeadNetwork):
            raise CheckpointError(f"{prev_path} is not a dual-head "
                                  "stage-2 checkpoint")
        attach_merge(net, seed=cfg.seed + 2, init=cfg.merge_init)
    for region in plan.freeze_regions:
        set_freeze(net, region, True)
    history = train_stage(net, plan, train_ds, val_ds)
    epoch = apply_selection(net, plan, history)
    out_path = os.path.join(cfg.output_dir, STAGE_FILES[plan.stage])
    save_checkpoint(net, {"stage": plan.stage, "epoch": epoch or 0,
                          "seed": plan.seed,
                          "config_digest": config_digest}, out_path)
    log = _write_log(cfg.output_dir, n, plan, history)
    if history:
        print(f"stage {n} ({plan.stage}): val clean "
              f"{history[-1].clean_val_acc:.4f} robust "
              f"{history[-1].robust_val_acc:.4f}")
    print(f"  checkpoint {out_path}")
    print(f"  log {log}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    dataset = _split_dataset(cfg, args.split)
    net, _ = load_checkpoint(args.checkpoint)
    mode = args.heads or _default_mode(net)
    attacks = _attacks_from_flags(args, cfg.eval_attacks)
    workers = resolve_workers(args.workers)

    start = time.perf_counter()
    report = EvalReport(
        model_digest=model_digest(net),
        dataset=dataset_id(dataset),
        mode=mode,
        seed=args.seed if args.seed is not None else cfg.seed,
        clean_accuracy=evaluate_clean(net, dataset, mode, args.batch_size),
    )
    print(f"clean accuracy: {report.clean_accuracy:.4f}")
    for name, attack_cfg in attacks:
        acc = robust_accuracy(net, dataset, attack_cfg, mode=mode,
                              seed=report.seed, batch_size=args.batch_size,
                              workers=workers)
        report.attacks.append(attack_entry(name, attack_cfg, acc))
        print(f"{name}: eps {attack_cfg.epsilon:.6g} steps "
              f"{attack_cfg.num_steps} step_size "
              f"{attack_cfg.resolved_step_size:.8g} -> robust {acc:.4f}")
    report.wall_time_s = time.perf_counter() - start
    if args.report:
        report.save(args.report)
        print(f"report {args.report}")
    return 0


def cmd_cross_eval(args) -> int:
    cfg = _load_config(args)
    dataset = _split_dataset(cfg, args.split)
    net_a, _ = load_checkpoint(args.checkpoint_a)
    net_b, _ = load_checkpoint(args.checkpoint_b)
    mode_a = args.heads_a or _default_mode(net_a)
    mode_b = args.heads_b or _default_mode(net_b)
    name, attack_cfg = _single_attack(args, cfg.eval_attacks[:1])
    seed = args.seed if args.seed is not None else cfg.seed

    table = cross_evaluate(net_a, net_b, dataset, attack_cfg,
                           mode_a=mode_a, mode_b=mode_b, seed=seed,
                           batch_size=args.batch_size)
    acc = table["accuracy"]
    print(f"attack {name}: eps {attack_cfg.epsilon:.6g} steps "
          f"{attack_cfg.num_steps}")
    print("source \\ target      a        b")
    for source in ("a", "b"):
        print(f"       {source}          {acc[source]['a']:.4f}   "
              f"{acc[source]['b']:.4f}")
    self_acc = (acc["a"]["a"] + acc["b"]["b"]) / 2.0
    transfer_acc = (acc["a"]["b"] + acc["b"]["a"]) / 2.0
    print(f"self {self_acc:.4f}  transfer {transfer_acc:.4f}")
    if args.report:
        payload = {
            "attack": attack_entry(name, attack_cfg, float("nan")),
            "accuracy": acc,
            "self_accuracy": self_acc,
            "transfer_accuracy": transfer_acc,
            "model_a": args.checkpoint_a,
            "model_b": args.checkpoint_b,
            "n": len(dataset),
            "seed": seed,
        }
        payload["attack"].pop("robust_accuracy")
        with open(args.report, "w") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        print(f"report {args.report}")
    return 0


def cmd_inspect(args) -> int:
    net, meta = load_checkpoint(args.checkpoint)
    census = parameter_census(net)
    counts = dict(census["counts"])
    counts.setdefault("head_second", 0)
    counts.setdefault("merge", 0)

    info = {
        "file": str(args.checkpoint),
        "kind": meta.get("net", {}).get("kind", "unknown"),
        "stage": meta.get("stage", ""),
        "epoch": meta.get("epoch", 0),
        "seed": meta.get("seed", 0),
        "config_digest": meta.get("config_digest", ""),
        "arch": meta.get("net", {}).get("spec", {}),
        "counts": counts,
        "ratios": census.get("ratios", {}),
        "enabled": census.get("enabled", {}),
        "frozen_regions": meta.get("frozen_regions", []),
    }
    if args.json:
        print(json.dumps(info, indent=2, sort_keys=True))
        return 0

    spec = info["arch"]
    print(f"file: {info['file']}")
    print(f"kind: {info['kind']}  stage: {info['stage']}  "
          f"epoch: {info['epoch']}  seed: {info['seed']}")
    print(f"arch: {spec.get('family')} depth {spec.get('depth')} "
          f"classes {spec.get('num_classes')}")
    print(f"config digest: {info['config_digest']}")
    for region in ("stem", "head_main", "head_second", "merge", "total"):
        if region in counts:
            print(f"params {region}: {counts[region]}")
    for name, value in info["ratios"].items():
        print(f"ratio {name}: {value:.4f}")
    if info["enabled"]:
        flags = "  ".join(f"{k}={v}" for k, v in sorted(info["enabled"].items()))
        print(f"enabled: {flags}")
    frozen = ", ".join(info["frozen_regions"]) or "(none)"
    print(f"frozen regions: {frozen}")
    return 0


def cmd_export_noise(args) -> int:
    cfg = _load_config(args)
    dataset = _split_dataset(cfg, args.split)
    if not 0 <= args.index < len(dataset):
        raise ConfigError(f"--index must lie in [0, {len(dataset)}), "
                          f"got {args.index}")
    net, _ = load_checkpoint(args.checkpoint)
    mode = args.heads or _default_mode(net)
    view = resolve_view(net, mode)
    name, attack_cfg = _single_attack(args, cfg.eval_attacks[:1])
    seed = args.seed if args.seed is not None else cfg.seed

    x = dataset.images[args.index:args.index + 1]
    if attack_cfg.loss_mode == "kl":
        reference = T.softmax(view.logits(Tensor(x), train=False)).data
    else:
        reference = dataset.labels[args.index:args.index + 1]
    adv = pgd(view, x, reference, attack_cfg, seed=seed,
              sample_indices=np.array([args.index]))
    noise_path, adv_path = export_noise(x[0], adv.data[0], args.gain, args.out)
    print(f"noise {noise_path}")
    print(f"adversarial {adv_path}")
    return 0


def cmd_synth_data(args) -> int:
    spec = SynthSpec(num_classes=args.num_classes, per_class=args.per_class,
                     image_size=args.image_size, sigma=args.sigma,
                     seed=args.seed or 0, channels=1)
    dataset = synth_dataset(spec, split=args.split)
    save_idx(dataset, args.out_images, args.out_labels)
    print(f"{len(dataset)} images, {dataset.num_classes} classes, "
          f"{args.image_size}x{args.image_size}")
    print(f"images {args.out_images}")
    print(f"labels {args.out_labels}")
    return 0


def _add_eval_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--attack", choices=("pgd", "fgsm", "none"), default=None,
                   help="attack to run (default: the config's eval list)")
    p.add_argument("--eps", type=float, default=None,
                   help="l-infinity budget")
    p.add_argument("--steps", type=int, default=10, help="attack iterations")
    p.add_argument("--step-size", type=float, default=None,
                   help="per-step size (default: 2.5 * eps / steps)")
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--loss-mode", choices=("ce", "kl"), default="ce")
    p.add_argument("--no-random-start", action="store_true")
    p.add_argument("--split", choices=("train", "val", "test"),
                   default="test")
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--seed", type=int, default=None,
                   help="attack seed (default: the config's seed)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="dhat",
        description="Dual-head adversarial training: train, evaluate, "
                    "inspect.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run the 3-stage pipeline or one stage")
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--stage", type=int, choices=(1, 2, 3), default=None,
                   help="run a single stage (later stages load the "
                        "previous stage's checkpoint from the output dir)")
    p.add_argument("--seed", type=int, default=None,
                   help="override the config seed everywhere")
    p.add_argument("--output-dir", default=None,
                   help="override the config output_dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="clean and robust accuracy of a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True,
                   help="JSON run config (provides the dataset)")
    p.add_argument("--heads", choices=("main", "second", "merged"),
                   default=None, help="forward mode for dual-head nets "
                                      "(default: merged when available)")
    p.add_argument("--report", default=None, help="write a JSON report here")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel attack chunks (DHAT_THREADS overrides)")
    _add_eval_flags(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("cross-eval",
                       help="attack two checkpoints, score examples on both")
    p.add_argument("checkpoint_a")
    p.add_argument("checkpoint_b")
    p.add_argument("--config", required=True)
    p.add_argument("--heads-a", choices=("main", "second", "merged"),
                   default=None)
    p.add_argument("--heads-b", choices=("main", "second", "merged"),
                   default=None)
    p.add_argument("--report", default=None)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_cross_eval)

    p = sub.add_parser("inspect", help="parameter census and metadata")
    p.add_argument("checkpoint")
    p.add_argument("--json", action="store_true", help="machine-readable dump")
    p.set_defaults(func=cmd_inspect)

    p = sub.add_parser("export-noise",
                       help="write the amplified perturbation of one sample "
                            "as a PNG")
    p.add_argument("checkpoint")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="noise PNG path")
    p.add_argument("--index", type=int, default=0, help="dataset index")
    p.add_argument("--gain", type=float, default=20.0,
                   help="perturbation amplification")
    p.add_argument("--heads", choices=("main", "second", "merged"),
                   default=None)
    _add_eval_flags(p)
    p.set_defaults(func=cmd_export_noise)

    p = sub.add_parser("synth-data", help="write a blob dataset as IDX files")
    p.add_argument("--out-images", required=True)
    p.add_argument("--out-labels", required=True)
    p.add_argument("--num-classes", type=int, default=4)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--image-size", type=int, default=8)
    p.add_argument("--sigma", type=float, default=0.05)
    p.add_argument("--split", choices=("train", "val", "test"),
                   default="train")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth_data)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ArgumentError as exc:
        print(f"invalid argument: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, FormatError, StateError) as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return 3
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 3
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return 4
