"""Clean/robust accuracy, attack transfer tables, and noise export."""

from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from . import tensor as T
from .attacks import AttackConfig, pgd
from .data import Dataset, batch_iter
from .errors import ArchitectureError, ArgumentError
from .tensor import Tensor


def resolve_view(model, mode: str | None):
    """Pick a forward mode off a dual-head net; single heads pass through."""
    if mode is None:
        return model
    view = getattr(model, "head_view", None)
    if view is not None:
        return view(mode)
    if mode == "main":
        return model
    raise ArgumentError(f"model has a single head; cannot evaluate mode {mode!r}")


def model_digest(model) -> str:
    """sha256 over every tensor's name and bytes, in walk order."""
    target = getattr(model, "net", model)
    h = hashlib.sha256()
    for name, p in target.named_parameters():
        h.update(name.encode())
        h.update(p.data.tobytes())
    for name, b in target.named_buffers():
        h.update(name.encode())
        h.update(b.tobytes())
    return h.hexdigest()


def dataset_id(ds: Dataset) -> str:
    return f"{ds.name}/{ds.split}/n{len(ds)}"


def predict(model, images: np.ndarray, mode: str | None = None,
            batch_size: int = 64) -> np.ndarray:
    """Eval-mode argmax predictions for a stack of images."""
    view = resolve_view(model, mode)
    out = np.empty(images.shape[0], dtype=np.int64)
    for start in range(0, images.shape[0], batch_size):
        x = Tensor(images[start:start + batch_size])
        out[start:start + batch_size] = view.logits(x, train=False).data.argmax(axis=1)
    return out


def evaluate_clean(model, dataset: Dataset, mode: str | None = None,
                   batch_size: int = 64) -> float:
    """Fraction of argmax-correct eval-mode predictions."""
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate an empty dataset")
    preds = predict(model, dataset.images, mode, batch_size)
    return float(np.mean(preds == dataset.labels))


def _adversarial_batches(model, dataset: Dataset, cfg: AttackConfig,
                         seed: int, batch_size: int):
    """Yield (x_adv, labels) batches attacked against ``model``."""
    for x, y, idx in batch_iter(dataset, batch_size):
        if cfg.loss_mode == "kl":
            reference = T.softmax(model.logits(Tensor(x), train=False)).data
        else:
            reference = y
        adv = pgd(model, x, reference, cfg, seed=seed, sample_indices=idx)
        yield adv.data, y


def evaluate_robust(model, dataset: Dataset, cfg: AttackConfig,
                    mode: str | None = None, seed: int = 0,
                    batch_size: int = 64) -> float:
    """Fraction of samples still predicted correctly after the attack.

    Cleanly misclassified samples count as non-robust, so this number
    never exceeds clean accuracy.  The step size comes from
    ``cfg.resolved_step_size`` (the 2.5 * epsilon / num_steps rule when
    unset).
    """
    if len(dataset) == 0:
        raise ArgumentError("cannot evaluate an empty dataset")
    view = resolve_view(model, mode)
    correct = 0
    for x_adv, y in _adversarial_batches(view, dataset, cfg, seed, batch_size):
        preds = predict(view, x_adv, None, batch_size)
        correct += int(np.sum(preds == y))
    return correct / len(dataset)


def cross_evaluate(model_a, model_b, dataset: Dataset, cfg: AttackConfig,
                   mode_a: str | None = None, mode_b: str | None = None,
                   seed: int = 0, batch_size: int = 64) -> dict:
    """Attack each model, score the examples on both.

    Returns a nested table: ``accuracy[source][target]`` plus the raw
    per-sample predictions for inspection.
    """
    views = {"a": resolve_view(model_a, mode_a), "b": resolve_view(model_b, mode_b)}
    probe = Tensor(dataset.images[:1])
    shapes = {k: v.logits(probe, train=False).shape for k, v in views.items()}
    if shapes["a"] != shapes["b"]:
        raise ArchitectureError(
            f"models disagree on logits shape: {shapes['a']} vs {shapes['b']}")

    accuracy = {s: {} for s in views}
    predictions = {s: {} for s in views}
    labels = dataset.labels
    for source, src_view in views.items():
        adv_parts = [x for x, _ in _adversarial_batches(
            src_view, dataset, cfg, seed, batch_size)]
        x_adv = np.concatenate(adv_parts)
        for target, tgt_view in views.items():
            preds = predict(tgt_view, x_adv, None, batch_size)
            accuracy[source][target] = float(np.mean(preds == labels))
            predictions[source][target] = preds
    return {"accuracy": accuracy, "predictions": predictions,
            "labels": labels.copy()}


@dataclass
class EvalReport:
    """One model's evaluation: clean accuracy plus per-attack entries."""

    model_digest: str
    dataset: str
    mode: str | None
    seed: int
    clean_accuracy: float
    attacks: list = field(default_factory=list)
    wall_time_s: float = 0.0

    def to_dict(self) -> dict:
        return {
            "model_digest": self.model_digest,
            "dataset": self.dataset,
            "mode": self.mode,
            "seed": self.seed,
            "clean_accuracy": self.clean_accuracy,
            "attacks": self.attacks,
            "wall_time_s": self.wall_time_s,
        }

    def save(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")


def attack_entry(name: str, cfg: AttackConfig, robust_accuracy: float) -> dict:
    """An EvalReport attack row echoing the exact configuration used."""
    return {
        "name": name,
        "epsilon": cfg.epsilon,
        "steps": cfg.num_steps,
        "step_size": cfg.resolved_step_size,
        "restarts": cfg.restarts,
        "random_start": cfg.random_start,
        "loss_mode": cfg.loss_mode,
        "robust_accuracy": robust_accuracy,
    }


def evaluate_model(model, dataset: Dataset, attacks, mode: str | None = None,
                   seed: int = 0, batch_size: int = 64) -> EvalReport:
    """Run clean plus named attacks; ``attacks`` is [(name, AttackConfig)]."""
    start = time.perf_counter()
    report = EvalReport(
        model_digest=model_digest(model),
        dataset=dataset_id(dataset),
        mode=mode,
        seed=seed,
        clean_accuracy=evaluate_clean(model, dataset, mode, batch_size),
    )
    for name, cfg in attacks:
        acc = evaluate_robust(model, dataset, cfg, mode, seed, batch_size)
        report.attacks.append(attack_entry(name, cfg, acc))
    report.wall_time_s = time.perf_counter() - start
    return report


def _to_image(array: np.ndarray) -> Image.Image:
    c = array.shape[0]
    quantized = np.clip(np.round(array * 255.0), 0, 255).astype(np.uint8)
    if c == 1:
        return Image.fromarray(quantized[0], mode="L")
    if c == 3:
        return Image.fromarray(quantized.transpose(1, 2, 0), mode="RGB")
    raise ArgumentError(f"can only export 1- or 3-channel images, got {c}")


def export_noise(x: np.ndarray, x_adv: np.ndarray, gain: float, path) -> tuple[str, str]:
    """Write the amplified perturbation and the perturbed image as PNGs.

    The noise image is clamp(0.5 + gain * (x_adv - x), 0, 1); zero
    perturbation renders mid-gray.  The adversarial image lands next to
    it with an ``_adv`` suffix.  Returns both paths.
    """
    x = np.asarray(x, dtype=np.float64)
    x_adv = np.asarray(x_adv, dtype=np.float64)
    if x.shape != x_adv.shape:
        raise ArgumentError(f"shape mismatch: {x.shape} vs {x_adv.shape}")
    if x.ndim != 3:
        raise ArgumentError(f"expected one C x H x W image, got shape {x.shape}")
    if gain <= 0:
        raise ArgumentError(f"gain must be positive, got {gain}")
    noise = np.clip(0.5 + gain * (x_adv - x), 0.0, 1.0)
    path = str(path)
    stem, dot, ext = path.rpartition(".")
    adv_path = f"{stem}_adv{dot}{ext}" if dot else f"{path}_adv"
    _to_image(noise).save(path, format="PNG")
    _to_image(x_adv).save(adv_path, format="PNG")
    return path, adv_path
