"""White-box l-infinity attacks: FGSM and PGD with restarts.

Both attacks treat the model as read-only and run it in evaluation
mode, so generating adversarial batches mid-training never perturbs
batch-norm running statistics or parameter gradients.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .errors import ArgumentError, DimensionError
from .tensor import Tensor

PIXEL_BOUNDS = (0.0, 1.0)


@dataclass
class AttackConfig:
    """Knobs for an l-infinity attack.

    ``step_size=None`` means "derive it": ``resolved_step_size`` applies
    the 2.5 * epsilon / num_steps evaluation rule.
    """

    epsilon: float
    num_steps: int = 10
    step_size: float | None = None
    restarts: int = 1
    random_start: bool = True
    loss_mode: str = "ce"
    pixel_bounds: tuple[float, float] = field(default=PIXEL_BOUNDS)

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ArgumentError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.num_steps < 1:
            raise ArgumentError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.restarts < 1:
            raise ArgumentError(f"restarts must be >= 1, got {self.restarts}")
        if self.step_size is not None and self.step_size <= 0:
            raise ArgumentError(f"step_size must be positive, got {self.step_size}")
        if self.loss_mode not in ("ce", "kl"):
            raise ArgumentError(f"loss_mode must be 'ce' or 'kl', got {self.loss_mode!r}")
        lo, hi = self.pixel_bounds
        if not lo < hi:
            raise ArgumentError(f"pixel_bounds must satisfy lo < hi, got {self.pixel_bounds}")

    @property
    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.num_steps


def _as_data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def project_linf(x_adv, x, epsilon: float, bounds=PIXEL_BOUNDS):
    """Clamp ``x_adv`` into the epsilon-ball around ``x``, then into bounds.

    Points already inside both constraints pass through bit-exact.
    """
    if epsilon < 0:
        raise ArgumentError(f"epsilon must be non-negative, got {epsilon}")
    adv = _as_data(x_adv)
    ref = _as_data(x)
    if adv.shape != ref.shape:
        raise DimensionError(
            f"x_adv shape {adv.shape} does not match x shape {ref.shape}")
    lo, hi = bounds
    out = np.clip(np.clip(adv, ref - epsilon, ref + epsilon), lo, hi)
    return Tensor(out) if isinstance(x_adv, Tensor) else out


def _model_logits(model, x: Tensor) -> Tensor:
    fn = getattr(model, "logits", None)
    if fn is not None:
        return fn(x, train=False)
    return model(x)


def _model_param_tensors(model) -> list[Tensor]:
    target = getattr(model, "net", model)
    named = getattr(target, "named_parameters", None)
    if named is None:
        return []
    return [p for _, p in named()]


@contextmanager
def _inference_only(model):
    """Disable parameter gradients for the duration of an attack.

    Backward passes inside the block then touch only the input leaf,
    which keeps attack runs from depositing gradients on the model.
    """
    params = _model_param_tensors(model)
    saved = [p.requires_grad for p in params]
    for p in params:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, s in zip(params, saved):
            p.requires_grad = s


def _attack_losses(z: Tensor, labels, ref_probs, loss_mode: str) -> Tensor:
    if loss_mode == "ce":
        return T.cross_entropy(z, labels)
    return T.kl_divergence(ref_probs, T.softmax(z))


def _input_gradient(model, cur: np.ndarray, labels, ref_probs, loss_mode: str) -> np.ndarray:
    leaf = Tensor(cur, requires_grad=True)
    losses = _attack_losses(_model_logits(model, leaf), labels, ref_probs, loss_mode)
    T.sum_(losses).backward()
    return leaf.grad


def _final_losses(model, cur: np.ndarray, labels, ref_probs, loss_mode: str) -> np.ndarray:
    losses = _attack_losses(_model_logits(model, Tensor(cur)), labels, ref_probs, loss_mode)
    return losses.data.copy()


def fgsm(model, x, y, epsilon: float, bounds=PIXEL_BOUNDS) -> Tensor:
    """One signed-gradient ascent step on cross entropy, then project."""
    if epsilon < 0:
        raise ArgumentError(f"epsilon must be non-negative, got {epsilon}")
    x0 = _as_data(x)
    labels = np.asarray(y)
    with _inference_only(model):
        grad = _input_gradient(model, np.array(x0, copy=True), labels, None, "ce")
    stepped = x0 + epsilon * np.sign(grad)
    return Tensor(project_linf(stepped, x0, epsilon, bounds))


def _check_reference(reference, n: int, loss_mode: str):
    """Split the reference argument into (labels, clean probability rows)."""
    ref = _as_data(reference)
    if loss_mode == "kl":
        if ref.ndim != 2 or ref.shape[0] != n or not np.issubdtype(ref.dtype, np.floating):
            raise ArgumentError(
                "kl attack needs the clean probability rows as reference, "
                f"got array with shape {ref.shape} and dtype {ref.dtype}")
        return None, Tensor(ref)
    if ref.ndim != 1 or ref.shape[0] != n:
        raise ArgumentError(
            f"ce attack needs one label per sample, got shape {ref.shape}")
    return ref.astype(np.int64), None


def pgd(model, x, reference, cfg: AttackConfig, *, seed: int = 0,
        sample_indices=None, return_loss: bool = False):
    """Projected gradient descent in the l-infinity ball around ``x``.

    ``reference`` is the true label vector for ``loss_mode="ce"`` or the
    clean probability rows for ``loss_mode="kl"``.  Each restart draws
    its start from a per-sample stream seeded by (seed, sample index,
    restart), so results do not depend on how samples are batched; pass
    ``sample_indices`` to pin dataset-global indices.  Per sample, the
    restart with the largest final loss wins.
    """
    x0 = _as_data(x)
    n = x0.shape[0]
    if sample_indices is None:
        sample_indices = np.arange(n)
    sample_indices = np.asarray(sample_indices, dtype=np.int64)
    if sample_indices.shape != (n,):
        raise ArgumentError(
            f"sample_indices must have shape ({n},), got {sample_indices.shape}")
    labels, ref_probs = _check_reference(reference, n, cfg.loss_mode)

    eps = cfg.epsilon
    alpha = cfg.resolved_step_size
    lo, hi = cfg.pixel_bounds
    best = np.array(x0, copy=True)
    best_loss = np.full(n, -np.inf)

    with _inference_only(model):
        for restart in range(cfg.restarts):
            cur = np.array(x0, copy=True)
            if cfg.random_start and eps > 0:
                noise = np.empty_like(cur)
                for i in range(n):
                    stream = np.random.default_rng(
                        (seed, int(sample_indices[i]), restart))
                    noise[i] = stream.uniform(-eps, eps, size=cur.shape[1:])
                cur = project_linf(cur + noise, x0, eps, cfg.pixel_bounds)
            for _ in range(cfg.num_steps):
                grad = _input_gradient(model, cur, labels, ref_probs, cfg.loss_mode)
                cur = np.clip(np.clip(cur + alpha * np.sign(grad),
                                      x0 - eps, x0 + eps), lo, hi)
            final = _final_losses(model, cur, labels, ref_probs, cfg.loss_mode)
            better = final > best_loss
            best[better] = cur[better]
            best_loss[better] = final[better]

    adv = Tensor(best)
    if return_loss:
        return adv, best_loss
    return adv
