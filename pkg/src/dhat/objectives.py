"""Adversarial training objectives: SAT, TRADES, and MART.

Each loss runs its inner maximization with the model in evaluation
mode and then scores the result with training-mode forwards, so batch
statistics see exactly the tensors being optimized.  An explicit
``x_adv`` skips the attack, which is how the oracle tests pin the
adversarial batch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .attacks import AttackConfig, pgd
from .errors import ArgumentError
from .tensor import Tensor

OBJECTIVE_KINDS = ("sat", "trades", "mart")


@dataclass
class Objective:
    """An adversarial training criterion plus its inner attack."""

    kind: str
    attack: AttackConfig
    inv_lambda: float = 0.0

    def __post_init__(self):
        if self.kind not in OBJECTIVE_KINDS:
            raise ArgumentError(
                f"objective kind must be one of {OBJECTIVE_KINDS}, got {self.kind!r}")
        if self.inv_lambda < 0:
            raise ArgumentError(f"inv_lambda must be >= 0, got {self.inv_lambda}")


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x))


def _require_mode(attack: AttackConfig, mode: str, objective: str) -> None:
    if attack.loss_mode != mode:
        raise ArgumentError(
            f"{objective} runs a {mode}-mode inner attack, got {attack.loss_mode!r}")


def sat_loss(model, x, y, attack: AttackConfig, *, x_adv=None, seed: int = 0,
             sample_indices=None, train: bool = True) -> Tensor:
    """Cross entropy on adversarial examples; the clean batch is unused."""
    y = np.asarray(y)
    if x_adv is None:
        _require_mode(attack, "ce", "sat_loss")
        x_adv = pgd(model, x, y, attack, seed=seed, sample_indices=sample_indices)
    z_adv = model.logits(_as_tensor(x_adv), train=train)
    return T.mean(T.cross_entropy(z_adv, y))


def trades_loss(model, x, y, inv_lambda: float, attack: AttackConfig, *,
                x_adv=None, seed: int = 0, sample_indices=None,
                train: bool = True) -> Tensor:
    """Clean cross entropy plus ``inv_lambda`` times KL(clean || adversarial).

    ``inv_lambda=0`` short-circuits to the plain clean loss: no attack
    runs, so the call is bit-identical to cross entropy on ``x``.
    """
    if inv_lambda < 0:
        raise ArgumentError(f"inv_lambda must be >= 0, got {inv_lambda}")
    y = np.asarray(y)
    xt = _as_tensor(x)
    z_clean = model.logits(xt, train=train)
    ce = T.mean(T.cross_entropy(z_clean, y))
    if inv_lambda == 0:
        return ce
    if x_adv is None:
        _require_mode(attack, "kl", "trades_loss")
        ref = T.softmax(model.logits(xt, train=False)).data
        x_adv = pgd(model, x, ref, attack, seed=seed, sample_indices=sample_indices)
    z_adv = model.logits(_as_tensor(x_adv), train=train)
    kl = T.mean(T.kl_divergence(T.softmax(z_clean), T.softmax(z_adv)))
    return T.add(ce, T.scale(kl, inv_lambda))


def _argmax_excluding_label(p_adv: np.ndarray, y: np.ndarray) -> np.ndarray:
    masked = np.array(p_adv, copy=True)
    masked[np.arange(len(y)), y] = -np.inf
    return masked.argmax(axis=1)


def mart_loss(model, x, y, inv_lambda: float, attack: AttackConfig, *,
              x_adv=None, seed: int = 0, sample_indices=None,
              train: bool = True) -> Tensor:
    """Boosted cross entropy on adversarial examples plus weighted KL.

    The boosted term is -log p_adv[y] - log(1 - max over other classes
    of p_adv), with the one-minus computed by summing the non-argmax
    entries so near-one probabilities do not cancel.  The KL term is
    weighted per sample by (1 - p_clean[y]), fading for examples the
    clean model already classifies confidently.
    """
    if inv_lambda < 0:
        raise ArgumentError(f"inv_lambda must be >= 0, got {inv_lambda}")
    y = np.asarray(y)
    if x_adv is None:
        _require_mode(attack, "ce", "mart_loss")
        x_adv = pgd(model, x, y, attack, seed=seed, sample_indices=sample_indices)

    z_adv = model.logits(_as_tensor(x_adv), train=train)
    p_adv = T.softmax(z_adv)
    nll = T.scale(T.select_index(T.log_softmax(z_adv), y), -1.0)
    runner_up = _argmax_excluding_label(p_adv.data, y)
    margin = T.scale(T.log(T.sum_excluding(p_adv, runner_up)), -1.0)
    bce = T.mean(T.add(nll, margin))
    if inv_lambda == 0:
        return bce

    z_clean = model.logits(_as_tensor(x), train=train)
    p_clean = T.softmax(z_clean)
    kl = T.kl_divergence(p_clean, p_adv)
    weight = T.add_scalar(T.scale(T.select_index(p_clean, y), -1.0), 1.0)
    return T.add(bce, T.scale(T.mean(T.mul(kl, weight)), inv_lambda))


def objective_loss(model, x, y, objective: Objective, *, seed: int = 0,
                   sample_indices=None, train: bool = True) -> Tensor:
    """Dispatch a batch through the objective named by ``objective.kind``."""
    common = dict(seed=seed, sample_indices=sample_indices, train=train)
    if objective.kind == "sat":
        return sat_loss(model, x, y, objective.attack, **common)
    if objective.kind == "trades":
        return trades_loss(model, x, y, objective.inv_lambda, objective.attack, **common)
    return mart_loss(model, x, y, objective.inv_lambda, objective.attack, **common)
