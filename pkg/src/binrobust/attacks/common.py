"""Shared attack machinery: specs, results, projections, query accounting."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .. import autodiff as ad


class BudgetError(RuntimeError):
    """Query budget too small to run the attack, or overrun (a bug)."""


class InitError(RuntimeError):
    """Decision attack could not find an adversarial starting point."""


@dataclass
class AttackSpec:
    """Identity and constraints of one attack run.

    ``constants`` carries method-specific knobs (step size, population size,
    overshoot, ...) documented per attack; everything has a default, so an
    empty dict is always valid.
    """
    method: str
    norm: str = "linf"              # "linf" | "l2"
    epsilon: float = 0.03           # in [0,1] pixel units
    steps: int = 20
    query_budget: int = 10000
    seed: int = 0
    constants: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.epsilon) or self.epsilon < 0:
            raise ValueError("epsilon must be finite and >= 0")
        if self.steps < 0 or self.query_budget < 0:
            raise ValueError("budgets must be >= 0")
        if self.norm not in ("linf", "l2"):
            raise ValueError(f"unsupported norm {self.norm!r}")

    def const(self, name, default):
        return self.constants.get(name, default)


@dataclass
class AdvResult:
    adv: np.ndarray                 # (C,H,W) in [0,1]
    success: bool                   # misclassified after the attack
    norm_linf: float
    norm_l2: float
    queries: int = 0

    @staticmethod
    def from_adv(adv, x, success, queries=0):
        d = adv.astype(np.float64) - x.astype(np.float64)
        return AdvResult(adv=adv.astype(np.float32), success=bool(success),
                         norm_linf=float(np.abs(d).max()) if d.size else 0.0,
                         norm_l2=float(np.sqrt((d ** 2).sum())),
                         queries=int(queries))


def rng_for(spec: AttackSpec, image_index: int) -> np.random.Generator:
    """Per-image RNG stream so parallel and serial runs agree."""
    return np.random.default_rng(np.random.SeedSequence((spec.seed, image_index)))


def project_ball(adv, x, norm, eps):
    """Project ``adv`` into the eps-ball around x, then the [0,1] box."""
    adv = np.asarray(adv, dtype=np.float32)
    if norm == "linf":
        adv = np.clip(adv, x - eps, x + eps)
    else:
        d = adv - x
        n = float(np.sqrt((d.astype(np.float64) ** 2).sum()))
        if n > eps and n > 0:
            d = d * (eps / n)
        adv = x + d
    return np.clip(adv, 0.0, 1.0)


def margin_loss(logits, y):
    """z_y - max_{j != y} z_j per row; negative means misclassified."""
    logits = np.atleast_2d(logits)
    n = logits.shape[0]
    zy = logits[np.arange(n), y]
    masked = logits.copy()
    masked[np.arange(n), y] = -np.inf
    return zy - masked.max(axis=1)


def ce_loss_rows(logits, y):
    """Per-row cross-entropy computed from raw logits (no model gradients)."""
    ls = ad.log_softmax(np.atleast_2d(logits))
    return -ls[np.arange(ls.shape[0]), y]


class ScoreAccess:
    """Score-only access to a classifier with per-sample query accounting."""

    def __init__(self, model, budget):
        self.model = model
        self.budget = int(budget)
        self.used = 0

    @property
    def remaining(self):
        return self.budget - self.used

    def logits(self, x):
        x = np.atleast_2d(x) if x.ndim < 4 else x
        if x.ndim == 3:
            x = x[None]
        n = len(x)
        if self.used + n > self.budget:
            raise BudgetError(f"query overrun: {self.used}+{n} > {self.budget}")
        self.used += n
        return self.model.logits(x)

    def labels(self, x):
        return self.logits(x).argmax(axis=1)


class LabelAccess(ScoreAccess):
    """Hard-label access: only ``labels`` is allowed."""

    def logits(self, x):  # pragma: no cover - guards misuse
        raise PermissionError("decision-based attacks get hard labels only")

    def labels(self, x):
        if x.ndim == 3:
            x = x[None]
        n = len(x)
        if self.used + n > self.budget:
            raise BudgetError(f"query overrun: {self.used}+{n} > {self.budget}")
        self.used += n
        return self.model.logits(x).argmax(axis=1)


def input_grad(model, x, y):
    """White-box dL/dx for a single image (adds the batch axis)."""
    _, grad = model.loss_and_input_grad(x[None], np.asarray([y]))
    return grad[0]
