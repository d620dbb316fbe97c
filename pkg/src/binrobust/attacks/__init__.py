"""Ten adversarial attacks plus the minimal-perturbation curve protocol."""
from __future__ import annotations

import numpy as np

from .common import (AdvResult, AttackSpec, BudgetError, InitError,
                     ScoreAccess, LabelAccess, margin_loss, project_ball,
                     rng_for)
from .whitebox import fgsm, pgd, deepfool, cw_l2
from .scorebased import spsa, nattack, square_attack
from .decision import boundary_attack, evolutionary_attack
from .transfer import si_ni_fgsm

__all__ = [
    "AttackSpec", "AdvResult", "BudgetError", "InitError",
    "fgsm", "pgd", "deepfool", "cw_l2", "spsa", "nattack", "square_attack",
    "boundary_attack", "evolutionary_attack", "si_ni_fgsm",
    "ATTACKS", "MIN_NORM_ATTACKS", "run_attack", "min_norm_to_curve",
]

ATTACKS = {
    "fgsm": fgsm,
    "pgd": pgd,
    "deepfool": deepfool,
    "cw": cw_l2,
    "spsa": spsa,
    "nattack": nattack,
    "square": square_attack,
    "boundary": boundary_attack,
    "evolutionary": evolutionary_attack,
    "si_ni_fgsm": si_ni_fgsm,
}

# attacks that return a minimal perturbation rather than a budgeted one
MIN_NORM_ATTACKS = {"deepfool", "cw", "boundary", "evolutionary"}

FAMILY = {
    "fgsm": "white", "pgd": "white", "deepfool": "white", "cw": "white",
    "spsa": "score", "nattack": "score", "square": "score",
    "boundary": "decision", "evolutionary": "decision",
    "si_ni_fgsm": "transfer",
}


def run_attack(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """Dispatch one per-image attack by spec.method."""
    try:
        fn = ATTACKS[spec.method]
    except KeyError:
        raise ValueError(f"unknown attack method {spec.method!r}") from None
    return fn(model, x, y, spec, image_index=image_index)


def min_norm_to_curve(results, eps_grid, norm="linf"):
    """Accuracy at each budget from per-image minimal-perturbation results.

    An image counts as still-correct at budget eps iff its attack failed or
    its achieved norm exceeds eps.  Non-increasing in eps by construction.
    """
    key = "norm_linf" if norm == "linf" else "norm_l2"
    accs = []
    for eps in eps_grid:
        ok = 0
        for r in results:
            norm_val = getattr(r, key)
            if (not r.success) or norm_val > eps:
                ok += 1
        accs.append(ok / len(results) if results else 0.0)
    return accs
