"""Transfer attack: scale-invariant Nesterov iterative FGSM on a surrogate."""
from __future__ import annotations

import numpy as np

from .common import AdvResult, AttackSpec, input_grad, project_ball


def si_ni_fgsm(surrogate, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """Momentum + Nesterov lookahead + scale-copy averaged gradients.

    With m=1, momentum 0, T=1 and alpha=eps the update is bit-identical to
    FGSM.  Success is judged on the surrogate; transfer evaluation re-scores
    the adversarial set on each target.
    """
    if spec.norm != "linf":
        raise ValueError("si-ni-fgsm is l-inf")
    eps = spec.epsilon
    T = max(spec.steps, 1)
    m = spec.const("scale_copies", 5)
    momentum = spec.const("momentum", 1.0)
    if m < 1:
        raise ValueError("scale_copies must be >= 1")
    alpha = spec.const("alpha", eps / T)
    if eps == 0:
        ok = int(surrogate.predict(x[None])[0]) != int(y)
        return AdvResult.from_adv(x.copy(), x, ok)
    adv = x.astype(np.float32).copy()
    g_accum = np.zeros_like(adv)
    for _ in range(T):
        x_nes = adv + np.float32(alpha * momentum) * g_accum
        grad = np.zeros_like(adv, dtype=np.float64)
        for i in range(m):
            grad += input_grad(surrogate, (x_nes / (2 ** i)).astype(np.float32), y)
        grad /= m
        denom = np.abs(grad).mean()
        if denom > 0:
            grad = grad / denom
        g_accum = np.float32(momentum) * g_accum + grad.astype(np.float32)
        adv = adv + np.float32(alpha) * np.sign(g_accum, dtype=np.float32)
        adv = project_ball(adv, x, "linf", eps)
    ok = int(surrogate.predict(adv[None])[0]) != int(y)
    return AdvResult.from_adv(adv, x, ok)
