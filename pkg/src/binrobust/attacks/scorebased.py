"""Score-based black-box attacks: SPSA, NES-over-a-Gaussian, Square."""
from __future__ import annotations

import numpy as np

from .common import (AdvResult, AttackSpec, BudgetError, ScoreAccess,
                     ce_loss_rows, margin_loss, project_ball, rng_for)


def spsa(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """Gradient estimation from symmetric Bernoulli perturbation pairs."""
    if spec.norm != "linf":
        raise ValueError("spsa runs under l-inf here")
    eps = spec.epsilon
    access = ScoreAccess(model, spec.query_budget)
    if spec.query_budget == 0 or eps == 0:
        ok = int(model.predict(x[None])[0]) != int(y)
        return AdvResult.from_adv(x.copy(), x, ok, 0)
    rng = rng_for(spec, image_index)
    batch = spec.const("batch", 64)
    delta = spec.const("delta", 0.01)
    alpha = spec.const("alpha", eps / 4)
    if spec.query_budget < 2 * batch:
        raise BudgetError(f"budget {spec.query_budget} below one estimation "
                          f"batch ({2 * batch} queries)")
    adv = x.copy()
    best = None
    while access.remaining >= 2 * batch + 1:
        v = rng.choice([-1.0, 1.0], size=(batch,) + x.shape).astype(np.float32)
        plus = np.clip(adv[None] + delta * v, 0, 1)
        minus = np.clip(adv[None] - delta * v, 0, 1)
        lp = ce_loss_rows(access.logits(plus), np.full(batch, y))
        lm = ce_loss_rows(access.logits(minus), np.full(batch, y))
        ghat = ((lp - lm)[:, None, None, None] / (2 * delta) * v).mean(axis=0)
        adv = project_ball(adv + alpha * np.sign(ghat, dtype=np.float32),
                           x, "linf", eps)
        pred = int(access.labels(adv[None])[0])
        if pred != int(y):
            best = adv.copy()
            break
    success = best is not None
    return AdvResult.from_adv(best if success else adv, x, success, access.used)


def nattack(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """NES update of a Gaussian over perturbations mapped into the eps-ball."""
    if spec.epsilon == 0 or spec.query_budget == 0:
        ok = int(model.predict(x[None])[0]) != int(y)
        return AdvResult.from_adv(x.copy(), x, ok, 0)
    eps = spec.epsilon
    rng = rng_for(spec, image_index)
    access = ScoreAccess(model, spec.query_budget)
    pop = spec.const("population", 32)
    sigma = spec.const("sigma", 0.1)
    lr = spec.const("lr", 0.02)
    mu = rng.normal(0, 0.001, x.shape).astype(np.float32)

    def to_candidates(z):
        # squash to [0,1], take the deviation from x, project into the ball
        gz = (np.tanh(z) + 1) / 2
        return np.stack([project_ball(x + (gzi - x), x, spec.norm, eps)
                         for gzi in gz])

    best, best_margin = None, np.inf
    while access.remaining >= pop:
        noise = rng.normal(size=(pop,) + x.shape).astype(np.float32)
        cand = to_candidates(mu[None] + sigma * noise)
        logits = access.logits(cand)
        f = margin_loss(logits, np.full(pop, y))
        i = int(np.argmin(f))
        if f[i] < best_margin:
            best_margin, best = float(f[i]), cand[i].copy()
        if best_margin < 0:
            break
        fz = (f - f.mean()) / (f.std() + 1e-7)
        grad = (fz[:, None, None, None] * noise).mean(axis=0) / sigma
        mu = mu - lr * grad          # descend the margin
    success = best_margin < 0
    adv = best if best is not None else x.copy()
    return AdvResult.from_adv(adv, x, success, access.used)


def _square_schedule(p_init, it, n_iters):
    """Side-fraction schedule from the original random-search attack."""
    frac = int(it / n_iters * 10000)
    if frac <= 10:
        return p_init
    if frac <= 50:
        return p_init / 2
    if frac <= 200:
        return p_init / 4
    if frac <= 500:
        return p_init / 8
    if frac <= 1000:
        return p_init / 16
    if frac <= 2000:
        return p_init / 32
    if frac <= 4000:
        return p_init / 64
    if frac <= 6000:
        return p_init / 128
    if frac <= 8000:
        return p_init / 256
    return p_init / 512


def square_attack(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """Random square patches at +-eps, accepted on margin-loss decrease."""
    if spec.norm != "linf":
        raise ValueError("square attack is l-inf")
    if spec.query_budget == 0 or spec.epsilon == 0:
        ok = int(model.predict(x[None])[0]) != int(y)
        return AdvResult.from_adv(x.copy(), x, ok, 0)
    eps = np.float32(spec.epsilon)
    rng = rng_for(spec, image_index)
    access = ScoreAccess(model, spec.query_budget)
    p_init = spec.const("p_init", 0.1)
    c, h, w = x.shape
    # vertical stripe init at +-eps per (channel, column)
    stripes = rng.choice([-1.0, 1.0], size=(c, 1, w)).astype(np.float32)
    adv = np.clip(x + eps * stripes, 0, 1)
    loss = float(margin_loss(access.logits(adv[None]), [y])[0])
    n_iters = max(spec.query_budget - 1, 1)
    it = 0
    while access.remaining > 0 and loss >= 0:
        p = _square_schedule(p_init, it, n_iters)
        s = max(1, min(h, w, int(round(np.sqrt(p * h * w)))))
        r0 = int(rng.integers(0, h - s + 1))
        c0 = int(rng.integers(0, w - s + 1))
        cand = adv.copy()
        patch = rng.choice([-1.0, 1.0], size=(c, 1, 1)).astype(np.float32)
        cand[:, r0:r0 + s, c0:c0 + s] = np.clip(
            (x + eps * patch)[:, r0:r0 + s, c0:c0 + s], 0, 1)
        cand = project_ball(cand, x, "linf", eps)
        new_loss = float(margin_loss(access.logits(cand[None]), [y])[0])
        if new_loss < loss:
            adv, loss = cand, new_loss
        it += 1
    return AdvResult.from_adv(adv, x, loss < 0, access.used)
