"""Decision-based (hard-label) attacks: Boundary and Evolutionary."""
from __future__ import annotations

import numpy as np

from .common import AdvResult, AttackSpec, InitError, LabelAccess, rng_for


def _find_init(access, x, y, rng, trials):
    """Random images until one is misclassified; raises InitError on failure."""
    for _ in range(trials):
        if access.remaining < 1:
            break
        cand = rng.random(x.shape).astype(np.float32)
        if int(access.labels(cand[None])[0]) != int(y):
            return cand
    raise InitError(f"no adversarial starting point within {trials} trials")


def _norms(adv, x):
    d = adv.astype(np.float64) - x.astype(np.float64)
    return float(np.abs(d).max()), float(np.sqrt((d ** 2).sum()))


def boundary_attack(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """Walk along the decision boundary with orthogonal + source steps.

    Step sizes adapt to the orthogonal-step success rate; tracks the
    smallest-norm adversarial seen (the best-norm sequence never increases).
    """
    rng = rng_for(spec, image_index)
    access = LabelAccess(model, spec.query_budget)
    init_trials = spec.const("init_trials", 50)
    adv = _find_init(access, x, y, rng, init_trials)
    spherical_step = spec.const("spherical_step", 0.1)
    source_step = spec.const("source_step", 0.1)
    best = adv.copy()
    best_l2 = _norms(adv, x)[1]
    successes = []
    while access.remaining >= 2:
        src = x.astype(np.float64) - adv.astype(np.float64)
        dist = np.sqrt((src ** 2).sum())
        if dist < 1e-7:
            break
        # orthogonal (spherical) candidate
        pert = rng.normal(size=x.shape)
        pert -= (pert * src).sum() / (dist ** 2) * src
        pn = np.sqrt((pert ** 2).sum())
        if pn > 0:
            pert *= spherical_step * dist / pn
        sph = adv.astype(np.float64) + pert
        sph = x.astype(np.float64) + (sph - x.astype(np.float64)) * \
            (dist / max(np.sqrt(((sph - x.astype(np.float64)) ** 2).sum()), 1e-12))
        sph = np.clip(sph, 0, 1).astype(np.float32)
        ok_sph = int(access.labels(sph[None])[0]) != int(y)
        successes.append(ok_sph)
        if ok_sph:
            # contract towards the source
            cand = (sph.astype(np.float64) * (1 - source_step)
                    + x.astype(np.float64) * source_step)
            cand = np.clip(cand, 0, 1).astype(np.float32)
            if int(access.labels(cand[None])[0]) != int(y):
                adv = cand
            else:
                adv = sph
            l2 = _norms(adv, x)[1]
            if l2 < best_l2:
                best_l2, best = l2, adv.copy()
        if len(successes) >= 20:
            rate = np.mean(successes)
            successes = []
            if rate < 0.2:
                spherical_step *= 0.7
                source_step *= 0.7
            elif rate > 0.6:
                spherical_step *= 1.3
                source_step *= 1.3
            source_step = min(source_step, 0.9)
    return AdvResult.from_adv(best, x, True, access.used)


def evolutionary_attack(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """(1+1) evolution strategy in a reduced space, covariance-adapted."""
    rng = rng_for(spec, image_index)
    access = LabelAccess(model, spec.query_budget)
    init_trials = spec.const("init_trials", 50)
    adv = _find_init(access, x, y, rng, init_trials).astype(np.float64)
    c, h, w = x.shape
    rdim = spec.const("reduce_dim", max(2, h // 4))
    sigma = spec.const("sigma", 0.01)
    source_step = spec.const("source_step", 0.02)
    cov_lr = spec.const("cov_lr", 0.1)
    cov = np.ones((c, rdim, rdim))
    x64 = x.astype(np.float64)
    best = adv.copy()
    best_l2 = np.sqrt(((adv - x64) ** 2).sum())
    stats = []
    while access.remaining >= 1:
        z = rng.normal(size=(c, rdim, rdim)) * np.sqrt(cov)
        zi = np.repeat(np.repeat(z, max(h // rdim, 1), axis=1),
                       max(w // rdim, 1), axis=2)
        zi = zi[:, :h, :w]
        if zi.shape != x.shape:
            pad_h, pad_w = h - zi.shape[1], w - zi.shape[2]
            zi = np.pad(zi, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
        dist = np.sqrt(((adv - x64) ** 2).sum())
        cand = adv + source_step * (x64 - adv) + sigma * dist * zi / \
            max(np.sqrt((zi ** 2).sum()), 1e-12)
        cand = np.clip(cand, 0, 1)
        ok = int(access.labels(cand.astype(np.float32)[None])[0]) != int(y)
        stats.append(ok)
        if ok:
            adv = cand
            cov = (1 - cov_lr) * cov + cov_lr * (z ** 2)
            l2 = np.sqrt(((adv - x64) ** 2).sum())
            if l2 < best_l2:
                best_l2, best = l2, adv.copy()
        if len(stats) >= 20:
            rate = np.mean(stats)
            stats = []
            # 1/5th success rule on the mutation strength
            sigma *= 1.3 if rate > 0.25 else 0.75
            source_step *= 1.2 if rate > 0.25 else 0.8
    return AdvResult.from_adv(best.astype(np.float32), x, True, access.used)
