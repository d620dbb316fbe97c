"""White-box attacks: FGSM, PGD, DeepFool, C&W (l2)."""
from __future__ import annotations

import numpy as np

from .. import autodiff as ad
from .common import AdvResult, AttackSpec, input_grad, project_ball, rng_for


def _is_adv(model, adv, y):
    return int(model.predict(adv[None])[0]) != int(y)


def fgsm(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """One epsilon-long step along the sign of the loss gradient (l-inf)."""
    if spec.norm != "linf":
        raise ValueError("fgsm is an l-inf attack")
    if spec.epsilon == 0:
        return AdvResult.from_adv(x.copy(), x, _is_adv(model, x, y))
    g = input_grad(model, x, y)
    adv = np.clip(x + np.float32(spec.epsilon) * np.sign(g, dtype=np.float32), 0.0, 1.0)
    return AdvResult.from_adv(adv, x, _is_adv(model, adv, y))


def pgd(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """Iterative gradient ascent from a random start inside the eps-ball."""
    eps = spec.epsilon
    rng = rng_for(spec, image_index)
    T = spec.steps
    alpha = spec.const("alpha", 2.5 * eps / max(T, 1))
    if spec.norm == "linf":
        adv = x + rng.uniform(-eps, eps, x.shape).astype(np.float32)
    else:
        d = rng.normal(size=x.shape).astype(np.float32)
        r = float(np.sqrt((d.astype(np.float64) ** 2).sum())) or 1.0
        d = d / r * eps * rng.random() ** (1.0 / d.size)
        adv = x + d
    adv = project_ball(adv, x, spec.norm, eps)
    for _ in range(T):
        g = input_grad(model, adv, y)
        if spec.norm == "linf":
            adv = adv + np.float32(alpha) * np.sign(g, dtype=np.float32)
        else:
            n = float(np.sqrt((g.astype(np.float64) ** 2).sum()))
            if n > 0:
                adv = adv + np.float32(alpha) * g / np.float32(n)
        adv = project_ball(adv, x, spec.norm, eps)
    return AdvResult.from_adv(adv, x, _is_adv(model, adv, y))


def _class_grads(model, x, classes):
    """Gradients of each class logit w.r.t. x (one backward per class)."""
    grads = {}
    logits0 = None
    for k in classes:
        g = ad.Graph()
        xv = ad.Var(x[None].astype(np.float32), requires_grad=True)
        logits = model.forward(g, xv, training=False)
        seed = np.zeros_like(logits.data)
        seed[0, k] = 1.0
        g.backward(logits, seed)
        grads[k] = xv.grad[0]
        logits0 = logits.data[0]
    return logits0, grads


def deepfool(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """Iterative linearization toward the nearest class boundary (min-norm).

    Returns the unconstrained minimal perturbation found; the curve
    machinery thresholds its achieved norm against each budget.
    """
    max_iter = spec.const("max_iter", 50)
    overshoot = spec.const("overshoot", 0.02)
    num_classes = model.logits(x[None]).shape[1]
    candidates = list(range(num_classes))
    pred0 = int(model.predict(x[None])[0])
    if pred0 != int(y):
        return AdvResult.from_adv(x.copy(), x, True)
    adv = x.astype(np.float64).copy()
    r_total = np.zeros_like(adv)
    for _ in range(max_iter):
        logits, grads = _class_grads(model, adv.astype(np.float32), candidates)
        cur = int(np.argmax(logits))
        if cur != pred0:
            break
        gy = grads[pred0].astype(np.float64)
        best_ratio, best_r = np.inf, None
        for k in candidates:
            if k == pred0:
                continue
            wk = grads[k].astype(np.float64) - gy
            fk = float(logits[k] - logits[pred0])
            wnorm = np.sqrt((wk ** 2).sum())
            if wnorm < 1e-12:
                continue
            ratio = abs(fk) / wnorm
            if ratio < best_ratio:
                best_ratio = ratio
                best_r = (abs(fk) + 1e-6) / (wnorm ** 2) * wk
        if best_r is None:
            break
        r_total = r_total + best_r
        adv = x.astype(np.float64) + (1 + overshoot) * r_total
    adv32 = np.clip(adv, 0.0, 1.0).astype(np.float32)
    success = _is_adv(model, adv32, y)
    res = AdvResult.from_adv(adv32, x, success)
    if not success:
        res.norm_linf = res.norm_l2 = np.inf
    return res


def cw_l2(model, x, y, spec: AttackSpec, image_index=0) -> AdvResult:
    """Carlini-Wagner l2: tanh reparameterization + binary search over c."""
    kappa = spec.const("kappa", 0.0)
    bs_steps = spec.const("binary_search_steps", 6)
    inner = spec.const("inner_steps", 200)
    lr = spec.const("lr", 1e-2)
    c = spec.const("c_init", 1e-2)
    if _is_adv(model, x, y):
        return AdvResult.from_adv(x.copy(), x, True)
    xc = np.clip(x.astype(np.float64), 1e-6, 1 - 1e-6)
    w0 = np.arctanh(2 * xc - 1)
    lo, hi = 0.0, 1e10
    best_adv, best_l2 = None, np.inf
    for _ in range(bs_steps):
        v = np.zeros_like(w0)
        m = np.zeros_like(v)
        s = np.zeros_like(v)
        t = 0
        found = False
        for _ in range(inner):
            adv = ((np.tanh(w0 + v) + 1) / 2).astype(np.float32)
            g = ad.Graph()
            xv = ad.Var(adv[None], requires_grad=True)
            logits = model.forward(g, xv, training=False)
            z = logits.data[0]
            jstar = int(np.argmax(np.where(np.arange(len(z)) == y, -np.inf, z)))
            f = float(z[y] - z[jstar])
            seed = np.zeros_like(logits.data)
            if f > -kappa:
                seed[0, y], seed[0, jstar] = 1.0, -1.0
            g.backward(logits, seed)
            margin_grad = xv.grad[0].astype(np.float64)
            delta = adv.astype(np.float64) - x.astype(np.float64)
            grad_adv = 2 * delta + c * margin_grad
            grad_v = grad_adv * (1 - np.tanh(w0 + v) ** 2) / 2
            t += 1
            m = 0.9 * m + 0.1 * grad_v
            s = 0.999 * s + 0.001 * grad_v ** 2
            v -= lr * (m / (1 - 0.9 ** t)) / (np.sqrt(s / (1 - 0.999 ** t)) + 1e-8)
            if f <= -kappa:
                found = True
                l2 = float(np.sqrt((delta ** 2).sum()))
                if l2 < best_l2:
                    best_l2, best_adv = l2, adv.copy()
        if found:
            hi = c
            c = (lo + hi) / 2
        else:
            lo = c
            c = (lo + hi) / 2 if hi < 1e9 else c * 10
    if best_adv is None:
        res = AdvResult.from_adv(x.copy(), x, False)
        res.norm_linf = res.norm_l2 = np.inf
        return res
    return AdvResult.from_adv(best_adv, x, True)
