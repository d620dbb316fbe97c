"""Five defenses: two adversarial-training losses, two input transforms,
one randomization, plus the transform-wrapped classifier.

White-box gradients through the non-differentiable transforms use
straight-through identity (BPDA style): the attack differentiates the bare
classifier at the transformed point.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.fft import dctn, idctn

from . import autodiff as ad


class ConfigError(ValueError):
    pass


@dataclass
class DefenseSpec:
    defense: str                     # pgd_at | trades | jpeg | bit_red | rp
    epsilon: float = 0.03            # inner-attack budget (training defenses)
    steps: int = 10
    beta: float = 6.0                # TRADES trade-off
    quality: int = 75                # JPEG
    bits: int = 4                    # Bit-Red
    pad_range: int = 8               # R&P max resize growth
    seed: int = 0

    def __post_init__(self):
        if not (1 <= self.quality <= 100):
            raise ConfigError("JPEG quality must be in [1,100]")
        if not (1 <= self.bits <= 8):
            raise ConfigError("bit depth must be in [1,8]")
        if self.beta <= 0:
            raise ConfigError("TRADES beta must be > 0")


# ---------------------------------------------------------------------------
# adversarial-training losses (plugged into models.train)
# ---------------------------------------------------------------------------

def _pgd_batch(model, xb, yb, eps, steps, rng, loss="ce", ref_logits=None):
    """Inner l-inf maximization on a batch; eval-mode model, no param grads."""
    if eps == 0:
        return xb.copy()
    adv = np.clip(xb + rng.uniform(-eps, eps, xb.shape).astype(np.float32), 0, 1)
    alpha = np.float32(2.5 * eps / max(steps, 1))
    for _ in range(steps):
        g = ad.Graph()
        xv = ad.Var(adv, requires_grad=True)
        logits = model.forward(g, xv, training=False)
        if loss == "ce":
            lv = ad.cross_entropy(g, logits, yb)
        else:
            lv = ad.kl_div_logits(g, ad.Var(ref_logits), logits)
        g.backward(lv)
        adv = adv + alpha * np.sign(xv.grad, dtype=np.float32)
        adv = np.clip(np.clip(adv, xb - eps, xb + eps), 0, 1)
    return adv


def pgd_at_loss(spec: DefenseSpec):
    """Returns a train-loop loss_fn: cross-entropy on PGD-perturbed batches."""
    rng = np.random.default_rng(spec.seed)

    def loss_fn(model, g, xb, yb):
        adv = _pgd_batch(model, xb, yb, spec.epsilon, spec.steps, rng)
        logits = model.forward(g, ad.Var(adv), training=True)
        return ad.cross_entropy(g, logits, yb), logits

    return loss_fn


def trades_loss(spec: DefenseSpec):
    """CE(f(x), y) + beta * KL(f(x) || f(x')) with x' maximizing the KL."""
    rng = np.random.default_rng(spec.seed)

    def loss_fn(model, g, xb, yb):
        ref = model.logits(xb)
        adv = _pgd_batch(model, xb, yb, spec.epsilon, spec.steps, rng,
                         loss="kl", ref_logits=ref)
        logits_clean = model.forward(g, ad.Var(xb), training=True)
        logits_adv = model.forward(g, ad.Var(adv), training=True)
        ce = ad.cross_entropy(g, logits_clean, yb)
        kl = ad.kl_div_logits(g, logits_clean, logits_adv)
        total = ad.add(g, ce, ad.mul(g, kl, ad.Var(np.float32(spec.beta))))
        return total, logits_clean

    return loss_fn


# ---------------------------------------------------------------------------
# input transformations
# ---------------------------------------------------------------------------

_Q_LUMA = np.array([
    [16, 11, 10, 16, 24, 40, 51, 61],
    [12, 12, 14, 19, 26, 58, 60, 55],
    [14, 13, 16, 24, 40, 57, 69, 56],
    [14, 17, 22, 29, 51, 87, 80, 62],
    [18, 22, 37, 56, 68, 109, 103, 77],
    [24, 35, 55, 64, 81, 104, 113, 92],
    [49, 64, 78, 87, 103, 121, 120, 101],
    [72, 92, 95, 98, 112, 100, 103, 99]], dtype=np.float64)

_Q_CHROMA = np.array([
    [17, 18, 24, 47, 99, 99, 99, 99],
    [18, 21, 26, 66, 99, 99, 99, 99],
    [24, 26, 56, 99, 99, 99, 99, 99],
    [47, 66, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99],
    [99, 99, 99, 99, 99, 99, 99, 99]], dtype=np.float64)

_RGB2YCC = np.array([[0.299, 0.587, 0.114],
                     [-0.168736, -0.331264, 0.5],
                     [0.5, -0.418688, -0.081312]])
_YCC2RGB = np.linalg.inv(_RGB2YCC)


def _quality_scale(q):
    return 5000.0 / q if q < 50 else 200.0 - 2.0 * q


def _scaled_table(base, q):
    t = np.floor((base * _quality_scale(q) + 50) / 100)
    return np.clip(t, 1, 255)


def _blockwise(img, fn):
    """Apply fn to 8x8 tiles; edges are replicated to a multiple of 8."""
    h, w = img.shape
    ph, pw = (-h) % 8, (-w) % 8
    p = np.pad(img, ((0, ph), (0, pw)), mode="edge")
    hh, ww = p.shape
    tiles = p.reshape(hh // 8, 8, ww // 8, 8).transpose(0, 2, 1, 3)
    tiles = fn(tiles)
    out = tiles.transpose(0, 2, 1, 3).reshape(hh, ww)
    return out[:h, :w]


def jpeg_round_trip(x, quality=75):
    """DCT-quantize-dequantize round trip (no entropy coding).

    x: (C,H,W) or (N,C,H,W) in [0,1]; 3-channel inputs go through YCbCr with
    the chrominance table, single-channel uses the luminance table only.
    """
    if not (1 <= quality <= 100):
        raise ConfigError(f"JPEG quality {quality} out of [1,100]")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 4:
        return np.stack([jpeg_round_trip(xi, quality) for xi in x])
    c = x.shape[0]
    if c == 3:
        planes = np.einsum("ij,jhw->ihw", _RGB2YCC, x * 255.0)
        planes[0] -= 128.0
        tables = [_scaled_table(_Q_LUMA, quality)] + \
            [_scaled_table(_Q_CHROMA, quality)] * 2
    else:
        planes = x * 255.0 - 128.0
        tables = [_scaled_table(_Q_LUMA, quality)] * c

    def codec(tiles, qt):
        coef = dctn(tiles, axes=(-2, -1), norm="ortho")
        coef = np.round(coef / qt) * qt
        return idctn(coef, axes=(-2, -1), norm="ortho")

    out = np.stack([_blockwise(p, lambda t, qt=qt: codec(t, qt))
                    for p, qt in zip(planes, tables)])
    if c == 3:
        out[0] += 128.0
        out = np.einsum("ij,jhw->ihw", _YCC2RGB, out)
    else:
        out += 128.0
    return np.clip(out / 255.0, 0.0, 1.0).astype(np.float32)


def bit_depth_reduce(x, bits=4):
    """Quantize to 2**bits levels: round(x*(2^k-1)) / (2^k-1)."""
    if not (1 <= bits <= 8):
        raise ConfigError(f"bit depth {bits} out of [1,8]")
    levels = 2 ** bits - 1
    x = np.asarray(x, dtype=np.float32)
    return (np.round(x * levels) / levels).astype(np.float32)


def _nn_resize(x, out_h, out_w):
    c, h, w = x.shape
    ri = (np.arange(out_h) * h // out_h).clip(0, h - 1)
    ci = (np.arange(out_w) * w // out_w).clip(0, w - 1)
    return x[:, ri[:, None], ci[None, :]]


def random_resize_pad(x, pad_range=8, rng=None):
    """Randomly shrink-or-grow (nearest neighbor) then zero-pad back.

    The canonical output size is input + pad_range; the resize target is
    drawn from [input, input + pad_range] and placed at a random offset.
    """
    if pad_range < 0:
        raise ConfigError("pad_range must be >= 0")
    rng = rng or np.random.default_rng()
    single = x.ndim == 3
    xb = x[None] if single else x
    n, c, h, w = xb.shape
    out = np.zeros((n, c, h + pad_range, w + pad_range), dtype=np.float32)
    for i in range(n):
        r = int(rng.integers(0, pad_range + 1))
        rh, rw = h + r, w + r
        resized = _nn_resize(xb[i], rh, rw)
        dy = int(rng.integers(0, h + pad_range - rh + 1))
        dx = int(rng.integers(0, w + pad_range - rw + 1))
        out[i, :, dy:dy + rh, dx:dx + rw] = resized
    return out[0] if single else out


# ---------------------------------------------------------------------------
# transform-wrapped classifier
# ---------------------------------------------------------------------------

class DefendedModel:
    """Classifier wrapper: every query passes through the input transform.

    Gradient access uses straight-through identity through the transform.
    R&P draws fresh randomness per query unless the spec pins a seed.
    """

    def __init__(self, model, spec: DefenseSpec):
        self.model = model
        self.spec = spec
        self.cfg = model.cfg
        if spec.defense not in ("jpeg", "bit_red", "rp", "identity"):
            raise ConfigError(f"{spec.defense!r} is not an input-transform defense")
        self._rp_rng = np.random.default_rng(spec.seed) if spec.seed is not None else \
            np.random.default_rng()

    def transform(self, x):
        d = self.spec.defense
        if d == "identity":
            return np.asarray(x, dtype=np.float32)
        if d == "jpeg":
            return jpeg_round_trip(x, self.spec.quality)
        if d == "bit_red":
            return bit_depth_reduce(x, self.spec.bits)
        # R&P: random resize keeping the canonical shape (grow range folded
        # into a same-size resize + random shift so downstream shapes hold)
        out = np.empty_like(np.asarray(x, dtype=np.float32))
        xb = x[None] if x.ndim == 3 else x
        ob = out[None] if out.ndim == 3 else out
        n, c, h, w = xb.shape
        for i in range(n):
            r = int(self._rp_rng.integers(max(h - self.spec.pad_range, 1), h + 1))
            resized = _nn_resize(xb[i], r, r)
            dy = int(self._rp_rng.integers(0, h - r + 1))
            dx = int(self._rp_rng.integers(0, w - r + 1))
            canvas = np.zeros((c, h, w), dtype=np.float32)
            canvas[:, dy:dy + r, dx:dx + r] = resized
            ob[i] = canvas
        return out

    def logits(self, x, batch_size=256):
        return self.model.logits(self.transform(np.asarray(x, np.float32)), batch_size)

    def predict(self, x, batch_size=256):
        return self.logits(x, batch_size).argmax(axis=1)

    def forward(self, g, xv, training=False, **kw):
        # straight-through: forward uses the transformed input; the recorded
        # identity hop routes the input gradient back to xv unchanged
        tv = ad.Var(self.transform(xv.data), requires_grad=True)
        if g is not None:
            g.record(tv, [(xv, lambda u: u)])
        return self.model.forward(g, tv, training=training, **kw)

    def loss_and_input_grad(self, x, y, loss="ce"):
        t = self.transform(np.asarray(x, np.float32))
        return self.model.loss_and_input_grad(t, y, loss)


def defended_model(model, spec: DefenseSpec) -> DefendedModel:
    return DefendedModel(model, spec)
