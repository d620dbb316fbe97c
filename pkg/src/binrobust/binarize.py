"""The seven binarization schemes plus the FP32 passthrough.

Each scheme contributes three things, centralized here so the defaults can
be corrected in one place without touching call sites:

* how weights are scaled before/after the sign (``weight_scale``),
* how activations are shifted before the sign (ReActNet's RSign),
* the surrogate backward rule used at sign nodes.

Forward semantics: o = (sign(a) conv sign(w)) * alpha, with alpha a
pre-computed (detached) magnitude scale except for XNOR++ where a learnable
per-output-channel scale multiplies the output instead.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import autodiff as ad


class ConfigError(ValueError):
    """Scheme/state/shape configuration is inconsistent."""


class SchemeId(str, Enum):
    FP32 = "fp32"
    BNN = "bnn"
    XNOR = "xnor"
    DOREFA = "dorefa"
    BIREAL = "bireal"
    XNORPP = "xnorpp"
    REACTNET = "reactnet"
    RECU = "recu"


BINARY_SCHEMES = tuple(s for s in SchemeId if s is not SchemeId.FP32)

# schemes whose activation surrogate is the piecewise-polynomial ApproxSign
_POLY_ACT = {SchemeId.BIREAL, SchemeId.REACTNET}


@dataclass
class SchemeState:
    """Learnable/configured per-layer state for a binarized layer.

    gamma: learnable per-output-channel scale (XNOR++ only).
    beta:  learnable per-input-channel RSign shift (ReActNet only).
    tau_quantile: ReCU clamp bound as a quantile of |w|, recomputed each step.
    """
    scheme: SchemeId
    gamma: ad.Var = None
    beta: ad.Var = None
    tau_quantile: float = 0.99

    @staticmethod
    def create(scheme: SchemeId, out_channels: int, in_channels: int,
               tau_quantile: float = 0.99) -> "SchemeState":
        st = SchemeState(scheme=scheme, tau_quantile=tau_quantile)
        if scheme is SchemeId.XNORPP:
            st.gamma = ad.Var(np.ones(out_channels, dtype=np.float32), requires_grad=True)
        if scheme is SchemeId.REACTNET:
            st.beta = ad.Var(np.zeros(in_channels, dtype=np.float32), requires_grad=True)
        return st


# ---------------------------------------------------------------------------
# forwards
# ---------------------------------------------------------------------------

def sign_forward(x):
    """Elementwise sign with the tie-break sign(0) = +1."""
    x = np.asarray(x)
    return np.where(x >= 0, 1.0, -1.0).astype(x.dtype if x.dtype.kind == "f" else np.float32)


def weight_scale(scheme: SchemeId, w):
    """Magnitude scale restoring |w| after binarization.

    XNOR/ReCU: per-output-channel mean|w|; DoReFa: layer scalar mean|w|;
    BNN/Bi-Real/ReActNet: 1; XNOR++: the learnable gamma lives in SchemeState
    and this returns 1.
    """
    w = np.asarray(w)
    if w.size == 0:
        raise ad.ShapeError("empty weight tensor")
    if scheme in (SchemeId.XNOR, SchemeId.RECU):
        return np.abs(w).reshape(w.shape[0], -1).mean(axis=1, dtype=np.float64).astype(w.dtype)
    if scheme is SchemeId.DOREFA:
        return w.dtype.type(np.abs(w).mean(dtype=np.float64))
    if scheme in (SchemeId.BNN, SchemeId.BIREAL, SchemeId.REACTNET, SchemeId.XNORPP):
        return w.dtype.type(1.0)
    raise ConfigError(f"no weight scale for scheme {scheme}")


def recu_tau(w, quantile):
    """ReCU clamp bound: the given quantile of |w| (at least a tiny floor)."""
    return max(float(np.quantile(np.abs(w), quantile)), 1e-8)


def binarize_weights(g, state: SchemeState, w: ad.Var):
    """Returns (wb: Var with entries in {-1,+1}, alpha: detached scale array)."""
    scheme = state.scheme
    if scheme is SchemeId.FP32:
        raise ConfigError("FP32 layers do not binarize")
    if scheme is SchemeId.RECU:
        tau = recu_tau(w.data, state.tau_quantile)
        wc = ad.clamp_pass_inside(g, w, tau)
        alpha = weight_scale(scheme, wc.data)
        wb = ad.sign_surrogate(g, wc, ste_clip_backward)
    else:
        alpha = weight_scale(scheme, w.data)
        wb = ad.sign_surrogate(g, w, ste_clip_backward)
    return wb, alpha


def binarize_activations(g, state: SchemeState, a: ad.Var):
    """Scheme-specific activation binarization (RSign for ReActNet)."""
    scheme = state.scheme
    if scheme is SchemeId.FP32:
        raise ConfigError("FP32 layers do not binarize")
    if scheme is SchemeId.REACTNET:
        shift = ad.mul(g, state.beta, ad.Var(-np.ones(1, dtype=np.float32)))
        a = ad.add(g, a, ad.reshape(g, shift, (1, -1) + (1,) * (a.data.ndim - 2)))
    rule = poly_backward if scheme in _POLY_ACT else ste_clip_backward
    return ad.sign_surrogate(g, a, rule)


def binarize_layer_forward(scheme: SchemeId, state: SchemeState, w, a):
    """Plain-array reference of Eq-style layer binarization (no graph).

    Returns (wb, ab, effective_scale).  Used by the bitkernel equivalence
    tests and the packed execution path.
    """
    if scheme is SchemeId.FP32:
        raise ConfigError("FP32 layers do not binarize")
    w = np.asarray(w, dtype=np.float32)
    a = np.asarray(a, dtype=np.float32)
    if scheme is SchemeId.RECU:
        tau = recu_tau(w, state.tau_quantile)
        w = np.clip(w, -tau, tau)
    alpha = weight_scale(scheme, w)
    if scheme is SchemeId.XNORPP:
        if state.gamma is None or state.gamma.data.shape[0] != w.shape[0]:
            raise ConfigError("XNOR++ state gamma missing or mis-shaped")
        alpha = state.gamma.data.copy()
    if scheme is SchemeId.REACTNET:
        chan_axis = 1 if a.ndim >= 3 else (0 if a.ndim == 1 else 1)
        if state.beta is None or state.beta.data.shape[0] != a.shape[chan_axis]:
            raise ConfigError("ReActNet state beta missing or mis-shaped")
        shape = [1] * a.ndim
        shape[chan_axis] = -1
        a = a - state.beta.data.reshape(shape)
    return sign_forward(w), sign_forward(a), alpha


# ---------------------------------------------------------------------------
# surrogate backward rules
# ---------------------------------------------------------------------------

def ste_clip_backward(x, upstream):
    """Straight-through estimator with clipping: d/dx = 1 on |x| <= 1."""
    return upstream * (np.abs(x) <= 1.0)


def poly_backward(x, upstream):
    """ApproxSign derivative: 2+2x on [-1,0), 2-2x on [0,1), 0 outside."""
    d = np.where(x < 0, 2.0 + 2.0 * x, 2.0 - 2.0 * x)
    d = np.where(np.abs(x) < 1.0, d, 0.0)
    return upstream * d.astype(upstream.dtype)


def surrogate_backward(scheme: SchemeId, x, upstream, kind="activation"):
    """Dispatch the documented surrogate derivative for a scheme.

    ``kind`` is "activation" or "weight"; weights always use STE-with-clip
    (ReCU's clamp masking is applied at the clamp node, before the sign).
    """
    x = np.asarray(x)
    upstream = np.asarray(upstream)
    if scheme is SchemeId.FP32:
        raise ConfigError("FP32 has no sign nodes")
    if scheme not in SchemeId.__members__.values():
        raise ConfigError(f"unknown scheme {scheme!r}")
    if kind == "activation" and scheme in _POLY_ACT:
        return poly_backward(x, upstream)
    return ste_clip_backward(x, upstream)
