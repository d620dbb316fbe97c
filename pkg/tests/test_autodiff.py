import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from binrobust import autodiff as ad


def check_op(build, variables, dtype, tol):
    report = ad.fd_gradcheck(build, variables, tolerance=tol, dtype=dtype)
    assert report["pass"], report


def _cases():
    rng = np.random.default_rng(0)

    def vary(shape, scale=1.0):
        return ad.Var(rng.normal(0, scale, shape), requires_grad=True)

    x = vary((2, 5))
    y = vary((2, 5))
    mat_a = vary((3, 4))
    mat_b = vary((4, 2))
    w = vary((2, 5))
    b = vary((2,))
    img = vary((2, 3, 6, 6))
    kern = vary((4, 3, 3, 3), 0.3)
    gamma = ad.Var(np.abs(rng.normal(1, 0.1, 3)) + 0.5, requires_grad=True)
    beta = vary((3,))
    slope = ad.Var(np.full(3, 0.25), requires_grad=True)
    labels = np.array([1, 0])
    img_labels = np.array([2, 0])

    # kink-safe input for hardtanh: keep every coordinate >= 0.1 from +-1
    ht_vals = rng.uniform(-0.85, 0.85, (2, 5))
    ht_vals[0, :2] = [1.4, -1.6]
    ht = ad.Var(ht_vals, requires_grad=True)

    def total(g, v):
        # randomly weighted sum of squares: nondegenerate through any op,
        # including ones (like batchnorm) with unweighted-sum invariants
        sq = ad.mul(g, v, v)
        flat = ad.reshape(g, sq, (1, -1))
        wts = ad.Var(np.random.default_rng(7).uniform(
            0.5, 1.5, (flat.data.shape[1], 1)))
        return ad.reshape(g, ad.matmul(g, flat, wts), ())

    return {
        "add": ([x, y], lambda g: total(g, ad.add(g, ad.mul(g, x, x),
                                                  ad.mul(g, x, y)))),
        "hardtanh": ([ht], lambda g: total(g, ad.hardtanh(g, ht))),
        "matmul": ([mat_a, mat_b],
                   lambda g: total(g, ad.matmul(g, mat_a, mat_b))),
        "linear": ([x, w, b], lambda g: total(g, ad.linear(g, x, w, b))),
        "conv2d": ([img, kern],
                   lambda g: total(g, ad.conv2d(g, img, kern, stride=1,
                                                pad=1))),
        "batchnorm": ([img, gamma, beta],
                      lambda g: total(g, ad.batchnorm2d(
                          g, img, gamma, beta, np.zeros(3), np.ones(3),
                          training=True))),
        "avg_pool": ([img], lambda g: total(g, ad.avg_pool2d(g, img, k=2))),
        "gap": ([img], lambda g: total(g, ad.global_avg_pool(g, img))),
        "cross_entropy": ([x], lambda g: ad.cross_entropy(g, x, labels)),
        "kl": ([x, y], lambda g: ad.kl_div_logits(g, x, y)),
    }


def _prelu_case():
    rng = np.random.default_rng(3)
    vals = rng.uniform(0.1, 1.0, (2, 3, 4, 4))
    vals *= np.where(rng.random(vals.shape) < 0.5, -1.0, 1.0)  # away from 0
    x = ad.Var(vals, requires_grad=True)
    slope = ad.Var(np.full(3, 0.25), requires_grad=True)

    def build(g):
        g = g or ad.Graph()
        out = ad.prelu(g, x, slope)
        sq = ad.mul(g, out, out)
        flat = ad.reshape(g, sq, (1, -1))
        ones = ad.Var(np.ones((flat.data.shape[1], 1)))
        return ad.reshape(g, ad.matmul(g, flat, ones), ())
    return [x, slope], build


OPS = {k: v for k, v in _cases().items() if k != "prelu"}
OPS["prelu"] = _prelu_case()


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradcheck_float32(name):
    variables, build = OPS[name]
    def wrap(g):
        return build(g or ad.Graph())
    check_op(wrap, variables, np.float32, 1e-3)


@pytest.mark.parametrize("name", sorted(OPS))
def test_gradcheck_float64(name):
    variables, build = OPS[name]
    def wrap(g):
        return build(g or ad.Graph())
    check_op(wrap, variables, np.float64, 1e-6)


def test_cross_entropy_two_way_tie_is_ln2():
    g = ad.Graph()
    logits = ad.Var(np.zeros((1, 2)), requires_grad=True)
    loss = ad.cross_entropy(g, logits, np.array([0]))
    assert math.isclose(float(loss.data), math.log(2), rel_tol=1e-7)


def test_cross_entropy_confident_margin():
    # logits (20, 0) for the true class: loss = -log sigmoid(20) ~= 2.06e-9
    g = ad.Graph()
    logits = ad.Var(np.array([[20.0, 0.0]]))
    loss = ad.cross_entropy(g, logits, np.array([0]))
    expected = -math.log(1.0 / (1.0 + math.exp(-20.0)))
    assert math.isclose(float(loss.data), expected, rel_tol=1e-6)
    assert float(loss.data) < 1e-8


def test_kl_zero_for_identical_logits():
    g = ad.Graph()
    z = np.random.default_rng(0).normal(0, 3, (4, 7))
    out = ad.kl_div_logits(g, ad.Var(z.copy()), ad.Var(z.copy()))
    assert abs(float(out.data)) < 1e-12


def test_kl_nonnegative():
    rng = np.random.default_rng(1)
    for _ in range(20):
        g = ad.Graph()
        p = ad.Var(rng.normal(0, 2, (3, 5)))
        q = ad.Var(rng.normal(0, 2, (3, 5)))
        assert float(ad.kl_div_logits(g, p, q).data) >= -1e-12


def test_graph_single_use():
    g = ad.Graph()
    x = ad.Var(np.ones((2, 2)), requires_grad=True)
    y = ad.mul(g, x, x)
    g.backward(y)
    with pytest.raises(ad.GraphConsumedError):
        g.backward(y)


def test_softmax_rows_sum_to_one():
    z = np.random.default_rng(2).normal(0, 50, (6, 9))
    s = ad.softmax(z)
    assert np.allclose(s.sum(axis=1), 1.0, atol=1e-6)
    assert np.all(s >= 0)


@given(st.lists(st.floats(-100, 100), min_size=2, max_size=8))
@settings(max_examples=50, deadline=None)
def test_log_softmax_stable(vals):
    z = np.array([vals])
    ls = ad.log_softmax(z)
    assert np.all(np.isfinite(ls))
    assert np.all(ls <= 1e-9)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=20, deadline=None)
def test_backward_linear_in_seed(seed):
    # d(c*f)/dx == c * df/dx for scalar c
    rng = np.random.default_rng(seed)
    data = rng.normal(0, 1, (3, 3)).astype(np.float64)
    c = float(rng.uniform(0.5, 3.0))
    grads = []
    for scale in (1.0, c):
        g = ad.Graph(dtype=np.float64)
        x = ad.Var(data.copy(), requires_grad=True)
        y = ad.mul(g, x, x)
        g.backward(y, seed=np.full_like(data, scale))
        grads.append(x.grad.copy())
    assert np.allclose(grads[1], c * grads[0], rtol=1e-12)


def test_unbroadcast_reduces_to_shape():
    grad = np.ones((4, 3, 5))
    out = ad._unbroadcast(grad, (3, 1))
    assert out.shape == (3, 1)
    assert np.allclose(out, 20.0)
