import numpy as np
import pytest

from binrobust import defenses as D
from binrobust import models as M
from binrobust.attacks.common import AttackSpec

from binrobust.attacks import run_attack


def test_bit_depth_oracle():
    # 2 bits -> levels {0, 1/3, 2/3, 1}: 0.7 rounds to 2/3
    out = D.bit_depth_reduce(np.array([0.7], dtype=np.float32), bits=2)
    assert out[0] == pytest.approx(2.0 / 3.0, abs=1e-6)


def test_bit_depth_levels():
    rng = np.random.default_rng(0)
    x = rng.random((3, 8, 8)).astype(np.float32)
    for bits in (1, 2, 4, 8):
        out = D.bit_depth_reduce(x, bits=bits)
        levels = np.round(out * (2 ** bits - 1))
        assert np.allclose(out, levels / (2 ** bits - 1), atol=1e-6)
        assert out.min() >= 0 and out.max() <= 1


def test_bit_depth_idempotent():
    x = np.random.default_rng(1).random((3, 4, 4)).astype(np.float32)
    once = D.bit_depth_reduce(x, bits=3)
    twice = D.bit_depth_reduce(once, bits=3)
    assert np.allclose(once, twice, atol=1e-6)


def test_jpeg_constant_image_near_exact():
    # a constant image has only DC energy and survives quantization
    x = np.full((3, 16, 16), 0.5, dtype=np.float32)
    out = D.jpeg_round_trip(x, quality=75)
    assert out.shape == x.shape
    assert np.abs(out - x).max() < 0.02


def test_jpeg_quality_monotone_distortion():
    rng = np.random.default_rng(2)
    x = np.clip(rng.normal(0.5, 0.2, (3, 32, 32)), 0, 1).astype(np.float32)
    err_low = np.abs(D.jpeg_round_trip(x, quality=10) - x).mean()
    err_high = np.abs(D.jpeg_round_trip(x, quality=95) - x).mean()
    assert err_high < err_low


def test_jpeg_output_in_box():
    rng = np.random.default_rng(3)
    x = rng.random((3, 24, 24)).astype(np.float32)
    out = D.jpeg_round_trip(x, quality=50)
    assert out.min() >= 0 and out.max() <= 1


def test_random_resize_pad_shape_and_seeding():
    x = np.random.default_rng(4).random((3, 16, 16)).astype(np.float32)
    a = D.random_resize_pad(x, pad_range=8, rng=np.random.default_rng(0))
    b = D.random_resize_pad(x, pad_range=8, rng=np.random.default_rng(0))
    c = D.random_resize_pad(x, pad_range=8, rng=np.random.default_rng(1))
    assert a.shape == (3, 24, 24)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)


def test_defense_spec_validation():
    with pytest.raises(D.ConfigError):
        D.DefenseSpec(defense="jpeg", quality=0)
    with pytest.raises(D.ConfigError):
        D.DefenseSpec(defense="bit_red", bits=9)
    with pytest.raises(D.ConfigError):
        D.DefenseSpec(defense="trades", beta=0)


def test_defended_model_predicts(tiny_bnn, synth_sets):
    _, test = synth_sets
    dm = D.defended_model(tiny_bnn, D.DefenseSpec(defense="bit_red", bits=4))
    preds = dm.predict(test.images)
    assert preds.shape == (len(test),)
    # 4-bit quantization of smooth blobs barely moves clean accuracy
    base = (tiny_bnn.predict(test.images) == test.labels).mean()
    defended = (preds == test.labels).mean()
    assert defended >= base - 0.15


def test_defended_model_straight_through_grad(tiny_bnn, synth_sets):
    _, test = synth_sets
    dm = D.defended_model(tiny_bnn, D.DefenseSpec(defense="bit_red", bits=4))
    x = test.images[:2].astype(np.float32)
    y = test.labels[:2]
    loss_d, grad_d = dm.loss_and_input_grad(x, y)
    # straight-through: gradient equals the bare model's gradient at the
    # transformed point
    xt = np.stack([dm.transform(x[i]) for i in range(2)])
    loss_b, grad_b = tiny_bnn.loss_and_input_grad(xt, y)
    assert np.allclose(grad_d, grad_b, atol=1e-6)
    assert loss_d == pytest.approx(loss_b, abs=1e-6)


def test_identity_defense_is_noop(tiny_bnn, synth_sets):
    _, test = synth_sets
    dm = D.defended_model(tiny_bnn, D.DefenseSpec(defense="identity"))
    assert np.array_equal(dm.predict(test.images),
                          tiny_bnn.predict(test.images))


def test_attack_runs_through_defended_model(tiny_bnn, synth_sets):
    _, test = synth_sets
    dm = D.defended_model(tiny_bnn, D.DefenseSpec(defense="jpeg", quality=75))
    x, y = test.images[0].astype(np.float32), int(test.labels[0])
    res = run_attack(dm, x, y, AttackSpec(method="pgd", epsilon=0.06,
                                          steps=5))
    assert res.adv.min() >= -1e-6 and res.adv.max() <= 1 + 1e-6


def test_pgd_at_training_runs(synth_sets):
    train, test = synth_sets
    cfg = M.ModelConfig(architecture="smallcnn", width=0.25, num_classes=3,
                        input_hw=(8, 8), scheme="bnn")
    model = M.build_model(cfg, init_seed=0)
    loss_fn = D.pgd_at_loss(D.DefenseSpec(defense="pgd_at", epsilon=0.06,
                                          steps=3))
    history = M.train(model, train, M.TrainConfig(epochs=2, lr=0.01,
                                                  batch_size=32, seed=1),
                      loss_fn=loss_fn)
    assert np.isfinite(history["train_loss"][-1])


def test_trades_training_runs(synth_sets):
    train, _ = synth_sets
    cfg = M.ModelConfig(architecture="smallcnn", width=0.25, num_classes=3,
                        input_hw=(8, 8), scheme="bnn")
    model = M.build_model(cfg, init_seed=0)
    loss_fn = D.trades_loss(D.DefenseSpec(defense="trades", epsilon=0.06,
                                          steps=3, beta=6.0))
    history = M.train(model, train, M.TrainConfig(epochs=2, lr=0.01,
                                                  batch_size=32, seed=1),
                      loss_fn=loss_fn)
    assert np.isfinite(history["train_loss"][-1])


def test_trades_beta_zero_limit():
    # beta must be positive by contract
    with pytest.raises(D.ConfigError):
        D.DefenseSpec(defense="trades", beta=-1.0)
