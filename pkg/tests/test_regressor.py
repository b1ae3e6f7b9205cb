import struct

import numpy as np
import pytest

from segqual import regressor as R
from segqual.datagen import DataConfig, generate_tuples
from segqual.errors import (InvalidInputError, ModelChecksumError, ModelFormatError,
                            ModelVersionError, TrainingDivergedError)

SMALL = R.Architecture(widths=(4, 8, 8), heads=1, input_side=16)


def small_state(heads=1, seed=0):
    return R.init(R.Architecture(widths=(4, 8, 8), heads=heads, input_side=16), seed)


def batch(n, seed=0, side=16):
    return np.random.default_rng(seed).random((n, 3, side, side))


@pytest.fixture(scope="module")
def tiny_tuples():
    return generate_tuples(DataConfig(n_images=12, seed=4, image_size=48))


def test_param_count_matches_hand_count():
    conv = (8 * 3 * 9 + 8) + (16 * 8 * 9 + 16) + (32 * 16 * 9 + 32) + (64 * 32 * 9 + 64)
    assert conv == 24528
    for h in (1, 2):
        assert R.param_count(R.Architecture(heads=h)) == conv + 65 * h
    assert R.param_count(SMALL) == (4 * 27 + 4) + (8 * 36 + 8) + (8 * 72 + 8) + 9


def test_init_deterministic_with_zero_biases():
    a, b = R.init(SMALL, 5), R.init(SMALL, 5)
    assert np.array_equal(a.theta, b.theta)
    assert not np.array_equal(a.theta, R.init(SMALL, 6).theta)
    views = a.layout.views(a.theta)
    for name, arr in views.items():
        if name.endswith("bias"):
            assert not arr.any()
    bound = np.sqrt(6 / 27)
    assert np.abs(views["conv0.weight"]).max() <= bound
    assert np.array_equal(a.theta, a.theta.astype(np.float32).astype(np.float64))


def test_architecture_validation():
    with pytest.raises(InvalidInputError):
        R.init(R.Architecture(heads=3))
    with pytest.raises(InvalidInputError):
        R.init(R.Architecture(widths=(4, 4, 4, 4, 4), input_side=16))
    with pytest.raises(InvalidInputError):
        R.init(R.Architecture(backbone="vit"))


def test_forward_range_shape_and_determinism():
    s = small_state(heads=2)
    x = batch(5)
    out = R.forward(s, x)
    assert out.shape == (5, 2)
    assert np.all((out > 0) & (out < 1))
    assert np.array_equal(out, R.forward(s, x))
    assert R.forward(s, x[0]).shape == (2,)
    # BLAS may sum in a different order for a different batch size
    np.testing.assert_allclose(R.forward(s, x[0]), out[0], rtol=0, atol=1e-15)
    with pytest.raises(InvalidInputError):
        R.forward(s, batch(1, side=8))


def test_zero_parameters_predict_half():
    s = small_state()
    s.theta[:] = 0.0
    assert np.all(R.forward(s, batch(3)) == 0.5)


def test_forward_chunking_invariant():
    s = small_state()
    x = batch(7)
    np.testing.assert_allclose(R.forward(s, x, chunk=2), R.forward(s, x, chunk=64), rtol=0, atol=1e-14)


def test_loss_examples():
    assert R.loss([0.8], [0.9]) == pytest.approx(0.01)
    assert R.loss([0.8, 0.3], [0.9, 0.5], (1.0, 0.5)) == pytest.approx(0.01 + 0.5 * 0.04)
    assert R.loss([0.5, 0.5], [0.5, 0.5]) == 0.0
    with pytest.raises(InvalidInputError):
        R.loss([0.1, 0.2], [0.1])


def test_grad_zero_at_perfect_prediction():
    s = small_state()
    s.theta[:] = 0.0
    value, g = R.grad(s, batch(4), np.full((4, 1), 0.5))
    assert value == 0.0
    assert not g.any()


def test_head_bias_gradient_closed_form():
    s = small_state(heads=2)
    x = batch(6, seed=1)
    t = np.random.default_rng(2).random((6, 2))
    w = (1.0, 0.5)
    p = R.forward(s, x)
    expected = (2 * np.asarray(w) * (p - t) * p * (1 - p)).mean(axis=0)
    _, g = R.grad(s, x, t, w)
    a, b, _ = s.layout.offsets["head.bias"]
    np.testing.assert_allclose(g[a:b], expected, rtol=1e-12, atol=1e-15)


def test_grad_mean_over_duplicated_batch():
    s = small_state()
    x = batch(3)
    t = np.array([[0.2], [0.9], [0.4]])
    l1, g1 = R.grad(s, x, t)
    l2, g2 = R.grad(s, np.concatenate([x, x]), np.concatenate([t, t]))
    assert l2 == pytest.approx(l1, rel=1e-12)
    np.testing.assert_allclose(g2, g1, rtol=1e-10, atol=1e-15)


def test_grad_batch_permutation_invariant():
    s = small_state(heads=2)
    x = batch(6)
    t = np.random.default_rng(9).random((6, 2))
    perm = np.array([3, 0, 5, 1, 4, 2])
    l1, g1 = R.grad(s, x, t)
    l2, g2 = R.grad(s, x[perm], t[perm])
    assert l2 == pytest.approx(l1, rel=1e-12)
    np.testing.assert_allclose(g2, g1, rtol=1e-9, atol=1e-14)


def test_grad_chunking_invariant():
    s = small_state()
    x = batch(5)
    t = np.random.default_rng(1).random((5, 1))
    _, g1 = R.grad(s, x, t, chunk=2)
    _, g2 = R.grad(s, x, t, chunk=16)
    np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-15)


def test_gradient_check_matches_finite_differences():
    for heads in (1, 2):
        arch = R.Architecture(widths=(4, 8, 8), heads=heads, input_side=16)
        check = R.gradient_check(arch, seed=heads)
        assert check.max_relative_error < 1e-4
        assert check.kinked <= 0.01 * R.param_count(arch)
        assert check.compared + check.kinked == R.param_count(arch)


def test_gradient_check_odd_spatial_size():
    # floor pooling drops the last row and column; backprop must agree
    check = R.gradient_check(R.Architecture(widths=(2, 3), heads=1, input_side=7), seed=3)
    assert check.max_relative_error < 1e-4


def test_gradient_check_excludes_probes_that_cross_a_kink():
    # at this seed a pre-activation sits within 1e-5 of zero
    arch = R.Architecture(widths=(4, 8, 8), heads=2, input_side=16)
    check = R.gradient_check(arch, seed=2024)
    assert 0 < check.kinked <= 5
    assert check.max_relative_error < 1e-4


def test_adamw_first_step_is_sign_step():
    s = small_state()
    cfg = R.TrainConfig(lr=0.1, weight_decay=0.0)
    g = np.linspace(-3, 3, s.theta.size)
    new = R.adamw_step(s, g, cfg)
    np.testing.assert_allclose(new.theta - s.theta, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12, atol=1e-15)
    assert new.step == 1
    assert s.step == 0


def test_adamw_zero_betas_sign_step_every_time():
    s = small_state()
    s.theta[:] = 1.0
    cfg = R.TrainConfig(lr=0.01, weight_decay=0.0)
    g = np.full(s.theta.size, 4.0)
    for _ in range(3):
        s = R.adamw_step(s, g, cfg, betas=(0.0, 0.0))
    np.testing.assert_allclose(s.theta, 1.0 - 3 * 0.01 * 4.0 / (4.0 + 1e-8), rtol=1e-12)


def test_adamw_decoupled_weight_decay():
    s = small_state()
    s.theta[:] = 2.0
    cfg = R.TrainConfig(lr=0.1, weight_decay=0.5)
    new = R.adamw_step(s, np.zeros(s.theta.size), cfg)
    np.testing.assert_allclose(new.theta, 2.0 * (1 - 0.05), rtol=1e-14)


def test_adamw_second_step_bias_correction():
    s = small_state()
    cfg = R.TrainConfig(lr=1.0, weight_decay=0.0)
    g1 = np.full(s.theta.size, 1.0)
    g2 = np.full(s.theta.size, 3.0)
    s2 = R.adamw_step(R.adamw_step(s, g1, cfg), g2, cfg)
    m = (0.9 * 0.1 * 1 + 0.1 * 3) / (1 - 0.9 ** 2)
    v = (0.999 * 0.001 * 1 + 0.001 * 9) / (1 - 0.999 ** 2)
    expected = s.theta - 1.0 / (1.0 + 1e-8) - m / (np.sqrt(v) + 1e-8)
    np.testing.assert_allclose(s2.theta, expected, rtol=1e-12)


def test_small_step_decreases_loss():
    s = small_state()
    x = batch(4, seed=3)
    t = np.array([[0.9], [0.1], [0.8], [0.2]])
    before, g = R.grad(s, x, t)
    after, _ = R.grad(R.adamw_step(s, g, R.TrainConfig(lr=1e-6, weight_decay=0.0)), x, t)
    assert after < before


def test_nonfinite_gradient_raises():
    s = small_state()
    g = np.zeros(s.theta.size)
    g[3] = np.nan
    with pytest.raises(TrainingDivergedError):
        R.adamw_step(s, g, R.TrainConfig())
    g[3] = np.inf
    with pytest.raises(TrainingDivergedError):
        R.adamw_step(s, g, R.TrainConfig())


def tiny_config(**kw):
    base = dict(lr=1e-2, batch_size=8, epochs=10, widths=(4, 8), input_side=16, seed=1)
    base.update(kw)
    return R.TrainConfig(**base)


def test_train_deterministic_and_loss_decreases(tiny_tuples):
    s1, h1 = R.train(tiny_tuples, tiny_config(), val=tiny_tuples[:9])
    s2, h2 = R.train(tiny_tuples, tiny_config(), val=tiny_tuples[:9])
    assert np.array_equal(s1.theta, s2.theta)
    assert h1 == h2
    assert len(h1) == 10 and "val_spearman" in h1[0]
    assert h1[0]["train_loss"] > h1[-1]["train_loss"]


def test_train_fits_constant_target(tiny_tuples):
    fixed = [t.__class__(**{**t.__dict__, "q_dice": 0.7}) for t in tiny_tuples]
    state, _ = R.train(fixed, tiny_config(epochs=60, weight_decay=0.0))
    pred = R.predict_tuples(state, fixed)
    assert np.all(np.abs(pred - 0.7) < 0.02)


def test_train_two_heads(tiny_tuples):
    state, hist = R.train(tiny_tuples, tiny_config(heads=2, epochs=2))
    assert R.predict_tuples(state, tiny_tuples).shape == (len(tiny_tuples), 2)
    t = tiny_tuples[0]
    np.testing.assert_array_equal(R.predict(state, t.image, t.pred_mask, t.prompt),
                                  R.predict_tuples(state, [t])[0])


def test_train_config_validation(tiny_tuples):
    with pytest.raises(InvalidInputError):
        R.train(tiny_tuples, tiny_config(lr=0.0))
    with pytest.raises(InvalidInputError):
        R.train([], tiny_config())


def test_save_load_bit_identical(tmp_path, tiny_tuples):
    state, _ = R.train(tiny_tuples, tiny_config(epochs=2, heads=2))
    R.save(state, tmp_path / "m.bin")
    back = R.load(tmp_path / "m.bin")
    assert back.arch == state.arch and back.step == state.step
    assert np.array_equal(back.theta, state.theta)
    x = R.prepare_inputs(tiny_tuples, 16)
    assert np.array_equal(R.forward(back, x), R.forward(state, x))
    R.save(back, tmp_path / "m2.bin")
    assert (tmp_path / "m.bin").read_bytes() == (tmp_path / "m2.bin").read_bytes()


def test_load_detects_corruption(tmp_path):
    R.save(small_state(), tmp_path / "m.bin")
    raw = (tmp_path / "m.bin").read_bytes()
    (tmp_path / "cut.bin").write_bytes(raw[:-10])
    with pytest.raises(ModelChecksumError):
        R.load(tmp_path / "cut.bin")
    flipped = bytearray(raw)
    flipped[-20] ^= 0x01
    (tmp_path / "flip.bin").write_bytes(bytes(flipped))
    with pytest.raises(ModelChecksumError):
        R.load(tmp_path / "flip.bin")
    bumped = raw[:8] + struct.pack("<I", 2) + raw[12:]
    (tmp_path / "v2.bin").write_bytes(bumped)
    with pytest.raises(ModelVersionError):
        R.load(tmp_path / "v2.bin")
    (tmp_path / "junk.bin").write_bytes(b"hello world, not a model")
    with pytest.raises(ModelFormatError):
        R.load(tmp_path / "junk.bin")
