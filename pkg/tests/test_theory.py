import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from segqual.datagen import DataConfig, generate_tuples
from segqual.errors import AmbiguityError
from segqual.metrics import dice
from segqual.theory import (EvaluatorOracle, check_absolute_accuracy, check_beta_relative_accuracy,
                            core_set_reconstruct, random_hidden_mask, reconstruction_trials,
                            reduction_demo_A_to_B)


def test_reconstruct_full_4x4():
    hidden = np.ones((4, 4), bool)
    oracle = EvaluatorOracle.exact_dice(hidden)
    mask, calls = core_set_reconstruct(oracle, None, 4, 4)
    assert np.array_equal(mask, hidden)
    assert calls == 32 == oracle.calls


def test_reconstruct_random_16x16():
    rng = np.random.default_rng(0)
    for _ in range(100):
        hidden = random_hidden_mask(rng, 16)
        mask, calls = core_set_reconstruct(EvaluatorOracle.exact_dice(hidden), None, 16, 16)
        assert calls == 512
        assert np.array_equal(mask, hidden)


def test_reconstruct_every_nonempty_3x3():
    count = 0
    for bits in itertools.product([0, 1], repeat=9):
        if not any(bits):
            continue
        hidden = np.array(bits, bool).reshape(3, 3)
        mask, calls = core_set_reconstruct(EvaluatorOracle.exact_dice(hidden), None, 3, 3)
        assert calls == 18 and np.array_equal(mask, hidden)
        count += 1
    assert count == 511


def test_probe_pairs_strictly_separate():
    # clearing one pixel of the all-ones map lowers dice iff the pixel is in the truth
    rng = np.random.default_rng(3)
    for _ in range(50):
        y = random_hidden_mask(rng, 6)
        ones = np.ones((6, 6), bool)
        for r, c in zip(*np.nonzero(np.ones((6, 6)))):
            off = ones.copy()
            off[r, c] = False
            if y[r, c]:
                assert dice(ones, y) > dice(off, y)
            else:
                assert dice(ones, y) < dice(off, y)


def test_reconstruct_ambiguous_oracle():
    with pytest.raises(AmbiguityError):
        core_set_reconstruct(EvaluatorOracle(lambda p, i: 0.5), None, 2, 2)
    with pytest.raises(AmbiguityError):
        core_set_reconstruct(EvaluatorOracle.exact_dice(np.zeros((2, 2))), None, 2, 2)


def test_oracle_counts_calls():
    o = EvaluatorOracle(lambda p, i: 0.0)
    for _ in range(7):
        o(None, None)
    assert o.calls == 7


def test_reconstruction_trials_report():
    rep = reconstruction_trials(size=16, trials=20)
    assert rep["exact_recoveries"] == 20 and rep["passed"]
    assert rep["calls_per_trial"] == [512] == [rep["expected_calls"]]
    noisy = reconstruction_trials(size=16, trials=20, noise=0.05)
    assert noisy["recovery_rate"] < 1.0
    assert not noisy["passed"]


def test_relative_accuracy_examples():
    assert check_beta_relative_accuracy([0.1, 0.5, 0.9], [0.2, 0.4, 0.8]).passed
    res = check_beta_relative_accuracy([0.1, 0.5, 0.3], [0.2, 0.4, 0.8])
    assert not res.passed and res.violations == 1 and res.pairs_checked == 3
    # a swap among nearly equal truths is tolerated at beta above their gap
    assert not check_beta_relative_accuracy([0.5, 0.4], [0.40, 0.42]).passed
    assert check_beta_relative_accuracy([0.5, 0.4], [0.40, 0.42], beta=0.05).passed
    # equal true scores impose no constraint
    assert check_beta_relative_accuracy([0.9, 0.1], [0.5, 0.5]).passed


def test_relative_accuracy_ties_in_evaluator_violate():
    assert not check_beta_relative_accuracy([0.5, 0.5], [0.1, 0.9]).passed


@settings(max_examples=50)
@given(st.lists(st.floats(0, 1, allow_nan=False), min_size=2, max_size=30), st.integers(0, 2 ** 31))
def test_beta_monotone(true, seed):
    tau = np.random.default_rng(seed).random(len(true))
    counts = [check_beta_relative_accuracy(tau, true, b).violations for b in (0.0, 0.1, 0.3, 0.6)]
    assert counts == sorted(counts, reverse=True)
    warped = check_beta_relative_accuracy(np.exp(3 * tau), true, 0.1)
    assert warped.violations == counts[1]


def test_relative_accuracy_cap_is_seeded():
    rng = np.random.default_rng(0)
    tau, pi = rng.random(2500), rng.random(2500)
    a = check_beta_relative_accuracy(tau, pi, cap=2000, seed=4)
    b = check_beta_relative_accuracy(tau, pi, cap=2000, seed=4)
    assert a.capped and a.n_used == 2000 and a == b
    assert check_beta_relative_accuracy(pi, pi).passed


@pytest.fixture(scope="module")
def tuples():
    return generate_tuples(DataConfig(n_images=5, seed=1, image_size=48))


def test_absolute_accuracy(tuples):
    truth = {id(t.image): t.gt_mask for t in tuples}
    exact = check_absolute_accuracy(lambda p, img: dice(p, truth[id(img)]), tuples)
    assert exact.passed and exact.deviation == 0.0
    off = check_absolute_accuracy(lambda p, img: min(1.0, dice(p, truth[id(img)]) + 0.1), tuples,
                                  tol=0.05)
    assert not off.passed
    assert 0.0 < off.deviation <= 0.1 + 1e-12


def test_reduction_demo(tuples):
    by_prompt = {(id(t.image), t.prompt): t.gt_mask for t in tuples}
    scores = reduction_demo_A_to_B(lambda img, box: by_prompt[(id(img), box)], tuples)
    assert scores == [t.q_dice for t in tuples]
