"""Executable forms of the feasibility arguments for quality evaluators.

* ``core_set_reconstruct`` recovers a hidden ground-truth mask from 2*w*h
  calls to an evaluator that answers dice queries exactly.
* ``check_absolute_accuracy`` and ``check_beta_relative_accuracy`` test an
  evaluator against the accuracy notions used to reason about it.
* ``reduction_demo_A_to_B`` scores masks with one call to a perfect segmenter
  plus one dice computation per instance.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import AmbiguityError, InvalidInputError
from .metrics import as_mask, dice

PAIR_CAP = 2000


class EvaluatorOracle:
    """Wraps a scoring function ``fn(pred_mask, image) -> float`` and counts calls."""

    def __init__(self, fn: Callable[[np.ndarray, object], float]):
        self._fn = fn
        self._lock = threading.Lock()
        self._calls = 0

    @property
    def calls(self) -> int:
        return self._calls

    def __call__(self, pred_mask, image) -> float:
        with self._lock:
            self._calls += 1
        return float(self._fn(pred_mask, image))

    @classmethod
    def exact_dice(cls, hidden_gt) -> "EvaluatorOracle":
        y = as_mask(hidden_gt)
        return cls(lambda pred, _image: dice(pred, y))


def core_set_reconstruct(oracle: EvaluatorOracle, image, w: int, h: int):
    """Recover the hidden mask pixel by pixel from paired evaluator queries.

    Each pixel is probed with two maps that differ only there: the all-ones
    map and the same map with that pixel cleared. For exact dice against a
    nonempty ground truth the variant that agrees with the truth at the pixel
    always scores strictly higher.

    Returns:
        (mask, calls) where calls is the number of oracle invocations made
        here, always 2 * w * h.

    Raises:
        AmbiguityError: the oracle scored a probe pair equally.
    """
    if w < 1 or h < 1:
        raise InvalidInputError(f"invalid canvas {w}x{h}")
    start = oracle.calls
    base = np.ones((h, w), dtype=bool)
    out = np.zeros((h, w), dtype=bool)
    for r in range(h):
        for c in range(w):
            s_on = oracle(base, image)
            base[r, c] = False
            s_off = oracle(base, image)
            base[r, c] = True
            if s_on == s_off:
                raise AmbiguityError(f"oracle cannot separate the probes at pixel ({r}, {c})")
            out[r, c] = s_on > s_off
    return out, oracle.calls - start


@dataclass(frozen=True)
class AccuracyCheck:
    passed: bool
    deviation: float | None = None
    violations: int = 0
    pairs_checked: int = 0
    n_used: int = 0
    capped: bool = False


def check_absolute_accuracy(evaluator, tuples, tol: float = 0.0) -> AccuracyCheck:
    """Largest |evaluator(pred, image) - dice(pred, gt)| over the tuples."""
    if not tuples:
        raise InvalidInputError("absolute accuracy needs at least one tuple")
    dev = max(abs(float(evaluator(t.pred_mask, t.image)) - dice(t.pred_mask, t.gt_mask))
              for t in tuples)
    return AccuracyCheck(passed=dev <= tol, deviation=dev, n_used=len(tuples))


def check_beta_relative_accuracy(evaluator_scores: Sequence[float], true_scores: Sequence[float],
                                 beta: float = 0.0, *, cap: int = PAIR_CAP,
                                 seed: int = 0) -> AccuracyCheck:
    """Pairwise ordering test; beta = 0 is plain relative accuracy.

    Every pair whose true scores differ (by at least ``beta``) must be ordered
    the same way by the evaluator. Above ``cap`` items a seeded subsample of
    size ``cap`` is checked.
    """
    tau = np.asarray(evaluator_scores, dtype=np.float64)
    pi = np.asarray(true_scores, dtype=np.float64)
    if tau.ndim != 1 or tau.shape != pi.shape:
        raise InvalidInputError("score sequences must be 1-D with equal length")
    if beta < 0:
        raise InvalidInputError(f"beta must be nonnegative, got {beta}")
    capped = tau.size > cap
    if capped:
        idx = np.sort(np.random.default_rng(seed).choice(tau.size, size=cap, replace=False))
        tau, pi = tau[idx], pi[idx]
    i, j = np.triu_indices(tau.size, k=1)
    dpi = pi[i] - pi[j]
    relevant = (dpi != 0) & (np.abs(dpi) >= beta)
    bad = int(np.count_nonzero(((tau[i] - tau[j]) * dpi <= 0) & relevant))
    return AccuracyCheck(passed=bad == 0, violations=bad, pairs_checked=int(relevant.sum()),
                         n_used=int(tau.size), capped=capped)


def reduction_demo_A_to_B(segmenter_oracle, tuples) -> list[float]:
    """Score each tuple's prediction by segmenting once and computing dice.

    ``segmenter_oracle(image, prompt)`` must return the true mask.
    """
    return [dice(t.pred_mask, segmenter_oracle(t.image, t.prompt)) for t in tuples]


def random_hidden_mask(rng: np.random.Generator, size: int) -> np.ndarray:
    """A random nonempty size x size mask with a random fill density."""
    while True:
        mask = rng.random((size, size)) < rng.uniform(0.05, 0.6)
        if mask.any():
            return mask


def reconstruction_trials(size: int = 16, trials: int = 20, noise: float = 0.0,
                          seed: int = 0) -> dict:
    """Run core-set recovery on seeded random masks.

    With ``noise`` > 0 the oracle adds Gaussian noise of that standard
    deviation to every dice answer, which degrades recovery.
    """
    rng = np.random.default_rng([seed, 0])
    noise_rng = np.random.default_rng([seed, 1])
    exact = 0
    calls = []
    pixel_acc = []
    for _ in range(trials):
        hidden = random_hidden_mask(rng, size)
        if noise > 0:
            y = hidden.copy()
            oracle = EvaluatorOracle(lambda p, _i: dice(p, y) + noise_rng.normal(0.0, noise))
        else:
            oracle = EvaluatorOracle.exact_dice(hidden)
        try:
            rec, n = core_set_reconstruct(oracle, None, size, size)
        except AmbiguityError:
            calls.append(oracle.calls)
            pixel_acc.append(float("nan"))
            continue
        calls.append(n)
        exact += bool(np.array_equal(rec, hidden))
        pixel_acc.append(float((rec == hidden).mean()))
    expected_calls = 2 * size * size
    return {
        "size": size,
        "trials": trials,
        "noise": noise,
        "exact_recoveries": exact,
        "recovery_rate": exact / trials if trials else float("nan"),
        "mean_pixel_accuracy": float(np.nanmean(pixel_acc)) if trials else float("nan"),
        "calls_per_trial": sorted(set(calls)),
        "expected_calls": expected_calls,
        "passed": trials > 0 and exact == trials and set(calls) == {expected_calls},
    }
