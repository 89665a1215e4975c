#!/usr/bin/env python3
"""
Statistical checks shared by the matrix runner, the acceptance runner and
the tests.
"""
import math
from typing import List, Sequence, Tuple

import numpy as np
from scipy import stats

SIGMAS = 3.0


def binomial_sigma(p: float, n: int) -> float:
    if n <= 0:
        return 0.0
    return math.sqrt(max(p * (1.0 - p), 0.0) / n)


def within_sigma(successes: int, n: int, p: float, sigmas: float = SIGMAS) -> bool:
    """True if successes/n lies within `sigmas` binomial standard deviations of p."""
    if n <= 0:
        return False
    observed = successes / n
    sigma = binomial_sigma(p, n)
    # a zero-variance expectation has to match exactly
    if sigma == 0.0:
        return observed == p
    return abs(observed - p) <= sigmas * sigma


def rate_bounds(successes: int, n: int, sigmas: float = SIGMAS) -> Tuple[float, float]:
    """
    Rough confidence interval for a success rate.

    Zero counts use the rule of three (upper bound 3/n), full counts its
    mirror image, so that tied cells never look ordered.

    Returns:
        Tuple[float, float]: (lower, upper), clipped to [0, 1]
    """
    if n <= 0:
        return 0.0, 1.0
    p = successes / n
    if successes == 0:
        return 0.0, min(1.0, 3.0 / n)
    if successes == n:
        return max(0.0, 1.0 - 3.0 / n), 1.0
    spread = sigmas * binomial_sigma(p, n)
    return max(0.0, p - spread), min(1.0, p + spread)


def ordering_violations(cells: Sequence[Tuple[str, int, int]], sigmas: float = SIGMAS) -> List[str]:
    """
    Check that success rates do not increase along `cells`.

    Args:
        cells: (label, successes, attempts), weakest technique first
        sigmas: Tolerance

    Returns:
        List[str]: One message per adjacent pair whose rates are clearly inverted
    """
    problems = []
    for (left, s_left, n_left), (right, s_right, n_right) in zip(cells, cells[1:]):
        _lo, upper_left = rate_bounds(s_left, n_left, sigmas)
        lower_right, _hi = rate_bounds(s_right, n_right, sigmas)
        if upper_left < lower_right:
            problems.append(f"{right} ({s_right}/{n_right}) is weaker than {left} ({s_left}/{n_left})")
    return problems


def chi_square_uniform(samples: Sequence[int], bins: int) -> float:
    """p-value of a chi-square test of `samples` against the uniform law on [0, bins)."""
    counts = np.bincount(np.asarray(samples, dtype=np.int64), minlength=bins)
    return float(stats.chisquare(counts).pvalue)


def is_exactly_uniform(counts: Sequence[int]) -> bool:
    values = np.asarray(counts)
    return bool(values.size) and bool(np.all(values == values[0]))
