"""Top-k accuracy, curve smoothing and mean +/- spread formatting."""
from __future__ import annotations

import math
import statistics

import numpy as np

from .errors import EmptySeries, LabelOutOfRange, TooFewValues


def topk_accuracy(logits, labels, k) -> float:
    """Fraction of rows whose label ranks among the ``k`` largest logits.

    Equal logits are ranked by class index, lower index first.
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels, dtype=np.int64)
    B, N = logits.shape
    if not 1 <= k <= N:
        raise ValueError(f"k={k} outside [1, {N}]")
    if np.any(labels < 0) or np.any(labels >= N):
        raise LabelOutOfRange(f"labels must lie in [0, {N})")
    if B == 0:
        return 0.0
    own = logits[np.arange(B), labels][:, None]
    cls = np.arange(N)[None, :]
    ahead = (logits > own) | ((logits == own) & (cls < labels[:, None]))
    rank = ahead.sum(axis=1)
    return float(np.mean(rank < k))


def moving_average(series, window=5):
    """Centered running mean; windows are truncated at the ends."""
    x = np.asarray(series, dtype=np.float64)
    if x.size == 0:
        raise EmptySeries("cannot smooth an empty series")
    if window < 1 or window % 2 == 0:
        raise ValueError("window must be a positive odd integer")
    half = window // 2
    out = np.empty_like(x)
    for i in range(x.size):
        seg = x[max(i - half, 0):i + half + 1]
        out[i] = math.fsum(seg) / seg.size
    return out


def aggregate_mean_std(values):
    """Arithmetic mean and sample standard deviation (n - 1 denominator).

    Computed in exact rational arithmetic, so the result does not depend on
    the order of the values and identical values give a spread of exactly 0.
    """
    v = [float(x) for x in values]
    if len(v) < 2:
        raise TooFewValues("need at least two values for a spread")
    return statistics.mean(v), statistics.stdev(v)


def format_mean_std(mean, std, digits=2):
    return f"{mean:.{digits}f} ± {std:.{digits}f}"
