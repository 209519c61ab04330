"""Volume estimates, branch priorities and bootstrap confidence intervals.

A leaf's volume is ``|I| * prod(chain)`` where each chain factor is the
weighted share of the parent's samples that fell on the leaf's side of a
split.  With a prior weight this is ``|I|`` times the prior-normalised mass
of the leaf.  Bootstrap replicates of each chain factor come from a single
resample of the parent samples, shared by both children, so sibling factors
sum to the parent's factor replicate by replicate.
"""
import math
from dataclasses import dataclass

import numpy as np

DEFAULT_B = 1000
DEFAULT_LEVEL = 0.9
_CHUNK_ELEMENTS = 2_000_000


def box_volume(lo, hi):
    """Product of the widths of the non-degenerate coordinates (0 if none)."""
    width = np.asarray(hi, dtype=np.float64) - np.asarray(lo, dtype=np.float64)
    if np.any(width < 0):
        raise ValueError("empty box")
    free = width[width > 0]
    return float(np.prod(free)) if free.size else 0.0


def weighted_fraction(weights, mask):
    total = float(np.sum(weights))
    if total <= 0:
        raise ValueError("samples have zero total weight")
    return float(np.sum(weights[mask])) / total


def ratio(v_P, v_O):
    """``v_P / v_O`` with ``0/0 = 1`` (nothing to approximate, nothing missed)."""
    if v_O > 0:
        return v_P / v_O
    return 1.0 if v_P == 0 else math.inf


def priority(v_P, v_O):
    return abs(v_P - v_O)


@dataclass
class VolumeEstimate:
    v_P: float
    v_O: float
    ratio: float
    ci_P: tuple = None
    ci_O: tuple = None
    ci_ratio: tuple = None


def volume_estimates(leaves):
    """Sum leaf contributions.

    ``leaves`` is an iterable of ``(volume, f_P, f_O)`` where the fractions
    are the weighted shares of the leaf's samples in the approximation and in
    the preimage.
    """
    vp = [vol * fp for vol, fp, _ in leaves]
    vo = [vol * fo for vol, _, fo in leaves]
    v_P, v_O = math.fsum(vp), math.fsum(vo)
    return VolumeEstimate(v_P, v_O, ratio(v_P, v_O))


def resampled_fractions(weights, masks, B, rng):
    """Bootstrap replicates of weighted fractions, one shared resample.

    ``masks`` is a list of boolean arrays over the samples; returns an array
    of shape (len(masks), B).  Replicates with zero resampled weight give 0.
    """
    weights = np.asarray(weights, dtype=np.float64)
    N = weights.size
    out = np.zeros((len(masks), B))
    if N == 0 or B == 0:
        return out
    num = np.stack([np.where(m, weights, 0.0) for m in masks])
    step = max(1, _CHUNK_ELEMENTS // N)
    for start in range(0, B, step):
        b = min(step, B - start)
        idx = rng.integers(0, N, size=(b, N))
        total = weights[idx].sum(axis=1)
        for k in range(len(masks)):
            part = num[k][idx].sum(axis=1)
            with np.errstate(invalid="ignore", divide="ignore"):
                out[k, start:start + b] = np.where(total > 0, part / total, 0.0)
    return out


def split_replicates(weights, neg, B, rng):
    """Replicates of both children's chain factors from one parent resample.

    The "+" factor is ``1 - "-"`` per replicate, so siblings sum to one
    exactly wherever the resample carries weight.
    """
    f_neg = resampled_fractions(weights, [np.asarray(neg, bool)], B, rng)[0]
    return f_neg, 1.0 - f_neg


def percentile_ci(reps, level=DEFAULT_LEVEL):
    reps = np.asarray(reps, dtype=np.float64)
    if reps.size == 0:
        return (math.nan, math.nan)
    tail = (1 - level) / 2 * 100
    lo, hi = np.percentile(reps, [tail, 100 - tail])
    return float(lo), float(hi)


def ratio_replicates(vp_reps, vo_reps):
    """Element-wise ratio of replicates, clamped to ``[0, inf)``."""
    vp = np.asarray(vp_reps, dtype=np.float64)
    vo = np.asarray(vo_reps, dtype=np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        r = np.where(vo > 0, vp / vo, np.where(vp == 0, 1.0, np.inf))
    return np.maximum(r, 0.0)


def bootstrap_ci(leaves, level=DEFAULT_LEVEL):
    """Percentile intervals for v_P, v_O and the ratio.

    ``leaves`` is an iterable of ``(scale, chain_reps, fP_reps, fO_reps)``
    where ``scale`` is the root box volume and the replicate arrays share a
    common length B; replicates are combined element-wise across leaves
    before aggregation.
    """
    vp = vo = 0.0
    for scale, chain, fp, fo in leaves:
        vp = vp + scale * chain * fp
        vo = vo + scale * chain * fo
    vp = np.atleast_1d(vp)
    vo = np.atleast_1d(vo)
    return (percentile_ci(vp, level), percentile_ci(vo, level),
            percentile_ci(ratio_replicates(vp, vo), level))


def delta_metric(first_ratio, final_ratio, elapsed):
    """Ratio improvement per second: ``|first - final| / elapsed``."""
    if not elapsed > 0:
        raise ValueError("elapsed time must be positive")
    return abs(first_ratio - final_ratio) / elapsed
