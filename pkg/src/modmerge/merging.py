"""Static intra-group merging functions applied to homologous components.

All functions take the pre-trained component and the group members as float32
arrays of one shape and return a float32 array of that shape. Groups of size
one are passed through unchanged by merge_group: an unshared expert keeps its
original task component instead of being diluted by a coefficient.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np


class MergeMethod(Enum):
    WEIGHT_AVERAGE = "wa"
    TASK_ARITHMETIC = "ta"
    TIES_MERGING = "tm"
    BREADCRUMBS = "bc"


@dataclass(frozen=True)
class MergeFn:
    """A merging method plus its coefficients.

    lambda_ scales the aggregated task vectors (ignored by WEIGHT_AVERAGE,
    which divides by the group size internally). keep_fraction is the
    top-magnitude fraction retained per task vector by TIES_MERGING;
    low_cut/high_cut are the BREADCRUMBS percentile masks.
    """

    method: MergeMethod = MergeMethod.TASK_ARITHMETIC
    lambda_: float = 0.3
    keep_fraction: float = 0.2
    low_cut: float = 0.85
    high_cut: float = 0.01

    def __post_init__(self):
        if not math.isfinite(self.lambda_):
            raise ValueError("lambda must be finite")
        if not 0.0 < self.keep_fraction <= 1.0:
            raise ValueError(f"keep_fraction must be in (0, 1], got {self.keep_fraction}")
        if self.low_cut < 0 or self.high_cut < 0 or self.low_cut + self.high_cut >= 1:
            raise ValueError(
                f"need 0 <= low_cut, high_cut and low_cut + high_cut < 1, "
                f"got {self.low_cut}, {self.high_cut}"
            )


def _check_group(group: list[np.ndarray], pre: np.ndarray | None = None) -> None:
    if not group:
        raise ValueError("empty merge group")
    ref = group[0].shape if pre is None else pre.shape
    for member in group:
        if member.shape != ref:
            raise ValueError(f"shape mismatch in merge group: {member.shape} != {ref}")


def weight_average(group: list[np.ndarray]) -> np.ndarray:
    """Elementwise mean of the group members."""
    _check_group(group)
    # accumulate in float64 so the result is independent of member order
    acc = np.zeros(group[0].shape, dtype=np.float64)
    for member in group:
        acc += member
    return (acc / len(group)).astype(np.float32)


def task_arithmetic(pre: np.ndarray, group: list[np.ndarray], lambda_: float) -> np.ndarray:
    """pre + lambda * sum of task vectors (member - pre)."""
    _check_group(group, pre)
    acc = np.zeros(pre.shape, dtype=np.float64)
    for member in group:
        acc += member.astype(np.float64) - pre
    return (pre + lambda_ * acc).astype(np.float32)


def _trim_to_top(vec: np.ndarray, keep_fraction: float) -> np.ndarray:
    """Zero all but the top ceil(keep_fraction * n) entries by magnitude."""
    n = vec.size
    k = math.ceil(keep_fraction * n)
    if k >= n:
        return vec.copy()
    flat = vec.ravel()
    # stable sort: magnitude ties broken by position, deterministic
    order = np.argsort(-np.abs(flat), kind="stable")
    out = np.zeros_like(flat)
    keep = order[:k]
    out[keep] = flat[keep]
    return out.reshape(vec.shape)


def ties_merge(
    pre: np.ndarray, group: list[np.ndarray], keep_fraction: float, lambda_: float
) -> np.ndarray:
    """Trim task vectors, elect a per-element sign, average the agreeing entries.

    Per task vector, only the top keep_fraction entries by magnitude survive.
    Per element, the sign with the larger summed magnitude across the trimmed
    vectors wins (ties elect positive); entries matching the elected sign are
    averaged, elements with no surviving entry stay zero.
    """
    _check_group(group, pre)
    if not 0.0 < keep_fraction <= 1.0:
        raise ValueError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    trimmed = np.stack(
        [_trim_to_top(member - pre, keep_fraction) for member in group]
    ).astype(np.float64)
    pos_mass = np.where(trimmed > 0, trimmed, 0).sum(axis=0)
    neg_mass = -np.where(trimmed < 0, trimmed, 0).sum(axis=0)
    elect_positive = pos_mass >= neg_mass
    agrees = np.where(elect_positive, trimmed > 0, trimmed < 0)
    total = np.where(agrees, trimmed, 0).sum(axis=0)
    count = agrees.sum(axis=0, dtype=np.float64)
    mean = np.divide(total, count, out=np.zeros_like(total), where=count > 0)
    return (pre + lambda_ * mean).astype(np.float32)


def trim_extremes(vec: np.ndarray, low_cut: float, high_cut: float) -> np.ndarray:
    """Zero entries at the magnitude extremes of a task vector.

    Nearest-rank percentiles: the low threshold is taken over all entries
    (already-zero entries count toward the trimmed bottom mass; drop
    |v| <= L), the high threshold over the nonzero entries (drop |v| > H).
    Tensors with fewer than 3 elements are returned unmasked.
    """
    n = vec.size
    if n < 3:
        return vec.copy()
    flat = vec.ravel()
    mag = np.abs(flat)
    keep = np.ones(n, dtype=bool)
    k_low = math.ceil(low_cut * n)
    if k_low >= 1:
        low_threshold = np.sort(mag)[k_low - 1]
        keep &= mag > low_threshold
    nonzero = np.sort(mag[mag > 0])
    if nonzero.size:
        k_high = math.ceil((1.0 - high_cut) * nonzero.size)
        high_threshold = nonzero[k_high - 1]
        keep &= mag <= high_threshold
    return np.where(keep, flat, np.float32(0)).reshape(vec.shape)


def breadcrumbs_merge(
    pre: np.ndarray,
    group: list[np.ndarray],
    low_cut: float,
    high_cut: float,
    lambda_: float,
) -> np.ndarray:
    """pre + lambda * sum of task vectors masked at both magnitude extremes."""
    _check_group(group, pre)
    acc = np.zeros(pre.shape, dtype=np.float64)
    for member in group:
        acc += trim_extremes(member - pre, low_cut, high_cut)
    return (pre + lambda_ * acc).astype(np.float32)


def merge_group(pre: np.ndarray, group: list[np.ndarray], fn: MergeFn) -> np.ndarray:
    """Merge a component group with the configured method.

    A singleton group is returned bit-exactly (pass-through): merging is only
    defined for two or more members.
    """
    _check_group(group, pre)
    if len(group) == 1:
        return group[0]
    if fn.method is MergeMethod.WEIGHT_AVERAGE:
        return weight_average(group)
    if fn.method is MergeMethod.TASK_ARITHMETIC:
        return task_arithmetic(pre, group, fn.lambda_)
    if fn.method is MergeMethod.TIES_MERGING:
        return ties_merge(pre, group, fn.keep_fraction, fn.lambda_)
    if fn.method is MergeMethod.BREADCRUMBS:
        return breadcrumbs_merge(pre, group, fn.low_cut, fn.high_cut, fn.lambda_)
    raise ValueError(f"unknown merge method {fn.method!r}")
