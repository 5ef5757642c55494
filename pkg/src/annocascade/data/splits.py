"""Stratified train/validation/test splitting."""

from __future__ import annotations

import math

import numpy as np

from ..errors import DataError, UsageError
from .corpus import AnnotatedImage

SPLITS = ("train", "val", "test")


def split(examples: list[AnnotatedImage], fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
          min_eval_per_label: int = 1, seed: int = 0) -> None:
    """Set each example's split field by a stratified random partition.

    Stratification key is the mined label when present, otherwise the
    disease grouping key, so splitting works both before and after label
    mining.  Validation and test get at least min_eval_per_label examples
    from every stratum; fractional sizes are floored and the remainder
    goes to train.  Deterministic under the seed.
    """
    if not math.isclose(sum(fractions), 1.0, abs_tol=1e-9):
        raise UsageError(f"split: fractions {fractions} must sum to 1")
    if min_eval_per_label < 0:
        raise UsageError("split: min_eval_per_label must be >= 0")

    groups: dict[str, list[AnnotatedImage]] = {}
    for ex in examples:
        key = ex.label if ex.label is not None else ex.disease
        groups.setdefault(key, []).append(ex)

    too_small = []
    plan: dict[str, tuple[int, int]] = {}
    for key in sorted(groups):
        n = len(groups[key])
        n_val = max(math.floor(n * fractions[1]), min_eval_per_label)
        n_test = max(math.floor(n * fractions[2]), min_eval_per_label)
        if n - n_val - n_test < 1:
            too_small.append(f"{key} ({n} cases, needs >= {n_val + n_test + 1})")
        plan[key] = (n_val, n_test)
    if too_small:
        raise DataError("split: labels too small to satisfy the split: " + "; ".join(too_small))

    rng = np.random.default_rng(seed)
    for key in sorted(groups):
        members = sorted(groups[key], key=lambda ex: ex.id)
        order = rng.permutation(len(members))
        n_val, n_test = plan[key]
        for rank, idx in enumerate(order):
            if rank < n_val:
                members[idx].split = "val"
            elif rank < n_val + n_test:
                members[idx].split = "test"
            else:
                members[idx].split = "train"


def by_split(examples: list[AnnotatedImage], name: str) -> list[AnnotatedImage]:
    if name not in SPLITS:
        raise UsageError(f"unknown split {name!r}")
    return [ex for ex in examples if ex.split == name]
