"""Mini-batch sampling with class balancing and normal-case data dropout.

Each balanced batch reserves floor(batch_size * normal_cap) slots for
normal examples and spreads the rest evenly over the diseased classes
(per-class counts within a batch differ by at most one).  Normals are
drawn without replacement for the whole epoch, so an excessive share of
them is simply skipped.  Diseased images are augmented by random cropping
(or plain duplication) so that each appears at least aug_multiplier times
per epoch.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError, DataError
from .corpus import AnnotatedImage
from .mining import LabelSpace

NORMAL_LABEL = "normal"


@dataclass(frozen=True)
class BatchSpec:
    batch_size: int
    normal_cap: float = 1.0 / 3.0
    crop_size: int | None = None
    seed: int = 0
    aug_multiplier: int = 4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not 0.0 <= self.normal_cap <= 1.0:
            raise ConfigError(f"normal_cap must be in [0, 1], got {self.normal_cap}")
        if self.aug_multiplier < 1:
            raise ConfigError(f"aug_multiplier must be >= 1, got {self.aug_multiplier}")


@dataclass
class Batch:
    pixels: np.ndarray  # (B, 1, side, side), float64 in [0, 1]
    classes: np.ndarray  # (B,) int64 class indices
    ids: list[str]
    tokens: list[list[str]]


def _pixels_for(ex: AnnotatedImage, crop: int | None, rng: np.random.Generator) -> np.ndarray:
    img = ex.pixels
    if crop is not None:
        max_off = img.shape[0] - crop
        r = int(rng.integers(0, max_off + 1))
        c = int(rng.integers(0, max_off + 1))
        img = img[r:r + crop, c:c + crop]
    return img.astype(np.float64) / 255.0


def _assemble(slots: list[tuple[AnnotatedImage, int]], crop: int | None,
              rng: np.random.Generator) -> Batch:
    order = rng.permutation(len(slots))
    pixels = np.stack([_pixels_for(slots[i][0], crop, rng)[None, :, :] for i in order])
    classes = np.array([slots[i][1] for i in order], dtype=np.int64)
    return Batch(pixels=pixels,
                 classes=classes,
                 ids=[slots[i][0].id for i in order],
                 tokens=[slots[i][0].tokens for i in order])


class BalancedSampler:
    """Deterministic epoch iterator over balanced, normal-capped batches."""

    def __init__(self, examples: list[AnnotatedImage], spec: BatchSpec,
                 label_space: LabelSpace):
        self.spec = spec
        self._epoch_index = 0

        labeled = [ex for ex in examples if ex.label is not None]
        if not labeled:
            raise DataError("sampler: no labeled examples to sample from")
        side = labeled[0].pixels.shape[0]
        if spec.crop_size is not None and not 0 < spec.crop_size < side:
            raise ConfigError(f"crop_size {spec.crop_size} must be inside images of side {side}")

        self.normals = sorted((ex for ex in labeled if ex.label == NORMAL_LABEL),
                              key=lambda ex: ex.id)
        by_class: dict[str, list[AnnotatedImage]] = {}
        for ex in labeled:
            if ex.label != NORMAL_LABEL:
                by_class.setdefault(ex.label, []).append(ex)
        self.class_names = sorted(by_class)
        self.class_members = [sorted(by_class[name], key=lambda ex: ex.id)
                              for name in self.class_names]
        self.class_indices = [label_space.index_of(name) for name in self.class_names]
        self.normal_index = (label_space.index_of(NORMAL_LABEL)
                             if NORMAL_LABEL in label_space.labels else None)

        if self.class_names and spec.batch_size < len(self.class_names):
            raise DataError(f"sampler: batch_size {spec.batch_size} is smaller than the "
                            f"{len(self.class_names)} diseased classes")

    @property
    def normal_slots_per_batch(self) -> int:
        if not self.normals or self.normal_index is None:
            return 0
        return int(self.spec.batch_size * self.spec.normal_cap)

    def batches_per_epoch(self) -> int:
        if not self.class_names:
            return max(1, -(-len(self.normals) // self.spec.batch_size))
        dis_slots = self.spec.batch_size - self.normal_slots_per_batch
        if dis_slots <= 0:
            raise DataError("sampler: normal_cap leaves no room for diseased examples")
        need = self.spec.aug_multiplier * max(len(m) for m in self.class_members)
        ncls = len(self.class_names)
        b = max(1, -(-need * ncls // dis_slots))
        while (b * dis_slots) // ncls < need:
            b += 1
        return b

    def _class_stream(self, members: list[AnnotatedImage], count: int,
                      rng: np.random.Generator) -> list[AnnotatedImage]:
        out: list[AnnotatedImage] = []
        while len(out) < count:
            for idx in rng.permutation(len(members)):
                out.append(members[idx])
                if len(out) == count:
                    break
        return out

    def epoch(self):
        """Yield one epoch of batches; advances the internal epoch counter."""
        spec = self.spec
        rng = np.random.default_rng([spec.seed, self._epoch_index])
        self._epoch_index += 1

        n_batches = self.batches_per_epoch()
        ncls = len(self.class_names)
        normal_order = list(rng.permutation(len(self.normals)))
        normal_pos = 0

        if not self.class_names:
            for start in range(0, len(self.normals), spec.batch_size):
                chunk = normal_order[start:start + spec.batch_size]
                slots = [(self.normals[i], self.normal_index) for i in chunk]
                yield _assemble(slots, spec.crop_size, rng)
            return

        dis_slots = spec.batch_size - self.normal_slots_per_batch
        base, rem = divmod(dis_slots, ncls)
        extra_order = list(rng.permutation(ncls))
        extra_ptr = 0

        # Per-class counts for every batch, rotating the +1 extras so class
        # totals over the epoch differ by at most one.
        counts = np.full((n_batches, ncls), base, dtype=int)
        for b in range(n_batches):
            for _ in range(rem):
                counts[b, extra_order[extra_ptr % ncls]] += 1
                extra_ptr += 1

        streams = [self._class_stream(members, int(counts[:, c].sum()), rng)
                   for c, members in enumerate(self.class_members)]
        positions = [0] * ncls

        for b in range(n_batches):
            slots: list[tuple[AnnotatedImage, int]] = []
            take_norm = min(self.normal_slots_per_batch, len(self.normals) - normal_pos)
            for _ in range(take_norm):
                slots.append((self.normals[normal_order[normal_pos]], self.normal_index))
                normal_pos += 1
            for c in range(ncls):
                for _ in range(int(counts[b, c])):
                    slots.append((streams[c][positions[c]], self.class_indices[c]))
                    positions[c] += 1
            yield _assemble(slots, spec.crop_size, rng)


class UniformSampler:
    """Plain shuffled batches over all labeled examples (no data dropout)."""

    def __init__(self, examples: list[AnnotatedImage], spec: BatchSpec,
                 label_space: LabelSpace):
        self.spec = spec
        self._epoch_index = 0
        self.examples = sorted((ex for ex in examples if ex.label is not None),
                               key=lambda ex: ex.id)
        if not self.examples:
            raise DataError("sampler: no labeled examples to sample from")
        self.indices = [label_space.index_of(ex.label) for ex in self.examples]

    def batches_per_epoch(self) -> int:
        return max(1, len(self.examples) // self.spec.batch_size)

    def epoch(self):
        spec = self.spec
        rng = np.random.default_rng([spec.seed, self._epoch_index])
        self._epoch_index += 1
        order = rng.permutation(len(self.examples))
        for start in range(0, len(order) - spec.batch_size + 1, spec.batch_size):
            chunk = order[start:start + spec.batch_size]
            slots = [(self.examples[i], self.indices[i]) for i in chunk]
            yield _assemble(slots, spec.crop_size, rng)


def batches(examples: list[AnnotatedImage], spec: BatchSpec, label_space: LabelSpace,
            balanced: bool = True):
    """One epoch of mini-batches; the main entry point for training loops."""
    cls = BalancedSampler if balanced else UniformSampler
    return cls(examples, spec, label_space).epoch()
