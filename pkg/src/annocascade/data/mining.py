"""Label mining: frequent exact annotation patterns become class labels."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

from ..errors import DataError, UsageError
from .corpus import AnnotatedImage

log = logging.getLogger("annocascade.data")


@dataclass
class LabelSpace:
    """Ordered class names plus the example-id to class-index assignment.

    iteration 0 comes from pattern mining; iteration 1 from the cluster
    relabeling cascade.  Assignment indices always address ``labels``.
    """

    iteration: int
    labels: list[str]
    assignment: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        bad = {i for i in self.assignment.values() if not 0 <= i < len(self.labels)}
        if bad:
            raise UsageError(f"label space: assignment indices {sorted(bad)} out of range")

    @property
    def num_classes(self) -> int:
        return len(self.labels)

    def label_of(self, example_id: str) -> str | None:
        idx = self.assignment.get(example_id)
        return self.labels[idx] if idx is not None else None

    def index_of(self, label: str) -> int:
        return self.labels.index(label)

    def to_json(self) -> dict:
        return {"iteration": self.iteration, "labels": self.labels,
                "assignment": self.assignment}

    @classmethod
    def from_json(cls, payload: dict) -> "LabelSpace":
        return cls(iteration=int(payload["iteration"]), labels=list(payload["labels"]),
                   assignment={str(k): int(v) for k, v in payload["assignment"].items()})

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "LabelSpace":
        return cls.from_json(json.loads(Path(path).read_text()))


def pattern_key(terms: list[str]) -> tuple:
    """Exact term-combination identity: the sorted multiset of terms."""
    return tuple(sorted(terms))


def label_seed_token(label: str) -> str:
    """First word token of a label name, ignoring any '#<cluster>' suffix."""
    base = re.sub(r"#\d+$", "", label)
    words = base.replace("/", " ").split()
    if not words:
        raise UsageError(f"label {label!r} has no seed token")
    return words[0]


def mine_labels(examples: list[AnnotatedImage], min_support: int) -> LabelSpace:
    """Assign a class to every example whose exact annotation pattern occurs
    at least min_support times; the rest stay unlabeled.

    The label name keeps the term order of the pattern's first occurrence.
    Labels are ordered by descending support, then name.
    """
    if min_support < 1:
        raise UsageError(f"mine_labels: min_support must be >= 1, got {min_support}")
    counts: dict[tuple, int] = {}
    names: dict[tuple, str] = {}
    for ex in examples:
        key = pattern_key(ex.terms)
        counts[key] = counts.get(key, 0) + 1
        names.setdefault(key, "/".join(ex.terms))

    kept = [key for key, n in counts.items() if n >= min_support]
    if not kept:
        top = max(counts.values(), default=0)
        raise DataError(f"mine_labels: no annotation pattern occurs {min_support} or more "
                        f"times (most frequent: {top}); lower min_support")

    kept.sort(key=lambda key: (-counts[key], names[key]))
    labels = [names[key] for key in kept]
    index = {key: i for i, key in enumerate(kept)}

    assignment: dict[str, int] = {}
    for ex in examples:
        idx = index.get(pattern_key(ex.terms))
        if idx is not None:
            assignment[ex.id] = idx
            ex.label = labels[idx]
        else:
            ex.label = None

    retained = len(assignment) / len(examples) if examples else 0.0
    log.info("mined %d labels at support >= %d, retaining %.1f%% of %d examples",
             len(labels), min_support, retained * 100, len(examples))
    return LabelSpace(iteration=0, labels=labels, assignment=assignment)
