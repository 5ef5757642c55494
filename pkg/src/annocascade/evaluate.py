"""Sequence and embedding evaluation: BLEU-N and 2-D projection.

BLEU here is the order-N modified (clipped) n-gram precision against a
single reference, multiplied by the brevity penalty exp(1 - r/c) when the
candidate is shorter than the reference.  Corpus scores average the
per-sentence values, and BLEU-N only counts examples whose reference has
at least N words.  No smoothing is applied, so zero scores do occur.
"""

from __future__ import annotations

import json
import logging
import math
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DataError, UsageError

log = logging.getLogger("annocascade.eval")

BLEU_ORDERS = (1, 2, 3, 4)


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def modified_precision(candidate: list[str], reference: list[str], n: int) -> tuple[int, int]:
    """Clipped and total n-gram counts of the candidate against the reference."""
    counts = _ngrams(candidate, n)
    if not counts:
        return 0, 0
    ref_counts = _ngrams(reference, n)
    clipped = sum(min(c, ref_counts[g]) for g, c in counts.items())
    return clipped, sum(counts.values())


def bleu_n(candidate: list[str], reference: list[str], n: int) -> float:
    """Order-N clipped precision with brevity penalty, in [0, 1]."""
    if n < 1:
        raise UsageError(f"bleu_n: order must be >= 1, got {n}")
    if not reference:
        raise UsageError("bleu_n: empty reference")
    if len(candidate) < n:
        return 0.0
    clipped, total = modified_precision(candidate, reference, n)
    if clipped == 0:
        return 0.0
    c, r = len(candidate), len(reference)
    brevity = 1.0 if c >= r else math.exp(1.0 - r / c)
    return brevity * clipped / total


@dataclass
class BleuReport:
    """Per-order corpus scores (x100) and how many examples qualified."""

    split: str
    scores: dict[int, float]
    counts: dict[int, int]

    def to_json(self) -> dict:
        return {"split": self.split,
                "scores": {str(n): self.scores[n] for n in BLEU_ORDERS},
                "counts": {str(n): self.counts[n] for n in BLEU_ORDERS}}

    @classmethod
    def from_json(cls, payload: dict) -> "BleuReport":
        return cls(split=payload["split"],
                   scores={int(k): float(v) for k, v in payload["scores"].items()},
                   counts={int(k): int(v) for k, v in payload["counts"].items()})

    def format_row(self) -> str:
        cells = " / ".join(f"{self.scores[n]:.1f}" for n in BLEU_ORDERS)
        return f"{self.split:<6} BLEU-1/-2/-3/-4: {cells}"


def bleu_report(pairs: list[tuple[list[str], list[str]]], split: str) -> BleuReport:
    """Average per-sentence BLEU-N over (candidate, reference) pairs.

    Only pairs whose reference holds at least N words contribute to the
    order-N average.  An empty pair list is an error: it means evaluation
    ran on a split with no predictions.
    """
    if not pairs:
        raise DataError(f"bleu: no predictions for split {split!r}; run generate first")
    scores: dict[int, float] = {}
    counts: dict[int, int] = {}
    for n in BLEU_ORDERS:
        qualifying = [(c, r) for c, r in pairs if len(r) >= n]
        counts[n] = len(qualifying)
        if qualifying:
            scores[n] = 100.0 * sum(bleu_n(c, r, n) for c, r in qualifying) / len(qualifying)
        else:
            scores[n] = 0.0
    return BleuReport(split=split, scores=scores, counts=counts)


def bleu_corpus(predictions_path: str | Path, split: str) -> BleuReport:
    """Score a predictions JSONL file (fields: tokens, reference_tokens)."""
    pairs = [(rec["tokens"], rec["reference_tokens"])
             for rec in load_predictions(predictions_path)]
    return bleu_report(pairs, split)


def save_predictions(records: list[dict], path: str | Path) -> None:
    with open(path, "w") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")


def load_predictions(path: str | Path) -> list[dict]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"predictions file {path} not found; run generate first")
    return [json.loads(line) for line in path.read_text().splitlines() if line.strip()]


# -- 2-D projection of context vectors -------------------------------------------


def project_2d(vectors: np.ndarray) -> np.ndarray:
    """Top-2 principal components of the row vectors, shape (n, 2).

    Degenerate input (everything identical, or effectively rank zero)
    projects to all zeros with a warning instead of failing.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 3:
        raise UsageError(f"project_2d: need at least 3 vectors, got shape {x.shape}")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / x.shape[0]
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1][:2]
    if eigvals[order[0]] <= 1e-12:
        log.warning("project_2d: input is rank deficient, emitting zeros")
        return np.zeros((x.shape[0], 2))
    basis = eigvecs[:, order]
    if basis.shape[1] < 2:
        basis = np.hstack([basis, np.zeros((basis.shape[0], 1))])
    # Deterministic sign: largest-magnitude entry of each component positive.
    for j in range(basis.shape[1]):
        k = np.argmax(np.abs(basis[:, j]))
        if basis[k, j] < 0:
            basis[:, j] = -basis[:, j]
    return centered @ basis


def write_projection_tsv(rows: list[tuple[str, str, str, float, float]],
                         path: str | Path) -> None:
    """Rows of (id, disease, cluster, x, y) as a plot-ready TSV."""
    lines = ["id\tdisease\tcluster\tx\ty"]
    for ex_id, disease, cluster, x, y in rows:
        lines.append(f"{ex_id}\t{disease}\t{cluster}\t{x:.6f}\t{y:.6f}")
    Path(path).write_text("\n".join(lines) + "\n")
