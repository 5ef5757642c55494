"""Per-term corpus statistics: totals and co-occurrence overlaps."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .corpus import AnnotatedImage


@dataclass(frozen=True)
class TermStats:
    """How often a term occurs and how often it shares an image with others."""

    term: str
    total: int
    overlap: int

    @property
    def overlap_pct(self) -> float:
        return self.overlap / self.total if self.total else 0.0


def term_stats(examples: list[AnnotatedImage]) -> list[TermStats]:
    """Count, for each first-level term, the examples it appears in and the
    examples where it co-occurs with at least one different term.

    Sorted by descending total, then by term for a deterministic order.
    """
    totals: dict[str, int] = {}
    overlaps: dict[str, int] = {}
    for ex in examples:
        terms = set(ex.terms)
        shared = len(terms) > 1
        for term in terms:
            totals[term] = totals.get(term, 0) + 1
            if shared:
                overlaps[term] = overlaps.get(term, 0) + 1
    return sorted(
        (TermStats(term, total, overlaps.get(term, 0)) for term, total in totals.items()),
        key=lambda s: (-s.total, s.term),
    )


def format_stats_tsv(stats: list[TermStats]) -> str:
    lines = ["term\ttotal\toverlap\toverlap_pct"]
    for s in stats:
        lines.append(f"{s.term}\t{s.total}\t{s.overlap}\t{s.overlap_pct:.4f}")
    return "\n".join(lines) + "\n"


def write_stats_tsv(stats: list[TermStats], path: str | Path) -> None:
    Path(path).write_text(format_stats_tsv(stats))
