"""Corpus ingestion: index parsing, image decoding, rescaling, tokenization.

A corpus directory holds an ``index.jsonl`` (one record per example with
``id``, ``image`` and ``annotation`` fields) plus the referenced image
files.  Binary 8-bit PGM is the native codec; PNG works too when Pillow
is installed.  All images are rescaled to a configured square side by
bilinear interpolation at ingestion time.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..errors import DataError, MissingArtifactError

log = logging.getLogger("annocascade.data")

# Leading severity qualifiers that may precede the disease inside the
# first annotation term; stripped when deriving the disease grouping key.
SEVERITY_MODIFIERS = ("small", "large", "multiple")

_FIRST_LEVEL_SPLIT = re.compile(r"[/,]")


def split_terms(annotation: str) -> list[str]:
    """First-level terms: lowercase, split on '/' and ',', whitespace-trimmed."""
    terms = [t.strip().lower() for t in _FIRST_LEVEL_SPLIT.split(annotation)]
    return [re.sub(r"\s+", " ", t) for t in terms if t]


def split_words(annotation: str) -> list[str]:
    """Word tokens: terms further split on whitespace, order preserved."""
    words: list[str] = []
    for term in split_terms(annotation):
        words.extend(term.split())
    return words


def disease_key(annotation: str, modifiers: tuple[str, ...] = SEVERITY_MODIFIERS) -> str:
    """Grouping key for an annotation: its first term, severity words stripped.

    The first first-level term names the disease; a leading severity
    qualifier (as produced by the synthetic corpus) is removed as long as
    something remains.  Single-term "normal" maps to itself.
    """
    terms = split_terms(annotation)
    if not terms:
        raise DataError("disease_key: empty annotation")
    words = terms[0].split()
    while len(words) > 1 and words[0] in modifiers:
        words = words[1:]
    return " ".join(words)


@dataclass
class AnnotatedImage:
    """One corpus example: square grayscale pixels plus its annotation."""

    id: str
    pixels: np.ndarray  # uint8, shape (S, S)
    annotation: str  # raw lowercase annotation string
    label: str | None = None
    split: str | None = None
    meta: dict = field(default_factory=dict)

    @property
    def tokens(self) -> list[str]:
        return split_words(self.annotation)

    @property
    def terms(self) -> list[str]:
        return split_terms(self.annotation)

    @property
    def disease(self) -> str:
        return disease_key(self.annotation)


# -- image codecs ---------------------------------------------------------------


def read_pgm(path: str | Path) -> np.ndarray:
    """Read a binary (P5) 8-bit PGM file as a (H, W) uint8 array."""
    raw = Path(path).read_bytes()
    if not raw.startswith(b"P5"):
        raise DataError(f"{path}: not a binary PGM (P5) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace byte after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise DataError(f"{path}: only 8-bit PGM supported, maxval={maxval}")
    data = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return data.reshape(height, width).copy()


def write_pgm(path: str | Path, pixels: np.ndarray) -> None:
    pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
    if pixels.ndim != 2:
        raise DataError(f"write_pgm: expected 2-D array, got shape {pixels.shape}")
    h, w = pixels.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + pixels.tobytes())


def _read_png(path: Path) -> np.ndarray:
    try:
        from PIL import Image
    except ImportError as exc:
        raise DataError(f"{path}: PNG input needs Pillow (pip install annocascade[png])") from exc
    with Image.open(path) as img:
        return np.asarray(img.convert("L"), dtype=np.uint8)


def decode_image(path: str | Path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".png":
        return _read_png(path)
    return read_pgm(path)


def bilinear_resize(pixels: np.ndarray, side: int) -> np.ndarray:
    """Rescale a grayscale image to side x side by bilinear interpolation."""
    src = np.asarray(pixels, dtype=np.float64)
    h, w = src.shape
    if (h, w) == (side, side):
        return src.astype(np.uint8)

    def axis_coords(n_src, n_dst):
        centers = (np.arange(n_dst) + 0.5) * (n_src / n_dst) - 0.5
        centers = np.clip(centers, 0.0, n_src - 1.0)
        lo = np.floor(centers).astype(int)
        hi = np.minimum(lo + 1, n_src - 1)
        frac = centers - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, side)
    x0, x1, fx = axis_coords(w, side)
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bot = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


# -- corpus I/O -------------------------------------------------------------------


def ingest(corpus_dir: str | Path, image_side: int = 32) -> list[AnnotatedImage]:
    """Load a corpus directory; skips broken examples, fails on a missing index."""
    corpus_dir = Path(corpus_dir)
    index_path = corpus_dir / "index.jsonl"
    if not index_path.exists():
        raise MissingArtifactError(f"ingest: no index.jsonl in {corpus_dir}")

    examples: list[AnnotatedImage] = []
    n_records = 0
    for line_no, line in enumerate(index_path.read_text().splitlines(), start=1):
        if not line.strip():
            continue
        n_records += 1
        try:
            record = json.loads(line)
            ex_id, image, annotation = record["id"], record["image"], record["annotation"]
        except (json.JSONDecodeError, KeyError) as exc:
            log.warning("index line %d: bad record (%s), skipped", line_no, exc)
            continue
        if not split_words(str(annotation)):
            log.warning("example %s: empty annotation, skipped", ex_id)
            continue
        try:
            pixels = decode_image(corpus_dir / image)
        except (OSError, DataError) as exc:
            log.warning("example %s: unreadable image (%s), skipped", ex_id, exc)
            continue
        examples.append(AnnotatedImage(
            id=str(ex_id),
            pixels=bilinear_resize(pixels, image_side),
            annotation=str(annotation).lower(),
        ))
    if n_records == 0:
        log.warning("ingest: index %s has no records, corpus is empty", index_path)
    return examples


def save_corpus(examples: list[AnnotatedImage], corpus_dir: str | Path) -> Path:
    """Write index.jsonl plus one PGM per example; returns the index path."""
    corpus_dir = Path(corpus_dir)
    (corpus_dir / "images").mkdir(parents=True, exist_ok=True)
    lines = []
    for ex in examples:
        rel = f"images/{ex.id}.pgm"
        write_pgm(corpus_dir / rel, ex.pixels)
        lines.append(json.dumps({"id": ex.id, "image": rel, "annotation": ex.annotation}))
    index_path = corpus_dir / "index.jsonl"
    index_path.write_text("\n".join(lines) + ("\n" if lines else ""))
    return index_path


def save_splits(examples: list[AnnotatedImage], path: str | Path) -> None:
    mapping = {ex.id: ex.split for ex in examples if ex.split}
    Path(path).write_text(json.dumps(mapping, indent=0, sort_keys=True) + "\n")


def apply_splits(examples: list[AnnotatedImage], path: str | Path) -> None:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"splits file {path} not found; run split first")
    mapping = json.loads(path.read_text())
    for ex in examples:
        ex.split = mapping.get(ex.id)
