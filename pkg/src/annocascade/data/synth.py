"""Synthetic corpus generation.

Each disease archetype owns a pixel motif that is rendered onto a noisy
background at a quadrant chosen by the example's context.  Annotations
are either plain (just the disease name) or contextful
("<severity> <name>/<location words>"), never longer than five word
tokens.  Normal examples are background noise annotated "normal".

The hidden sampling choices (archetype, context mode, severity, location)
are kept on each example's meta dict so tests can use them as ground
truth; they are not persisted with the corpus.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from .corpus import AnnotatedImage

QUADRANTS = ("left upper", "left lower", "right upper", "right lower")
SEVERITIES = ("small", "large", "multiple")
MOTIFS = ("blob", "ring", "bar", "cross", "square", "speckle")


@dataclass(frozen=True)
class ContextMode:
    """One context cluster: a severity plus the quadrants it may occupy."""

    severity: str | None
    locations: tuple[str, ...]
    weight: float = 1.0

    def __post_init__(self):
        if self.severity is not None and self.severity not in SEVERITIES:
            raise ConfigError(f"unknown severity {self.severity!r}")
        for loc in self.locations:
            if loc not in QUADRANTS:
                raise ConfigError(f"unknown location {loc!r}")
        if not self.locations:
            raise ConfigError("context mode needs at least one location")


@dataclass(frozen=True)
class ArchetypeSpec:
    """A disease: its name tokens, pixel motif, and context mode mixture."""

    name: str
    motif: str
    intensity: float = 210.0
    modes: tuple[ContextMode, ...] = ()
    plain_weight: float = 1.0
    weight: float = 1.0  # relative prior among diseased examples

    def __post_init__(self):
        if self.motif not in MOTIFS:
            raise ConfigError(f"unknown motif {self.motif!r}")
        if len(self.name.split()) > 2:
            raise ConfigError(f"archetype name {self.name!r} longer than two tokens")
        if self.plain_weight < 0 or self.weight <= 0 or any(m.weight < 0 for m in self.modes):
            raise ConfigError("mode weights must be non-negative and weight positive")
        if self.plain_weight == 0 and not self.modes:
            raise ConfigError(f"archetype {self.name!r} has no way to be annotated")


@dataclass(frozen=True)
class SynthSpec:
    archetypes: tuple[ArchetypeSpec, ...]
    n_examples: int
    normal_prior: float = 0.4
    image_side: int = 32
    noise: float = 12.0
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.normal_prior <= 1.0:
            raise ConfigError(f"normal_prior must be in [0, 1], got {self.normal_prior}")
        if self.n_examples < 0 or self.image_side < 8:
            raise ConfigError("n_examples must be >= 0 and image_side >= 8")


def _quadrant_center(location: str, side: int, rng: np.random.Generator) -> tuple[float, float]:
    words = location.split()
    row = side * (0.25 if "upper" in words else 0.75)
    col = side * (0.25 if "left" in words else 0.75)
    jitter = side * 0.04
    return row + rng.uniform(-jitter, jitter), col + rng.uniform(-jitter, jitter)


def _severity_radius(severity: str, side: int) -> float:
    return {"small": 0.08, "large": 0.17, "multiple": 0.06}[severity] * side


def _stamp(img: np.ndarray, motif: str, row: float, col: float, radius: float,
           intensity: float, rng: np.random.Generator) -> None:
    side = img.shape[0]
    rr, cc = np.mgrid[0:side, 0:side]
    dr, dc = rr - row, cc - col
    dist = np.sqrt(dr * dr + dc * dc)
    if motif == "blob":
        mask = np.clip(1.0 - (dist / radius) ** 2, 0.0, 1.0)
    elif motif == "ring":
        band = np.abs(dist - radius * 0.8) / (radius * 0.35)
        mask = np.clip(1.0 - band, 0.0, 1.0)
    elif motif == "bar":
        mask = ((np.abs(dr) < radius * 0.45) & (np.abs(dc) < radius * 1.4)).astype(float)
    elif motif == "cross":
        arm = radius * 0.35
        mask = (((np.abs(dr) < arm) & (np.abs(dc) < radius * 1.2))
                | ((np.abs(dc) < arm) & (np.abs(dr) < radius * 1.2))).astype(float)
    elif motif == "square":
        mask = ((np.abs(dr) < radius) & (np.abs(dc) < radius)).astype(float)
    elif motif == "speckle":
        inside = (np.abs(dr) < radius) & (np.abs(dc) < radius)
        mask = np.zeros_like(dist)
        mask[inside] = rng.random(int(inside.sum())) > 0.55
    else:  # pragma: no cover - guarded by ArchetypeSpec validation
        raise ConfigError(f"unknown motif {motif!r}")
    img += intensity * mask


def _render(spec: SynthSpec, archetype: ArchetypeSpec | None, severity: str,
            location: str, rng: np.random.Generator) -> np.ndarray:
    side = spec.image_side
    img = rng.normal(70.0, spec.noise, size=(side, side))
    if archetype is not None:
        radius = _severity_radius(severity, side)
        row, col = _quadrant_center(location, side, rng)
        if severity == "multiple":
            for _ in range(3):
                orow = row + rng.uniform(-0.1, 0.1) * side
                ocol = col + rng.uniform(-0.1, 0.1) * side
                _stamp(img, archetype.motif, orow, ocol, radius, archetype.intensity, rng)
        else:
            _stamp(img, archetype.motif, row, col, radius, archetype.intensity, rng)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synthesize(spec: SynthSpec) -> list[AnnotatedImage]:
    """Sample a corpus from the archetype mixture; deterministic per seed."""
    rng = np.random.default_rng(spec.seed)
    arch_weights = np.array([a.weight for a in spec.archetypes], dtype=np.float64)
    if arch_weights.size:
        arch_weights = arch_weights / arch_weights.sum()
    examples: list[AnnotatedImage] = []
    for i in range(spec.n_examples):
        ex_id = f"syn{i:05d}"
        if not spec.archetypes or rng.random() < spec.normal_prior:
            pixels = _render(spec, None, "small", QUADRANTS[0], rng)
            examples.append(AnnotatedImage(ex_id, pixels, "normal",
                                           meta={"archetype": "normal", "mode": "normal"}))
            continue

        arch = spec.archetypes[rng.choice(len(spec.archetypes), p=arch_weights)]
        weights = np.array([arch.plain_weight] + [m.weight for m in arch.modes])
        choice = rng.choice(len(weights), p=weights / weights.sum())
        if choice == 0:
            severity = SEVERITIES[rng.integers(len(SEVERITIES))]
            location = QUADRANTS[rng.integers(len(QUADRANTS))]
            annotation = arch.name
            mode_id = "plain"
        else:
            mode = arch.modes[choice - 1]
            severity = mode.severity or SEVERITIES[rng.integers(len(SEVERITIES))]
            location = mode.locations[rng.integers(len(mode.locations))]
            annotation = f"{mode.severity + ' ' if mode.severity else ''}{arch.name}/{location}"
            mode_id = f"mode{choice - 1}"

        pixels = _render(spec, arch, severity, location, rng)
        examples.append(AnnotatedImage(
            ex_id, pixels, annotation,
            meta={"archetype": arch.name, "mode": mode_id,
                  "severity": severity, "location": location}))
    return examples


_DEFAULT_ROSTER = (
    # name, motif, intensity, prior weight (two dominant diseases so the
    # cascade's mean+std size threshold has groups to split)
    ("granuloma", "blob", 225.0, 3.0),
    ("opacity", "square", 160.0, 3.0),
    ("nodule", "ring", 220.0, 1.0),
    ("calcified granuloma", "cross", 245.0, 1.0),
    ("pleural effusion", "bar", 190.0, 1.0),
    ("cardiomegaly", "blob", 140.0, 1.0),
    ("fibrosis", "speckle", 205.0, 1.0),
    ("edema", "square", 215.0, 1.0),
)

DEFAULT_MODES = (
    ContextMode("small", ("right upper", "right lower")),
    ContextMode("large", ("left upper", "left lower")),
)


def make_archetypes(with_context: bool, plain_weight: float = 1.0,
                    mode_weight: float = 1.0) -> tuple[ArchetypeSpec, ...]:
    """The standard eight-disease roster, with or without context modes."""
    modes = tuple(ContextMode(m.severity, m.locations, mode_weight)
                  for m in DEFAULT_MODES) if with_context else ()
    return tuple(ArchetypeSpec(name, motif, intensity, modes=modes,
                               plain_weight=plain_weight, weight=weight)
                 for name, motif, intensity, weight in _DEFAULT_ROSTER)


def make_default_spec(n_examples: int = 600, image_side: int = 32, normal_prior: float = 0.4,
                      seed: int = 0, with_context: bool = True,
                      plain_weight: float = 0.6, mode_weight: float = 0.7) -> SynthSpec:
    return SynthSpec(
        archetypes=make_archetypes(with_context, plain_weight, mode_weight),
        n_examples=n_examples,
        normal_prior=normal_prior,
        image_side=image_side,
        seed=seed,
    )
