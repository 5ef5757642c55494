import numpy as np

from annocascade.data import (
    ArchetypeSpec,
    ContextMode,
    SynthSpec,
    make_default_spec,
    synthesize,
)


def motif_quadrant(pixels):
    """Quadrant of the bright-blob centroid, named like location tokens."""
    f = pixels.astype(float)
    ys, xs = np.where(f > np.median(f) + 50.0)
    assert ys.size > 0, "no motif pixels found"
    side = pixels.shape[0]
    vert = "upper" if ys.mean() < side / 2 else "lower"
    horiz = "left" if xs.mean() < side / 2 else "right"
    return f"{horiz} {vert}"


def _single_mode_spec(n=6, seed=5):
    arch = ArchetypeSpec(
        "granuloma", "blob",
        modes=(ContextMode("small", ("right upper",)),),
        plain_weight=0.0,
    )
    return SynthSpec(archetypes=(arch,), n_examples=n, normal_prior=0.0,
                     image_side=32, seed=seed)


class TestAnnotations:
    def test_contextful_annotation_tokens(self):
        for ex in synthesize(_single_mode_spec()):
            assert ex.tokens == ["small", "granuloma", "right", "upper"]
            assert ex.terms == ["small granuloma", "right upper"]
            assert ex.disease == "granuloma"

    def test_motif_lands_in_annotated_quadrant(self):
        for ex in synthesize(_single_mode_spec()):
            assert motif_quadrant(ex.pixels) == "right upper"

    def test_normal_annotation(self):
        corpus = synthesize(SynthSpec(archetypes=(), n_examples=4, normal_prior=0.0))
        assert all(ex.annotation == "normal" for ex in corpus)

    def test_token_budget(self):
        for ex in synthesize(make_default_spec(n_examples=300, seed=2)):
            assert 1 <= len(ex.tokens) <= 5


class TestPriors:
    def test_normal_fraction_within_three_sigma(self):
        spec = make_default_spec(n_examples=1000, normal_prior=0.7, seed=11)
        corpus = synthesize(spec)
        n_normal = sum(ex.annotation == "normal" for ex in corpus)
        sigma = np.sqrt(1000 * 0.7 * 0.3)
        assert abs(n_normal - 700) <= 3 * sigma

    def test_zero_archetypes_all_normal(self):
        corpus = synthesize(SynthSpec(archetypes=(), n_examples=20, normal_prior=0.2))
        assert all(ex.annotation == "normal" for ex in corpus)


class TestGroundTruth:
    def test_location_tokens_match_rendered_quadrant(self):
        corpus = synthesize(make_default_spec(n_examples=400, normal_prior=0.2, seed=9))
        checked = 0
        for ex in corpus:
            if ex.meta["mode"].startswith("mode"):
                assert motif_quadrant(ex.pixels) == ex.meta["location"]
                assert ex.meta["location"].split() == ex.tokens[-2:][::-1] or \
                    set(ex.meta["location"].split()) == set(ex.tokens[-2:])
                checked += 1
        assert checked > 50

    def test_meta_carries_hidden_mode(self):
        corpus = synthesize(make_default_spec(n_examples=100, seed=3))
        assert all("mode" in ex.meta for ex in corpus)


class TestDeterminism:
    def test_same_seed_bitwise_identical(self):
        a = synthesize(make_default_spec(n_examples=50, seed=21))
        b = synthesize(make_default_spec(n_examples=50, seed=21))
        assert all(np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
        assert [x.annotation for x in a] == [y.annotation for y in b]

    def test_different_seed_differs(self):
        a = synthesize(make_default_spec(n_examples=50, seed=1))
        b = synthesize(make_default_spec(n_examples=50, seed=2))
        assert any(not np.array_equal(x.pixels, y.pixels) for x, y in zip(a, b))
