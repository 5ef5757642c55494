import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.metrics import silhouette_score

from annocascade.errors import DataError, UsageError
from annocascade.evaluate import (
    bleu_n,
    bleu_report,
    modified_precision,
    project_2d,
)


class TestBleuHandComputed:
    def test_identity_scores_one_at_all_orders(self):
        tokens = ["calcified", "granuloma", "right", "upper", "lobe"]
        for n in (1, 2, 3, 4):
            assert bleu_n(tokens, tokens, n) == 1.0

    def test_clipped_unigram_two_sevenths(self):
        candidate = ["the"] * 7
        reference = ["the", "cat", "is", "on", "the", "mat", "today"]
        assert bleu_n(candidate, reference, 1) == pytest.approx(2 / 7)

    def test_half_match_no_brevity_penalty(self):
        assert bleu_n(["a", "b"], ["a", "c"], 1) == pytest.approx(0.5)

    def test_candidate_shorter_than_order(self):
        assert bleu_n(["a"], ["a", "b"], 2) == 0.0

    def test_brevity_penalty_applies_when_short(self):
        assert bleu_n(["a"], ["a", "b"], 1) == pytest.approx(math.exp(1 - 2 / 1))

    def test_no_penalty_when_longer(self):
        assert bleu_n(["a", "b", "c"], ["a", "b"], 1) == pytest.approx(2 / 3)

    def test_empty_reference_rejected(self):
        with pytest.raises(UsageError):
            bleu_n(["a"], [], 1)

    def test_bad_order(self):
        with pytest.raises(UsageError):
            bleu_n(["a"], ["a"], 0)


class TestClippingMonotonicity:
    @settings(max_examples=200, deadline=None)
    @given(cand=st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
           ref=st.lists(st.sampled_from("abcde"), min_size=1, max_size=8),
           n=st.integers(1, 3))
    def test_foreign_token_never_raises_numerator(self, cand, ref, n):
        before, _ = modified_precision(cand, ref, n)
        after, _ = modified_precision(cand + ["zzz"], ref, n)
        assert after <= before + 0  # numerator cannot grow on a foreign token

    def test_score_bounded(self):
        assert 0.0 <= bleu_n(["a", "b", "a"], ["a"], 1) <= 1.0


class TestBleuReport:
    def test_memorized_pairs_score_100(self):
        pairs = [(["granuloma"], ["granuloma"]),
                 (["calcified", "granuloma"], ["calcified", "granuloma"])]
        report = bleu_report(pairs, "train")
        assert report.scores[1] == 100.0
        assert report.counts[1] == 2

    def test_all_empty_candidates_score_zero(self):
        pairs = [([], ["a", "b", "c", "d"]), ([], ["x", "y"])]
        report = bleu_report(pairs, "val")
        assert all(report.scores[n] == 0.0 for n in (1, 2, 3, 4))

    def test_three_word_reference_counts_up_to_order_three(self):
        pairs = [(["a", "b", "c"], ["a", "b", "c"])]
        report = bleu_report(pairs, "test")
        assert report.counts == {1: 1, 2: 1, 3: 1, 4: 0}
        assert report.scores[4] == 0.0

    def test_per_sentence_average(self):
        pairs = [(["a"], ["a"]), (["b"], ["a"])]
        report = bleu_report(pairs, "train")
        assert report.scores[1] == pytest.approx(50.0)

    def test_empty_split_is_an_error(self):
        with pytest.raises(DataError, match="generate"):
            bleu_report([], "test")

    def test_json_roundtrip(self):
        report = bleu_report([(["a", "b"], ["a", "b"])], "val")
        from annocascade.evaluate import BleuReport
        assert BleuReport.from_json(report.to_json()) == report


class TestProjection:
    def test_2d_input_is_a_rotation(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(40, 2))
        y = project_2d(x)
        dist_x = np.linalg.norm(x[:, None] - x[None, :], axis=-1)
        dist_y = np.linalg.norm(y[:, None] - y[None, :], axis=-1)
        assert np.allclose(dist_x, dist_y, atol=1e-9)

    def test_row_count_preserved(self):
        rng = np.random.default_rng(1)
        assert project_2d(rng.normal(size=(17, 6))).shape == (17, 2)

    def test_rank_deficient_emits_zeros(self):
        out = project_2d(np.ones((5, 4)))
        assert np.array_equal(out, np.zeros((5, 2)))

    def test_too_few_vectors(self):
        with pytest.raises(UsageError, match="3 vectors"):
            project_2d(np.ones((2, 4)))

    def test_reconstruction_matches_svd_oracle(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(60, 8)) @ rng.normal(size=(8, 8))
        centered = x - x.mean(axis=0)
        y = project_2d(x)
        # Recover the projection basis by least squares and reconstruct.
        basis, *_ = np.linalg.lstsq(y, centered, rcond=None)
        err = np.linalg.norm(centered - y @ basis) ** 2
        s = np.linalg.svd(centered, compute_uv=False)
        best = float(np.sum(s[2:] ** 2))
        assert err <= best * (1 + 1e-9) + 1e-9

    def test_separated_modes_have_good_silhouette(self):
        rng = np.random.default_rng(3)
        a = rng.normal(size=(30, 16)) * 0.5
        b = rng.normal(size=(30, 16)) * 0.5 + 6.0
        vectors = np.vstack([a, b])
        labels = np.array([0] * 30 + [1] * 30)
        proj = project_2d(vectors)
        assert silhouette_score(proj, labels) > 0.5

    def test_deterministic(self):
        rng = np.random.default_rng(4)
        x = rng.normal(size=(20, 5))
        assert np.array_equal(project_2d(x), project_2d(x.copy()))
