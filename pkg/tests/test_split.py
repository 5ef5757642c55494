import pytest

from annocascade.data import by_split, mine_labels, split
from annocascade.errors import DataError

import corpora


def _splits_of(corpus):
    return {ex.id: ex.split for ex in corpus}


class TestSplitArithmetic:
    def test_30_cases_min_eval_3(self):
        corpus = corpora.make(["granuloma"] * 30)
        mine_labels(corpus, min_support=1)
        split(corpus, min_eval_per_label=3, seed=0)
        counts = {name: len(by_split(corpus, name)) for name in ("train", "val", "test")}
        assert counts == {"train": 24, "val": 3, "test": 3}

    def test_10_cases_min_eval_10_errors(self):
        corpus = corpora.make(["granuloma"] * 10)
        mine_labels(corpus, min_support=1)
        with pytest.raises(DataError, match="granuloma"):
            split(corpus, min_eval_per_label=10)

    def test_fraction_floor_with_remainder_to_train(self):
        corpus = corpora.make(["opacity"] * 47)
        mine_labels(corpus, min_support=1)
        split(corpus, min_eval_per_label=1, seed=1)
        counts = {name: len(by_split(corpus, name)) for name in ("train", "val", "test")}
        assert counts == {"train": 39, "val": 4, "test": 4}


class TestSplitDeterminismAndPartition:
    def test_same_seed_same_split(self):
        a = corpora.eight_pattern_fixture()
        b = corpora.eight_pattern_fixture()
        for corpus in (a, b):
            mine_labels(corpus, min_support=5)
            split(corpus, min_eval_per_label=1, seed=7)
        assert _splits_of(a) == _splits_of(b)

    def test_different_seed_differs(self):
        a = corpora.eight_pattern_fixture()
        b = corpora.eight_pattern_fixture()
        for corpus, seed in ((a, 1), (b, 2)):
            mine_labels(corpus, min_support=5)
            split(corpus, min_eval_per_label=1, seed=seed)
        assert _splits_of(a) != _splits_of(b)

    def test_partition_and_stratification(self):
        corpus = corpora.eight_pattern_fixture()
        mine_labels(corpus, min_support=5)
        split(corpus, min_eval_per_label=1, seed=3)
        assert all(ex.split in ("train", "val", "test") for ex in corpus)
        per_label = {}
        for ex in corpus:
            per_label.setdefault(ex.label, []).append(ex.split)
        for label, splits in per_label.items():
            n = len(splits)
            assert splits.count("val") == max(n // 10, 1)
            assert splits.count("test") == max(n // 10, 1)


class TestPreMiningSplit:
    def test_stratifies_by_disease_when_unlabeled(self):
        # Context variants share the disease stratum with the plain pattern.
        corpus = corpora.make(
            ["granuloma"] * 12
            + ["small granuloma/right upper"] * 8
            + ["normal"] * 20
        )
        split(corpus, min_eval_per_label=2, seed=0)
        granuloma = [ex for ex in corpus if ex.disease == "granuloma"]
        assert len(granuloma) == 20
        assert sum(ex.split == "val" for ex in granuloma) == 2
        assert sum(ex.split == "test" for ex in granuloma) == 2
        normals = [ex for ex in corpus if ex.disease == "normal"]
        assert sum(ex.split == "test" for ex in normals) == 2
