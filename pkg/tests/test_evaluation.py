import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from attenmixer import evaluation, model
from attenmixer.data import TrainingExample
from attenmixer.errors import EmptyRanks, InvalidTarget
from attenmixer.model import HyperParams


class TestRanks:
    def test_simple(self):
        assert evaluation.rank_of_target([0.1, 0.6, 0.3], 2) == 1
        assert evaluation.rank_of_target([0.1, 0.6, 0.3], 1) == 3

    def test_ties_prefer_smaller_index(self):
        probs = [0.25, 0.25, 0.25, 0.25]
        assert [evaluation.rank_of_target(probs, t) for t in (1, 2, 3, 4)] == [1, 2, 3, 4]

    def test_invalid_target(self):
        with pytest.raises(InvalidTarget):
            evaluation.rank_of_target([0.5, 0.5], 3)

    @given(st.lists(st.integers(0, 5), min_size=1, max_size=12), st.data())
    def test_vectorised_matches_sort(self, scores, data):
        t = data.draw(st.integers(1, len(scores)))
        order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
        assert evaluation.rank_of_target(np.array(scores, float), t) == order.index(t - 1) + 1


class TestHrMrr:
    def test_hand_computed(self):
        hr, mrr = evaluation.hr_mrr([1, 21, 4], 20)
        assert hr == 2 / 3
        assert mrr == (1 + 0.25) / 3
        assert mrr == pytest.approx(0.4167, abs=1e-4)

    def test_cutoff_boundary(self):
        assert evaluation.hr_mrr([20, 21], 20) == (0.5, pytest.approx(0.025))

    def test_empty(self):
        with pytest.raises(EmptyRanks):
            evaluation.hr_mrr([], 20)

    def test_uniform_random_scorer(self):
        V, n, k = 100, 10_000, 20
        rng = np.random.default_rng(0)
        ranks = evaluation.ranks_of_targets(rng.random((n, V)), rng.integers(1, V + 1, size=n))
        hr, _ = evaluation.hr_mrr(ranks, k)
        p = k / V
        assert abs(hr - p) < 3 * np.sqrt(p * (1 - p) / n)


class TestBuckets:
    def test_parse(self):
        assert evaluation.parse_buckets("1-3,4-6,7+") == ((1, 3), (4, 6), (7, None))

    def test_partition(self):
        lengths = np.array([1, 2, 3, 4, 5, 6, 7, 12])
        ranks = np.array([1, 30, 2, 5, 1, 1, 40, 3])
        report = evaluation.report_from_ranks(ranks, lengths)
        counts = [b["count"] for b in report.buckets.values()]
        assert counts == [3, 3, 2]
        assert sum(counts) == report.count
        assert report.buckets["7+"]["metrics"]["HR@20"] == 0.5

    def test_write(self, tmp_path):
        report = evaluation.report_from_ranks([1, 2, 30], [1, 4, 9])
        report.write(tmp_path / "r.json", {"split": "test"})
        report.write_bucket_table(tmp_path / "b.tsv")
        lines = (tmp_path / "b.tsv").read_text().splitlines()
        assert lines[0].split("\t")[:3] == ["bucket", "count", "HR@5"]
        assert len(lines) == 4


class TestModelEvaluation:
    def test_sigma_does_not_change_ranks(self):
        rng = np.random.default_rng(2)
        hyper = HyperParams(d=6, L=2, H=2, sigma=12.0)
        params = model.init_params(15, hyper, 0)
        examples = [TrainingExample(tuple(rng.integers(1, 16, size=3).tolist()), int(rng.integers(1, 16)))
                    for _ in range(40)]
        a, _ = evaluation.collect_ranks(evaluation.model_scorer(params, hyper), examples)
        b, _ = evaluation.collect_ranks(evaluation.model_scorer(params, HyperParams(d=6, L=2, H=2, sigma=1.0)),
                                        examples)
        np.testing.assert_array_equal(a, b)

    def test_logit_ranks_match_probability_ranks(self):
        hyper = HyperParams(d=6, L=2, H=2)
        params = model.init_params(15, hyper, 1)
        examples = [TrainingExample((1, 2, 3), t) for t in range(1, 16)]
        ranks, _ = evaluation.collect_ranks(evaluation.model_scorer(params, hyper), examples)
        probs = model.forward([1, 2, 3], params, hyper)
        np.testing.assert_array_equal(ranks, [evaluation.rank_of_target(probs, t) for t in range(1, 16)])
