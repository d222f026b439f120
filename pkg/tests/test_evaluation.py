import math

import numpy as np
import pytest

from dtrec.data import Interaction, InteractionDataset
from dtrec.evaluation import (
    aggregate_results,
    evaluate_ranking,
    ndcg_at_k,
    rank_items,
    recall_at_k,
    write_results_csv,
)


class TestRankItems:
    def test_simple_sort(self):
        user_out = np.array([[1.0]])
        item_out = np.array([[0.9], [0.1], [0.5]])
        top = rank_items(user_out, item_out, 0, [], 2)
        assert top.tolist() == [0, 2]

    def test_mask_excludes_top(self):
        user_out = np.array([[1.0]])
        item_out = np.array([[0.9], [0.1], [0.5]])
        top = rank_items(user_out, item_out, 0, [0], 2)
        assert top.tolist() == [2, 1]

    def test_tie_breaks_to_lowest_id(self):
        user_out = np.array([[1.0]])
        item_out = np.array([[0.5], [0.5], [0.5]])
        assert rank_items(user_out, item_out, 0, [], 3).tolist() == [0, 1, 2]

    def test_matches_sort_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            item_out = rng.standard_normal((100, 4))
            user_out = rng.standard_normal((1, 4))
            mask = rng.choice(100, size=10, replace=False)
            top = rank_items(user_out, item_out, 0, mask, 20)
            scores = item_out @ user_out[0]
            expected = sorted(
                (i for i in range(100) if i not in set(mask.tolist())),
                key=lambda i: (-scores[i], i),
            )[:20]
            assert top.tolist() == expected


class TestRecall:
    def test_half(self):
        assert recall_at_k([1, 2, 3], {2, 9}, 3) == 0.5

    def test_full(self):
        assert recall_at_k([1, 2, 3], {1, 3}, 3) == 1.0

    def test_empty_relevant_rejected(self):
        with pytest.raises(ValueError):
            recall_at_k([1], set(), 1)

    def test_nondecreasing_in_k(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            ranking = rng.permutation(30).tolist()
            relevant = set(rng.choice(30, size=5, replace=False).tolist())
            values = [recall_at_k(ranking, relevant, k) for k in range(1, 31)]
            assert values == sorted(values)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            ranking = rng.permutation(40).tolist()
            relevant = set(rng.choice(40, size=rng.integers(1, 8), replace=False).tolist())
            k = int(rng.integers(1, 25))
            expected = len([i for i in ranking[:k] if i in relevant]) / len(relevant)
            assert recall_at_k(ranking, relevant, k) == expected


class TestNdcg:
    def test_rank_one(self):
        assert ndcg_at_k([7, 1, 2], {7}, 10) == 1.0

    def test_rank_two(self):
        value = ndcg_at_k([1, 7, 2], {7}, 10)
        assert value == pytest.approx(1.0 / math.log2(3), abs=1e-12)

    def test_no_hits(self):
        assert ndcg_at_k([1, 2, 3], {9}, 3) == 0.0

    def test_swap_to_better_rank_never_decreases(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            ranking = rng.permutation(20).tolist()
            relevant = set(rng.choice(20, size=4, replace=False).tolist())
            hits = [r for r, i in enumerate(ranking) if i in relevant]
            if not hits or hits[0] == 0:
                continue
            r = hits[0]
            swapped = ranking.copy()
            swapped[r - 1], swapped[r] = swapped[r], swapped[r - 1]
            assert ndcg_at_k(swapped, relevant, 20) >= ndcg_at_k(ranking, relevant, 20)

    def test_matches_bruteforce(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            ranking = rng.permutation(25).tolist()
            relevant = set(rng.choice(25, size=rng.integers(1, 6), replace=False).tolist())
            k = int(rng.integers(1, 20))
            dcg = sum(
                1.0 / math.log2(r + 2) for r, i in enumerate(ranking[:k]) if i in relevant
            )
            idcg = sum(1.0 / math.log2(r + 2) for r in range(min(k, len(relevant))))
            assert ndcg_at_k(ranking, relevant, k) == pytest.approx(dcg / idcg, abs=1e-12)
            assert 0.0 <= ndcg_at_k(ranking, relevant, k) <= 1.0

    def test_perfect_prefix_is_one(self):
        relevant = {3, 5, 9}
        assert ndcg_at_k([5, 9, 3, 1, 2], relevant, 5) == pytest.approx(1.0)


class TestEvaluateRanking:
    def test_averages_over_users_with_targets(self):
        train = (Interaction(0, 0, None), Interaction(1, 1, None))
        test = (Interaction(0, 2, None),)  # user 1 has no test items
        ds = InteractionDataset(2, 4, train, (), test)
        user_out = np.array([[1.0], [1.0]])
        item_out = np.array([[0.9], [0.8], [0.7], [0.1]])
        report = evaluate_ranking(user_out, item_out, ds, ks=(1, 2), split="test")
        assert report.users_evaluated == 1
        # Item 0 is masked for user 0, so item 2 ranks second behind item 1.
        assert report.recall[1] == 0.0
        assert report.recall[2] == 1.0

    def test_no_targets_rejected(self):
        ds = InteractionDataset(1, 2, (Interaction(0, 0, None),), (), ())
        with pytest.raises(ValueError):
            evaluate_ranking(np.ones((1, 1)), np.ones((2, 1)), ds, split="test")


class TestResultsIo:
    def test_csv_and_aggregate(self, tmp_path):
        rows = [
            {"run_id": "r0", "dataset": "toy", "sampler": "rns", "seed": 0,
             "recall@10": "0.5", "ndcg@10": "0.25", "recall@20": "0.6", "ndcg@20": "0.3"},
            {"run_id": "r1", "dataset": "toy", "sampler": "rns", "seed": 1,
             "recall@10": "0.7", "ndcg@10": "0.35", "recall@20": "0.8", "ndcg@20": "0.4"},
        ]
        write_results_csv(tmp_path / "r.csv", rows)
        lines = (tmp_path / "r.csv").read_text().splitlines()
        assert lines[0] == "run_id,dataset,sampler,seed,recall@10,ndcg@10,recall@20,ndcg@20"
        agg = aggregate_results(rows)
        assert agg["recall@20"]["mean"] == pytest.approx(0.7)
        assert agg["recall@20"]["std"] == pytest.approx(0.1)
