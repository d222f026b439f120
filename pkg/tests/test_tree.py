import json

import numpy as np
import pytest

from dtrec.tree import (
    DualCodes,
    PathCodeTable,
    build_kary_tree,
    lcp_similarity,
    path_codes,
    read_codes,
    tree_to_json,
    write_codes,
)


def brute_force_lcp(a, b):
    l = 0
    for x, y in zip(a, b):
        if x != y:
            break
        l += 1
    return l / min(len(a), len(b))


class TestBuildTree:
    def test_two_separated_blobs(self):
        rng = np.random.default_rng(0)
        E = np.vstack([rng.normal(0, 0.1, (4, 3)), rng.normal(10, 0.1, (4, 3))])
        tree = build_kary_tree(E, k=2, m=4, seed=0)
        tree.check_invariants(8)
        codes = path_codes(tree)
        assert all(len(c) == 1 for c in codes.values())
        leaves = {frozenset(tree.nodes[n].items) for n in tree.leaves()}
        assert leaves == {frozenset(range(4)), frozenset(range(4, 8))}

    def test_everything_fits_in_root(self):
        E = np.random.default_rng(1).standard_normal((5, 2))
        tree = build_kary_tree(E, k=4, m=10, seed=0)
        codes = path_codes(tree)
        assert set(codes.values()) == {(0,)}

    def test_leaf_bound_and_partition(self):
        rng = np.random.default_rng(2)
        for k, m in ((2, 5), (4, 30), (3, 7)):
            E = rng.standard_normal((rng.integers(40, 200), 8))
            tree = build_kary_tree(E, k=k, m=m, seed=5)
            tree.check_invariants(E.shape[0])

    def test_identical_points_round_robin(self):
        E = np.ones((11, 4))
        tree = build_kary_tree(E, k=3, m=2, seed=0)
        tree.check_invariants(11)

    def test_determinism(self):
        E = np.random.default_rng(3).standard_normal((60, 6))
        a = build_kary_tree(E, k=3, m=6, seed=9)
        b = build_kary_tree(E, k=3, m=6, seed=9)
        assert json.dumps(tree_to_json(a), sort_keys=True) == json.dumps(
            tree_to_json(b), sort_keys=True
        )
        assert path_codes(a) == path_codes(b)

    def test_bad_params(self):
        E = np.ones((4, 2))
        with pytest.raises(ValueError):
            build_kary_tree(E, k=1, m=2)
        with pytest.raises(ValueError):
            build_kary_tree(E, k=2, m=0)


class TestPathCodes:
    def _decode(self, tree, code):
        node = tree.nodes[tree.root]
        if node.is_leaf:
            return node
        for slot in code:
            node = tree.nodes[node.children[slot]]
        return node

    def test_decode_round_trip(self):
        E = np.random.default_rng(4).standard_normal((50, 4))
        tree = build_kary_tree(E, k=3, m=4, seed=1)
        for item, code in path_codes(tree).items():
            assert item in self._decode(tree, code).items

    def test_same_leaf_same_code(self):
        E = np.random.default_rng(5).standard_normal((30, 4))
        tree = build_kary_tree(E, k=2, m=5, seed=2)
        codes = path_codes(tree)
        for leaf_id in tree.leaves():
            leaf_codes = {codes[i] for i in tree.nodes[leaf_id].items}
            assert len(leaf_codes) == 1


class TestLcpSimilarity:
    @pytest.mark.parametrize(
        "a,b,expected",
        [
            ((3, 1, 2), (3, 1, 2), 1.0),
            ((3, 1, 2), (3, 1, 4), 2 / 3),
            ((1, 2, 3), (2, 2, 3), 0.0),
            ((3, 1), (3, 1, 4), 1.0),
        ],
    )
    def test_hand_cases(self, a, b, expected):
        assert lcp_similarity(a, b) == pytest.approx(expected)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            lcp_similarity((), (1,))

    def test_matches_brute_force(self):
        rng = np.random.default_rng(6)
        for _ in range(1000):
            a = tuple(rng.integers(0, 4, size=rng.integers(1, 7)))
            b = tuple(rng.integers(0, 4, size=rng.integers(1, 7)))
            assert lcp_similarity(a, b) == brute_force_lcp(a, b)
            assert lcp_similarity(a, b) == lcp_similarity(b, a)
            assert lcp_similarity(a, a) == 1.0

    def test_locality(self):
        E = np.random.default_rng(7).standard_normal((40, 4))
        tree = build_kary_tree(E, k=2, m=4, seed=3)
        codes = path_codes(tree)
        leaves = tree.leaves()
        same_leaf = tree.nodes[leaves[0]].items
        if len(same_leaf) >= 2:
            a, b = same_leaf[:2]
            # Items sharing a leaf tie items that split at the root (sim 0).
            root_kids = tree.nodes[tree.root].children
            left = tree.nodes[root_kids[0]]
            other = None
            for leaf_id in leaves:
                items = tree.nodes[leaf_id].items
                if codes[items[0]][0] != codes[a][0]:
                    other = items[0]
                    break
            assert lcp_similarity(codes[a], codes[b]) == 1.0
            if other is not None:
                assert lcp_similarity(codes[a], codes[other]) == 0.0


class TestPathCodeTable:
    def test_matches_scalar_lcp(self):
        rng = np.random.default_rng(8)
        codes = {
            i: tuple(rng.integers(0, 4, size=rng.integers(1, 6))) for i in range(30)
        }
        table = PathCodeTable(codes)
        a = rng.integers(0, 30, size=200)
        b = rng.integers(0, 30, size=200)
        vec = table.similarity(a, b)
        for x, y, s in zip(a, b, vec):
            assert s == lcp_similarity(codes[int(x)], codes[int(y)])

    def test_requires_total_coverage(self):
        with pytest.raises(ValueError):
            PathCodeTable({0: (1,), 2: (0,)})


class TestCodesPersistence:
    def _codes(self):
        rng = np.random.default_rng(9)
        c = {i: tuple(rng.integers(0, 4, size=rng.integers(1, 4))) for i in range(12)}
        s = {i: tuple(rng.integers(0, 4, size=rng.integers(1, 4))) for i in range(12)}
        return DualCodes(c, s)

    def test_round_trip(self, tmp_path):
        codes = self._codes()
        write_codes(tmp_path / "codes.tsv", codes, "fp1")
        back = read_codes(tmp_path / "codes.tsv", "fp1")
        assert back.collab == codes.collab and back.semantic == codes.semantic

    def test_fingerprint_mismatch(self, tmp_path):
        write_codes(tmp_path / "codes.tsv", self._codes(), "fp1")
        with pytest.raises(ValueError, match="fingerprint"):
            read_codes(tmp_path / "codes.tsv", "fp2")

    def test_line_format(self, tmp_path):
        codes = DualCodes({0: (3, 1, 2)}, {0: (0, 2)})
        write_codes(tmp_path / "codes.tsv", codes)
        assert (tmp_path / "codes.tsv").read_text() == "0\tc:3,1,2\ts:0,2\n"

    def test_mismatched_coverage_rejected(self):
        with pytest.raises(ValueError):
            DualCodes({0: (1,)}, {1: (1,)})
