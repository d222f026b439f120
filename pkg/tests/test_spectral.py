import numpy as np
import pytest
import scipy.sparse as sp

from dtrec.data import Interaction, InteractionDataset
from dtrec.spectral import (
    ConvergenceError,
    graph_degrees,
    jaccard_similarity,
    load_embedding,
    load_similarity,
    normalized_laplacian,
    save_embedding,
    save_similarity,
    spectral_embed,
)


def random_connected_graph(n, extra_edges, rng):
    rows, cols, vals = [], [], []
    perm = rng.permutation(n)
    for a, b in zip(perm[:-1], perm[1:]):
        w = float(rng.uniform(0.05, 1.0))
        rows += [a, b]
        cols += [b, a]
        vals += [w, w]
    for _ in range(extra_edges):
        a, b = (int(x) for x in rng.integers(n, size=2))
        if a == b:
            continue
        w = float(rng.uniform(0.05, 1.0))
        rows += [a, b]
        cols += [b, a]
        vals += [w, w]
    W = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    W.sum_duplicates()
    return W


def _ds_from_user_sets(user_sets, user_count, item_count):
    edges = tuple(
        Interaction(u, i, None) for i, users in enumerate(user_sets) for u in users
    )
    return InteractionDataset(user_count, item_count, edges, (), ())


class TestJaccard:
    def test_partial_overlap(self):
        # U(0) = {0,1,2}, U(1) = {1,2,3} -> 2/4
        ds = _ds_from_user_sets([{0, 1, 2}, {1, 2, 3}], 4, 2)
        W = jaccard_similarity(ds)
        assert W[0, 1] == pytest.approx(0.5)
        assert W[1, 0] == pytest.approx(0.5)

    def test_identical_sets(self):
        ds = _ds_from_user_sets([{0, 1}, {0, 1}], 2, 2)
        W = jaccard_similarity(ds)
        assert W[0, 1] == 1.0

    def test_disjoint_absent(self):
        ds = _ds_from_user_sets([{0}, {1}], 2, 2)
        W = jaccard_similarity(ds)
        assert W[0, 1] == 0.0 and W.nnz == 0

    def test_symmetric_bounded_zero_diag(self):
        rng = np.random.default_rng(0)
        sets = [set(rng.choice(30, size=rng.integers(1, 10), replace=False)) for _ in range(20)]
        ds = _ds_from_user_sets(sets, 30, 20)
        W = jaccard_similarity(ds)
        assert (W != W.T).nnz == 0
        assert W.diagonal().max() == 0.0
        assert W.data.min() > 0.0 and W.data.max() <= 1.0

    def test_item_without_interactions_fails(self):
        ds = _ds_from_user_sets([{0, 1}], 2, 3)  # items 1, 2 unused
        with pytest.raises(AssertionError, match="k-core"):
            jaccard_similarity(ds)


class TestNormalizedLaplacian:
    def test_two_node_exact(self):
        for w in (1.0, 0.5, 0.25, 2.0, 0.3):
            W = sp.csr_matrix(np.array([[0.0, w], [w, 0.0]]))
            L = normalized_laplacian(W).toarray()
            assert np.array_equal(L, np.array([[1.0, -1.0], [-1.0, 1.0]])), w

    def test_two_node_spectrum(self):
        L = normalized_laplacian(sp.csr_matrix(np.array([[0.0, 0.7], [0.7, 0.0]]))).toarray()
        # Direct action: [1,1] is the 0-eigenvector, [1,-1] the 2-eigenvector.
        assert np.array_equal(L @ np.array([1.0, 1.0]), np.zeros(2))
        assert np.array_equal(L @ np.array([1.0, -1.0]), np.array([2.0, -2.0]))

    def test_null_space_per_component(self):
        rng = np.random.default_rng(5)
        W = sp.block_diag(
            [random_connected_graph(20, 30, rng), random_connected_graph(15, 20, rng)]
        ).tocsr()
        L = normalized_laplacian(W)
        x = np.sqrt(graph_degrees(W))
        # D^{1/2} 1 restricted to each component lies in the null space.
        for lo, hi in ((0, 20), (20, 35)):
            v = np.zeros(35)
            v[lo:hi] = x[lo:hi]
            assert np.abs(L @ v).max() < 1e-10

    def test_psd_and_range(self):
        rng = np.random.default_rng(6)
        W = random_connected_graph(40, 80, rng)
        L = normalized_laplacian(W)
        Ld = L.toarray()
        for _ in range(1000):
            x = rng.standard_normal(40)
            assert x @ (Ld @ x) >= -1e-9
        evals = np.linalg.eigvalsh(Ld)
        assert evals.min() >= -1e-10 and evals.max() <= 2.0 + 1e-10

    def test_scale_invariance(self):
        rng = np.random.default_rng(7)
        W = random_connected_graph(25, 40, rng)
        L1 = normalized_laplacian(W).toarray()
        L2 = normalized_laplacian(W * 7.5).toarray()
        assert np.abs(L1 - L2).max() <= 1e-12


class TestSpectralEmbed:
    def test_path_graph_middle_eigenvalue(self):
        W = sp.csr_matrix(np.array([[0, 1, 0], [1, 0, 1], [0, 1, 0]], dtype=float))
        L = normalized_laplacian(W)
        emb = spectral_embed(L, 1, method="dense")
        assert emb.eigenvalues[0] == pytest.approx(1.0, abs=1e-12)
        assert emb.skipped_trivial == 1

    def test_d_zero_rejected(self):
        W = sp.csr_matrix(np.array([[0, 1.0], [1.0, 0]]))
        with pytest.raises(ValueError, match="d must be"):
            spectral_embed(normalized_laplacian(W), 0)

    def test_lanczos_matches_dense_oracle(self):
        rng = np.random.default_rng(8)
        W = random_connected_graph(300, 900, rng)
        L = normalized_laplacian(W)
        lan = spectral_embed(L, 16, method="lanczos", seed=1, degrees=graph_degrees(W))
        den = spectral_embed(L, 16, method="dense")
        assert np.abs(lan.eigenvalues - den.eigenvalues).max() <= 1e-6
        # Subspace agreement for well-separated eigenvalues.
        gaps_ok = np.flatnonzero(
            (np.diff(den.eigenvalues, prepend=-1) > 1e-3)
            & (np.diff(den.eigenvalues, append=3) > 1e-3)
        )
        for j in gaps_ok:
            dot = abs(float(lan.matrix[:, j] @ den.matrix[:, j]))
            assert dot >= 1.0 - 1e-4

    def test_lanczos_without_deflation(self):
        rng = np.random.default_rng(9)
        W = random_connected_graph(120, 200, rng)
        L = normalized_laplacian(W)
        lan = spectral_embed(L, 6, method="lanczos", seed=2)
        den = spectral_embed(L, 6, method="dense")
        assert np.abs(lan.eigenvalues - den.eigenvalues).max() <= 1e-6

    def test_properties(self):
        rng = np.random.default_rng(10)
        W = random_connected_graph(80, 160, rng)
        L = normalized_laplacian(W)
        emb = spectral_embed(L, 8, method="lanczos", degrees=graph_degrees(W))
        assert np.all(np.diff(emb.eigenvalues) >= 0)
        assert np.all(emb.eigenvalues > 1e-8)
        assert np.allclose(np.linalg.norm(emb.matrix, axis=0), 1.0, atol=1e-10)
        resid = np.linalg.norm(L @ emb.matrix - emb.matrix * emb.eigenvalues, axis=0)
        assert resid.max() <= 1e-6

    def test_disconnected_components_skipped(self):
        rng = np.random.default_rng(11)
        W = sp.block_diag(
            [random_connected_graph(30, 50, rng), random_connected_graph(20, 30, rng)]
        ).tocsr()
        L = normalized_laplacian(W)
        emb = spectral_embed(L, 4, method="lanczos", degrees=graph_degrees(W))
        dense = spectral_embed(L, 4, method="dense")
        assert emb.skipped_trivial == dense.skipped_trivial == 2
        assert np.abs(emb.eigenvalues - dense.eigenvalues).max() <= 1e-6

    def test_isolated_items_zero_rows(self):
        W = sp.lil_matrix((8, 8))
        for a, b, w in ((0, 1, 0.5), (1, 2, 0.3), (2, 3, 0.9), (0, 3, 0.4)):
            W[a, b] = W[b, a] = w
        emb = spectral_embed(normalized_laplacian(W.tocsr()), 2, method="dense")
        assert np.abs(emb.matrix[4:]).max() == 0.0

    def test_nonconvergence_raises(self):
        rng = np.random.default_rng(12)
        W = random_connected_graph(60, 150, rng)
        L = normalized_laplacian(W)
        with pytest.raises((ConvergenceError, ValueError)):
            spectral_embed(L, 8, method="lanczos", max_iter=9, degrees=graph_degrees(W))

    def test_deterministic(self):
        rng = np.random.default_rng(13)
        W = random_connected_graph(90, 150, rng)
        L = normalized_laplacian(W)
        a = spectral_embed(L, 5, method="lanczos", seed=3, degrees=graph_degrees(W))
        b = spectral_embed(L, 5, method="lanczos", seed=3, degrees=graph_degrees(W))
        assert np.array_equal(a.matrix, b.matrix)
        assert np.array_equal(a.eigenvalues, b.eigenvalues)


class TestPersistence:
    def test_similarity_round_trip(self, tmp_path):
        rng = np.random.default_rng(14)
        W = random_connected_graph(25, 40, rng)
        save_similarity(tmp_path / "w.txt", W)
        back = load_similarity(tmp_path / "w.txt", 25)
        assert (W != back).nnz == 0

    def test_embedding_round_trip(self, tmp_path):
        mat = np.random.default_rng(15).standard_normal((12, 4))
        save_embedding(tmp_path / "e.bin", mat)
        assert np.array_equal(load_embedding(tmp_path / "e.bin"), mat)

    def test_embedding_bad_magic(self, tmp_path):
        (tmp_path / "bad.bin").write_bytes(b"NOTMAGIC" + b"\x00" * 32)
        with pytest.raises(ValueError, match="not an embedding"):
            load_embedding(tmp_path / "bad.bin")
