"""Item-item similarity graph, normalized Laplacian, and spectral embedding.

The embedding keeps the ``d`` smallest non-trivial eigenvectors of the
normalized Laplacian, discarding one zero-eigenvalue direction per connected
component. Items isolated in the similarity graph get a zero embedding row.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components

from .data import InteractionDataset

logger = logging.getLogger(__name__)

TRIVIAL_EIGENVALUE_CUTOFF = 1e-8
DENSE_FALLBACK_LIMIT = 2000

EMBEDDING_MAGIC = b"DTRECEMB"


class ConvergenceError(RuntimeError):
    def __init__(self, worst_residual: float, max_iter: int):
        super().__init__(
            f"eigensolver did not converge within {max_iter} iterations "
            f"(worst residual {worst_residual:.3e})"
        )
        self.worst_residual = worst_residual


@dataclass(frozen=True)
class SpectralEmbedding:
    matrix: np.ndarray  # item_count x d, unit-norm columns
    eigenvalues: np.ndarray  # d ascending, all above the trivial cutoff
    skipped_trivial: int


def jaccard_similarity(ds: InteractionDataset) -> sp.csr_matrix:
    """Item-item weights |U(i) & U(j)| / |U(i) | U(j)| over train user sets.

    Entries exist only where the intersection is non-empty; the diagonal is
    zero. Every item must have at least one train interaction (guaranteed
    after k-core filtering).
    """
    if not ds.train:
        raise ValueError("train set is empty")
    rows = np.fromiter((e.user for e in ds.train), dtype=np.int64, count=len(ds.train))
    cols = np.fromiter((e.item for e in ds.train), dtype=np.int64, count=len(ds.train))
    B = sp.csr_matrix(
        (np.ones(len(ds.train)), (rows, cols)), shape=(ds.user_count, ds.item_count)
    )
    degrees = np.asarray(B.sum(axis=0)).ravel()
    if np.any(degrees == 0):
        bad = int(np.argmax(degrees == 0))
        raise AssertionError(f"item {bad} has no train interactions; run k-core first")
    inter = (B.T @ B).tocoo()
    mask = inter.row != inter.col
    r, c, overlap = inter.row[mask], inter.col[mask], inter.data[mask]
    union = degrees[r] + degrees[c] - overlap
    W = sp.csr_matrix((overlap / union, (r, c)), shape=(ds.item_count, ds.item_count))
    return W


def normalized_laplacian(W: sp.spmatrix) -> sp.csr_matrix:
    """L = I - D^{-1/2} W D^{-1/2}; rows with zero degree keep only L_ii = 1.

    Off-diagonal entries are computed as w_ij / sqrt(d_i * d_j) in one division,
    which keeps hand-computable cases (like a single-edge graph) exact.
    """
    W = sp.coo_matrix(W, dtype=np.float64)
    deg = np.asarray(W.sum(axis=1)).ravel()
    norm = np.zeros_like(W.data)
    ok = (deg[W.row] > 0) & (deg[W.col] > 0)
    norm[ok] = W.data[ok] / np.sqrt(deg[W.row[ok]] * deg[W.col[ok]])
    A = sp.csr_matrix((norm, (W.row, W.col)), shape=W.shape)
    return sp.csr_matrix(sp.identity(W.shape[0], format="csr") - A)


def graph_degrees(W: sp.spmatrix) -> np.ndarray:
    return np.asarray(sp.csr_matrix(W).sum(axis=1)).ravel()


def _sign_canonicalize(V: np.ndarray) -> np.ndarray:
    for j in range(V.shape[1]):
        col = V[:, j]
        pivot = int(np.argmax(np.abs(col)))
        if col[pivot] < 0:
            V[:, j] = -col
    return V


def _lanczos_largest(
    matvec,
    n: int,
    want: int,
    tol: float,
    max_iter: int,
    rng: np.random.Generator,
    ortho_against: np.ndarray | None,
) -> tuple[np.ndarray, np.ndarray]:
    """Lanczos with full reorthogonalization for the `want` largest eigenpairs.

    ``ortho_against`` holds orthonormal columns (known null directions of L,
    i.e. known top directions already deflated) that every Krylov vector is
    kept orthogonal to.
    """

    def project(x: np.ndarray) -> np.ndarray:
        if ortho_against is not None:
            x = x - ortho_against @ (ortho_against.T @ x)
        return x

    deflated = 0 if ortho_against is None else ortho_against.shape[1]
    cap = min(n - deflated, max_iter)
    if want > cap:
        raise ValueError(f"cannot extract {want} eigenpairs from dimension {cap}")

    V = np.zeros((n, cap))
    alphas: list[float] = []
    betas: list[float] = []

    def extract(dim: int, last_beta: float) -> tuple[np.ndarray, np.ndarray, float]:
        T = np.zeros((dim, dim))
        T[np.arange(dim), np.arange(dim)] = alphas[:dim]
        if dim > 1:
            off = np.array(betas[: dim - 1])
            T[np.arange(dim - 1), np.arange(1, dim)] = off
            T[np.arange(1, dim), np.arange(dim - 1)] = off
        theta, S = np.linalg.eigh(T)
        idx = np.argsort(theta)[::-1][:want]
        # Cheap residual bound: |beta_j| * |last Ritz-vector component|.
        if last_beta * np.abs(S[-1, idx]).max() > tol and dim < cap:
            return np.empty(0), np.empty(0), np.inf
        X = V[:, :dim] @ S[:, idx]
        lam = theta[idx]
        resid = np.array(
            [np.linalg.norm(matvec(X[:, t]) - lam[t] * X[:, t]) for t in range(want)]
        )
        return lam, X / np.linalg.norm(X, axis=0), float(resid.max())

    v = project(rng.standard_normal(n))
    v /= np.linalg.norm(v)
    V[:, 0] = v
    j = 0
    worst = np.inf
    while True:
        w = project(matvec(V[:, j]))
        alphas.append(float(V[:, j] @ w))
        # Full reorthogonalization, twice for stability. The deflated null
        # directions sit at the top of B's spectrum, so any leaked component
        # would amplify; re-project on every pass.
        for _ in range(2):
            w -= V[:, : j + 1] @ (V[:, : j + 1].T @ w)
            w = project(w)
        beta = float(np.linalg.norm(w))
        dim = j + 1
        breakdown = beta < 1e-12

        if dim >= want and (dim == cap or breakdown or dim % 5 == 0):
            lam, X, worst = extract(dim, beta)
            if worst <= tol:
                return lam, X
            if dim == cap:
                raise ConvergenceError(worst, max_iter)

        if breakdown:
            # Invariant subspace found; start a new tridiagonal block from a
            # fresh direction (zero coupling to the exhausted block).
            w = project(rng.standard_normal(n))
            for _ in range(2):
                w -= V[:, :dim] @ (V[:, :dim].T @ w)
                w = project(w)
            norm = float(np.linalg.norm(w))
            if norm < 1e-12:
                raise ConvergenceError(worst, max_iter)
            betas.append(0.0)
            V[:, dim] = w / norm
        else:
            betas.append(beta)
            V[:, dim] = w / beta
        j += 1


def spectral_embed(
    L: sp.spmatrix,
    d: int,
    tol: float = 1e-8,
    max_iter: int = 1000,
    seed: int = 0,
    method: str = "auto",
    degrees: np.ndarray | None = None,
) -> SpectralEmbedding:
    """Eigenvectors for the d smallest non-trivial eigenvalues of L.

    ``method`` picks the solver: "dense" (LAPACK), "lanczos" (iterative on the
    shifted operator 2I - L), or "auto" (dense below 2000 items). When
    ``degrees`` is supplied the known per-component null directions
    D^{1/2}·1 are deflated exactly; otherwise the solver computes one extra
    pair per component and discards the trivial ones.
    """
    if d < 1:
        raise ValueError(f"d must be >= 1, got {d}")
    if method not in ("auto", "dense", "lanczos"):
        raise ValueError(f"unknown method {method!r}")
    L = sp.csr_matrix(L, dtype=np.float64)
    n = L.shape[0]

    offdiag = L - sp.diags(L.diagonal())
    offdiag.eliminate_zeros()
    active = np.asarray(np.abs(offdiag).sum(axis=1)).ravel() > 0
    isolated = np.flatnonzero(~active)
    if isolated.size:
        logger.info("spectral_embed: %d isolated items get zero embedding rows", isolated.size)
    act_idx = np.flatnonzero(active)
    if act_idx.size == 0:
        raise ValueError("similarity graph has no edges")
    La = L[act_idx][:, act_idx].tocsr()
    n_act = La.shape[0]

    structure = sp.csr_matrix(abs(offdiag)[act_idx][:, act_idx])
    n_comp, labels = connected_components(structure, directed=False)
    if d + n_comp > n_act:
        raise ValueError(f"d={d} plus {n_comp} trivial directions exceeds {n_act} active items")

    if method == "auto":
        method = "dense" if n_act < DENSE_FALLBACK_LIMIT else "lanczos"

    if method == "dense":
        evals, evecs = np.linalg.eigh(La.toarray())
        trivial = evals[:n_comp]
        if np.any(np.abs(trivial) >= TRIVIAL_EIGENVALUE_CUTOFF):
            raise ValueError(
                f"expected {n_comp} near-zero eigenvalues, got {trivial}"
            )
        lam = evals[n_comp : n_comp + d].copy()
        X = evecs[:, n_comp : n_comp + d].copy()
    else:
        rng = np.random.default_rng(seed)
        matvec = lambda x: 2.0 * x - La @ x  # noqa: E731  spectrum flip: smallest -> largest
        if degrees is not None:
            deg_act = np.asarray(degrees, dtype=np.float64)[act_idx]
            null = np.zeros((n_act, n_comp))
            for c in range(n_comp):
                mask = labels == c
                v = np.zeros(n_act)
                v[mask] = np.sqrt(deg_act[mask])
                null[:, c] = v / np.linalg.norm(v)
            theta, X = _lanczos_largest(matvec, n_act, d, tol, max_iter, rng, null)
            lam = 2.0 - theta
        else:
            theta, X = _lanczos_largest(matvec, n_act, d + n_comp, tol, max_iter, rng, None)
            lam_all = 2.0 - theta
            order = np.argsort(lam_all)
            lam_all, X = lam_all[order], X[:, order]
            trivial = lam_all[:n_comp]
            if np.any(np.abs(trivial) >= TRIVIAL_EIGENVALUE_CUTOFF):
                raise ValueError(f"expected {n_comp} near-zero eigenvalues, got {trivial}")
            lam, X = lam_all[n_comp:], X[:, n_comp:]
        order = np.argsort(lam)
        lam, X = lam[order], X[:, order]

    resid = np.linalg.norm(La @ X - X * lam, axis=0)
    if np.any(resid > max(tol, 1e-6)):
        raise ConvergenceError(float(resid.max()), max_iter)

    full = np.zeros((n, d))
    full[act_idx] = _sign_canonicalize(X)
    return SpectralEmbedding(matrix=full, eigenvalues=lam, skipped_trivial=int(n_comp))


# ---------------------------------------------------------------------------
# Optional persistence.
# ---------------------------------------------------------------------------


def save_similarity(path: str | Path, W: sp.spmatrix) -> None:
    """Coordinate-format text, one `i j w` line per stored entry."""
    coo = sp.coo_matrix(W)
    order = np.lexsort((coo.col, coo.row))
    with Path(path).open("w", encoding="utf-8") as fh:
        for r, c, w in zip(coo.row[order], coo.col[order], coo.data[order]):
            fh.write(f"{r} {c} {float(w)!r}\n")


def load_similarity(path: str | Path, dimension: int) -> sp.csr_matrix:
    rows, cols, vals = [], [], []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            r, c, w = line.split()
            rows.append(int(r))
            cols.append(int(c))
            vals.append(float(w))
    return sp.csr_matrix((vals, (rows, cols)), shape=(dimension, dimension))


def save_embedding(path: str | Path, matrix: np.ndarray) -> None:
    """Binary: magic, uint64 rows, uint64 cols, little-endian float64 row-major."""
    arr = np.ascontiguousarray(matrix, dtype="<f8")
    with Path(path).open("wb") as fh:
        fh.write(EMBEDDING_MAGIC)
        fh.write(struct.pack("<QQ", arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_embedding(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[: len(EMBEDDING_MAGIC)] != EMBEDDING_MAGIC:
        raise ValueError(f"{path}: not an embedding file")
    rows, cols = struct.unpack_from("<QQ", raw, len(EMBEDDING_MAGIC))
    data = np.frombuffer(raw, dtype="<f8", offset=len(EMBEDDING_MAGIC) + 16)
    return data.reshape(rows, cols).copy()
