"""Negative sampling strategies for BPR training.

Provides uniform sampling, score-based dynamic sampling, mixup-based
synthesis, and the full multi-view selector that fuses the min-max-normalized
preference score with dual-tree path similarities:

    score(u, i+, i) = norm(e_u . e~_i) + alpha_c * sim_c(i+, i)
                      + alpha_s * sim_s(i+, i)

with e~_i = lambda * e_pos + (1 - lambda) * e_i, lambda ~ U(0, 1), and the
pool argmax taken as the hard negative.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import InteractionDataset
from .tree import DualCodes, PathCodeTable


@dataclass(frozen=True)
class SamplerSpec:
    kind: str = "rns"  # rns | dns | mixgcf | multiview | dns_plus
    alpha_c: float = 0.1
    alpha_s: float = 0.3
    pool_size: int = 10

    KINDS = ("rns", "dns", "mixgcf", "multiview", "dns_plus")

    def __post_init__(self) -> None:
        if self.kind not in self.KINDS:
            raise ValueError(f"unknown sampler kind {self.kind!r}")
        if self.pool_size < 1:
            raise ValueError("pool_size must be >= 1")


@dataclass(frozen=True)
class HardNegative:
    item: int
    mixed_embedding: np.ndarray
    lam: float
    score_breakdown: tuple[float, float, float, float]  # pref_norm, sim_c, sim_s, total


@dataclass(frozen=True)
class PoolScores:
    items: np.ndarray
    lambdas: np.ndarray
    pref_raw: np.ndarray
    pref_norm: np.ndarray
    sim_c: np.ndarray
    sim_s: np.ndarray
    total: np.ndarray
    selected: HardNegative


def mixup_embedding(
    e_p: np.ndarray, e_i: np.ndarray, rng: np.random.Generator
) -> tuple[np.ndarray, float]:
    """Convex combination lambda*e_p + (1-lambda)*e_i with lambda ~ U(0,1)."""
    if e_p.shape != e_i.shape:
        raise ValueError(f"shape mismatch {e_p.shape} vs {e_i.shape}")
    lam = float(rng.random())
    return lam * e_p + (1.0 - lam) * e_i, lam


def minmax_normalize(scores: np.ndarray) -> np.ndarray:
    """Rescale to [0, 1]; an all-equal input maps to all zeros."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size == 0:
        raise ValueError("cannot normalize an empty score list")
    lo, hi = scores.min(), scores.max()
    if hi == lo:
        return np.zeros_like(scores)
    return (scores - lo) / (hi - lo)


def _argmax_lowest_id(total: np.ndarray, items: np.ndarray) -> int:
    best = total.max()
    return int(items[total == best].min())


def multiview_score(
    user: int,
    pos_item: int,
    pool: np.ndarray,
    user_out: np.ndarray,
    item_out: np.ndarray,
    codes: DualCodes | tuple[PathCodeTable, PathCodeTable],
    alpha_c: float,
    alpha_s: float,
    rng: np.random.Generator | None = None,
    lambdas: np.ndarray | None = None,
    use_mixup: bool = True,
) -> PoolScores:
    """Score every pool candidate and pick the hardest negative.

    ``lambdas`` can be supplied to replay recorded draws; otherwise one
    lambda per candidate is drawn from ``rng``. Ties in the final argmax
    break toward the lowest item id.
    """
    pool = np.asarray(pool, dtype=np.int64)
    if pool.size == 0:
        raise ValueError("candidate pool is empty")
    if isinstance(codes, DualCodes):
        table_c = PathCodeTable(codes.collab)
        table_s = PathCodeTable(codes.semantic)
    else:
        table_c, table_s = codes

    u_vec = user_out[user]
    pos_vec = item_out[pos_item]
    if use_mixup:
        if lambdas is None:
            if rng is None:
                raise ValueError("need an rng or recorded lambdas")
            lambdas = rng.random(pool.size)
        lambdas = np.asarray(lambdas, dtype=np.float64)
        mixed = lambdas[:, None] * pos_vec[None, :] + (1.0 - lambdas[:, None]) * item_out[pool]
    else:
        lambdas = np.zeros(pool.size)
        mixed = item_out[pool]

    pref_raw = mixed @ u_vec
    pref_norm = minmax_normalize(pref_raw)
    sim_c = table_c.similarity(np.full(pool.shape, pos_item), pool)
    sim_s = table_s.similarity(np.full(pool.shape, pos_item), pool)
    total = pref_norm + alpha_c * sim_c + alpha_s * sim_s

    sel_item = _argmax_lowest_id(total, pool)
    j = int(np.flatnonzero(pool == sel_item)[0])
    selected = HardNegative(
        item=sel_item,
        mixed_embedding=mixed[j].copy(),
        lam=float(lambdas[j]),
        score_breakdown=(float(pref_norm[j]), float(sim_c[j]), float(sim_s[j]), float(total[j])),
    )
    return PoolScores(pool, lambdas, pref_raw, pref_norm, sim_c, sim_s, total, selected)


def sample_rns(user: int, ds: InteractionDataset, rng: np.random.Generator) -> int:
    """Uniform draw over the items the user has not interacted with in train."""
    positives = set(ds.positives_of(user))
    n_unobserved = ds.item_count - len(positives)
    if n_unobserved <= 0:
        raise ValueError(f"user {user} has interacted with every item")
    if n_unobserved * 4 < ds.item_count:
        candidates = np.setdiff1d(np.arange(ds.item_count), np.fromiter(positives, dtype=np.int64))
        return int(candidates[rng.integers(candidates.size)])
    while True:
        i = int(rng.integers(ds.item_count))
        if i not in positives:
            return i


def sample_pool(
    user: int, ds: InteractionDataset, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n distinct unobserved items for the user (fewer if not enough exist)."""
    positives = set(ds.positives_of(user))
    n_unobserved = ds.item_count - len(positives)
    if n_unobserved <= n or n_unobserved * 4 < ds.item_count:
        candidates = np.setdiff1d(np.arange(ds.item_count), np.fromiter(positives, dtype=np.int64))
        if candidates.size <= n:
            return candidates
        return np.sort(rng.choice(candidates, size=n, replace=False))
    chosen: set[int] = set()
    while len(chosen) < n:
        i = int(rng.integers(ds.item_count))
        if i not in positives and i not in chosen:
            chosen.add(i)
    return np.fromiter(sorted(chosen), dtype=np.int64)


def sample_dns(
    user: int, pool: np.ndarray, user_out: np.ndarray, item_out: np.ndarray
) -> int:
    """Highest raw inner-product candidate; ties break to the lowest id."""
    pool = np.asarray(pool, dtype=np.int64)
    scores = item_out[pool] @ user_out[user]
    return _argmax_lowest_id(scores, pool)


@dataclass(frozen=True)
class DrawResult:
    neg_items: np.ndarray
    lambdas: np.ndarray  # zero where no mixup was applied


class BatchSampler:
    """Draws one negative per (user, positive) pair against a model snapshot."""

    def __init__(self, spec: SamplerSpec, ds: InteractionDataset, codes: DualCodes | None = None):
        self.spec = spec
        self.ds = ds
        if spec.kind in ("multiview", "dns_plus"):
            if codes is None:
                raise ValueError(f"sampler {spec.kind!r} requires dual path codes")
            self.table_c: PathCodeTable | None = PathCodeTable(codes.collab, ds.item_count)
            self.table_s: PathCodeTable | None = PathCodeTable(codes.semantic, ds.item_count)
        else:
            self.table_c = self.table_s = None

    def draw(
        self,
        users: np.ndarray,
        pos_items: np.ndarray,
        user_out: np.ndarray,
        item_out: np.ndarray,
        rng: np.random.Generator,
    ) -> DrawResult:
        kind = self.spec.kind
        B = users.size
        if kind == "rns":
            negs = np.fromiter(
                (sample_rns(int(u), self.ds, rng) for u in users), dtype=np.int64, count=B
            )
            return DrawResult(negs, np.zeros(B))

        pools = [sample_pool(int(u), self.ds, self.spec.pool_size, rng) for u in users]
        if any(p.size == 0 for p in pools):
            raise ValueError("a user in the batch has no unobserved items to sample")
        width = max(p.size for p in pools)
        pool_mat = np.zeros((B, width), dtype=np.int64)
        valid = np.zeros((B, width), dtype=bool)
        for b, p in enumerate(pools):
            pool_mat[b, : p.size] = p
            valid[b, : p.size] = True

        u_vecs = user_out[users]
        cand = item_out[pool_mat]  # B x width x d
        if kind in ("mixgcf", "multiview"):
            lambdas = rng.random((B, width))
            mixed = lambdas[..., None] * item_out[pos_items][:, None, :] + (
                1.0 - lambdas[..., None]
            ) * cand
        else:
            lambdas = np.zeros((B, width))
            mixed = cand
        pref = np.einsum("bd,bwd->bw", u_vecs, mixed)

        # Per-row min-max over the valid entries.
        masked_min = np.where(valid, pref, np.inf).min(axis=1, keepdims=True)
        masked_max = np.where(valid, pref, -np.inf).max(axis=1, keepdims=True)
        span = masked_max - masked_min
        pref_norm = np.where(span > 0, (pref - masked_min) / np.where(span > 0, span, 1.0), 0.0)

        if kind in ("multiview", "dns_plus"):
            sim_c = self.table_c.similarity(pos_items[:, None], pool_mat)
            sim_s = self.table_s.similarity(pos_items[:, None], pool_mat)
            total = pref_norm + self.spec.alpha_c * sim_c + self.spec.alpha_s * sim_s
        else:
            total = pref_norm
        total = np.where(valid, total, -np.inf)

        row_max = total.max(axis=1, keepdims=True)
        tie_ids = np.where(total == row_max, pool_mat, np.iinfo(np.int64).max)
        negs = tie_ids.min(axis=1)
        cols = (tie_ids == negs[:, None]).argmax(axis=1)
        sel_lambdas = lambdas[np.arange(B), cols]
        return DrawResult(negs, sel_lambdas)


def sampler_integration(
    base: str,
    with_fni: bool,
    with_dualtree: bool,
    *,
    ds: InteractionDataset,
    codes: DualCodes | None = None,
    alpha_c: float = 0.1,
    alpha_s: float = 0.3,
    pool_size: int = 10,
) -> BatchSampler:
    """Compose a baseline sampler with the relabeling/dual-tree add-ons.

    ``with_fni`` expects ``ds`` to already be the augmented dataset (the
    sampler then excludes augmented positives from its pools);
    ``with_dualtree`` adds the alpha-weighted path-similarity terms to the
    base selection score.
    """
    if base != "dns":
        raise ValueError(f"unsupported integration base {base!r}")
    if with_dualtree:
        spec = SamplerSpec("dns_plus", alpha_c=alpha_c, alpha_s=alpha_s, pool_size=pool_size)
        return BatchSampler(spec, ds, codes)
    spec = SamplerSpec("dns", pool_size=pool_size)
    return BatchSampler(spec, ds)
