"""Implicit-CF backbones (MF and LightGCN), BPR loss, Adam, and the training loop.

Everything runs in float64 numpy: gradients are derived by hand (propagation
is linear, so the pullback reuses the same sparse operator), which keeps the
loss trajectory bit-stable for a fixed seed and lets tests compare gradients
against central finite differences directly.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from .data import InteractionDataset
from .evaluation import evaluate_ranking
from .sampler import BatchSampler, SamplerSpec

logger = logging.getLogger(__name__)

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

CHECKPOINT_MAGIC = b"DTRECCP1"


class NonFiniteLossError(RuntimeError):
    pass


@dataclass
class ModelState:
    """Embedding tables plus Adam moments; users stacked above items."""

    weights: np.ndarray  # (user_count + item_count, d)
    user_count: int
    item_count: int
    backbone: str  # "mf" | "lightgcn"
    layers: int
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step: int = 0

    def __post_init__(self) -> None:
        self.adam_m = np.zeros_like(self.weights)
        self.adam_v = np.zeros_like(self.weights)

    @property
    def user_emb(self) -> np.ndarray:
        return self.weights[: self.user_count]

    @property
    def item_emb(self) -> np.ndarray:
        return self.weights[self.user_count :]

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "ModelState":
        dup = ModelState(
            self.weights.copy(), self.user_count, self.item_count, self.backbone, self.layers
        )
        dup.adam_m = self.adam_m.copy()
        dup.adam_v = self.adam_v.copy()
        dup.step = self.step
        return dup


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    batch_size: int = 2048
    l2: float = 0.0001
    epochs: int = 100
    seed: int = 0
    patience: int = 10
    eval_every: int = 1
    eval_k: int = 20

    def __post_init__(self) -> None:
        if min(self.lr, self.batch_size, self.l2, self.epochs + 1, self.patience) <= 0:
            raise ValueError("all TrainConfig values must be positive")


def init_params(
    user_count: int,
    item_count: int,
    d_e: int = 64,
    seed: int = 0,
    backbone: str = "lightgcn",
    layers: int = 3,
) -> ModelState:
    """Xavier-uniform tables: bound sqrt(6 / (rows + d_e)) per table."""
    if d_e < 1:
        raise ValueError(f"d_e must be >= 1, got {d_e}")
    if backbone not in ("mf", "lightgcn"):
        raise ValueError(f"unknown backbone {backbone!r}")
    rng = np.random.default_rng(seed)
    bound_u = np.sqrt(6.0 / (user_count + d_e))
    bound_i = np.sqrt(6.0 / (item_count + d_e))
    weights = np.empty((user_count + item_count, d_e))
    weights[:user_count] = rng.uniform(-bound_u, bound_u, size=(user_count, d_e))
    weights[user_count:] = rng.uniform(-bound_i, bound_i, size=(item_count, d_e))
    return ModelState(weights, user_count, item_count, backbone, layers)


def build_norm_adj(ds: InteractionDataset) -> sp.csr_matrix:
    """Symmetric-normalized bipartite adjacency over users and items."""
    n = ds.user_count + ds.item_count
    rows = np.fromiter((e.user for e in ds.train), dtype=np.int64, count=len(ds.train))
    cols = np.fromiter(
        (ds.user_count + e.item for e in ds.train), dtype=np.int64, count=len(ds.train)
    )
    data = np.ones(len(ds.train))
    A = sp.csr_matrix(
        (np.concatenate([data, data]), (np.concatenate([rows, cols]), np.concatenate([cols, rows]))),
        shape=(n, n),
    )
    deg = np.asarray(A.sum(axis=1)).ravel()
    inv_sqrt = np.zeros_like(deg)
    nz = deg > 0
    inv_sqrt[nz] = 1.0 / np.sqrt(deg[nz])
    D = sp.diags(inv_sqrt)
    return sp.csr_matrix(D @ A @ D)


def _propagate_stacked(
    weights: np.ndarray, backbone: str, layers: int, adj: sp.csr_matrix | None
) -> np.ndarray:
    if backbone == "mf" or layers == 0 or adj is None:
        return weights.copy()
    acc = weights.copy()
    x = weights
    for _ in range(layers):
        x = adj @ x
        acc += x
    return acc / (layers + 1)


def propagate(state: ModelState, adj: sp.csr_matrix | None) -> tuple[np.ndarray, np.ndarray]:
    """Layer-mean graph propagation (identity for MF)."""
    out = _propagate_stacked(state.weights, state.backbone, state.layers, adj)
    return out[: state.user_count], out[state.user_count :]


def score(state: ModelState, user: int, item: int, adj: sp.csr_matrix | None = None) -> float:
    user_out, item_out = propagate(state, adj)
    return float(user_out[user] @ item_out[item])


@dataclass(frozen=True)
class BprBatch:
    users: np.ndarray
    pos_items: np.ndarray
    neg_items: np.ndarray
    lambdas: np.ndarray  # mixup coefficients, 0 for plain negatives

    def __post_init__(self) -> None:
        if self.users.size == 0:
            raise ValueError("batch must be non-empty")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


@dataclass(frozen=True)
class BprLoss:
    total: float
    rank: float
    reg: float
    grad: np.ndarray  # wrt the stacked layer-0 weights


def bpr_loss_and_grads(
    state: ModelState, batch: BprBatch, adj: sp.csr_matrix | None, l2: float
) -> BprLoss:
    """Sum of -log sigma(s+ - s-) plus L2 on batch-touched layer-0 rows.

    The negative's embedding is the mixup combination of the propagated
    positive and negative vectors; lambdas are treated as constants.
    """
    n_u = state.user_count
    P = _propagate_stacked(state.weights, state.backbone, state.layers, adj)
    u_idx = batch.users
    p_idx = n_u + batch.pos_items
    n_idx = n_u + batch.neg_items
    lam = batch.lambdas[:, None]

    pu, qp, qn = P[u_idx], P[p_idx], P[n_idx]
    mixed = lam * qp + (1.0 - lam) * qn
    s = np.einsum("bd,bd->b", pu, qp - mixed)
    rank_loss = float(np.logaddexp(0.0, -s).sum())
    g = -_sigmoid(-s)  # d(rank_loss)/ds

    G_P = np.zeros_like(P)
    np.add.at(G_P, u_idx, g[:, None] * (qp - mixed))
    np.add.at(G_P, p_idx, (g[:, None] * (1.0 - lam)) * pu)
    np.add.at(G_P, n_idx, (-g[:, None] * (1.0 - lam)) * pu)
    # Propagation is symmetric and linear; the pullback is the same operator.
    grad = _propagate_stacked(G_P, state.backbone, state.layers, adj)

    E0 = state.weights
    reg_loss = l2 * float(
        (E0[u_idx] ** 2).sum() + (E0[p_idx] ** 2).sum() + (E0[n_idx] ** 2).sum()
    )
    for idx in (u_idx, p_idx, n_idx):
        np.add.at(grad, idx, 2.0 * l2 * E0[idx])
    return BprLoss(rank_loss + reg_loss, rank_loss, reg_loss, grad)


def bpr_step(
    state: ModelState, batch: BprBatch, cfg: TrainConfig, adj: sp.csr_matrix | None
) -> float:
    """One Adam update in place; returns the batch loss."""
    loss = bpr_loss_and_grads(state, batch, adj, cfg.l2)
    if not np.isfinite(loss.total):
        raise NonFiniteLossError(
            f"non-finite loss at step {state.step}: rank={loss.rank} reg={loss.reg} "
            f"max|w|={np.abs(state.weights).max():.3e}"
        )
    state.step += 1
    t = state.step
    state.adam_m *= ADAM_BETA1
    state.adam_m += (1.0 - ADAM_BETA1) * loss.grad
    state.adam_v *= ADAM_BETA2
    state.adam_v += (1.0 - ADAM_BETA2) * loss.grad**2
    m_hat = state.adam_m / (1.0 - ADAM_BETA1**t)
    v_hat = state.adam_v / (1.0 - ADAM_BETA2**t)
    state.weights -= cfg.lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return loss.total


# ---------------------------------------------------------------------------
# Training loop with early stopping on validation Recall@K.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class EpochLog:
    epoch: int
    loss: float  # mean per-pair loss
    recall: float | None
    ndcg: float | None
    seconds: float


@dataclass
class TrainResult:
    state: ModelState  # best-validation weights (final weights if no validation)
    history: list[EpochLog]
    best_epoch: int
    best_recall: float | None

    def propagated(self, ds: InteractionDataset) -> tuple[np.ndarray, np.ndarray]:
        adj = build_norm_adj(ds) if self.state.backbone == "lightgcn" else None
        return propagate(self.state, adj)


def train_model(
    ds: InteractionDataset,
    cfg: TrainConfig,
    sampler: BatchSampler,
    backbone: str = "lightgcn",
    layers: int = 3,
    d_e: int = 64,
) -> TrainResult:
    state = init_params(ds.user_count, ds.item_count, d_e, cfg.seed, backbone, layers)
    adj = build_norm_adj(ds) if backbone == "lightgcn" else None
    shuffle_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    sampler_rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(2,)))

    pairs_u = np.fromiter((e.user for e in ds.train), dtype=np.int64, count=len(ds.train))
    pairs_i = np.fromiter((e.item for e in ds.train), dtype=np.int64, count=len(ds.train))
    has_val = any(True for _ in ds.validation)

    history: list[EpochLog] = []
    best_state = state.copy()
    best_recall: float | None = None
    best_epoch = 0
    stale = 0

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        perm = shuffle_rng.permutation(len(ds.train))
        epoch_loss = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            sel = perm[start : start + cfg.batch_size]
            users, pos = pairs_u[sel], pairs_i[sel]
            user_out, item_out = propagate(state, adj)
            drawn = sampler.draw(users, pos, user_out, item_out, sampler_rng)
            batch = BprBatch(users, pos, drawn.neg_items, drawn.lambdas)
            epoch_loss += bpr_step(state, batch, cfg, adj)
        if not np.isfinite(state.weights).all():
            raise NonFiniteLossError(f"non-finite embeddings after epoch {epoch}")

        recall = ndcg = None
        if has_val and epoch % cfg.eval_every == 0:
            user_out, item_out = propagate(state, adj)
            report = evaluate_ranking(user_out, item_out, ds, ks=(cfg.eval_k,), split="validation")
            recall, ndcg = report.recall[cfg.eval_k], report.ndcg[cfg.eval_k]
            if best_recall is None or recall > best_recall:
                best_recall, best_epoch, stale = recall, epoch, 0
                best_state = state.copy()
            else:
                stale += 1
        history.append(
            EpochLog(epoch, epoch_loss / len(ds.train), recall, ndcg, time.perf_counter() - t0)
        )
        if has_val and stale >= cfg.patience:
            logger.info("early stop at epoch %d (best %s at %d)", epoch, best_recall, best_epoch)
            break

    if not has_val:
        best_state, best_epoch = state, len(history)
    return TrainResult(best_state, history, best_epoch, best_recall)


@dataclass
class PretrainResult:
    """Trained recommender used both as embedding source and candidate ranker."""

    state: ModelState
    user_out: np.ndarray
    item_out: np.ndarray

    @property
    def item_embeddings(self) -> np.ndarray:
        return self.item_out


def pretrain_semantic(
    ds: InteractionDataset,
    cfg: TrainConfig,
    backbone: str = "lightgcn",
    layers: int = 3,
    d_e: int = 64,
) -> PretrainResult:
    """Train with uniform negatives; the propagated item table is the
    semantic embedding source."""
    if cfg.epochs == 0:
        state = init_params(ds.user_count, ds.item_count, d_e, cfg.seed, backbone, layers)
        adj = build_norm_adj(ds) if backbone == "lightgcn" else None
        user_out, item_out = propagate(state, adj)
        return PretrainResult(state, user_out, item_out)
    sampler = BatchSampler(SamplerSpec("rns"), ds)
    result = train_model(ds, cfg, sampler, backbone, layers, d_e)
    user_out, item_out = result.propagated(ds)
    return PretrainResult(result.state, user_out, item_out)


# ---------------------------------------------------------------------------
# Checkpoints and metric logs.
# ---------------------------------------------------------------------------


def save_checkpoint(
    path: str | Path, state: ModelState, fingerprint: str | None = None
) -> None:
    header = {
        "backbone": state.backbone,
        "layers": state.layers,
        "user_count": state.user_count,
        "item_count": state.item_count,
        "dim": state.dim,
        "step": state.step,
        "fingerprint": fingerprint,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with Path(path).open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        fh.write(np.ascontiguousarray(state.user_emb, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(state.item_emb, dtype="<f8").tobytes())


def load_checkpoint(
    path: str | Path, expected_fingerprint: str | None = None
) -> ModelState:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack_from("<Q", raw, len(CHECKPOINT_MAGIC))
    off = len(CHECKPOINT_MAGIC) + 8
    header = json.loads(raw[off : off + hlen].decode("utf-8"))
    if expected_fingerprint is not None and header["fingerprint"] != expected_fingerprint:
        raise ValueError(
            f"fingerprint mismatch in {path}: artifact {header['fingerprint']} "
            f"vs config {expected_fingerprint}"
        )
    off += hlen
    n_u, n_i, d = header["user_count"], header["item_count"], header["dim"]
    table = np.frombuffer(raw, dtype="<f8", offset=off, count=(n_u + n_i) * d)
    state = ModelState(
        table.reshape(n_u + n_i, d).copy(), n_u, n_i, header["backbone"], header["layers"]
    )
    state.step = header["step"]
    return state


def write_metrics_csv(
    path: str | Path, history: Sequence[EpochLog], eval_k: int, fingerprint: str | None = None
) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        if fingerprint:
            fh.write(f"# fingerprint={fingerprint}\n")
        fh.write(f"epoch,loss,recall@{eval_k},ndcg@{eval_k}\n")
        for row in history:
            rec = "" if row.recall is None else f"{row.recall:.6f}"
            ndc = "" if row.ndcg is None else f"{row.ndcg:.6f}"
            fh.write(f"{row.epoch},{row.loss:.6f},{rec},{ndc}\n")


def write_timing_csv(
    path: str | Path, history: Sequence[EpochLog], fingerprint: str | None = None
) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        if fingerprint:
            fh.write(f"# fingerprint={fingerprint}\n")
        fh.write("epoch,seconds\n")
        for row in history:
            fh.write(f"{row.epoch},{row.seconds:.4f}\n")
