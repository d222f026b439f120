"""Top-K ranking metrics over a full item ranking with train-item masking."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .data import InteractionDataset


@dataclass(frozen=True)
class MetricReport:
    recall: dict[int, float]
    ndcg: dict[int, float]
    users_evaluated: int
    meta: dict[str, object] = field(default_factory=dict)


def rank_items(
    user_out: np.ndarray,
    item_out: np.ndarray,
    user: int,
    mask: Iterable[int],
    k: int,
) -> np.ndarray:
    """Top-k item ids by score with masked items excluded; ties to lowest id."""
    scores = item_out @ user_out[user]
    mask = np.fromiter(mask, dtype=np.int64) if not isinstance(mask, np.ndarray) else mask
    if mask.size:
        scores = scores.copy()
        scores[mask] = -np.inf
    if k > scores.size - mask.size:
        raise ValueError(f"k={k} exceeds {scores.size - mask.size} unmasked items")
    order = np.argsort(-scores, kind="stable")  # stable: equal scores keep id order
    return order[:k]


def recall_at_k(topk: Sequence[int], relevant: set[int], k: int) -> float:
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits = sum(1 for i in topk[:k] if i in relevant)
    return hits / len(relevant)


def ndcg_at_k(topk: Sequence[int], relevant: set[int], k: int) -> float:
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    dcg = 0.0
    for rank, item in enumerate(topk[:k], start=1):
        if item in relevant:
            dcg += 1.0 / math.log2(rank + 1)
    idcg = sum(1.0 / math.log2(r + 1) for r in range(1, min(k, len(relevant)) + 1))
    return dcg / idcg


def evaluate_ranking(
    user_out: np.ndarray,
    item_out: np.ndarray,
    ds: InteractionDataset,
    ks: Sequence[int] = (10, 20),
    split: str = "test",
) -> MetricReport:
    """Average Recall@K / NDCG@K over users with a non-empty target split.

    Each user's train positives (including any augmented ones) are masked
    out of the ranking before the top-K cut.
    """
    targets = ds.items_by_user(split)
    max_k = max(ks)
    recall_sums = {k: 0.0 for k in ks}
    ndcg_sums = {k: 0.0 for k in ks}
    evaluated = 0
    for u in sorted(targets):
        relevant = targets[u]
        scores = item_out @ user_out[u]  # per-user keeps memory flat
        pos = ds.positives_of(u)
        if pos:
            scores[np.asarray(pos)] = -np.inf
        topk = np.argsort(-scores, kind="stable")[:max_k]
        evaluated += 1
        for k in ks:
            recall_sums[k] += recall_at_k(topk, relevant, k)
            ndcg_sums[k] += ndcg_at_k(topk, relevant, k)
    if evaluated == 0:
        raise ValueError(f"no users with non-empty {split} sets")
    return MetricReport(
        recall={k: recall_sums[k] / evaluated for k in ks},
        ndcg={k: ndcg_sums[k] / evaluated for k in ks},
        users_evaluated=evaluated,
    )


# ---------------------------------------------------------------------------
# Result persistence.
# ---------------------------------------------------------------------------

RESULT_FIELDS = ["run_id", "dataset", "sampler", "seed", "recall@10", "ndcg@10", "recall@20", "ndcg@20"]


def write_results_csv(
    path: str | Path, rows: Sequence[Mapping[str, object]], fingerprint: str | None = None
) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        if fingerprint:
            fh.write(f"# fingerprint={fingerprint}\n")
        writer = csv.DictWriter(fh, fieldnames=RESULT_FIELDS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row.get(k, "") for k in RESULT_FIELDS})


def aggregate_results(rows: Sequence[Mapping[str, object]]) -> dict[str, dict[str, float]]:
    """Mean/std per metric column over the given per-seed rows."""
    out: dict[str, dict[str, float]] = {}
    for col in RESULT_FIELDS[4:]:
        vals = np.array([float(r[col]) for r in rows if r.get(col) not in (None, "")])
        if vals.size:
            out[col] = {"mean": float(vals.mean()), "std": float(vals.std())}
    return out


def write_aggregate_json(
    path: str | Path, rows: Sequence[Mapping[str, object]], extra: Mapping[str, object] | None = None
) -> None:
    payload: dict[str, object] = {"seeds": len(rows), "metrics": aggregate_results(rows)}
    if extra:
        payload.update(extra)
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
