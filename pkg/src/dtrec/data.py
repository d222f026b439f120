"""Interaction data handling: loading, k-core filtering, splitting, noise injection.

All functions are pure: they take immutable inputs and return new objects, so
they are safe to call from multiple threads.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, NamedTuple, Sequence

import numpy as np

logger = logging.getLogger(__name__)


class Interaction(NamedTuple):
    user: int
    item: int
    timestamp: int | None = None

    @property
    def pair(self) -> tuple[int, int]:
        return (self.user, self.item)


class ParseError(ValueError):
    """Raised when an interaction file contains a malformed line."""


class KCoreEliminatedError(ValueError):
    """Raised when k-core filtering removes every interaction."""


def _pairs(edges: Iterable[Interaction]) -> set[tuple[int, int]]:
    return {(e.user, e.item) for e in edges}


@dataclass
class InteractionDataset:
    """Train/validation/test splits over dense 0-based user and item ids.

    ``user_pos`` maps each user to the sorted item ids of their train
    interactions; it is derived in ``__post_init__`` and must not be set
    by callers.
    """

    user_count: int
    item_count: int
    train: tuple[Interaction, ...]
    validation: tuple[Interaction, ...]
    test: tuple[Interaction, ...]
    user_pos: dict[int, tuple[int, ...]] = field(init=False)

    def __post_init__(self) -> None:
        by_user: dict[int, list[int]] = {}
        for e in self.train:
            by_user.setdefault(e.user, []).append(e.item)
        self.user_pos = {u: tuple(sorted(items)) for u, items in sorted(by_user.items())}
        self._train_pairs = frozenset(_pairs(self.train))
        self._heldout_pairs = frozenset(_pairs(self.validation) | _pairs(self.test))

    @property
    def train_pairs(self) -> frozenset[tuple[int, int]]:
        return self._train_pairs

    @property
    def heldout_pairs(self) -> frozenset[tuple[int, int]]:
        return self._heldout_pairs

    def positives_of(self, user: int) -> tuple[int, ...]:
        return self.user_pos.get(user, ())

    def items_by_user(self, split: str) -> dict[int, set[int]]:
        edges = {"train": self.train, "validation": self.validation, "test": self.test}[split]
        out: dict[int, set[int]] = {}
        for e in edges:
            out.setdefault(e.user, set()).add(e.item)
        return out

    def check_invariants(self) -> None:
        tr, va, te = _pairs(self.train), _pairs(self.validation), _pairs(self.test)
        if tr & va or tr & te or va & te:
            raise AssertionError("splits are not pairwise disjoint")
        for e in self.train + self.validation + self.test:
            if not (0 <= e.user < self.user_count and 0 <= e.item < self.item_count):
                raise AssertionError(f"id out of range: {e}")


@dataclass(frozen=True)
class NoiseSpec:
    """How many train positives to remove to simulate false negatives."""

    fraction: float | None = None
    count: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if (self.fraction is None) == (self.count is None):
            raise ValueError("specify exactly one of fraction or count")
        if self.fraction is not None and not 0.0 < self.fraction < 1.0:
            raise ValueError(f"fraction must be in (0, 1), got {self.fraction}")
        if self.count is not None and self.count <= 0:
            raise ValueError(f"count must be positive, got {self.count}")

    def resolve(self, train_size: int) -> int:
        n = self.count if self.count is not None else int(round(self.fraction * train_size))
        if n >= train_size:
            raise ValueError(f"removal {n} >= train size {train_size}")
        return n


@dataclass(frozen=True)
class PlantedFnSet:
    """Interactions removed from train to act as known false negatives."""

    pairs: frozenset[tuple[int, int]]

    def by_user(self) -> dict[int, set[int]]:
        out: dict[int, set[int]] = {}
        for u, i in self.pairs:
            out.setdefault(u, set()).add(i)
        return out


@dataclass(frozen=True)
class LoadResult:
    interactions: tuple[Interaction, ...]
    user_ids: tuple[str, ...]  # dense id -> raw id
    item_ids: tuple[str, ...]


def load_interactions(path: str | Path, format: str = "tsv_triples") -> LoadResult:
    """Read ``user<TAB>item[<TAB>timestamp]`` lines into dense-id interactions.

    Duplicate (user, item) pairs collapse to one, keeping the earliest
    timestamp. Lines starting with ``#`` are skipped so our own outputs can
    round-trip through this loader.
    """
    if format != "tsv_triples":
        raise ValueError(f"unsupported format: {format}")
    path = Path(path)
    user_map: dict[str, int] = {}
    item_map: dict[str, int] = {}
    seen: dict[tuple[int, int], int | None] = {}
    order: list[tuple[int, int]] = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            if len(fields) not in (2, 3) or not fields[0] or not fields[1]:
                raise ParseError(f"{path}:{lineno}: expected user<TAB>item[<TAB>timestamp]")
            ts: int | None = None
            if len(fields) == 3:
                try:
                    ts = int(fields[2])
                except ValueError as exc:
                    raise ParseError(f"{path}:{lineno}: bad timestamp {fields[2]!r}") from exc
            u = user_map.setdefault(fields[0], len(user_map))
            i = item_map.setdefault(fields[1], len(item_map))
            if (u, i) not in seen:
                seen[(u, i)] = ts
                order.append((u, i))
            else:
                prev = seen[(u, i)]
                if ts is not None and (prev is None or ts < prev):
                    seen[(u, i)] = ts
    if not order:
        raise ParseError(f"{path}: no interactions found")
    edges = tuple(Interaction(u, i, seen[(u, i)]) for u, i in order)
    return LoadResult(edges, tuple(user_map), tuple(item_map))


@dataclass(frozen=True)
class KCoreResult:
    interactions: tuple[Interaction, ...]  # re-densified ids
    user_index: tuple[int, ...]  # new dense id -> old id
    item_index: tuple[int, ...]


def k_core_filter(edges: Sequence[Interaction], k: int) -> KCoreResult:
    """Keep the maximal subgraph where every user and item has degree >= k.

    Prunes iteratively to a fixed point, then re-densifies the surviving ids.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    current = list(edges)
    while True:
        u_deg: dict[int, int] = {}
        i_deg: dict[int, int] = {}
        for e in current:
            u_deg[e.user] = u_deg.get(e.user, 0) + 1
            i_deg[e.item] = i_deg.get(e.item, 0) + 1
        kept = [e for e in current if u_deg[e.user] >= k and i_deg[e.item] >= k]
        if len(kept) == len(current):
            break
        current = kept
    if not current:
        raise KCoreEliminatedError(f"dataset eliminated by {k}-core filtering")
    users = sorted({e.user for e in current})
    items = sorted({e.item for e in current})
    u_remap = {old: new for new, old in enumerate(users)}
    i_remap = {old: new for new, old in enumerate(items)}
    out = tuple(Interaction(u_remap[e.user], i_remap[e.item], e.timestamp) for e in current)
    return KCoreResult(out, tuple(users), tuple(items))


def split(
    edges: Sequence[Interaction],
    ratios: tuple[int, int, int] = (8, 1, 1),
    seed: int = 0,
) -> InteractionDataset:
    """Globally shuffle interactions into train/validation/test.

    Validation and test sizes are floored, so rounding remainders go to
    train. Users left without train positives after the shuffle get their
    held-out interactions pulled back into train (logged).
    """
    if len(ratios) != 3 or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError(f"bad ratios {ratios}")
    if not edges:
        raise ValueError("cannot split an empty interaction list")
    n = len(edges)
    total = sum(ratios)
    n_val = n * ratios[1] // total
    n_test = n * ratios[2] // total
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    shuffled = [edges[j] for j in perm]
    val = shuffled[:n_val]
    test = shuffled[n_val : n_val + n_test]
    train = shuffled[n_val + n_test :]

    train_users = {e.user for e in train}
    repaired = 0
    kept_val, kept_test = [], []
    for bucket, kept in ((val, kept_val), (test, kept_test)):
        for e in bucket:
            if e.user not in train_users:
                train.append(e)
                train_users.add(e.user)
                repaired += 1
            else:
                kept.append(e)
    if repaired:
        logger.info("split: moved %d held-out interactions back to train for empty users", repaired)

    user_count = max(e.user for e in edges) + 1
    item_count = max(e.item for e in edges) + 1
    return InteractionDataset(user_count, item_count, tuple(train), tuple(kept_val), tuple(kept_test))


def inject_false_negatives(
    ds: InteractionDataset, spec: NoiseSpec
) -> tuple[InteractionDataset, PlantedFnSet]:
    """Remove a random subset of train positives, never emptying a user."""
    n_remove = spec.resolve(len(ds.train))
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(len(ds.train))
    remaining = {u: len(items) for u, items in ds.user_pos.items()}
    removed: list[Interaction] = []
    for j in perm:
        if len(removed) == n_remove:
            break
        e = ds.train[j]
        if remaining[e.user] > 1:
            remaining[e.user] -= 1
            removed.append(e)
    if len(removed) < n_remove:
        raise ValueError(
            f"cannot remove {n_remove} interactions without emptying a user "
            f"(only {len(removed)} removable)"
        )
    removed_pairs = _pairs(removed)
    new_train = tuple(e for e in ds.train if (e.user, e.item) not in removed_pairs)
    noisy = InteractionDataset(ds.user_count, ds.item_count, new_train, ds.validation, ds.test)
    return noisy, PlantedFnSet(frozenset(removed_pairs))


@dataclass(frozen=True)
class AugmentAudit:
    added: int
    filtered_leakage: int
    filtered_duplicate: int


def augment_with_positives(
    ds: InteractionDataset, detected: Mapping[int, Iterable[int]]
) -> tuple[InteractionDataset, AugmentAudit]:
    """Union detected false negatives into the train set.

    Pairs present in validation or test are dropped (leakage guard), as are
    pairs already in train; the audit reports both counts.
    """
    added: list[Interaction] = []
    leakage = duplicate = 0
    for u in sorted(detected):
        for i in sorted(set(detected[u])):
            if not (0 <= u < ds.user_count and 0 <= i < ds.item_count):
                raise ValueError(f"detected pair ({u}, {i}) out of range")
            if (u, i) in ds.heldout_pairs:
                leakage += 1
            elif (u, i) in ds.train_pairs:
                duplicate += 1
            else:
                added.append(Interaction(u, i, None))
    augmented = InteractionDataset(
        ds.user_count, ds.item_count, ds.train + tuple(added), ds.validation, ds.test
    )
    return augmented, AugmentAudit(len(added), leakage, duplicate)


# ---------------------------------------------------------------------------
# Persistence: sorted TSV splits plus a manifest, so runs are re-runnable.
# ---------------------------------------------------------------------------


def write_edges(path: Path, edges: Iterable[Interaction], fingerprint: str | None) -> None:
    with path.open("w", encoding="utf-8") as fh:
        if fingerprint:
            fh.write(f"# fingerprint={fingerprint}\n")
        for e in sorted(edges, key=lambda e: (e.user, e.item)):
            if e.timestamp is None:
                fh.write(f"{e.user}\t{e.item}\n")
            else:
                fh.write(f"{e.user}\t{e.item}\t{e.timestamp}\n")


def read_edges(path: Path) -> list[Interaction]:
    out: list[Interaction] = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            fields = line.split("\t")
            ts = int(fields[2]) if len(fields) == 3 else None
            out.append(Interaction(int(fields[0]), int(fields[1]), ts))
    return out


def save_dataset(
    ds: InteractionDataset,
    out_dir: str | Path,
    fingerprint: str,
    *,
    planted: PlantedFnSet | None = None,
    extra: Mapping[str, object] | None = None,
) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_edges(out / "train.tsv", ds.train, fingerprint)
    write_edges(out / "valid.tsv", ds.validation, fingerprint)
    write_edges(out / "test.tsv", ds.test, fingerprint)
    manifest: dict[str, object] = {
        "fingerprint": fingerprint,
        "user_count": ds.user_count,
        "item_count": ds.item_count,
        "train_size": len(ds.train),
        "valid_size": len(ds.validation),
        "test_size": len(ds.test),
    }
    if planted is not None:
        planted_edges = [Interaction(u, i, None) for u, i in planted.pairs]
        write_edges(out / "planted_fn.tsv", planted_edges, fingerprint)
        manifest["planted_fn_size"] = len(planted.pairs)
    if extra:
        manifest.update(extra)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def load_dataset(out_dir: str | Path, expected_fingerprint: str | None = None) -> InteractionDataset:
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    if expected_fingerprint is not None and manifest["fingerprint"] != expected_fingerprint:
        raise ValueError(
            f"fingerprint mismatch in {out / 'manifest.json'}: "
            f"artifact {manifest['fingerprint']} vs config {expected_fingerprint}"
        )
    return InteractionDataset(
        manifest["user_count"],
        manifest["item_count"],
        tuple(read_edges(out / "train.tsv")),
        tuple(read_edges(out / "valid.tsv")),
        tuple(read_edges(out / "test.tsv")),
    )


def load_planted(out_dir: str | Path) -> PlantedFnSet:
    edges = read_edges(Path(out_dir) / "planted_fn.tsv")
    return PlantedFnSet(frozenset((e.user, e.item) for e in edges))
