"""Offline false-negative identification.

Builds per-user candidate sets from a pretrained ranker, renders dual-code
prompts, runs a pluggable classifier (HTTP chat-completion endpoint,
deterministic path-similarity rule, or scripted mock), and converts the
positively-labeled candidates into train positives behind a leakage guard.
"""

from __future__ import annotations

import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Collection, Mapping, NamedTuple, Sequence

import numpy as np
import requests

from .data import Interaction, InteractionDataset, PlantedFnSet, augment_with_positives
from .tree import DualCodes, PathCodeTable, format_code

logger = logging.getLogger(__name__)

LABEL_POSITIVE = "positive"
LABEL_NEGATIVE = "negative"

SYSTEM_PROMPT = (
    "You are a sample classification module for a recommender system. "
    "For one user you receive the user's historically interacted items followed by "
    "candidate items. Every item is described only by two hierarchical path encodings: "
    "a collaborative-structure path (c:) and a latent-semantic path (s:). "
    "Classify each candidate item as \"positive\" (the user would likely interact "
    "with it) or \"negative\" based solely on path-encoding similarity, where a "
    "longer shared prefix between paths means higher similarity. "
    'Reply with a JSON array where each element is of the form '
    '{"item_id": <int>, "label": "positive"|"negative"}.'
)


class Verdict(NamedTuple):
    item: int
    label: str


class ClassifierError(RuntimeError):
    """A user's classification failed after retries."""


@dataclass(frozen=True)
class CandidateSet:
    user: int
    items: tuple[int, ...]  # ranked by pretrained score, descending


@dataclass(frozen=True)
class FnPrompt:
    system_text: str
    user_payload: str
    user: int
    history_items: tuple[int, ...]
    candidate_items: tuple[int, ...]


@dataclass(frozen=True)
class ClassifyOutcome:
    verdicts: tuple[Verdict, ...]
    parse_gaps: int = 0


def build_candidate_sets(
    user_out: np.ndarray,
    item_out: np.ndarray,
    ds: InteractionDataset,
    limit: int = 20,
) -> dict[int, CandidateSet]:
    """Top-`limit` unobserved items per user by pretrained score, ties by id."""
    if limit < 1:
        raise ValueError(f"limit must be >= 1, got {limit}")
    out: dict[int, CandidateSet] = {}
    short_users = 0
    for u in range(ds.user_count):
        scores = item_out @ user_out[u]
        pos = ds.positives_of(u)
        if pos:
            scores[np.asarray(pos)] = -np.inf
        n_unobserved = ds.item_count - len(pos)
        take = min(limit, n_unobserved)
        if take < limit:
            short_users += 1
        ranked = np.argsort(-scores, kind="stable")[:take]
        out[u] = CandidateSet(u, tuple(int(i) for i in ranked))
    if short_users:
        logger.info("build_candidate_sets: %d users had fewer than %d unobserved items", short_users, limit)
    return out


def _order_history(history: Sequence[Interaction | int], trunc: int) -> tuple[int, ...]:
    # Most recent by timestamp first; items without a timestamp sort last,
    # and ties break toward the lowest item id.
    entries = []
    for h in history:
        if isinstance(h, Interaction):
            entries.append((h.item, h.timestamp))
        else:
            entries.append((int(h), None))
    entries.sort(key=lambda e: (-(e[1] if e[1] is not None else float("-inf")), e[0]))
    return tuple(item for item, _ in entries[:trunc])


def build_prompt(
    user: int,
    codes: DualCodes,
    history: Sequence[Interaction | int],
    candidates: CandidateSet,
    trunc: int = 30,
) -> FnPrompt:
    """Render one prompt covering all of the user's candidates."""
    if not history:
        raise ValueError(f"user {user} has an empty history; cannot build a prompt")
    kept = _order_history(history, trunc)

    def line(i: int) -> str:
        return f"item {i}: c:{format_code(codes.collab[i])} s:{format_code(codes.semantic[i])}"

    payload = [f"User {user} interacted items:"]
    payload.extend(f"- {line(i)}" for i in kept)
    payload.append("Candidate items:")
    payload.extend(f"- {line(i)}" for i in candidates.items)
    payload.append("Classify each candidate item.")
    return FnPrompt(
        system_text=SYSTEM_PROMPT,
        user_payload="\n".join(payload),
        user=user,
        history_items=kept,
        candidate_items=candidates.items,
    )


# ---------------------------------------------------------------------------
# Classifier bindings.
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LlmEndpointConfig:
    url: str
    model: str
    temperature: float = 0.0
    timeout: float = 60.0
    max_retries: int = 3
    backoff: float = 0.5
    concurrency: int = 8
    token_env: str = "DTREC_LLM_TOKEN"


RETRYABLE_STATUS = {429, 500, 502, 503, 504}


def _parse_verdict_array(text: str, prompted: Collection[int]) -> list[Verdict] | None:
    """First JSON array of {"item_id", "label"} records found in the text."""
    decoder = json.JSONDecoder()
    starts = [i for i, ch in enumerate(text) if ch == "["]
    for start in starts:
        try:
            value, _ = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            continue
        if not isinstance(value, list):
            continue
        verdicts = []
        for rec in value:
            if not isinstance(rec, dict):
                continue
            try:
                item = int(rec["item_id"])
            except (KeyError, TypeError, ValueError):
                continue
            label = rec.get("label")
            if label not in (LABEL_POSITIVE, LABEL_NEGATIVE):
                continue
            if item in prompted:
                verdicts.append(Verdict(item, label))
        if verdicts:
            return verdicts
    return None


class HttpLlmClassifier:
    """Chat-completion endpoint binding with bounded retries.

    Unparseable responses and candidates missing from the reply default to
    "negative" (counted as parse gaps); retries use exponential backoff and
    an exhausted budget raises ClassifierError for that user only.
    """

    def __init__(self, cfg: LlmEndpointConfig, session: requests.Session | None = None):
        self.cfg = cfg
        self.session = session or requests.Session()
        self.provenance = f"llm:{cfg.model}"

    def _request(self, prompt: FnPrompt) -> str:
        body = {
            "model": self.cfg.model,
            "messages": [
                {"role": "system", "content": prompt.system_text},
                {"role": "user", "content": prompt.user_payload},
            ],
            "temperature": self.cfg.temperature,
        }
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.cfg.token_env)
        if token:
            headers["Authorization"] = f"Bearer {token}"
        last_error: Exception | None = None
        for attempt in range(self.cfg.max_retries + 1):
            if attempt:
                time.sleep(self.cfg.backoff * 2 ** (attempt - 1))
            try:
                resp = self.session.post(
                    self.cfg.url, json=body, headers=headers, timeout=self.cfg.timeout
                )
            except requests.RequestException as exc:
                last_error = exc
                continue
            if resp.status_code in RETRYABLE_STATUS:
                last_error = ClassifierError(f"status {resp.status_code}")
                continue
            if resp.status_code != 200:
                raise ClassifierError(f"endpoint returned status {resp.status_code}")
            try:
                return resp.json()["choices"][0]["message"]["content"]
            except (ValueError, KeyError, IndexError, TypeError) as exc:
                raise ClassifierError(f"malformed completion body: {exc}") from exc
        raise ClassifierError(f"retries exhausted for user {prompt.user}: {last_error}")

    def classify(self, prompt: FnPrompt) -> ClassifyOutcome:
        content = self._request(prompt)
        prompted = set(prompt.candidate_items)
        parsed = _parse_verdict_array(content, prompted)
        gaps = 0
        by_item: dict[int, str] = {}
        if parsed is None:
            logger.warning("user %d: no parseable verdict array, defaulting all to negative", prompt.user)
        else:
            for v in parsed:
                by_item.setdefault(v.item, v.label)
        verdicts = []
        for i in prompt.candidate_items:
            if i not in by_item:
                gaps += 1
            verdicts.append(Verdict(i, by_item.get(i, LABEL_NEGATIVE)))
        return ClassifyOutcome(tuple(verdicts), gaps)


def classify_llm(prompt: FnPrompt, cfg: LlmEndpointConfig) -> tuple[Verdict, ...]:
    return HttpLlmClassifier(cfg).classify(prompt).verdicts


def rule_fni(
    codes: DualCodes | tuple[PathCodeTable, PathCodeTable],
    history: Sequence[int],
    candidates: Sequence[int],
    top_n: int = 10,
) -> set[int]:
    """Deterministic heuristic: rank candidates by summed dual-path similarity
    to the history items and keep the top_n (ties toward the lowest id)."""
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    if isinstance(codes, DualCodes):
        table_c, table_s = PathCodeTable(codes.collab), PathCodeTable(codes.semantic)
    else:
        table_c, table_s = codes
    cand = np.asarray(candidates, dtype=np.int64)
    hist = np.asarray(history, dtype=np.int64)
    sims = table_c.similarity(cand[:, None], hist[None, :]) + table_s.similarity(
        cand[:, None], hist[None, :]
    )
    totals = sims.sum(axis=1)
    order = np.lexsort((cand, -totals))[:top_n]
    return {int(cand[j]) for j in order}


class RuleFniClassifier:
    provenance = "rule"

    def __init__(self, codes: DualCodes, top_n: int = 10):
        self.tables = (PathCodeTable(codes.collab), PathCodeTable(codes.semantic))
        self.top_n = top_n

    def classify(self, prompt: FnPrompt) -> ClassifyOutcome:
        chosen = rule_fni(self.tables, prompt.history_items, prompt.candidate_items, self.top_n)
        verdicts = tuple(
            Verdict(i, LABEL_POSITIVE if i in chosen else LABEL_NEGATIVE)
            for i in prompt.candidate_items
        )
        return ClassifyOutcome(verdicts)


class MockClassifier:
    """Scripted binding: labels exactly the scripted (user, item) pairs positive."""

    provenance = "mock"

    def __init__(self, script: Mapping[int, Collection[int]]):
        self.script = {int(u): {int(i) for i in items} for u, items in script.items()}

    def classify(self, prompt: FnPrompt) -> ClassifyOutcome:
        wanted = self.script.get(prompt.user, set())
        verdicts = tuple(
            Verdict(i, LABEL_POSITIVE if i in wanted else LABEL_NEGATIVE)
            for i in prompt.candidate_items
        )
        return ClassifyOutcome(verdicts)


# ---------------------------------------------------------------------------
# Identification pipeline and reporting.
# ---------------------------------------------------------------------------


@dataclass
class FnReport:
    provenance: str
    detected: dict[int, set[int]]
    prompted_users: int = 0
    prompted_candidates: int = 0
    detected_count: int = 0
    skipped_empty_history: int = 0
    skipped_no_candidates: int = 0
    parse_gaps: int = 0
    failed_users: list[int] = field(default_factory=list)
    classifier_seconds: float = 0.0
    leakage_filtered: int | None = None
    duplicate_filtered: int | None = None
    added_positives: int | None = None
    accuracy: dict[str, float | None] | None = None

    def to_json(self) -> dict:
        return {
            "provenance": self.provenance,
            "prompted_users": self.prompted_users,
            "prompted_candidates": self.prompted_candidates,
            "detected_count": self.detected_count,
            "skipped_empty_history": self.skipped_empty_history,
            "skipped_no_candidates": self.skipped_no_candidates,
            "parse_gaps": self.parse_gaps,
            "failed_users": sorted(self.failed_users),
            "classifier_seconds": round(self.classifier_seconds, 3),
            "leakage_filtered": self.leakage_filtered,
            "duplicate_filtered": self.duplicate_filtered,
            "added_positives": self.added_positives,
            "accuracy": self.accuracy,
            "detected": {str(u): sorted(items) for u, items in sorted(self.detected.items())},
        }


def identify_false_negatives(
    ds: InteractionDataset,
    codes: DualCodes,
    candidates: Mapping[int, CandidateSet],
    classifier,
    trunc: int = 30,
    concurrency: int = 1,
) -> FnReport:
    """Run the classifier per user and collect the positively-labeled items."""
    history_by_user: dict[int, list[Interaction]] = {}
    for e in ds.train:
        history_by_user.setdefault(e.user, []).append(e)

    report = FnReport(provenance=classifier.provenance, detected={})
    prompts: list[FnPrompt] = []
    for u in sorted(candidates):
        cset = candidates[u]
        if not cset.items:
            report.skipped_no_candidates += 1
            continue
        history = history_by_user.get(u)
        if not history:
            report.skipped_empty_history += 1
            continue
        prompts.append(build_prompt(u, codes, history, cset, trunc))

    def run_one(prompt: FnPrompt) -> tuple[int, ClassifyOutcome | ClassifierError]:
        try:
            return prompt.user, classifier.classify(prompt)
        except ClassifierError as exc:
            return prompt.user, exc

    t0 = time.perf_counter()
    if concurrency > 1 and prompts:
        # map preserves input order, so results stay aligned with prompts.
        with ThreadPoolExecutor(max_workers=concurrency) as pool:
            results = list(pool.map(run_one, prompts))
    else:
        results = [run_one(p) for p in prompts]
    report.classifier_seconds = time.perf_counter() - t0

    for (user, outcome), prompt in zip(results, prompts):
        report.prompted_users += 1
        report.prompted_candidates += len(prompt.candidate_items)
        if isinstance(outcome, ClassifierError):
            logger.warning("user %d classification failed: %s", user, outcome)
            report.failed_users.append(user)
            continue
        report.parse_gaps += outcome.parse_gaps
        positives = {v.item for v in outcome.verdicts if v.label == LABEL_POSITIVE}
        if positives:
            report.detected[user] = positives
            report.detected_count += len(positives)
    return report


def collect_and_augment(
    report: FnReport, ds: InteractionDataset
) -> tuple[InteractionDataset, FnReport]:
    """Convert detections into train positives; the leakage guard audit lands
    in the report."""
    augmented, audit = augment_with_positives(ds, report.detected)
    report.leakage_filtered = audit.filtered_leakage
    report.duplicate_filtered = audit.filtered_duplicate
    report.added_positives = audit.added
    return augmented, report


@dataclass(frozen=True)
class FnAccuracy:
    recall: float | None
    precision: float | None
    random_baseline: float | None
    planted_in_candidates: int
    detected_total: int
    detected_planted: int
    undefined: bool = False


def fn_accuracy(
    report: FnReport,
    planted: PlantedFnSet,
    candidates: Mapping[int, CandidateSet],
    top_n: int = 10,
) -> FnAccuracy:
    """Recall of planted pairs reachable through candidate sets, detection
    precision, and the expected recall of a uniform top-n pick."""
    planted_by_user = planted.by_user()
    reachable = 0
    hit = 0
    detected_total = 0
    baseline_mass = 0.0
    for u, cset in candidates.items():
        cand = set(cset.items)
        p_here = planted_by_user.get(u, set()) & cand
        reachable += len(p_here)
        det = report.detected.get(u, set())
        detected_total += len(det)
        hit += len(det & p_here)
        if p_here and cset.items:
            baseline_mass += len(p_here) * min(top_n, len(cset.items)) / len(cset.items)
    if reachable == 0:
        logger.warning("fn_accuracy: no planted pairs inside any candidate set; metrics undefined")
        return FnAccuracy(None, None, None, 0, detected_total, 0, undefined=True)
    return FnAccuracy(
        recall=hit / reachable,
        precision=(hit / detected_total) if detected_total else None,
        random_baseline=baseline_mass / reachable,
        planted_in_candidates=reachable,
        detected_total=detected_total,
        detected_planted=hit,
    )


def build_probe_candidates(
    user_out: np.ndarray,
    item_out: np.ndarray,
    ds: InteractionDataset,
    planted: PlantedFnSet,
    limit: int = 20,
    fill: str = "random",
    seed: int = 0,
) -> dict[int, CandidateSet]:
    """Candidate sets that force-include each user's planted items (capped at
    the limit), filling remaining slots with unobserved items.

    ``fill="random"`` draws fillers uniformly so the probe measures classifier
    skill alone; ``fill="ranked"`` uses the pretrained ranker's top items.
    """
    if fill not in ("random", "ranked"):
        raise ValueError(f"unknown fill mode {fill!r}")
    rng = np.random.default_rng(seed)
    planted_by_user = planted.by_user()
    out: dict[int, CandidateSet] = {}
    for u in sorted(planted_by_user):
        forced = sorted(planted_by_user[u])[:limit]
        excluded = set(ds.positives_of(u)) | set(forced)
        space = limit - len(forced)
        fillers: list[int] = []
        if space > 0:
            available = np.array(
                [i for i in range(ds.item_count) if i not in excluded], dtype=np.int64
            )
            if fill == "random":
                take = min(space, available.size)
                fillers = sorted(int(i) for i in rng.choice(available, size=take, replace=False))
            else:
                scores = item_out[available] @ user_out[u]
                order = np.lexsort((available, -scores))[:space]
                fillers = [int(available[j]) for j in order]
        out[u] = CandidateSet(u, tuple(forced + fillers))
    return out


# ---------------------------------------------------------------------------
# Persistence.
# ---------------------------------------------------------------------------


def save_report(path: str | Path, report: FnReport, fingerprint: str | None = None) -> None:
    payload = report.to_json()
    payload["fingerprint"] = fingerprint
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def save_detected_tsv(path: str | Path, report: FnReport, fingerprint: str | None = None) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        if fingerprint:
            fh.write(f"# fingerprint={fingerprint}\n")
        for u in sorted(report.detected):
            for i in sorted(report.detected[u]):
                fh.write(f"{u}\t{i}\n")
