"""Pipeline command line: prepare, build-trees, identify-fn, train, evaluate,
fn-accuracy.

Each command reads only persisted artifacts plus the config file, embeds the
config fingerprint in everything it writes, and refuses to consume artifacts
whose fingerprint does not match the current config. A lock file per output
directory prevents concurrent writers. Exit codes: 0 success, 2 bad
usage/config, and a distinct code per failing stage (see STAGE_EXIT_CODES).
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import backbone as bb
from . import data as dat
from . import evaluation as ev
from . import fni
from . import spectral as spec
from . import tree as tr
from .config import ConfigError, RunConfig, dumps, load_config
from .sampler import BatchSampler, SamplerSpec

logger = logging.getLogger(__name__)

STAGE_EXIT_CODES = {
    "prepare": 10,
    "build-trees": 20,
    "identify-fn": 30,
    "train": 40,
    "evaluate": 50,
    "fn-accuracy": 60,
}


class StageError(RuntimeError):
    pass


@contextlib.contextmanager
def run_lock(out_dir: Path):
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise StageError(f"{lock} exists; another run is writing to this directory") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield
    finally:
        lock.unlink(missing_ok=True)


def _out_dir(cfg: RunConfig) -> Path:
    return Path(cfg.run.out)


def _train_config(cfg: RunConfig, seed: int, epochs: int | None = None) -> bb.TrainConfig:
    t = cfg.train
    return bb.TrainConfig(
        lr=t.lr,
        batch_size=t.batch_size,
        l2=t.l2,
        epochs=t.epochs if epochs is None else epochs,
        seed=seed,
        patience=t.patience,
        eval_every=t.eval_every,
    )


def cmd_prepare(cfg: RunConfig) -> None:
    fp = cfg.fingerprint()
    out = _out_dir(cfg)
    loaded = dat.load_interactions(cfg.data.path, cfg.data.format)
    logger.info(
        "loaded %d interactions (%d users, %d items)",
        len(loaded.interactions), len(loaded.user_ids), len(loaded.item_ids),
    )
    kc = dat.k_core_filter(loaded.interactions, cfg.prepare.kcore)
    ds = dat.split(kc.interactions, tuple(cfg.prepare.ratios), cfg.prepare.seed)
    ds.check_invariants()

    planted = None
    extra = {
        "kcore": cfg.prepare.kcore,
        "split_seed": cfg.prepare.seed,
        "ratios": list(cfg.prepare.ratios),
    }
    if cfg.prepare.noise_fraction is not None or cfg.prepare.noise_count is not None:
        noise = dat.NoiseSpec(
            fraction=cfg.prepare.noise_fraction,
            count=cfg.prepare.noise_count,
            seed=cfg.prepare.noise_seed,
        )
        ds, planted = dat.inject_false_negatives(ds, noise)
        extra["noise_seed"] = cfg.prepare.noise_seed

    dat.save_dataset(ds, out, fp, planted=planted, extra=extra)
    for name, ids in (("user_map.tsv", kc.user_index), ("item_map.tsv", kc.item_index)):
        with (out / name).open("w", encoding="utf-8") as fh:
            fh.write(f"# fingerprint={fp}\n")
            raws = loaded.user_ids if name.startswith("user") else loaded.item_ids
            for dense, old in enumerate(ids):
                fh.write(f"{dense}\t{raws[old]}\n")
    logger.info(
        "prepared %s: train=%d valid=%d test=%d%s",
        out, len(ds.train), len(ds.validation), len(ds.test),
        f" planted={len(planted.pairs)}" if planted else "",
    )


def _pretrained(cfg: RunConfig, ds: dat.InteractionDataset, fp: str) -> bb.PretrainResult:
    out = _out_dir(cfg)
    ckpt = out / "pretrain.ckpt"
    if ckpt.exists():
        state = bb.load_checkpoint(ckpt, fp)
        adj = bb.build_norm_adj(ds) if state.backbone == "lightgcn" else None
        user_out, item_out = bb.propagate(state, adj)
        return bb.PretrainResult(state, user_out, item_out)
    logger.info("pretraining recommender (%d epochs)", cfg.train.pretrain_epochs)
    result = bb.pretrain_semantic(
        ds,
        _train_config(cfg, cfg.train.pretrain_seed, epochs=cfg.train.pretrain_epochs),
        backbone=cfg.backbone.kind,
        layers=cfg.backbone.layers,
        d_e=cfg.backbone.dim,
    )
    bb.save_checkpoint(ckpt, result.state, fp)
    return result


def cmd_build_trees(cfg: RunConfig) -> None:
    fp = cfg.fingerprint()
    out = _out_dir(cfg)
    ds = dat.load_dataset(out, fp)
    g = _pretrained(cfg, ds, fp)

    W = spec.jaccard_similarity(ds)
    L = spec.normalized_laplacian(W)
    embedding = spec.spectral_embed(
        L,
        cfg.spectral.dim,
        tol=cfg.spectral.tol,
        max_iter=cfg.spectral.max_iter,
        seed=cfg.spectral.seed,
        method=cfg.spectral.method,
        degrees=spec.graph_degrees(W),
    )
    if cfg.spectral.save_artifacts:
        spec.save_similarity(out / "item_similarity.txt", W)
        spec.save_embedding(out / "spectral_embedding.bin", embedding.matrix)

    k, m = cfg.tree.branching, cfg.tree.leaf_size
    collab_tree = tr.build_kary_tree(embedding.matrix, k, m, seed=cfg.tree.seed)
    semantic_tree = tr.build_kary_tree(g.item_embeddings, k, m, seed=cfg.tree.seed + 1)
    codes = tr.DualCodes(tr.path_codes(collab_tree), tr.path_codes(semantic_tree))
    tr.write_codes(out / "codes.tsv", codes, fp)
    tr.write_trees(out / "trees.json", collab_tree, semantic_tree, fp)
    logger.info(
        "built dual trees: depths %d/%d, %d items encoded",
        collab_tree.depth, semantic_tree.depth, codes.item_count,
    )


def _make_classifier(cfg: RunConfig, codes: tr.DualCodes):
    binding = cfg.fni.binding
    if binding == "rule":
        return fni.RuleFniClassifier(codes, top_n=cfg.fni.rule_top_n)
    if binding == "mock":
        if not cfg.fni.mock_script:
            raise StageError("fni.mock_script is required for the mock binding")
        script = json.loads(Path(cfg.fni.mock_script).read_text())
        return fni.MockClassifier({int(u): items for u, items in script.items()})
    if binding == "llm":
        if not cfg.fni.llm_url or not cfg.fni.llm_model:
            raise StageError("fni.llm_url and fni.llm_model are required for the llm binding")
        return fni.HttpLlmClassifier(
            fni.LlmEndpointConfig(
                url=cfg.fni.llm_url,
                model=cfg.fni.llm_model,
                temperature=cfg.fni.llm_temperature,
                timeout=cfg.fni.llm_timeout,
                max_retries=cfg.fni.llm_retries,
                concurrency=cfg.fni.llm_concurrency,
                token_env=cfg.fni.llm_token_env,
            )
        )
    raise StageError(f"unknown fni binding {binding!r}")


def cmd_identify_fn(cfg: RunConfig) -> None:
    if cfg.fni.binding == "off":
        raise StageError("fni.binding is 'off'; nothing to identify")
    fp = cfg.fingerprint()
    out = _out_dir(cfg)
    ds = dat.load_dataset(out, fp)
    codes = tr.read_codes(out / "codes.tsv", fp)
    g = _pretrained(cfg, ds, fp)

    candidates = fni.build_candidate_sets(g.user_out, g.item_out, ds, cfg.fni.candidate_limit)
    classifier = _make_classifier(cfg, codes)
    concurrency = cfg.fni.llm_concurrency if cfg.fni.binding == "llm" else 1
    report = fni.identify_false_negatives(
        ds, codes, candidates, classifier, trunc=cfg.fni.trunc, concurrency=concurrency
    )
    augmented, report = fni.collect_and_augment(report, ds)

    dat.write_edges(out / "train_augmented.tsv", augmented.train, fp)
    fni.save_report(out / "fn_report.json", report, fp)
    fni.save_detected_tsv(out / "detected_fn.tsv", report, fp)
    logger.info(
        "identify-fn: %d detected, %d added (%d leakage-filtered) in %.1fs",
        report.detected_count, report.added_positives, report.leakage_filtered,
        report.classifier_seconds,
    )


def _dataset_for_training(cfg: RunConfig, fp: str) -> dat.InteractionDataset:
    out = _out_dir(cfg)
    ds = dat.load_dataset(out, fp)
    augmented_file = out / "train_augmented.tsv"
    if cfg.fni.binding != "off" and augmented_file.exists():
        train = tuple(dat.read_edges(augmented_file))
        ds = dat.InteractionDataset(ds.user_count, ds.item_count, train, ds.validation, ds.test)
        logger.info("training on augmented train set (%d pairs)", len(train))
    return ds


def cmd_train(cfg: RunConfig) -> None:
    fp = cfg.fingerprint()
    out = _out_dir(cfg)
    ds = _dataset_for_training(cfg, fp)
    spec_ = SamplerSpec(
        kind=cfg.sampler.kind,
        alpha_c=cfg.sampler.alpha_c,
        alpha_s=cfg.sampler.alpha_s,
        pool_size=cfg.sampler.pool_size,
    )
    codes = None
    if spec_.kind in ("multiview", "dns_plus"):
        codes = tr.read_codes(out / "codes.tsv", fp)

    rows = []
    for seed in cfg.run.seeds:
        sampler = BatchSampler(spec_, ds, codes)
        t0 = time.perf_counter()
        result = bb.train_model(
            ds,
            _train_config(cfg, seed),
            sampler,
            backbone=cfg.backbone.kind,
            layers=cfg.backbone.layers,
            d_e=cfg.backbone.dim,
        )
        user_out, item_out = result.propagated(ds)
        report = ev.evaluate_ranking(user_out, item_out, ds, ks=tuple(cfg.eval.ks), split="test")
        bb.save_checkpoint(out / f"model_seed{seed}.ckpt", result.state, fp)
        bb.write_metrics_csv(out / f"metrics_seed{seed}.csv", result.history, 20, fp)
        bb.write_timing_csv(out / f"timing_seed{seed}.csv", result.history, fp)
        row = {
            "run_id": f"{cfg.data.name}-{spec_.kind}-s{seed}",
            "dataset": cfg.data.name,
            "sampler": spec_.kind,
            "seed": seed,
        }
        for k in cfg.eval.ks:
            row[f"recall@{k}"] = f"{report.recall[k]:.6f}"
            row[f"ndcg@{k}"] = f"{report.ndcg[k]:.6f}"
        rows.append(row)
        logger.info(
            "seed %d: %d epochs in %.1fs, test recall@20=%.4f",
            seed, len(result.history), time.perf_counter() - t0,
            report.recall.get(20, float("nan")),
        )
    ev.write_results_csv(out / "results.csv", rows, fp)
    ev.write_aggregate_json(out / "aggregate.json", rows, extra={"fingerprint": fp})


def cmd_evaluate(cfg: RunConfig, checkpoint: str | None = None) -> None:
    fp = cfg.fingerprint()
    out = _out_dir(cfg)
    ds = _dataset_for_training(cfg, fp)
    ckpt = Path(checkpoint) if checkpoint else out / f"model_seed{cfg.run.seeds[0]}.ckpt"
    if not ckpt.exists():
        raise StageError(f"checkpoint {ckpt} not found; run train first")
    state = bb.load_checkpoint(ckpt, fp)
    adj = bb.build_norm_adj(ds) if state.backbone == "lightgcn" else None
    user_out, item_out = bb.propagate(state, adj)
    report = ev.evaluate_ranking(user_out, item_out, ds, ks=tuple(cfg.eval.ks), split="test")
    row = {
        "run_id": f"{cfg.data.name}-eval",
        "dataset": cfg.data.name,
        "sampler": cfg.sampler.kind,
        "seed": cfg.run.seeds[0],
    }
    for k in cfg.eval.ks:
        row[f"recall@{k}"] = f"{report.recall[k]:.6f}"
        row[f"ndcg@{k}"] = f"{report.ndcg[k]:.6f}"
    ev.write_results_csv(out / "eval_results.csv", [row], fp)
    payload = {
        "fingerprint": fp,
        "checkpoint": str(ckpt),
        "users_evaluated": report.users_evaluated,
        "recall": {str(k): report.recall[k] for k in cfg.eval.ks},
        "ndcg": {str(k): report.ndcg[k] for k in cfg.eval.ks},
    }
    (out / "eval_results.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    logger.info("evaluate: %s", payload["recall"])


def cmd_fn_accuracy(cfg: RunConfig) -> None:
    fp = cfg.fingerprint()
    out = _out_dir(cfg)
    ds = dat.load_dataset(out, fp)
    if not (out / "planted_fn.tsv").exists():
        raise StageError("fn-accuracy needs a noise-injected dataset (planted_fn.tsv missing)")
    planted = dat.load_planted(out)
    codes = tr.read_codes(out / "codes.tsv", fp)
    g = _pretrained(cfg, ds, fp)

    probes = fni.build_probe_candidates(
        g.user_out,
        g.item_out,
        ds,
        planted,
        limit=cfg.fni.candidate_limit,
        fill=cfg.fni.probe_fill,
        seed=cfg.fni.probe_seed,
    )
    classifier = _make_classifier(cfg, codes)
    concurrency = cfg.fni.llm_concurrency if cfg.fni.binding == "llm" else 1
    report = fni.identify_false_negatives(
        ds, codes, probes, classifier, trunc=cfg.fni.trunc, concurrency=concurrency
    )
    acc = fni.fn_accuracy(report, planted, probes, top_n=cfg.fni.rule_top_n)
    report.accuracy = {
        "recall": acc.recall,
        "precision": acc.precision,
        "random_baseline": acc.random_baseline,
        "planted_in_candidates": acc.planted_in_candidates,
        "detected_planted": acc.detected_planted,
    }
    fni.save_report(out / "fn_accuracy.json", report, fp)
    logger.info(
        "fn-accuracy: recall=%s precision=%s baseline=%s",
        acc.recall, acc.precision, acc.random_baseline,
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dtrec", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGE_EXIT_CODES:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to the run config file")
        p.add_argument("--seed", type=int, default=None, help="override run.seeds with one seed")
        p.add_argument("--out", default=None, help="override run.out")
        if name == "evaluate":
            p.add_argument("--checkpoint", default=None, help="checkpoint to evaluate")
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.run.seeds = (args.seed,)
        if args.out is not None:
            cfg.run.out = args.out
    except (ConfigError, OSError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    command = args.command
    try:
        with run_lock(_out_dir(cfg)):
            (_out_dir(cfg) / "config.used").write_text(dumps(cfg))
            if command == "prepare":
                cmd_prepare(cfg)
            elif command == "build-trees":
                cmd_build_trees(cfg)
            elif command == "identify-fn":
                cmd_identify_fn(cfg)
            elif command == "train":
                cmd_train(cfg)
            elif command == "evaluate":
                cmd_evaluate(cfg, args.checkpoint)
            elif command == "fn-accuracy":
                cmd_fn_accuracy(cfg)
    except Exception as exc:  # surface the failing stage, keep its exit code
        print(f"{command}: {exc}", file=sys.stderr)
        logger.debug("stage failure", exc_info=exc)
        return STAGE_EXIT_CODES[command]
    return 0


if __name__ == "__main__":
    sys.exit(main())
