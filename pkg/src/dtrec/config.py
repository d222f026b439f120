"""Run configuration: flat `section.key = value` text files.

Defaults reproduce the reference experimental settings (tree branching 4,
leaf threshold 30, spectral dimension 32, 64-d embeddings, lr 0.001, batch
2048, L2 1e-4, candidate limit 20, pool size 10, alpha_c 0.1, alpha_s 0.3),
so a minimal config only needs data paths.

The fingerprint hashes every pipeline-defining section (data, prepare,
spectral, tree, backbone, train, fni, sampler); `run.*` and `eval.*` keys are
runtime knobs and stay outside it.
"""

from __future__ import annotations

import dataclasses
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import get_args, get_origin, get_type_hints


@dataclass
class DataSection:
    path: str = ""
    format: str = "tsv_triples"
    name: str = "dataset"


@dataclass
class PrepareSection:
    kcore: int = 10
    ratios: tuple[int, ...] = (8, 1, 1)
    seed: int = 0
    noise_fraction: float | None = None
    noise_count: int | None = None
    noise_seed: int = 0


@dataclass
class SpectralSection:
    dim: int = 32
    tol: float = 1e-8
    max_iter: int = 1000
    seed: int = 0
    method: str = "auto"
    save_artifacts: bool = False


@dataclass
class TreeSection:
    branching: int = 4
    leaf_size: int = 30
    seed: int = 0


@dataclass
class BackboneSection:
    kind: str = "lightgcn"
    layers: int = 3
    dim: int = 64


@dataclass
class TrainSection:
    lr: float = 0.001
    batch_size: int = 2048
    l2: float = 0.0001
    epochs: int = 100
    patience: int = 10
    eval_every: int = 1
    pretrain_epochs: int = 50
    pretrain_seed: int = 0


@dataclass
class FniSection:
    binding: str = "rule"  # llm | rule | mock | off
    candidate_limit: int = 20
    trunc: int = 30
    rule_top_n: int = 10
    probe_fill: str = "random"  # random | ranked
    probe_seed: int = 0
    llm_url: str = ""
    llm_model: str = ""
    llm_temperature: float = 0.0
    llm_timeout: float = 60.0
    llm_retries: int = 3
    llm_concurrency: int = 8
    llm_token_env: str = "DTREC_LLM_TOKEN"
    mock_script: str = ""


@dataclass
class SamplerSection:
    kind: str = "multiview"
    alpha_c: float = 0.1
    alpha_s: float = 0.3
    pool_size: int = 10


@dataclass
class EvalSection:
    ks: tuple[int, ...] = (10, 20)


@dataclass
class RunSection:
    seeds: tuple[int, ...] = (0,)
    out: str = "runs/default"


FINGERPRINTED_SECTIONS = ("data", "prepare", "spectral", "tree", "backbone", "train", "fni", "sampler")


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    prepare: PrepareSection = field(default_factory=PrepareSection)
    spectral: SpectralSection = field(default_factory=SpectralSection)
    tree: TreeSection = field(default_factory=TreeSection)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    train: TrainSection = field(default_factory=TrainSection)
    fni: FniSection = field(default_factory=FniSection)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    eval: EvalSection = field(default_factory=EvalSection)
    run: RunSection = field(default_factory=RunSection)

    def fingerprint(self) -> str:
        lines = [
            line
            for line in dumps(self).splitlines()
            if line.split(".", 1)[0] in FINGERPRINTED_SECTIONS
        ]
        return hashlib.sha256("\n".join(lines).encode("utf-8")).hexdigest()


class ConfigError(ValueError):
    pass


def _format_value(value: object) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(text: str, annotation: object, key: str) -> object:
    text = text.strip()
    origin = get_origin(annotation)
    args = get_args(annotation)
    try:
        if origin is type(None) or annotation is type(None):
            raise ConfigError(f"{key}: unsupported type")
        if args and type(None) in args:  # Optional[...]
            if text.lower() in ("none", ""):
                return None
            inner = next(a for a in args if a is not type(None))
            return _parse_value(text, inner, key)
        if origin is tuple:
            if not text:
                return ()
            return tuple(int(v) for v in text.split(","))
        if annotation is int:
            return int(text)
        if annotation is float:
            return float(text)
        if annotation is bool:
            if text.lower() in ("true", "1", "yes"):
                return True
            if text.lower() in ("false", "0", "no"):
                return False
            raise ValueError(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {text!r}") from exc


def dumps(cfg: RunConfig) -> str:
    lines = []
    for section_field in dataclasses.fields(cfg):
        section = getattr(cfg, section_field.name)
        for f in dataclasses.fields(section):
            lines.append(f"{section_field.name}.{f.name} = {_format_value(getattr(section, f.name))}")
    return "\n".join(lines) + "\n"


def loads(text: str) -> RunConfig:
    cfg = RunConfig()
    sections = {f.name: getattr(cfg, f.name) for f in dataclasses.fields(cfg)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected `section.key = value`")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." not in key:
            raise ConfigError(f"line {lineno}: key {key!r} has no section")
        section_name, field_name = key.split(".", 1)
        section = sections.get(section_name)
        if section is None:
            raise ConfigError(f"line {lineno}: unknown section {section_name!r}")
        hints = get_type_hints(type(section))  # field.type is a string under PEP 563
        if field_name not in hints:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        setattr(section, field_name, _parse_value(value, hints[field_name], key))
    return cfg


def load_config(path: str | Path) -> RunConfig:
    return loads(Path(path).read_text(encoding="utf-8"))


def save_config(cfg: RunConfig, path: str | Path) -> None:
    Path(path).write_text(dumps(cfg), encoding="utf-8")
