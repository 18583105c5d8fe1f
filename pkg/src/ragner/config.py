"""Run configuration: one file (YAML or JSON), dotted overrides, and a
stable fingerprint that ties every artifact back to the exact settings
that produced it.

Section defaults for retriever/generator/augment come straight from the
owning dataclasses, so the config layer cannot drift from the code. A
seed left as null in the retriever/store/augment sections inherits the
global seed.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from pathlib import Path

import yaml

from .augment import AugmentConfig
from .errors import ConfigError
from .generation import GeneratorSpec
from .retriever import RetrieverConfig


def _defaults() -> dict:
    retriever = asdict(RetrieverConfig())
    retriever["seed"] = None
    augment = asdict(AugmentConfig())
    augment["seed"] = None
    return {
        "seed": 0,
        "paths": {
            "corpus_train": None,
            "corpus_dev": None,
            "corpus_test": None,
            "schema": None,
            "out_dir": "out",
        },
        "embedder": {
            "provider": "precomputed-file",
            "model_name": "bge-base-en",
            "dimension": 768,
            "stopwords_file": None,
            "precomputed_path": None,
            "endpoint": None,
            "timeout": 10.0,
            "max_retries": 2,
            "max_in_flight": 4,
        },
        "store": {
            "source_splits": ["train", "dev"],
            "size": None,
            "seed": None,
            "modes": ["word-level", "sentence-level"],
        },
        "retriever": retriever,
        "generator": asdict(GeneratorSpec()),
        "augment": augment,
        "prompt": {
            "template_id": "default-v1",
            "template_file": None,
            "task_description": None,
        },
        "eval": {
            "grounding": "strict",
            "dedupe": False,
            "match_mode": "multiset",
        },
    }


def _merge(base: dict, user: dict, trail: str = "") -> dict:
    out = dict(base)
    for key, value in user.items():
        dotted = f"{trail}{key}"
        if key not in base:
            raise ConfigError(f"unknown config key: {dotted}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {dotted} must be a mapping")
            out[key] = _merge(base[key], value, trail=f"{dotted}.")
        else:
            out[key] = value
    return out


def apply_override(doc: dict, assignment: str) -> None:
    """Apply one ``section.key=value`` override in place; values parse as YAML."""
    if "=" not in assignment:
        raise ConfigError(f"override must look like key=value, got {assignment!r}")
    dotted, _, raw_value = assignment.partition("=")
    keys = dotted.strip().split(".")
    target = doc
    for key in keys[:-1]:
        if not isinstance(target.get(key), dict):
            raise ConfigError(f"unknown config key: {dotted.strip()}")
        target = target[key]
    if keys[-1] not in target:
        raise ConfigError(f"unknown config key: {dotted.strip()}")
    try:
        value = yaml.safe_load(raw_value)
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse override value {raw_value!r}: {exc}") from exc
    target[keys[-1]] = value


@dataclass(frozen=True)
class PathsConfig:
    corpus_train: str | None
    corpus_dev: str | None
    corpus_test: str | None
    schema: str | None
    out_dir: str

    def out_path(self, *parts: str) -> Path:
        return Path(self.out_dir).joinpath(*parts)


@dataclass(frozen=True)
class EmbedderConfig:
    provider: str
    model_name: str
    dimension: int
    stopwords_file: str | None
    precomputed_path: str | None
    endpoint: str | None
    timeout: float
    max_retries: int
    max_in_flight: int


@dataclass(frozen=True)
class StoreConfig:
    source_splits: tuple[str, ...]
    size: int | None
    seed: int
    modes: tuple[str, ...]


@dataclass(frozen=True)
class PromptConfig:
    template_id: str
    template_file: str | None
    task_description: str | None


@dataclass(frozen=True)
class EvalConfig:
    grounding: str
    dedupe: bool
    match_mode: str


@dataclass(frozen=True)
class RunConfig:
    raw: dict
    seed: int
    paths: PathsConfig
    embedder: EmbedderConfig
    store: StoreConfig
    retriever: RetrieverConfig
    generator: GeneratorSpec
    augment: AugmentConfig
    prompt: PromptConfig
    eval: EvalConfig

    @property
    def fingerprint(self) -> str:
        return fingerprint(self.raw)


def fingerprint(doc: dict) -> str:
    canonical = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def _build_section(cls, section: dict, name: str):
    try:
        return cls(**section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"bad [{name}] config: {exc}") from exc


def resolve(doc: dict) -> RunConfig:
    """Turn a merged plain-dict config into validated dataclasses."""
    seed = doc["seed"]
    if not isinstance(seed, int):
        raise ConfigError(f"seed must be an integer, got {seed!r}")
    for section in ("retriever", "store", "augment"):
        if doc[section].get("seed") is None:
            doc[section]["seed"] = seed

    store_raw = dict(doc["store"])
    store_raw["source_splits"] = tuple(store_raw["source_splits"])
    store_raw["modes"] = tuple(store_raw["modes"])
    for mode in store_raw["modes"]:
        if mode not in ("word-level", "sentence-level"):
            raise ConfigError(f"bad [store] config: unknown mode {mode!r}")

    eval_raw = doc["eval"]
    if eval_raw["grounding"] not in ("off", "strict"):
        raise ConfigError("bad [eval] config: grounding must be 'off' or 'strict'")
    if eval_raw["match_mode"] not in ("multiset", "positional"):
        raise ConfigError("bad [eval] config: match_mode must be 'multiset' or 'positional'")

    return RunConfig(
        raw=doc,
        seed=seed,
        paths=_build_section(PathsConfig, doc["paths"], "paths"),
        embedder=_build_section(EmbedderConfig, doc["embedder"], "embedder"),
        store=_build_section(StoreConfig, store_raw, "store"),
        retriever=_build_section(RetrieverConfig, doc["retriever"], "retriever"),
        generator=_build_section(GeneratorSpec, doc["generator"], "generator"),
        augment=_build_section(AugmentConfig, doc["augment"], "augment"),
        prompt=_build_section(PromptConfig, doc["prompt"], "prompt"),
        eval=_build_section(EvalConfig, doc["eval"], "eval"),
    )


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> RunConfig:
    """Defaults <- config file <- dotted overrides, then validate."""
    doc = _defaults()
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text(encoding="utf-8")
        try:
            user = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        doc = _merge(doc, user)
    for assignment in overrides or []:
        apply_override(doc, assignment)
    return resolve(doc)
