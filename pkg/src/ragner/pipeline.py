"""End-to-end pipeline steps shared by the CLI and the ablation runner.

Sentence ids are renumbered globally across splits at load time (train,
then dev, then test), so store records and incoming queries can never
collide on id and self-exclusion in the retriever stays sound.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path

from .config import RunConfig, resolve
from .corpus import (
    CorpusSplit,
    EntitySchema,
    LabeledSentence,
    NerOutput,
    ParseWarnings,
    gold_output,
    parse_bio,
    read_sentences_jsonl,
    split_store_finetune,
)
from .embedder import (
    Embedder,
    EmbedderSpec,
    PrecomputedEmbeddingProvider,
    RemoteEmbeddingProvider,
    load_precomputed,
)
from .errors import ConfigError, NoDictionaryFound, RagnerError
from .evaluation import EvalReport, PredictionRecord, score
from .generation import (
    GenerationResult,
    GenerationTask,
    generate_batch,
    latency_summary,
    prompt_hash,
)
from .promptkit import (
    DEFAULT_TASK_DESCRIPTION,
    Prompt,
    build_prompt,
    parse_output,
    resolve_template,
)
from .retriever import ExampleStore, retrieve
from .stopwords import DEFAULT_STOPWORDS, load_stopwords


def make_embedder(cfg: RunConfig) -> Embedder:
    """Build the embedder named by the config's [embedder] section."""
    e = cfg.embedder
    stopwords = (
        load_stopwords(e.stopwords_file) if e.stopwords_file else DEFAULT_STOPWORDS
    )
    spec = EmbedderSpec(
        provider=e.provider,
        model_name=e.model_name,
        dimension=e.dimension,
        stopwords=stopwords,
    )
    if e.provider == "precomputed-file":
        if not e.precomputed_path:
            raise ConfigError("embedder.provider=precomputed-file needs precomputed_path")
        provider = load_precomputed(e.precomputed_path)
    else:
        if not e.endpoint:
            raise ConfigError("embedder.provider=remote-service needs endpoint")
        provider = RemoteEmbeddingProvider(
            endpoint=e.endpoint,
            model_name=e.model_name,
            timeout=e.timeout,
            max_retries=e.max_retries,
            max_in_flight=e.max_in_flight,
        )
    return Embedder(provider, spec)


def load_split_file(path: str | Path, id_base: int = 0) -> tuple[list[LabeledSentence], ParseWarnings]:
    """Read one corpus file (BIO text or sentence JSONL), re-basing ids."""
    path = Path(path)
    warnings = ParseWarnings()
    if path.suffix == ".jsonl":
        sentences = read_sentences_jsonl(path)
    else:
        sentences = parse_bio(path.read_text(encoding="utf-8"), warnings)
    for i, s in enumerate(sentences):
        s.id = id_base + i
    return sentences, warnings


def load_splits(cfg: RunConfig) -> tuple[dict[str, list[LabeledSentence]], ParseWarnings]:
    """Load the configured corpus files with globally unique sentence ids."""
    sources = {
        "train": cfg.paths.corpus_train,
        "dev": cfg.paths.corpus_dev,
        "test": cfg.paths.corpus_test,
    }
    splits: dict[str, list[LabeledSentence]] = {}
    warnings = ParseWarnings()
    next_id = 0
    for name in ("train", "dev", "test"):
        path = sources[name]
        if path is None:
            continue
        sentences, w = load_split_file(path, id_base=next_id)
        warnings.dangling_inside += w.dangling_inside
        warnings.messages.extend(w.messages)
        next_id += len(sentences)
        splits[name] = sentences
    if not splits:
        raise ConfigError("no corpus files configured under [paths]")
    return splits, warnings


def select_store_split(splits: dict[str, list[LabeledSentence]], cfg: RunConfig) -> CorpusSplit:
    """Assemble the store per [store]: concatenate source splits, then
    either sample store.size of them (rest becomes the finetune split) or
    take them all."""
    source: list[LabeledSentence] = []
    for name in cfg.store.source_splits:
        if name not in splits:
            raise ConfigError(f"store.source_splits names {name!r} but no such corpus file")
        source.extend(splits[name])
    if cfg.store.size is None:
        return CorpusSplit(store=source, finetune=[], seed=cfg.store.seed)
    return split_store_finetune(source, cfg.store.size, cfg.store.seed)


def build_store(
    sentences: list[LabeledSentence],
    schema: EntitySchema,
    embedder: Embedder,
    cfg: RunConfig,
) -> ExampleStore:
    return ExampleStore.build(
        sentences, schema, embedder, cfg.retriever, modes=cfg.store.modes
    )


def _task_description(cfg: RunConfig) -> str:
    return (
        cfg.prompt.task_description
        if cfg.prompt.task_description is not None
        else DEFAULT_TASK_DESCRIPTION
    )


def build_query_prompt(
    sentence: LabeledSentence, store: ExampleStore, cfg: RunConfig
) -> Prompt:
    """Retrieve examples and render the prompt, most similar example last."""
    examples = retrieve(sentence, store, cfg.retriever)
    example_gold = [
        (store.by_id[ex.sentence_id], gold_output(store.by_id[ex.sentence_id], store.schema))
        for ex in reversed(examples)
    ]
    template_text = resolve_template(cfg.prompt.template_id, cfg.prompt.template_file)
    return build_prompt(
        store.schema,
        example_gold,
        sentence.text,
        template_id=cfg.prompt.template_id,
        template_text=template_text,
        task_description=_task_description(cfg),
    )


@dataclass
class PredictionRow:
    """Everything the predict stage knows about one query sentence."""

    query_id: int
    text: str
    prompt_hash: str | None = None
    completion: str = ""
    parsed: NerOutput | None = None
    parse_failed: bool = False
    error: str | None = None

    def to_dict(self) -> dict:
        doc = {
            "query_id": self.query_id,
            "text": self.text,
            "prompt_hash": self.prompt_hash,
            "completion": self.completion,
            "parsed": {k: list(v) for k, v in self.parsed.entries.items()}
            if self.parsed is not None
            else None,
            "parse_failed": self.parse_failed,
        }
        if self.error is not None:
            doc["error"] = self.error
        return doc


@dataclass
class PredictOutcome:
    rows: list[PredictionRow]
    records: list[PredictionRecord]
    latency: dict
    failures: list[tuple[int, str]] = field(default_factory=list)


def predict_sentences(
    sentences: list[LabeledSentence],
    store: ExampleStore,
    cfg: RunConfig,
    with_gold: bool = True,
) -> PredictOutcome:
    """retrieve -> prompt -> generate -> parse for every sentence.

    Record-level failures (retrieval, generation, parsing) mark the row
    failed and score as all-false-negative; they never abort the batch.
    """
    schema = store.schema
    rows: dict[int, PredictionRow] = {}
    tasks: list[GenerationTask] = []
    failures: list[tuple[int, str]] = []
    for sentence in sentences:
        row = PredictionRow(query_id=sentence.id, text=sentence.text)
        rows[sentence.id] = row
        try:
            prompt = build_query_prompt(sentence, store, cfg)
        except RagnerError as exc:
            row.parse_failed = True
            row.error = f"{type(exc).__name__}: {exc}"
            failures.append((sentence.id, row.error))
            continue
        row.prompt_hash = prompt_hash(prompt)
        gold = gold_output(sentence, schema) if with_gold else None
        tasks.append(GenerationTask(query_id=sentence.id, prompt=prompt, gold=gold))

    results: list[GenerationResult] = generate_batch(tasks, cfg.generator)
    prompts_by_id = {t.query_id: t.prompt for t in tasks}
    for result in results:
        row = rows[result.query_id]
        row.completion = result.completion_text
        if result.error is not None:
            row.parse_failed = True
            row.error = result.error
            failures.append((result.query_id, result.error))
            continue
        try:
            row.parsed = parse_output(
                result.completion_text,
                schema,
                query_text=prompts_by_id[result.query_id].user_query,
                grounding=cfg.eval.grounding,
            )
        except NoDictionaryFound as exc:
            row.parse_failed = True
            row.error = f"{type(exc).__name__}: {exc}"
            failures.append((result.query_id, row.error))

    empty = NerOutput({}).restricted_to(schema)
    records: list[PredictionRecord] = []
    for sentence in sentences:
        row = rows[sentence.id]
        records.append(
            PredictionRecord(
                sentence_id=sentence.id,
                gold=gold_output(sentence, schema) if with_gold else empty,
                predicted=row.parsed if row.parsed is not None else empty,
                parse_failed=row.parse_failed,
                sentence=sentence,
            )
        )
    return PredictOutcome(
        rows=[rows[s.id] for s in sentences],
        records=records,
        latency=latency_summary(results),
        failures=failures,
    )


def run_cell(base: RunConfig, axes: dict) -> tuple[RunConfig, "CellOutcome"]:
    """Run one ablation cell: base config plus dotted-key overrides."""
    doc = copy.deepcopy(base.raw)
    for dotted, value in axes.items():
        keys = dotted.split(".")
        target = doc
        for key in keys[:-1]:
            if not isinstance(target.get(key), dict):
                raise ConfigError(f"unknown ablation axis: {dotted}")
            target = target[key]
        if keys[-1] not in target:
            raise ConfigError(f"unknown ablation axis: {dotted}")
        target[keys[-1]] = value
    cfg = resolve(doc)
    splits, _ = load_splits(cfg)
    if "test" not in splits:
        raise ConfigError("ablation needs a corpus_test file")
    schema = _load_schema_from_cfg(cfg)
    embedder = make_embedder(cfg)
    split = select_store_split(splits, cfg)
    store = build_store(split.store, schema, embedder, cfg)
    outcome = predict_sentences(splits["test"], store, cfg)
    report = score(
        outcome.records, dedupe=cfg.eval.dedupe, match_mode=cfg.eval.match_mode
    )
    return cfg, CellOutcome(report=report, latency=outcome.latency)


@dataclass
class CellOutcome:
    report: EvalReport
    latency: dict


def _load_schema_from_cfg(cfg: RunConfig) -> EntitySchema:
    from .corpus import load_schema

    if not cfg.paths.schema:
        raise ConfigError("paths.schema is not configured")
    return load_schema(cfg.paths.schema)


def make_ablation_runner(base: RunConfig):
    """Adapter for evaluation.run_ablation: axes dict -> (report, latency)."""

    def runner(axes: dict):
        _, outcome = run_cell(base, dict(axes))
        return outcome.report, outcome.latency

    return runner
