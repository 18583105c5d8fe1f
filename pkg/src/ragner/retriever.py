"""Select the k in-prompt examples for a query sentence.

Two modes:

- word-level: embed every non-stop-word query word, fetch the top
  `per_word_k` store words for each, pool the candidate pairs, collapse to
  unique store sentences keeping each sentence's best similarity, and
  return the k highest-scoring sentences.
- sentence-level: plain top-k by sentence-embedding cosine (baseline).

Both modes exclude the query's own sentence id from the results so that
evaluating over the store itself cannot leak gold labels. All ties break
by ascending sentence id, which makes retrieval fully deterministic.
Per-word searches are pure and could run concurrently; they are executed
sequentially and merged by the tie rule, so the result never depends on
completion order.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass, field, replace
from pathlib import Path

from .corpus import EntitySchema, LabeledSentence, load_schema, read_sentences_jsonl, write_sentences_jsonl
from .embedder import Embedder, WordEmbedding
from .errors import EmptyQueryAfterStopwords, EmptyStore, FormatError
from .vector_index import (
    Index,
    SentenceRecord,
    WordRecord,
    build_flat,
    build_ivf,
    default_nlist,
    load_index,
    save_index,
    search,
)

_MODES = ("word-level", "sentence-level")
_STORE_WORDS = ("entity-only", "all")
_INDEX_KINDS = ("flat", "ivf")
_AGGREGATORS = ("max", "sum")


@dataclass(frozen=True)
class RetrieverConfig:
    """Knobs for example selection.

    per_word_k defaults to k. The sum aggregator (sum of each query
    word's best match per sentence) is an experimental alternative to the
    default max.
    """

    k: int = 5
    mode: str = "word-level"
    per_word_k: int | None = None
    store_words: str = "entity-only"
    index_kind: str = "flat"
    nlist: int | None = None
    nprobe: int | None = None
    kmeans_iters: int = 20
    seed: int = 0
    exclude_self: bool = True
    aggregator: str = "max"

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.per_word_k is not None and self.per_word_k < 1:
            raise ValueError("per_word_k must be >= 1")
        for value, allowed, name in (
            (self.mode, _MODES, "mode"),
            (self.store_words, _STORE_WORDS, "store_words"),
            (self.index_kind, _INDEX_KINDS, "index_kind"),
            (self.aggregator, _AGGREGATORS, "aggregator"),
        ):
            if value not in allowed:
                raise ValueError(f"{name} must be one of {allowed}, got {value!r}")

    @property
    def effective_per_word_k(self) -> int:
        return self.per_word_k if self.per_word_k is not None else self.k


@dataclass(frozen=True)
class MatchedPair:
    query_word: str
    store_word: str
    similarity: float


@dataclass(frozen=True)
class RetrievedExample:
    """One selected store sentence plus the word matches justifying it."""

    sentence_id: int
    score: float
    matched_pairs: tuple[MatchedPair, ...] = field(default_factory=tuple)


def _entity_word_indexes(sentence: LabeledSentence) -> set[int]:
    covered: set[int] = set()
    for span in sentence.spans:
        covered.update(range(span.start, span.end))
    return covered


def build_word_records(
    sentences: list[LabeledSentence], embedder: Embedder, store_words: str = "entity-only"
) -> list[WordRecord]:
    """One WordRecord per kept store word, record ids dense in iteration order.

    entity-only keeps words inside gold entity spans (the non-stop-word
    ones, since stop words never receive embeddings); all keeps every
    non-stop-word token.
    """
    if store_words not in _STORE_WORDS:
        raise ValueError(f"store_words must be one of {_STORE_WORDS}, got {store_words!r}")
    records: list[WordRecord] = []
    for sentence in sentences:
        embeddings = embedder.embed_words(sentence)
        if store_words == "entity-only":
            keep = _entity_word_indexes(sentence)
            embeddings = [w for w in embeddings if w.word_index in keep]
        for w in embeddings:
            records.append(WordRecord(len(records), w.word, w.vector, w.sentence_id))
    return records


def build_sentence_records(
    sentences: list[LabeledSentence], embedder: Embedder
) -> list[SentenceRecord]:
    return [
        SentenceRecord(i, embedder.embed_sentence(s).vector, s.id)
        for i, s in enumerate(sentences)
    ]


def _build_index(records, cfg: RetrieverConfig) -> Index:
    if cfg.index_kind == "flat":
        return build_flat(records)
    records = list(records)
    nlist = cfg.nlist if cfg.nlist is not None else default_nlist(len(records))
    return build_ivf(records, nlist=nlist, kmeans_iters=cfg.kmeans_iters, seed=cfg.seed)


class ExampleStore:
    """Labeled sentences plus the indexes retrieval searches.

    The embedder is attached (not serialized) so the retrieve ops can
    embed incoming queries with the same model that built the store.
    """

    def __init__(
        self,
        sentences: list[LabeledSentence],
        schema: EntitySchema,
        word_index: Index | None = None,
        sentence_index: Index | None = None,
        store_words: str = "entity-only",
        model_name: str | None = None,
        embedder: Embedder | None = None,
    ):
        ids = [s.id for s in sentences]
        if len(set(ids)) != len(ids):
            raise ValueError("store sentences must have unique ids")
        self.sentences = list(sentences)
        self.by_id = {s.id: s for s in sentences}
        self.schema = schema
        self.word_index = word_index
        self.sentence_index = sentence_index
        self.store_words = store_words
        self.model_name = model_name
        self.embedder = embedder
        self._word_counts: Counter | None = None

    def __len__(self) -> int:
        return len(self.sentences)

    @classmethod
    def build(
        cls,
        sentences: list[LabeledSentence],
        schema: EntitySchema,
        embedder: Embedder,
        cfg: RetrieverConfig,
        modes: tuple[str, ...] | None = None,
    ) -> "ExampleStore":
        """Embed the sentences and build the index for each requested mode."""
        if not sentences:
            raise EmptyStore("cannot build a store from zero sentences")
        for s in sentences:
            s.validate(schema)
        modes = modes if modes is not None else (cfg.mode,)
        word_index = None
        sentence_index = None
        if "word-level" in modes:
            records = build_word_records(sentences, embedder, cfg.store_words)
            if not records:
                raise EmptyStore(
                    f"store_words={cfg.store_words!r} kept zero word records"
                )
            word_index = _build_index(records, cfg)
        if "sentence-level" in modes:
            sentence_index = _build_index(build_sentence_records(sentences, embedder), cfg)
        return cls(
            sentences,
            schema,
            word_index=word_index,
            sentence_index=sentence_index,
            store_words=cfg.store_words,
            model_name=embedder.spec.model_name,
            embedder=embedder,
        )

    def word_records_for(self, sentence_id: int) -> int:
        """How many word records a sentence owns (exact overfetch bound
        for self-exclusion)."""
        if self._word_counts is None:
            counts: Counter = Counter()
            if self.word_index is not None:
                counts.update(int(i) for i in self.word_index.sentence_ids)
            self._word_counts = counts
        return self._word_counts[sentence_id]

    def save(self, directory: str | Path) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        write_sentences_jsonl(self.sentences, directory / "sentences.jsonl")
        (directory / "schema.json").write_text(
            json.dumps(self.schema.to_json(), indent=2) + "\n", encoding="utf-8"
        )
        meta = {
            "store_words": self.store_words,
            "model_name": self.model_name,
            "indexes": {},
        }
        if self.word_index is not None:
            save_index(self.word_index, directory / "word_index.bin")
            meta["indexes"]["word"] = "word_index.bin"
        if self.sentence_index is not None:
            save_index(self.sentence_index, directory / "sentence_index.bin")
            meta["indexes"]["sentence"] = "sentence_index.bin"
        (directory / "meta.json").write_text(
            json.dumps(meta, indent=2) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, directory: str | Path, embedder: Embedder | None = None) -> "ExampleStore":
        directory = Path(directory)
        meta_path = directory / "meta.json"
        if not meta_path.exists():
            raise FormatError(f"{directory}: not a store directory (missing meta.json)")
        meta = json.loads(meta_path.read_text(encoding="utf-8"))
        sentences = read_sentences_jsonl(directory / "sentences.jsonl")
        schema = load_schema(directory / "schema.json")
        indexes = meta.get("indexes", {})
        word_index = load_index(directory / indexes["word"]) if "word" in indexes else None
        sentence_index = (
            load_index(directory / indexes["sentence"]) if "sentence" in indexes else None
        )
        return cls(
            sentences,
            schema,
            word_index=word_index,
            sentence_index=sentence_index,
            store_words=meta.get("store_words", "entity-only"),
            model_name=meta.get("model_name"),
            embedder=embedder,
        )


def _require_embedder(store: ExampleStore) -> Embedder:
    if store.embedder is None:
        raise EmptyStore("store has no embedder attached; pass one to ExampleStore.load")
    return store.embedder


def _query_words(store: ExampleStore, query: LabeledSentence) -> list[WordEmbedding]:
    words = _require_embedder(store).embed_words(query)
    if not words:
        raise EmptyQueryAfterStopwords(
            f"query {query.id} has no non-stop-word tokens: {query.text!r}"
        )
    return words


def retrieve_word_level(
    query: LabeledSentence, store: ExampleStore, cfg: RetrieverConfig
) -> list[RetrievedExample]:
    """The word-level retrieval algorithm.

    Pools up to per_word_k hits per query word, collapses to unique store
    sentences keeping each one's maximum similarity, and returns the top
    k. matched_pairs holds every contributing (query word, store word)
    hit for the sentence, best first.
    """
    if store.word_index is None or len(store.word_index) == 0:
        raise EmptyStore("store has no word index")
    query_words = _query_words(store, query)
    per_word_k = cfg.effective_per_word_k
    overfetch = store.word_records_for(query.id) if cfg.exclude_self else 0
    index = store.word_index

    best: dict[int, float] = {}
    pairs: dict[int, list[MatchedPair]] = {}
    per_word_best: dict[int, dict[int, float]] = {}
    for w in query_words:
        hits = search(index, w.vector, per_word_k + overfetch, nprobe=cfg.nprobe)
        if cfg.exclude_self:
            hits = [h for h in hits if int(index.sentence_ids[h.record_id]) != query.id]
        for hit in hits[:per_word_k]:
            sid = int(index.sentence_ids[hit.record_id])
            store_word = index.words[hit.record_id] if index.words else ""
            if sid not in best or hit.score > best[sid]:
                best[sid] = hit.score
            pairs.setdefault(sid, []).append(
                MatchedPair(w.word, store_word, hit.score)
            )
            word_best = per_word_best.setdefault(sid, {})
            prev = word_best.get(w.word_index)
            if prev is None or hit.score > prev:
                word_best[w.word_index] = hit.score

    if cfg.aggregator == "sum":
        scores = {sid: sum(per_word_best[sid].values()) for sid in best}
    else:
        scores = best
    ranked = sorted(scores, key=lambda sid: (-scores[sid], sid))[: cfg.k]
    out = []
    for sid in ranked:
        matched = tuple(
            sorted(pairs[sid], key=lambda p: (-p.similarity, p.query_word, p.store_word))
        )
        out.append(RetrievedExample(sid, float(scores[sid]), matched))
    return out


def retrieve_sentence_level(
    query: LabeledSentence, store: ExampleStore, cfg: RetrieverConfig
) -> list[RetrievedExample]:
    """Top-k store sentences by sentence-embedding cosine."""
    if store.sentence_index is None or len(store.sentence_index) == 0:
        raise EmptyStore("store has no sentence index")
    index = store.sentence_index
    vector = _require_embedder(store).embed_sentence(query).vector
    overfetch = 1 if cfg.exclude_self else 0
    hits = search(index, vector, cfg.k + overfetch, nprobe=cfg.nprobe)
    if cfg.exclude_self:
        hits = [h for h in hits if int(index.sentence_ids[h.record_id]) != query.id]
    return [
        RetrievedExample(int(index.sentence_ids[h.record_id]), float(h.score))
        for h in hits[: cfg.k]
    ]


def retrieve(
    query: LabeledSentence, store: ExampleStore, cfg: RetrieverConfig
) -> list[RetrievedExample]:
    if cfg.mode == "sentence-level":
        return retrieve_sentence_level(query, store, cfg)
    return retrieve_word_level(query, store, cfg)


def retrieval_payload(query_text: str, examples: list[RetrievedExample]) -> dict:
    """JSON-friendly record for the retrieve subcommand's output lines."""
    return {
        "query_text": query_text,
        "examples": [
            {
                "sentence_id": ex.sentence_id,
                "score": ex.score,
                "matched_pairs": [
                    {
                        "query_word": p.query_word,
                        "store_word": p.store_word,
                        "similarity": p.similarity,
                    }
                    for p in ex.matched_pairs
                ],
            }
            for ex in examples
        ],
    }


def with_mode(cfg: RetrieverConfig, mode: str) -> RetrieverConfig:
    return replace(cfg, mode=mode)
