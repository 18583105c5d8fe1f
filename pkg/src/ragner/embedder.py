"""Contextualized word-level and sentence-level embeddings.

Word vectors are built by averaging the provider's subword-token vectors
whose character offsets overlap the word, then L2-normalizing, so cosine
similarity downstream is a plain dot product. Providers are pluggable:
a remote HTTP service for production and a precomputed JSON-lines file for
deterministic offline runs.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Protocol

import numpy as np
import requests

from .corpus import LabeledSentence
from .errors import (
    AlignmentGap,
    DimensionMismatch,
    EmbedderError,
    EmptyInput,
    FormatError,
    MissingEntry,
    ProviderUnavailable,
)
from .stopwords import DEFAULT_STOPWORDS

NORM_TOLERANCE = 1e-6


@dataclass(frozen=True)
class WordEmbedding:
    """Unit-norm contextual embedding of one word of one sentence."""

    sentence_id: int
    word_index: int
    word: str
    vector: np.ndarray


@dataclass(frozen=True)
class SentenceEmbedding:
    """Unit-norm pooled embedding of a whole sentence."""

    sentence_id: int
    vector: np.ndarray


@dataclass(frozen=True)
class EmbedderSpec:
    """Which provider to use and what its outputs must look like."""

    provider: str  # "remote-service" | "precomputed-file"
    model_name: str = "bge-base-en"
    dimension: int = 768
    stopwords: frozenset[str] = DEFAULT_STOPWORDS

    def __post_init__(self):
        if self.provider not in ("remote-service", "precomputed-file"):
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.dimension <= 0:
            raise ValueError("dimension must be positive")


@dataclass(frozen=True)
class SubwordToken:
    text: str
    start_char: int
    end_char: int
    vector: np.ndarray


@dataclass(frozen=True)
class ProviderEncoding:
    """Raw provider output for one sentence text."""

    tokens: tuple[SubwordToken, ...]
    sentence_vector: np.ndarray


class EmbeddingProvider(Protocol):
    def encode(self, text: str) -> ProviderEncoding: ...


def l2_normalize(vector: np.ndarray) -> np.ndarray:
    v = np.asarray(vector, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise EmbedderError("cannot normalize a zero vector")
    return v / norm


def _encoding_from_dict(doc: dict, source: str) -> ProviderEncoding:
    try:
        tokens = tuple(
            SubwordToken(
                text=t["text"],
                start_char=int(t["start_char"]),
                end_char=int(t["end_char"]),
                vector=np.asarray(t["vector"], dtype=np.float64),
            )
            for t in doc["tokens"]
        )
        sentence_vector = np.asarray(doc["sentence_vector"], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{source}: bad embedding record: {exc}") from exc
    return ProviderEncoding(tokens=tokens, sentence_vector=sentence_vector)


class PrecomputedEmbeddingProvider:
    """Serves embeddings from a JSON-lines file keyed by exact sentence text.

    One record per line: {"text", "tokens": [{"text", "start_char",
    "end_char", "vector"}, ...], "sentence_vector"}. Vectors may be stored
    non-normalized; normalization happens at the embedding-op boundary.
    """

    def __init__(self, entries: dict[str, ProviderEncoding], path: str | None = None):
        self._entries = entries
        self.path = path

    def __len__(self) -> int:
        return len(self._entries)

    def encode(self, text: str) -> ProviderEncoding:
        try:
            return self._entries[text]
        except KeyError:
            raise MissingEntry(f"no precomputed embedding for {text!r}") from None


def load_precomputed(path: str | Path) -> PrecomputedEmbeddingProvider:
    """Load a precomputed embedding file; raises FormatError on bad records."""
    entries: dict[str, ProviderEncoding] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{line_no}: invalid JSON: {exc}") from exc
            if not isinstance(doc, dict) or "text" not in doc:
                raise FormatError(f"{path}:{line_no}: record missing 'text'")
            entries[doc["text"]] = _encoding_from_dict(doc, f"{path}:{line_no}")
    return PrecomputedEmbeddingProvider(entries, path=str(path))


class RemoteEmbeddingProvider:
    """HTTP embedding service client.

    Wire contract: POST {model, text} as JSON; the response carries the
    same record shape as the precomputed file. In-flight requests are
    bounded by `max_in_flight`; transient failures are retried.
    """

    def __init__(
        self,
        endpoint: str,
        model_name: str,
        timeout: float = 30.0,
        max_retries: int = 2,
        max_in_flight: int = 8,
        session: requests.Session | None = None,
    ):
        self.endpoint = endpoint
        self.model_name = model_name
        self.timeout = timeout
        self.max_retries = max_retries
        self._semaphore = threading.BoundedSemaphore(max_in_flight)
        self._session = session or requests.Session()

    def encode(self, text: str) -> ProviderEncoding:
        payload = {"model": self.model_name, "text": text}
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            try:
                with self._semaphore:
                    resp = self._session.post(self.endpoint, json=payload, timeout=self.timeout)
                if resp.status_code >= 500:
                    last_error = ProviderUnavailable(
                        f"embedding service returned {resp.status_code}"
                    )
                elif resp.status_code >= 400:
                    raise ProviderUnavailable(
                        f"embedding service rejected request: {resp.status_code} {resp.text[:200]}"
                    )
                else:
                    return _encoding_from_dict(resp.json(), self.endpoint)
            except (requests.ConnectionError, requests.Timeout) as exc:
                last_error = exc
            except json.JSONDecodeError as exc:
                raise FormatError(f"{self.endpoint}: non-JSON response: {exc}") from exc
            if attempt < self.max_retries:
                time.sleep(min(0.1 * 2**attempt, 2.0))
        raise ProviderUnavailable(f"embedding service unreachable: {last_error}")


def token_char_ranges(tokens: list[str]) -> list[tuple[int, int]]:
    """Character offsets of each token within `" ".join(tokens)`."""
    ranges = []
    pos = 0
    for tok in tokens:
        ranges.append((pos, pos + len(tok)))
        pos += len(tok) + 1
    return ranges


class Embedder:
    """Binds a provider to an EmbedderSpec and exposes the embedding ops."""

    def __init__(self, provider: EmbeddingProvider, spec: EmbedderSpec):
        self.provider = provider
        self.spec = spec
        self._cache: dict[str, ProviderEncoding] = {}
        self._cache_lock = threading.Lock()

    def _encode(self, text: str) -> ProviderEncoding:
        with self._cache_lock:
            cached = self._cache.get(text)
        if cached is not None:
            return cached
        enc = self.provider.encode(text)
        for tok in enc.tokens:
            if tok.vector.shape != (self.spec.dimension,):
                raise DimensionMismatch(
                    f"provider returned {tok.vector.shape} for token {tok.text!r}, "
                    f"expected ({self.spec.dimension},)"
                )
        if enc.sentence_vector.shape != (self.spec.dimension,):
            raise DimensionMismatch(
                f"provider sentence vector has shape {enc.sentence_vector.shape}, "
                f"expected ({self.spec.dimension},)"
            )
        with self._cache_lock:
            self._cache[text] = enc
        return enc

    def embed_words(self, sentence: LabeledSentence) -> list[WordEmbedding]:
        """One unit-norm WordEmbedding per non-stop-word token.

        Each word vector is the mean of the provider subword vectors whose
        character offsets overlap the word, L2-normalized. Raises
        AlignmentGap when a kept word is covered by zero subword tokens.
        """
        if not sentence.tokens:
            raise EmptyInput(f"sentence {sentence.id} has no tokens")
        enc = self._encode(sentence.text)
        out: list[WordEmbedding] = []
        for idx, (word, (ws, we)) in enumerate(zip(sentence.tokens, token_char_ranges(sentence.tokens))):
            if word.lower() in self.spec.stopwords:
                continue
            covering = [t.vector for t in enc.tokens if t.start_char < we and t.end_char > ws]
            if not covering:
                raise AlignmentGap(
                    f"sentence {sentence.id}: word {word!r} at chars [{ws},{we}) "
                    "covered by no subword token"
                )
            mean = np.mean(np.stack(covering), axis=0)
            out.append(WordEmbedding(sentence.id, idx, word, l2_normalize(mean)))
        return out

    def embed_sentence(self, sentence: LabeledSentence) -> SentenceEmbedding:
        """The provider's pooled sentence vector, L2-normalized."""
        if not sentence.tokens:
            raise EmptyInput(f"sentence {sentence.id} has no tokens")
        enc = self._encode(sentence.text)
        return SentenceEmbedding(sentence.id, l2_normalize(enc.sentence_vector))


def write_precomputed(records: list[dict], path: str | Path) -> None:
    """Write precomputed embedding records (dicts in the file schema)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")
