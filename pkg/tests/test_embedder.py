"""Embedding providers, word/sentence embedding, and alignment."""

from __future__ import annotations

import json
import threading
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer

import numpy as np
import pytest

from ragner.corpus import LabeledSentence
from ragner.embedder import (
    Embedder,
    EmbedderSpec,
    PrecomputedEmbeddingProvider,
    ProviderEncoding,
    RemoteEmbeddingProvider,
    SubwordToken,
    l2_normalize,
    load_precomputed,
    token_char_ranges,
    write_precomputed,
)
from ragner.errors import (
    AlignmentGap,
    DimensionMismatch,
    EmbedderError,
    EmptyInput,
    FormatError,
    MissingEntry,
    ProviderUnavailable,
)
from ragner.stopwords import load_stopwords

from helpers import encoding_record, make_embedder


def sent(text: str, sid: int = 0) -> LabeledSentence:
    return LabeledSentence(sid, tuple(text.split()), ())


# --- small pure helpers --------------------------------------------------------


def test_token_char_ranges():
    assert token_char_ranges(["I", "want", "tea"]) == [(0, 1), (2, 6), (7, 10)]


def test_l2_normalize_unit_norm():
    v = l2_normalize(np.array([3.0, 4.0]))
    assert np.allclose(v, [0.6, 0.8])
    assert abs(np.linalg.norm(v) - 1.0) < 1e-12


def test_l2_normalize_zero_vector_raises():
    with pytest.raises(EmbedderError):
        l2_normalize(np.zeros(4))


def test_spec_rejects_unknown_provider():
    with pytest.raises(ValueError):
        EmbedderSpec(provider="local-gpu")


def test_spec_rejects_bad_dimension():
    with pytest.raises(ValueError):
        EmbedderSpec(provider="precomputed-file", dimension=0)


def test_load_stopwords_override(tmp_path):
    path = tmp_path / "stop.txt"
    path.write_text("The\nof # function word\n\n# comment only\n", encoding="utf-8")
    assert load_stopwords(path) == frozenset({"the", "of"})


# --- precomputed provider -------------------------------------------------------


def test_precomputed_round_trip(tmp_path):
    rec = encoding_record(["hello", "world"], dim=4)
    path = tmp_path / "emb.jsonl"
    write_precomputed([rec], path)
    provider = load_precomputed(path)
    assert len(provider) == 1
    enc = provider.encode("hello world")
    assert [t.text for t in enc.tokens] == ["hello", "world"]
    assert enc.sentence_vector.shape == (4,)


def test_precomputed_is_keyed_by_exact_text(tmp_path):
    path = tmp_path / "emb.jsonl"
    write_precomputed([encoding_record(["hello", "world"], dim=4)], path)
    provider = load_precomputed(path)
    with pytest.raises(MissingEntry):
        provider.encode("Hello world")


def test_precomputed_rejects_invalid_json(tmp_path):
    path = tmp_path / "emb.jsonl"
    path.write_text('{"text": "ok", "tokens": [], "sentence_vector": [1]}\nnot json\n')
    with pytest.raises(FormatError):
        load_precomputed(path)


def test_precomputed_rejects_record_without_text(tmp_path):
    path = tmp_path / "emb.jsonl"
    path.write_text('{"tokens": [], "sentence_vector": [1]}\n')
    with pytest.raises(FormatError):
        load_precomputed(path)


# --- Embedder.embed_words / embed_sentence ---------------------------------------


def test_embed_words_skips_stop_words(tmp_path):
    s = sent("I want to buy a table from store")
    embedder = make_embedder([s], tmp_path, dim=8)
    words = [w.word for w in embedder.embed_words(s)]
    assert words == ["want", "buy", "table", "store"]


def test_embed_words_records_word_indices(tmp_path):
    s = sent("I want to buy a table from store")
    embedder = make_embedder([s], tmp_path, dim=8)
    indices = {w.word: w.word_index for w in embedder.embed_words(s)}
    assert indices == {"want": 1, "buy": 3, "table": 5, "store": 7}


def test_embed_words_vectors_are_unit_norm(tmp_path):
    s = sent("quantum computing accelerates discovery")
    embedder = make_embedder([s], tmp_path, dim=8)
    for w in embedder.embed_words(s):
        assert abs(np.linalg.norm(w.vector) - 1.0) < 1e-9


def test_word_vector_is_normalized_mean_of_subwords():
    # "snowboarding" split into three subword pieces with distinct vectors
    v1, v2, v3 = [1.0, 0.0, 0.0], [0.0, 2.0, 0.0], [0.0, 0.0, 3.0]
    tokens = [
        SubwordToken("snow", 0, 4, np.array(v1)),
        SubwordToken("board", 4, 9, np.array(v2)),
        SubwordToken("ing", 9, 12, np.array(v3)),
    ]
    enc = ProviderEncoding(tokens, np.array([1.0, 0.0, 0.0]))
    provider = PrecomputedEmbeddingProvider({"snowboarding": enc})
    spec = EmbedderSpec(provider="precomputed-file", dimension=3)
    [word] = Embedder(provider, spec).embed_words(sent("snowboarding"))
    expected = np.array([1.0, 2.0, 3.0]) / 3.0
    assert np.allclose(word.vector, expected / np.linalg.norm(expected))


def test_subword_sharing_across_word_boundary():
    # a subword token straddling two words contributes to both means
    shared = SubwordToken("b c", 1, 4, np.array([0.0, 1.0]))
    tokens = [SubwordToken("a", 0, 1, np.array([1.0, 0.0])), shared]
    enc = ProviderEncoding(tokens, np.array([1.0, 0.0]))
    provider = PrecomputedEmbeddingProvider({"ab cd": enc})
    spec = EmbedderSpec(provider="precomputed-file", dimension=2, stopwords=frozenset())
    words = Embedder(provider, spec).embed_words(sent("ab cd"))
    assert np.allclose(words[0].vector, l2_normalize(np.array([1.0, 1.0])))
    assert np.allclose(words[1].vector, [0.0, 1.0])


def test_embed_words_alignment_gap():
    tokens = [SubwordToken("hello", 0, 5, np.array([1.0, 0.0]))]
    enc = ProviderEncoding(tokens, np.array([1.0, 0.0]))
    provider = PrecomputedEmbeddingProvider({"hello world": enc})
    spec = EmbedderSpec(provider="precomputed-file", dimension=2)
    with pytest.raises(AlignmentGap, match="world"):
        Embedder(provider, spec).embed_words(sent("hello world"))


def test_embed_empty_sentence_raises():
    provider = PrecomputedEmbeddingProvider({})
    spec = EmbedderSpec(provider="precomputed-file", dimension=2)
    empty = LabeledSentence(0, (), ())
    with pytest.raises(EmptyInput):
        Embedder(provider, spec).embed_words(empty)
    with pytest.raises(EmptyInput):
        Embedder(provider, spec).embed_sentence(empty)


def test_dimension_mismatch_detected(tmp_path):
    s = sent("quantum computing")
    path = tmp_path / "emb.jsonl"
    write_precomputed([encoding_record(s.tokens, dim=8)], path)
    spec = EmbedderSpec(provider="precomputed-file", dimension=16)
    embedder = Embedder(load_precomputed(path), spec)
    with pytest.raises(DimensionMismatch):
        embedder.embed_words(s)


def test_embed_sentence_normalizes(tmp_path):
    s = sent("quantum computing")
    embedder = make_embedder([s], tmp_path, dim=8, sentence_vectors={s.text: [3.0] * 8})
    vec = embedder.embed_sentence(s).vector
    assert abs(np.linalg.norm(vec) - 1.0) < 1e-9
    assert np.allclose(vec, np.full(8, 1.0 / np.sqrt(8)))


def test_provider_called_once_per_text():
    calls = []

    class CountingProvider:
        def encode(self, text):
            calls.append(text)
            tokens = [SubwordToken("hi", 0, 2, np.array([1.0, 0.0]))]
            return ProviderEncoding(tokens, np.array([0.0, 1.0]))

    spec = EmbedderSpec(provider="precomputed-file", dimension=2, stopwords=frozenset())
    embedder = Embedder(CountingProvider(), spec)
    s = sent("hi")
    embedder.embed_words(s)
    embedder.embed_sentence(s)
    embedder.embed_words(s)
    assert calls == ["hi"]


# --- remote provider --------------------------------------------------------------


class _EmbeddingHandler(BaseHTTPRequestHandler):
    fail_first = 0
    mode = "ok"
    requests_seen: list[dict] = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).requests_seen.append(body)
        if type(self).fail_first > 0:
            type(self).fail_first -= 1
            self.send_response(503)
            self.end_headers()
            return
        if type(self).mode == "reject":
            self.send_response(422)
            self.end_headers()
            self.wfile.write(b"bad request")
            return
        if type(self).mode == "garbage":
            self.send_response(200)
            self.send_header("Content-Type", "application/json")
            self.end_headers()
            self.wfile.write(b"<html>oops</html>")
            return
        record = encoding_record(body["text"].split(), dim=4)
        self.send_response(200)
        self.send_header("Content-Type", "application/json")
        self.end_headers()
        self.wfile.write(json.dumps(record).encode())

    def log_message(self, *args):
        pass


@pytest.fixture()
def embedding_server():
    _EmbeddingHandler.fail_first = 0
    _EmbeddingHandler.mode = "ok"
    _EmbeddingHandler.requests_seen = []
    server = ThreadingHTTPServer(("127.0.0.1", 0), _EmbeddingHandler)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{server.server_port}/embed"
    server.shutdown()
    thread.join()


def test_remote_provider_round_trip(embedding_server):
    provider = RemoteEmbeddingProvider(embedding_server, "test-model", timeout=5.0)
    enc = provider.encode("hello world")
    assert [t.text for t in enc.tokens] == ["hello", "world"]
    assert _EmbeddingHandler.requests_seen[0] == {"model": "test-model", "text": "hello world"}


def test_remote_provider_retries_transient_errors(embedding_server):
    _EmbeddingHandler.fail_first = 2
    provider = RemoteEmbeddingProvider(embedding_server, "m", timeout=5.0, max_retries=2)
    enc = provider.encode("hello")
    assert enc.sentence_vector.shape == (4,)
    assert len(_EmbeddingHandler.requests_seen) == 3


def test_remote_provider_gives_up_after_retries(embedding_server):
    _EmbeddingHandler.fail_first = 10
    provider = RemoteEmbeddingProvider(embedding_server, "m", timeout=5.0, max_retries=1)
    with pytest.raises(ProviderUnavailable):
        provider.encode("hello")
    assert len(_EmbeddingHandler.requests_seen) == 2


def test_remote_provider_client_error_fails_fast(embedding_server):
    _EmbeddingHandler.mode = "reject"
    provider = RemoteEmbeddingProvider(embedding_server, "m", timeout=5.0, max_retries=3)
    with pytest.raises(ProviderUnavailable):
        provider.encode("hello")
    assert len(_EmbeddingHandler.requests_seen) == 1


def test_remote_provider_non_json_response(embedding_server):
    _EmbeddingHandler.mode = "garbage"
    provider = RemoteEmbeddingProvider(embedding_server, "m", timeout=5.0)
    with pytest.raises(FormatError):
        provider.encode("hello")


def test_remote_provider_unreachable():
    provider = RemoteEmbeddingProvider(
        "http://127.0.0.1:1/embed", "m", timeout=0.2, max_retries=0
    )
    with pytest.raises(ProviderUnavailable):
        provider.encode("hello")
