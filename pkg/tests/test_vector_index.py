"""Exact flat search, IVF clustering/probing, and index persistence."""

from __future__ import annotations

import numpy as np
import pytest

from ragner.errors import (
    DimensionMismatch,
    EmptyCollection,
    FormatError,
    NlistTooLarge,
    VersionMismatch,
)
from ragner.vector_index import (
    FlatIndex,
    IvfIndex,
    SentenceRecord,
    WordRecord,
    build_flat,
    build_ivf,
    default_nlist,
    default_nprobe,
    flat_from_matrix,
    ivf_from_matrix,
    load_index,
    save_index,
    search,
)


def unit_rows(rng: np.random.Generator, n: int, dim: int) -> np.ndarray:
    m = rng.normal(size=(n, dim))
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def oracle_top_k(matrix: np.ndarray, query: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Reference top-k: plain python loop, ties broken by ascending record id."""
    scores = [float(np.dot(row, query)) for row in matrix]
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    return [(i, scores[i]) for i in order[:k]]


def word_records(matrix: np.ndarray) -> list[WordRecord]:
    return [
        WordRecord(i, f"w{i}", matrix[i], sentence_id=1000 + i) for i in range(matrix.shape[0])
    ]


# --- defaults ------------------------------------------------------------------


def test_default_nlist_is_floor_sqrt():
    assert default_nlist(1) == 1
    assert default_nlist(10) == 3
    assert default_nlist(100) == 10
    assert default_nlist(99) == 9
    assert default_nlist(100000) == 316


def test_default_nprobe_is_ceil_eighth():
    assert default_nprobe(1) == 1
    assert default_nprobe(8) == 1
    assert default_nprobe(9) == 2
    assert default_nprobe(316) == 40


# --- flat exactness ---------------------------------------------------------------


@pytest.mark.parametrize("dim", [4, 64])
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_flat_matches_oracle(dim, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(5, 300))
    matrix = unit_rows(rng, n, dim)
    index = build_flat(word_records(matrix))
    for _ in range(10):
        query = unit_rows(rng, 1, dim)[0]
        k = int(rng.integers(1, 21))
        hits = search(index, query, k)
        expected = oracle_top_k(matrix, query, k)
        assert [h.record_id for h in hits] == [i for i, _ in expected]
        for hit, (_, score) in zip(hits, expected):
            assert abs(hit.score - score) < 1e-6


def test_flat_tie_break_is_ascending_record_id():
    v = np.array([1.0, 0.0])
    matrix = np.stack([v, v, v])
    index = flat_from_matrix(matrix, sentence_ids=[7, 8, 9])
    hits = search(index, v, 3)
    assert [h.record_id for h in hits] == [0, 1, 2]


def test_flat_k_larger_than_n():
    rng = np.random.default_rng(3)
    matrix = unit_rows(rng, 4, 8)
    hits = search(build_flat(word_records(matrix)), matrix[0], 50)
    assert len(hits) == 4


def test_flat_scores_bounded_by_cosine():
    rng = np.random.default_rng(4)
    matrix = unit_rows(rng, 64, 16)
    index = build_flat(word_records(matrix))
    for _ in range(20):
        q = unit_rows(rng, 1, 16)[0]
        for h in search(index, q, 64):
            assert -1.0 - 1e-9 <= h.score <= 1.0 + 1e-9


def test_flat_carries_words_and_sentence_ids():
    rng = np.random.default_rng(5)
    matrix = unit_rows(rng, 3, 4)
    index = build_flat(word_records(matrix))
    assert index.words == ["w0", "w1", "w2"]
    assert list(index.sentence_ids) == [1000, 1001, 1002]


# --- input validation ----------------------------------------------------------


def test_empty_records_rejected():
    with pytest.raises(EmptyCollection):
        build_flat([])


def test_non_dense_record_ids_rejected():
    v = np.array([1.0, 0.0])
    with pytest.raises(ValueError, match="dense"):
        build_flat([WordRecord(0, "a", v, 0), WordRecord(2, "b", v, 1)])


def test_mixed_dimensions_rejected():
    with pytest.raises(DimensionMismatch):
        build_flat(
            [
                WordRecord(0, "a", np.array([1.0, 0.0]), 0),
                WordRecord(1, "b", np.array([1.0, 0.0, 0.0]), 1),
            ]
        )


def test_non_unit_vectors_rejected():
    with pytest.raises(ValueError, match="unit-norm"):
        build_flat([WordRecord(0, "a", np.array([2.0, 0.0]), 0)])


def test_bad_query_dimension_rejected():
    index = flat_from_matrix(np.array([[1.0, 0.0]]), [0])
    with pytest.raises(DimensionMismatch):
        search(index, np.array([1.0, 0.0, 0.0]), 1)


def test_k_must_be_positive():
    index = flat_from_matrix(np.array([[1.0, 0.0]]), [0])
    with pytest.raises(ValueError):
        search(index, np.array([1.0, 0.0]), 0)


def test_nlist_out_of_range():
    rng = np.random.default_rng(6)
    matrix = unit_rows(rng, 5, 4)
    with pytest.raises(NlistTooLarge):
        build_ivf(word_records(matrix), nlist=6)
    with pytest.raises(NlistTooLarge):
        build_ivf(word_records(matrix), nlist=0)


def test_nprobe_out_of_range():
    rng = np.random.default_rng(7)
    matrix = unit_rows(rng, 16, 4)
    index = build_ivf(word_records(matrix), nlist=4)
    with pytest.raises(ValueError):
        index.search(matrix[0], 1, nprobe=0)
    with pytest.raises(ValueError):
        index.search(matrix[0], 1, nprobe=5)


# --- IVF correctness ------------------------------------------------------------


@pytest.mark.parametrize("seed", [0, 11, 29])
def test_ivf_full_probe_equals_flat(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(30, 200))
    dim = int(rng.choice([4, 32]))
    matrix = unit_rows(rng, n, dim)
    flat = build_flat(word_records(matrix))
    nlist = default_nlist(n)
    ivf = build_ivf(word_records(matrix), nlist=nlist, seed=seed)
    for _ in range(10):
        query = unit_rows(rng, 1, dim)[0]
        fh = search(flat, query, 10)
        ih = search(ivf, query, 10, nprobe=nlist)
        assert [h.record_id for h in fh] == [h.record_id for h in ih]
        assert np.allclose([h.score for h in fh], [h.score for h in ih], atol=1e-12)


def test_ivf_recall_non_decreasing_in_nprobe():
    rng = np.random.default_rng(13)
    n, dim, k = 400, 16, 10
    matrix = unit_rows(rng, n, dim)
    flat = build_flat(word_records(matrix))
    nlist = 16
    ivf = build_ivf(word_records(matrix), nlist=nlist, seed=13)
    queries = unit_rows(rng, 20, dim)

    nprobes = [1, 2, 4, 8, 16]
    recalls = []
    for nprobe in nprobes:
        got = 0
        for q in queries:
            truth = {h.record_id for h in search(flat, q, k)}
            found = {h.record_id for h in search(ivf, q, k, nprobe=nprobe)}
            got += len(truth & found)
        recalls.append(got / (len(queries) * k))
    assert all(b >= a for a, b in zip(recalls, recalls[1:]))
    assert recalls[-1] == 1.0


def test_ivf_tie_break_matches_flat():
    v = np.array([0.0, 1.0])
    w = np.array([1.0, 0.0])
    matrix = np.stack([v, w, v, w, v, w])
    ivf = ivf_from_matrix(matrix, sentence_ids=list(range(6)), words=None, nlist=2)
    hits = ivf.search(v, 6, nprobe=2)
    assert [h.record_id for h in hits] == [0, 2, 4, 1, 3, 5]


def test_ivf_build_is_deterministic():
    rng = np.random.default_rng(17)
    matrix = unit_rows(rng, 120, 8)
    a = build_ivf(word_records(matrix), nlist=8, seed=42)
    b = build_ivf(word_records(matrix), nlist=8, seed=42)
    assert np.array_equal(a.centroids, b.centroids)
    assert np.array_equal(a.row_record_ids, b.row_record_ids)
    assert np.array_equal(a.offsets, b.offsets)


def test_ivf_separates_well_separated_blobs():
    rng = np.random.default_rng(19)
    e0 = np.array([1.0, 0.0, 0.0, 0.0])
    e1 = np.array([0.0, 1.0, 0.0, 0.0])
    rows = []
    membership = []
    for i in range(40):
        base = e0 if i % 2 == 0 else e1
        noisy = base + rng.normal(scale=0.01, size=4)
        rows.append(noisy / np.linalg.norm(noisy))
        membership.append(i % 2)
    matrix = np.stack(rows)
    ivf = ivf_from_matrix(matrix, sentence_ids=list(range(40)), words=None, nlist=2, seed=19)

    postings = ivf.postings
    groups = [set(map(int, p)) for p in postings]
    blob0 = {i for i, m in enumerate(membership) if m == 0}
    blob1 = {i for i, m in enumerate(membership) if m == 1}
    assert {frozenset(g) for g in groups} == {frozenset(blob0), frozenset(blob1)}

    # probing one cluster near e0 returns only blob-0 records
    hits = ivf.search(e0, 40, nprobe=1)
    assert {h.record_id for h in hits} == blob0


def test_ivf_nlist_one_degenerates_to_flat():
    rng = np.random.default_rng(23)
    matrix = unit_rows(rng, 50, 8)
    flat = build_flat(word_records(matrix))
    ivf = build_ivf(word_records(matrix), nlist=1)
    for _ in range(5):
        q = unit_rows(rng, 1, 8)[0]
        assert [h.record_id for h in search(flat, q, 7)] == [
            h.record_id for h in search(ivf, q, 7, nprobe=1)
        ]


def test_ivf_default_nprobe_used_when_unset():
    rng = np.random.default_rng(27)
    matrix = unit_rows(rng, 300, 8)
    ivf = build_ivf(word_records(matrix), nlist=16, seed=27)
    q = unit_rows(rng, 1, 8)[0]
    assert ivf.search(q, 5) == ivf.search(q, 5, nprobe=default_nprobe(16))


def test_ivf_grouped_rows_map_back_to_records():
    rng = np.random.default_rng(31)
    matrix = unit_rows(rng, 60, 8)
    ivf = build_ivf(word_records(matrix), nlist=5, seed=31)
    assert np.array_equal(ivf.record_order_matrix(), matrix)
    assert sorted(map(int, ivf.row_record_ids)) == list(range(60))


# --- persistence ----------------------------------------------------------------


def test_save_load_flat_round_trip(tmp_path):
    rng = np.random.default_rng(37)
    matrix = unit_rows(rng, 25, 6)
    index = build_flat(word_records(matrix))
    path = tmp_path / "flat.bin"
    save_index(index, path)
    loaded = load_index(path)
    assert isinstance(loaded, FlatIndex)
    assert np.array_equal(loaded.matrix, index.matrix)
    assert np.array_equal(loaded.sentence_ids, index.sentence_ids)
    assert loaded.words == index.words
    q = unit_rows(rng, 1, 6)[0]
    assert search(loaded, q, 5) == search(index, q, 5)


def test_save_load_ivf_round_trip(tmp_path):
    rng = np.random.default_rng(41)
    matrix = unit_rows(rng, 80, 6)
    index = build_ivf(word_records(matrix), nlist=6, seed=41)
    path = tmp_path / "ivf.bin"
    save_index(index, path)
    loaded = load_index(path)
    assert isinstance(loaded, IvfIndex)
    assert np.array_equal(loaded.centroids, index.centroids)
    assert np.array_equal(loaded.row_record_ids, index.row_record_ids)
    assert np.array_equal(loaded.grouped, index.grouped)
    assert np.array_equal(loaded.offsets, index.offsets)
    assert loaded.words == index.words
    assert loaded.kmeans_iters == index.kmeans_iters
    assert loaded.seed == index.seed
    q = unit_rows(rng, 1, 6)[0]
    for nprobe in (1, 3, 6):
        assert search(loaded, q, 9, nprobe=nprobe) == search(index, q, 9, nprobe=nprobe)


def test_save_load_sentence_records_have_no_words(tmp_path):
    rng = np.random.default_rng(43)
    matrix = unit_rows(rng, 10, 4)
    records = [SentenceRecord(i, matrix[i], sentence_id=i) for i in range(10)]
    index = build_flat(records)
    assert index.words is None
    path = tmp_path / "sent.bin"
    save_index(index, path)
    assert load_index(path).words is None


def test_load_rejects_bad_magic(tmp_path):
    path = tmp_path / "bad.bin"
    path.write_bytes(b"NOTIDX" + b"\x00" * 32)
    with pytest.raises(FormatError, match="magic"):
        load_index(path)


def test_load_rejects_future_version(tmp_path):
    rng = np.random.default_rng(47)
    index = build_flat(word_records(unit_rows(rng, 3, 4)))
    path = tmp_path / "v2.bin"
    save_index(index, path)
    data = bytearray(path.read_bytes())
    data[6] = 2  # version field follows the 6-byte magic
    path.write_bytes(bytes(data))
    with pytest.raises(VersionMismatch):
        load_index(path)


def test_load_rejects_truncation_everywhere(tmp_path):
    rng = np.random.default_rng(53)
    index = build_ivf(word_records(unit_rows(rng, 12, 4)), nlist=3, seed=53)
    path = tmp_path / "full.bin"
    save_index(index, path)
    blob = path.read_bytes()
    short = tmp_path / "short.bin"
    # cut at several depths: header, ids, words, vectors, ivf tail
    for cut in (4, 10, 30, 120, len(blob) - 3):
        short.write_bytes(blob[:cut])
        with pytest.raises(FormatError):
            load_index(short)


def test_load_rejects_trailing_bytes(tmp_path):
    rng = np.random.default_rng(59)
    for build in (
        lambda recs: build_flat(recs),
        lambda recs: build_ivf(recs, nlist=2, seed=59),
    ):
        index = build(word_records(unit_rows(rng, 8, 4)))
        path = tmp_path / "trail.bin"
        save_index(index, path)
        path.write_bytes(path.read_bytes() + b"x")
        with pytest.raises(FormatError, match="trailing"):
            load_index(path)
