import numpy as np
import pytest

from hashpress.retrieval import (
    ConfigError,
    FormatError,
    average_precision,
    brute_force_ranking,
    build_index,
    hamming,
    hamming_many,
    mean_average_precision,
    pack_code,
    precision_recall_at_k,
    query,
    read_index,
    share_label,
    unpack_code,
    write_index,
)


def random_codes(rng, n, q):
    return {i: np.where(rng.normal(size=q) > 0, 1.0, -1.0) for i in range(n)}


def test_pack_code_mapping():
    assert pack_code(np.full(8, -1.0)) == b"\x00"
    assert pack_code(np.full(8, 1.0)) == b"\xff"
    code = np.array([1.0, -1, -1, -1, -1, -1, -1, -1])
    assert pack_code(code) == b"\x01"  # bit 0 = component 0


def test_pack_requires_multiple_of_eight():
    with pytest.raises(ConfigError):
        pack_code(np.ones(12))


def test_pack_unpack_roundtrip():
    rng = np.random.default_rng(0)
    for q in (8, 16, 64):
        for _ in range(50):
            code = np.where(rng.normal(size=q) > 0, 1.0, -1.0)
            assert np.array_equal(unpack_code(pack_code(code), q), code)


def test_hamming_basics():
    a = pack_code(np.ones(64))
    b = pack_code(-np.ones(64))
    assert hamming(a, a) == 0
    assert hamming(a, b) == 64
    with pytest.raises(ConfigError):
        hamming(b"\x00", b"\x00\x00")


def test_hamming_matches_inner_product():
    rng = np.random.default_rng(1)
    q = 32
    for _ in range(100):
        ca = np.where(rng.normal(size=q) > 0, 1.0, -1.0)
        cb = np.where(rng.normal(size=q) > 0, 1.0, -1.0)
        h = hamming(pack_code(ca), pack_code(cb))
        assert q - 2 * h == int(np.dot(ca, cb))


def test_hamming_is_a_metric():
    rng = np.random.default_rng(2)
    q = 24
    for _ in range(200):
        a, b, c = (pack_code(np.where(rng.normal(size=q) > 0, 1.0, -1.0)) for _ in range(3))
        assert hamming(a, b) == hamming(b, a)
        assert (hamming(a, b) == 0) == (a == b)
        assert hamming(a, c) <= hamming(a, b) + hamming(b, c)


def test_hamming_many_agrees_with_scalar():
    rng = np.random.default_rng(3)
    q = 16
    codes = [np.where(rng.normal(size=q) > 0, 1.0, -1.0) for _ in range(20)]
    keys = np.vstack([np.frombuffer(pack_code(c), dtype=np.uint8) for c in codes])
    target = codes[0]
    dists = hamming_many(pack_code(target), keys)
    expected = [hamming(pack_code(target), pack_code(c)) for c in codes]
    assert dists.tolist() == expected


def test_build_index_buckets_identical_codes():
    code = np.ones(8)
    table = build_index({0: code, 1: code.copy(), 2: -code})
    assert table.buckets[pack_code(code)] == [0, 1]
    assert table.buckets[pack_code(-code)] == [2]
    assert table.n_images == 3


def test_build_index_rejects_duplicates():
    with pytest.raises(ValueError):
        build_index([(0, np.ones(8)), (0, np.ones(8))])


def test_build_index_empty_and_bucket_bound():
    assert build_index({}, q=8).buckets == {}
    rng = np.random.default_rng(4)
    codes = random_codes(rng, 300, 8)
    table = build_index(codes)
    assert len(table.buckets) <= min(300, 2**8)


def test_query_exact_bucket_ranks_first():
    rng = np.random.default_rng(5)
    codes = random_codes(rng, 40, 16)
    table = build_index(codes)
    result = query(table, codes[7], top_k=5)
    assert result.distances[0] == 0
    assert 7 in [i for i, d in zip(result.ids, result.distances) if d == 0]


def test_query_top_k_exceeds_archive():
    rng = np.random.default_rng(6)
    codes = random_codes(rng, 12, 8)
    table = build_index(codes)
    result = query(table, codes[0], top_k=100)
    assert len(result.ids) == 12
    assert result.distances == sorted(result.distances)


def test_query_empty_table():
    result = query(build_index({}, q=8), np.ones(8), top_k=3)
    assert result.ids == [] and result.distances == []


def test_query_matches_brute_force():
    rng = np.random.default_rng(7)
    for trial in range(40):
        q = int(rng.choice([8, 64]))
        n = int(rng.integers(1, 400))
        codes = random_codes(rng, n, q)
        table = build_index(codes)
        probe = np.where(rng.normal(size=q) > 0, 1.0, -1.0)
        top_k = int(rng.integers(1, n + 4))
        result = query(table, probe, top_k=top_k)
        ids, dists = brute_force_ranking(probe, codes, top_k=top_k)
        assert result.ids == ids, f"trial {trial}"
        assert result.distances == dists


def test_query_tie_break_ascending_id():
    code = np.ones(8)
    table = build_index({5: code, 1: code.copy(), 3: code.copy()})
    result = query(table, code, top_k=3)
    assert result.ids == [1, 3, 5]


def test_precision_recall_example():
    archive = {0: [1, 0], 1: [0, 1], 2: [1, 0], 3: [1, 0], 4: [1, 1], 5: [0, 1]}
    # query relevant to 0,2,3,4 (label 0); top-2 = [0 (rel), 1 (irrel)]
    p, r = precision_recall_at_k([0, 1], [1, 0], archive, k=2)
    assert p == 0.5 and r == 0.25


def test_precision_recall_perfect():
    archive = {0: [1], 1: [1], 2: [0]}
    archive = {k: np.array(v + [1 - v[0]]) for k, v in archive.items()}
    qlab = np.array([1, 0])
    p, r = precision_recall_at_k([0, 1], qlab, archive, k=2)
    assert p == 1.0 and r == 1.0


def test_recall_defaults_to_one_without_relevant():
    archive = {0: np.array([0, 1]), 1: np.array([0, 1])}
    p, r = precision_recall_at_k([0], np.array([1, 0]), archive, k=1)
    assert p == 0.0 and r == 1.0


def test_average_precision_hand_values():
    assert average_precision([1, 0, 1]) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)
    assert average_precision([1, 0, 1]) == pytest.approx(0.8333, abs=1e-4)
    assert average_precision([1, 1, 1, 1]) == 1.0
    assert average_precision([0, 0, 0]) == 0.0
    assert average_precision([0, 1]) == 0.5


def test_reversing_ranking_never_improves_ap():
    rng = np.random.default_rng(8)
    for _ in range(100):
        flags = rng.integers(0, 2, size=10).tolist()
        sorted_first = sorted(flags, reverse=True)
        assert average_precision(sorted_first) >= average_precision(flags) - 1e-12


def test_mean_average_precision_exclusions():
    archive = {0: np.array([1, 0]), 1: np.array([1, 0])}
    rankings = [
        ([0, 1], np.array([1, 0])),  # AP 1
        ([0, 1], np.array([0, 1])),  # nothing relevant -> excluded
    ]
    m, excluded = mean_average_precision(rankings, archive)
    assert m == 1.0 and excluded == 1


def test_map_single_query_is_its_ap():
    archive = {0: np.array([1]), 1: np.array([0]), 2: np.array([1])}
    archive = {k: np.concatenate([v, [0]]) for k, v in archive.items()}
    rankings = [([0, 1, 2], np.array([1, 0]))]
    m, _ = mean_average_precision(rankings, archive)
    assert m == pytest.approx(average_precision([1, 0, 1]))


def test_share_label_rule():
    assert share_label([1, 0, 1], [0, 0, 1])
    assert not share_label([1, 0, 0], [0, 1, 1])


def test_index_file_roundtrip(tmp_path):
    rng = np.random.default_rng(9)
    codes = random_codes(rng, 60, 16)
    table = build_index(codes)
    path = tmp_path / "t.jcix"
    write_index(path, table)
    raw = path.read_bytes()
    assert raw[:4] == b"JCIX"
    back = read_index(path)
    assert back.q == 16
    assert back.buckets == table.buckets
    # deterministic bytes
    write_index(tmp_path / "t2.jcix", back)
    assert (tmp_path / "t2.jcix").read_bytes() == raw


def test_index_file_bad_magic(tmp_path):
    p = tmp_path / "bad.jcix"
    p.write_bytes(b"NOPE" + b"\x00" * 16)
    with pytest.raises(FormatError):
        read_index(p)
