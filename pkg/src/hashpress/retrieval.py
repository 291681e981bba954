"""Hash-table indexing, decode-free querying, and retrieval metrics.

Codes are packed little-endian ({-1 -> 0, +1 -> 1}, bit 0 = component 0).
Queries probe buckets by increasing Hamming radius (0, 1, 2) and fall back
to an exhaustive scan, so results always equal a brute-force ranking with
ties broken by ascending image id.
"""

from __future__ import annotations

import struct
import time
from dataclasses import dataclass, field

import numpy as np

from . import counters

MULTIPROBE_RADIUS = 2

_IX_MAGIC = b"JCIX"
_IX_VERSION = 1

_POPCOUNT = np.unpackbits(np.arange(256, dtype=np.uint8)[:, None], axis=1).sum(axis=1).astype(np.int64)


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


def pack_code(code):
    """±1 code vector -> packed key bytes."""
    code = np.asarray(code)
    q = code.shape[-1]
    if q % 8:
        raise ConfigError(f"code length {q} is not a multiple of 8")
    return np.packbits((code > 0).astype(np.uint8), bitorder="little").tobytes()


def unpack_code(key, q):
    bits = np.unpackbits(np.frombuffer(key, dtype=np.uint8), count=q, bitorder="little")
    return bits.astype(np.float64) * 2.0 - 1.0


def hamming(a, b):
    """Population count of XOR of two packed keys of equal length."""
    if len(a) != len(b):
        raise ConfigError(f"key lengths differ: {len(a)} vs {len(b)}")
    return (int.from_bytes(a, "little") ^ int.from_bytes(b, "little")).bit_count()


def hamming_many(key, keys_matrix):
    """Hamming distance from one packed key to each row of a (n, q/8) uint8 matrix."""
    q8 = np.frombuffer(key, dtype=np.uint8)
    return _POPCOUNT[np.bitwise_xor(keys_matrix, q8[None, :])].sum(axis=1)


@dataclass
class HashTable:
    q: int
    buckets: dict = field(default_factory=dict)  # packed key -> sorted list of ids

    @property
    def n_images(self):
        return sum(len(v) for v in self.buckets.values())


@dataclass
class RetrievalResult:
    ids: list
    distances: list
    seconds: float


@dataclass
class MetricsReport:
    precision: float
    recall: float
    mean_ap: float
    mean_query_seconds: float
    total_seconds: float
    n_queries: int
    excluded_queries: int = 0
    decode_ops: int = 0


def build_index(codes, q=None):
    """codes: mapping id -> ±1 code, or iterable of (id, code) pairs."""
    items = codes.items() if hasattr(codes, "items") else list(codes)
    table = None
    seen = set()
    for image_id, code in items:
        code = np.asarray(code)
        if table is None:
            table = HashTable(q=q or code.shape[-1])
        if image_id in seen:
            raise ValueError(f"duplicate image id {image_id}")
        seen.add(image_id)
        key = pack_code(code)
        if len(key) * 8 != table.q:
            raise ConfigError(f"code length {code.shape[-1]} != table q {table.q}")
        table.buckets.setdefault(key, []).append(image_id)
    if table is None:
        table = HashTable(q=q or 0)
    for ids in table.buckets.values():
        ids.sort()
    return table


def _probe_keys(key, nbytes, radius, q):
    base = int.from_bytes(key, "little")
    if radius == 0:
        yield key
    elif radius == 1:
        for i in range(q):
            yield (base ^ (1 << i)).to_bytes(nbytes, "little")
    elif radius == 2:
        for i in range(q):
            hi = base ^ (1 << i)
            for j in range(i + 1, q):
                yield (hi ^ (1 << j)).to_bytes(nbytes, "little")
    else:
        raise ValueError("probe radius beyond cap")


def query(table, code, top_k):
    """Ranked ids by Hamming distance, id-ascending on ties. Never touches
    bitstreams: lookups go through bucket keys only."""
    if top_k < 1:
        raise ValueError("top_k must be >= 1")
    start = time.perf_counter()
    if not table.buckets:
        return RetrievalResult([], [], time.perf_counter() - start)
    key = pack_code(code)
    if len(key) * 8 != table.q:
        raise ConfigError(f"query code length mismatch with table q={table.q}")
    nbytes = table.q // 8
    found = []
    probed = 0
    for radius in range(MULTIPROBE_RADIUS + 1):
        for pk in _probe_keys(key, nbytes, radius, table.q):
            ids = table.buckets.get(pk)
            if ids:
                found.extend((radius, i) for i in ids)
        probed += 1
        if len(found) >= top_k:
            break
    if len(found) < top_k:
        # exhaustive fallback over every bucket (re-ranks the probed ones too)
        found = []
        for bk, ids in table.buckets.items():
            d = hamming(key, bk)
            found.extend((d, i) for i in ids)
    found.sort()
    found = found[:top_k]
    return RetrievalResult([i for _, i in found], [d for d, _ in found], time.perf_counter() - start)


def brute_force_ranking(code, codes_by_id, top_k=None):
    """Oracle-style exhaustive ranking over (id -> ±1 code)."""
    key = pack_code(code)
    pairs = sorted((hamming(key, pack_code(c)), i) for i, c in codes_by_id.items())
    if top_k is not None:
        pairs = pairs[:top_k]
    return [i for _, i in pairs], [d for d, _ in pairs]


# -- relevance & metrics -------------------------------------------------


def share_label(a, b):
    """Default relevance rule: images are relevant iff they share >= 1 label."""
    return bool(np.dot(np.asarray(a), np.asarray(b)) > 0)


def precision_recall_at_k(result_ids, query_labels, archive_labels, k, relevance=share_label):
    """(P@k, R@k); recall is 1 when the archive holds nothing relevant."""
    rel_top = sum(1 for i in result_ids[:k] if relevance(query_labels, archive_labels[i]))
    total_rel = sum(1 for lab in archive_labels.values() if relevance(query_labels, lab))
    precision = rel_top / k
    recall = rel_top / total_rel if total_rel > 0 else 1.0
    return precision, recall


def average_precision(flags):
    """Mean over relevant ranks of (relevant-count-at-rank / rank); 0 if none."""
    hits = 0
    acc = 0.0
    for rank, flag in enumerate(flags, start=1):
        if flag:
            hits += 1
            acc += hits / rank
    return acc / hits if hits else 0.0


def mean_average_precision(rankings, archive_labels, depth=None, relevance=share_label):
    """Mean AP over queries; queries with no relevant archive image are
    excluded and counted. rankings: list of (ranked_ids, query_labels)."""
    aps = []
    excluded = 0
    for ranked_ids, qlab in rankings:
        if not any(relevance(qlab, lab) for lab in archive_labels.values()):
            excluded += 1
            continue
        cut = ranked_ids if depth is None else ranked_ids[:depth]
        flags = [relevance(qlab, archive_labels[i]) for i in cut]
        aps.append(average_precision(flags))
    return (float(np.mean(aps)) if aps else 0.0), excluded


# -- index file -----------------------------------------------------------


def write_index(path, table):
    nbytes = table.q // 8
    keys = sorted(table.buckets)
    with open(path, "wb") as fh:
        fh.write(_IX_MAGIC)
        fh.write(struct.pack("<BHQ", _IX_VERSION, table.q, len(keys)))
        for key in keys:
            ids = table.buckets[key]
            fh.write(key)
            fh.write(struct.pack("<I", len(ids)))
            fh.write(struct.pack(f"<{len(ids)}Q", *ids))
    return path


def read_index(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _IX_MAGIC:
            raise FormatError(f"bad index magic {magic!r}")
        version, q, n_buckets = struct.unpack("<BHQ", fh.read(11))
        if version != _IX_VERSION:
            raise FormatError(f"unsupported index version {version}")
        nbytes = q // 8
        table = HashTable(q=q)
        for _ in range(n_buckets):
            key = fh.read(nbytes)
            (count,) = struct.unpack("<I", fh.read(4))
            ids = list(struct.unpack(f"<{count}Q", fh.read(8 * count)))
            if len(key) != nbytes:
                raise FormatError("truncated index file")
            table.buckets[key] = ids
    return table


# -- joint vs decode-baseline comparison -----------------------------------


def evaluate_queries(table, queries, encode_fn, archive_labels, k, depth=None, timing=True):
    """Run every query through encode_fn + table lookup; returns
    (MetricsReport, per-query rows). Rows: (query_id, P@k, R@k, AP, seconds)."""
    n_archive = table.n_images
    rows = []
    rankings = []
    total_start = time.perf_counter()
    for query_id, image, qlab in queries:
        t0 = time.perf_counter()
        code = encode_fn(image)
        result = query(table, code, top_k=max(k, depth or n_archive))
        dt = time.perf_counter() - t0
        p, r = precision_recall_at_k(result.ids, qlab, archive_labels, k)
        rankings.append((result.ids, qlab))
        rows.append([query_id, p, r, dt])
    total = time.perf_counter() - total_start
    mean_ap, excluded = mean_average_precision(rankings, archive_labels, depth=depth)
    for row, (ranked_ids, qlab) in zip(rows, rankings):
        cut = ranked_ids if depth is None else ranked_ids[:depth]
        flags = [share_label(qlab, archive_labels[i]) for i in cut]
        row.insert(3, average_precision(flags))
    if not timing:
        for row in rows:
            row[4] = 0.0
        total = 0.0
    precisions = [row[1] for row in rows]
    recalls = [row[2] for row in rows]
    return MetricsReport(
        precision=float(np.mean(precisions)) if rows else 0.0,
        recall=float(np.mean(recalls)) if rows else 0.0,
        mean_ap=mean_ap,
        mean_query_seconds=(total / len(rows)) if (rows and timing) else 0.0,
        total_seconds=total,
        n_queries=len(rows),
        excluded_queries=excluded,
    ), rows


def timed_retrieval_comparison(archive_codes, archive_labels, queries, encode_fn,
                               decode_fn, k, depth=None, timing=True):
    """Joint path (stored codes) vs standard path (decode every archive image,
    re-hash, then retrieve). Returns (joint report+rows, standard report+rows).

    Timing runs are serialized; the standard path's clock includes decoding
    and re-hashing the full gallery, mirroring a decode-then-index system.
    """
    before = counters.total_decode_ops()
    joint_start = time.perf_counter()
    table = build_index(archive_codes)
    joint_report, joint_rows = evaluate_queries(table, queries, encode_fn,
                                                archive_labels, k, depth, timing)
    joint_total = time.perf_counter() - joint_start
    joint_report.decode_ops = counters.total_decode_ops() - before

    before = counters.total_decode_ops()
    std_start = time.perf_counter()
    recoded = {}
    for image_id in archive_codes:
        image = decode_fn(image_id)
        recoded[image_id] = encode_fn(image)
    std_table = build_index(recoded)
    std_report, std_rows = evaluate_queries(std_table, queries, encode_fn,
                                            archive_labels, k, depth, timing)
    std_total = time.perf_counter() - std_start
    std_report.decode_ops = counters.total_decode_ops() - before

    if timing:
        joint_report.total_seconds = joint_total
        std_report.total_seconds = std_total
        joint_report.mean_query_seconds = joint_total / max(1, joint_report.n_queries)
        std_report.mean_query_seconds = std_total / max(1, std_report.n_queries)
    return (joint_report, joint_rows), (std_report, std_rows)
