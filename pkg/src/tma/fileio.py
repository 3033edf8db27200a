"""On-disk formats for graphs, features, labels, splits, and partitions.

All formats are little-endian with a 4-byte magic. Loaders validate
structure on the way in and report the byte offset of the first offending
record on truncated or malformed input.
"""

from __future__ import annotations

import struct

import numpy as np

from .graph import EdgeSplits, Graph, GraphError, NodeLabels
from .partition import Partition

GRAPH_MAGIC = b"TMAG"
FEATURES_MAGIC = b"TMAF"
LABELS_MAGIC = b"TMAL"
SPLITS_MAGIC = b"TMAS"
PARTITION_MAGIC = b"TMAP"
FORMAT_VERSION = 1


class ParseError(GraphError):
    pass


class _Reader:
    def __init__(self, data: bytes, path):
        self.view = memoryview(data)
        self.off = 0
        self.path = path

    def take(self, n: int, what: str) -> memoryview:
        if self.off + n > len(self.view):
            raise ParseError(
                f"{self.path}: truncated at byte {self.off} while reading {what}"
            )
        chunk = self.view[self.off : self.off + n]
        self.off += n
        return chunk

    def unpack(self, fmt: str, what: str):
        n = struct.calcsize(fmt)
        return struct.unpack(fmt, self.take(n, what))

    def array(self, dtype: str, count: int, what: str) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        raw = self.take(itemsize * count, what)
        return np.frombuffer(raw, dtype=dtype)

    def expect_magic(self, magic: bytes):
        got = bytes(self.take(4, "magic"))
        if got != magic:
            raise ParseError(f"{self.path}: bad magic {got!r}, expected {magic!r}")

    def expect_end(self):
        if self.off != len(self.view):
            raise ParseError(f"{self.path}: {len(self.view) - self.off} trailing bytes at {self.off}")


def _read(path) -> bytes:
    with open(path, "rb") as f:
        return f.read()


# --- graph ("TMAG") -------------------------------------------------------


def save_graph(g: Graph, path) -> None:
    with open(path, "wb") as f:
        f.write(GRAPH_MAGIC)
        f.write(struct.pack("<HQQ", FORMAT_VERSION, g.num_nodes, len(g.indices)))
        f.write(g.indptr.astype("<u8").tobytes())
        f.write(g.indices.astype("<u4").tobytes())


def load_graph(path) -> Graph:
    r = _Reader(_read(path), path)
    r.expect_magic(GRAPH_MAGIC)
    version, n, nnz = r.unpack("<HQQ", "header")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    indptr = r.array("<u8", n + 1, "offsets").astype(np.int64)
    indices = r.array("<u4", nnz, "neighbors").astype(np.int32)
    r.expect_end()
    g = Graph(indptr=indptr, indices=indices)
    try:
        g.validate()
    except GraphError as exc:
        raise ParseError(f"{path}: {exc}") from exc
    return g


# --- features ("TMAF") ----------------------------------------------------


def save_features(x: np.ndarray, path) -> None:
    x = np.asarray(x, dtype=np.float32)
    if x.ndim != 2:
        raise ParseError("features must be a 2-d matrix")
    with open(path, "wb") as f:
        f.write(FEATURES_MAGIC)
        f.write(struct.pack("<QI", x.shape[0], x.shape[1]))
        f.write(x.astype("<f4").tobytes())


def load_features(path) -> np.ndarray:
    r = _Reader(_read(path), path)
    r.expect_magic(FEATURES_MAGIC)
    n, dim = r.unpack("<QI", "header")
    x = r.array("<f4", n * dim, "feature rows").reshape(n, dim)
    r.expect_end()
    if not np.isfinite(x).all():
        bad = int(np.nonzero(~np.isfinite(x).ravel())[0][0])
        raise ParseError(f"{path}: non-finite feature value in record {bad}")
    return x.astype(np.float32)


# --- labels ("TMAL") ------------------------------------------------------


def save_labels(y: NodeLabels, path) -> None:
    with open(path, "wb") as f:
        f.write(LABELS_MAGIC)
        f.write(struct.pack("<QH", len(y.labels), y.num_classes))
        f.write(y.labels.astype("<u2").tobytes())


def load_labels(path) -> NodeLabels:
    r = _Reader(_read(path), path)
    r.expect_magic(LABELS_MAGIC)
    n, k = r.unpack("<QH", "header")
    labels = r.array("<u2", n, "labels").astype(np.int16)
    r.expect_end()
    if len(labels) and labels.max() >= k:
        bad = int(np.argmax(labels >= k))
        raise ParseError(f"{path}: label out of range in record {bad}")
    return NodeLabels(labels=labels, num_classes=k)


# --- splits ("TMAS") ------------------------------------------------------


def save_splits(splits: EdgeSplits, path) -> None:
    with open(path, "wb") as f:
        f.write(SPLITS_MAGIC)
        f.write(
            struct.pack(
                "<HQQQI",
                FORMAT_VERSION,
                len(splits.train_edges),
                len(splits.val_edges),
                len(splits.test_edges),
                splits.num_negatives,
            )
        )
        for arr in (splits.train_edges, splits.val_edges, splits.test_edges):
            f.write(arr.astype("<u4").tobytes())
        f.write(splits.neg_tails.astype("<u4").tobytes())


def load_splits(path) -> EdgeSplits:
    r = _Reader(_read(path), path)
    r.expect_magic(SPLITS_MAGIC)
    version, n_train, n_val, n_test, k = r.unpack("<HQQQI", "header")
    if version != FORMAT_VERSION:
        raise ParseError(f"{path}: unsupported version {version}")
    train = r.array("<u4", 2 * n_train, "train edges").reshape(-1, 2).astype(np.int32)
    val = r.array("<u4", 2 * n_val, "val edges").reshape(-1, 2).astype(np.int32)
    test = r.array("<u4", 2 * n_test, "test edges").reshape(-1, 2).astype(np.int32)
    neg = r.array("<u4", (n_val + n_test) * k, "negatives").reshape(-1, k).astype(np.int32)
    r.expect_end()
    return EdgeSplits(train_edges=train, val_edges=val, test_edges=test, neg_tails=neg)


# --- partition ("TMAP") ---------------------------------------------------


def save_partition(p: Partition, path) -> None:
    with open(path, "wb") as f:
        f.write(PARTITION_MAGIC)
        f.write(struct.pack("<QH", p.num_nodes, p.num_trainers))
        f.write(p.assignment.astype("<u2").tobytes())


def load_partition(path) -> Partition:
    r = _Reader(_read(path), path)
    r.expect_magic(PARTITION_MAGIC)
    n, m = r.unpack("<QH", "header")
    assignment = r.array("<u2", n, "assignment").astype(np.int32)
    r.expect_end()
    if len(assignment) and assignment.max() >= m:
        bad = int(np.argmax(assignment >= m))
        raise ParseError(f"{path}: trainer id out of range in record {bad}")
    return Partition(assignment=assignment, num_trainers=m, scheme="from_file")


# --- text edge list -------------------------------------------------------


def load_edgelist_text(path, num_nodes: int | None = None) -> Graph:
    """Import a plain "u v" per-line edge list as an undirected graph."""
    edges = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 2:
                raise ParseError(f"{path}:{lineno}: expected 'u v', got {line!r}")
            try:
                u, v = int(parts[0]), int(parts[1])
            except ValueError as exc:
                raise ParseError(f"{path}:{lineno}: non-integer endpoint") from exc
            if u < 0 or v < 0:
                raise ParseError(f"{path}:{lineno}: negative node id")
            edges.append((u, v))
    arr = np.array(edges, dtype=np.int64).reshape(-1, 2)
    if num_nodes is None:
        num_nodes = int(arr.max()) + 1 if len(arr) else 0
    return Graph.from_edges(num_nodes, arr)
