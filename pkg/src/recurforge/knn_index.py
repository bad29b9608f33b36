"""Exact and inverted-file (partitioned) top-k cosine retrieval.

Both modes score candidates with float64 dot products over the float32
matrix and order results by similarity descending, ties broken by ascending
row id. The query's own row is never returned. The exact mode is the oracle
backend; the partitioned mode trades recall for scan cost by probing only
the nearest centroid buckets.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .feature_store import FeatureMatrix, is_normalized

OMIX_MAGIC = b"OMIX"
OMIX_VERSION = 1
_OMIX_HEADER = struct.Struct("<4sIBIQII")

DEFAULT_SEARCH_K = 16
_KMEANS_ITERS = 10
_KMEANS_SAMPLE_FACTOR = 100

MODE_EXACT = "exact"
MODE_PARTITIONED = "partitioned"


@dataclass(frozen=True)
class NeighborList:
    """Top-k result for one query: (row_id, similarity) pairs, best first."""

    query_id: int | None
    neighbors: tuple[tuple[int, float], ...]

    def ids(self) -> list[int]:
        return [i for i, _ in self.neighbors]


@dataclass(frozen=True)
class IndexConfig:
    mode: str = MODE_EXACT
    num_partitions: int = 1
    probes: int = 1
    search_k: int = DEFAULT_SEARCH_K
    seed: int = 0

    def __post_init__(self):
        if self.mode not in (MODE_EXACT, MODE_PARTITIONED):
            raise ValidationError(f"unknown index mode {self.mode!r}")
        if self.num_partitions < 1:
            raise ValidationError("num_partitions must be >= 1")
        if self.probes < 1:
            raise ValidationError("probes must be >= 1")
        if self.probes > self.num_partitions:
            raise ValidationError(
                f"probes ({self.probes}) > num_partitions ({self.num_partitions})"
            )
        if self.search_k < 1:
            raise ValidationError("search_k must be >= 1")


def default_partitioned_config(count: int, search_k: int = DEFAULT_SEARCH_K, seed: int = 0) -> IndexConfig:
    """Inverted-file defaults: ceil(sqrt(N)) partitions, ceil(sqrt(P)) probes."""
    partitions = max(1, math.ceil(math.sqrt(count)))
    probes = max(1, math.ceil(math.sqrt(partitions)))
    return IndexConfig(
        mode=MODE_PARTITIONED,
        num_partitions=partitions,
        probes=probes,
        search_k=search_k,
        seed=seed,
    )


def _select_topk(sims: np.ndarray, k: int) -> list[tuple[int, float]]:
    """Exact top-k of one similarity vector: sim desc, then id asc.

    Entries set to -inf are excluded. Boundary ties are resolved by
    collecting every entry >= the k-th largest value before ordering.
    """
    finite = np.isfinite(sims)
    avail = int(finite.sum())
    keff = min(k, avail)
    if keff == 0:
        return []
    n = sims.shape[0]
    part = np.argpartition(sims, n - keff)[n - keff:]
    boundary = sims[part].min()
    cand = np.flatnonzero(sims >= boundary)
    order = np.lexsort((cand, -sims[cand]))
    chosen = cand[order[:keff]]
    return [(int(i), float(sims[i])) for i in chosen]


def _batch_topk(sims: np.ndarray, k: int, row_ids: np.ndarray) -> list[list[tuple[int, float]]]:
    """Vectorized top-k per row of a (B, N) similarity block.

    Assumes every row has the same number of excluded (-inf) entries; falls
    back to the single-row path for rows with boundary ties that the
    partition cut may have split.
    """
    b, n = sims.shape
    finite_per_row = np.isfinite(sims[0]).sum()
    keff = min(k, int(finite_per_row))
    if keff == 0:
        return [[] for _ in range(b)]
    part = np.argpartition(sims, n - keff, axis=1)[:, n - keff:]
    psims = np.take_along_axis(sims, part, axis=1)
    boundary = psims.min(axis=1)
    eq_total = (sims == boundary[:, None]).sum(axis=1)
    eq_sel = (psims == boundary[:, None]).sum(axis=1)
    order = np.lexsort((part, -psims), axis=1)
    out: list[list[tuple[int, float]]] = []
    for r in range(b):
        if eq_total[r] != eq_sel[r]:
            out.append(
                [(int(row_ids[j]), s) for j, s in _select_topk(sims[r], keff)]
            )
            continue
        idx = part[r, order[r, :keff]]
        out.append([(int(row_ids[j]), float(sims[r, j])) for j in idx])
    return out


class ExactIndex:
    """Full-scan index with exact top-k semantics."""

    mode = MODE_EXACT

    def __init__(self, matrix: FeatureMatrix, config: IndexConfig | None = None):
        if config is None:
            config = IndexConfig(mode=MODE_EXACT)
        self.matrix = matrix
        self.config = config
        self._rows64 = matrix.rows.astype(np.float64)

    @property
    def count(self) -> int:
        return self.matrix.count

    @property
    def dim(self) -> int:
        return self.matrix.dim

    def query_vector(self, vector, k: int, exclude_id: int | None = None) -> NeighborList:
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise ValidationError(
                f"query dim {vector.shape} does not match index dim {self.dim}"
            )
        sims = self._rows64 @ vector.astype(np.float64)
        if exclude_id is not None:
            sims[exclude_id] = -np.inf
        return NeighborList(exclude_id, tuple(_select_topk(sims, k)))

    def query_id(self, query_id: int, k: int) -> NeighborList:
        if not 0 <= query_id < self.count:
            raise ValidationError(f"unknown query id {query_id}")
        return self.query_vector(self.matrix.row(query_id), k, exclude_id=query_id)

    def query_ids(self, ids: Sequence[int], k: int, chunk: int = 1024) -> list[NeighborList]:
        """Batch variant of query_id; results ordered like the input ids."""
        ids = np.asarray(ids, dtype=np.int64)
        if ids.size and (ids.min() < 0 or ids.max() >= self.count):
            raise ValidationError("query id outside matrix")
        row_ids = np.arange(self.count)
        results: list[NeighborList] = []
        for start in range(0, ids.size, chunk):
            batch = ids[start : start + chunk]
            sims = self._rows64[batch] @ self._rows64.T
            sims[np.arange(batch.size), batch] = -np.inf
            lists = _batch_topk(sims, k, row_ids)
            results.extend(
                NeighborList(int(q), tuple(nbrs)) for q, nbrs in zip(batch, lists)
            )
        return results


class PartitionedIndex:
    """Inverted-file index: k-means buckets, queries scan the nearest `probes`."""

    mode = MODE_PARTITIONED

    def __init__(
        self,
        matrix: FeatureMatrix,
        config: IndexConfig,
        centroids: np.ndarray,
        partitions: list[np.ndarray],
    ):
        self.matrix = matrix
        self.config = config
        self.centroids = centroids  # (P, dim) float64, unit rows
        self.partitions = partitions  # row ids per partition, ascending
        self._rows64 = matrix.rows.astype(np.float64)

    @property
    def count(self) -> int:
        return self.matrix.count

    @property
    def dim(self) -> int:
        return self.matrix.dim

    def _probe_order(self, q64: np.ndarray) -> np.ndarray:
        scores = self.centroids @ q64
        order = np.lexsort((np.arange(scores.size), -scores))
        return order[: self.config.probes]

    def query_vector(self, vector, k: int, exclude_id: int | None = None) -> NeighborList:
        vector = np.asarray(vector, dtype=np.float32)
        if vector.shape != (self.dim,):
            raise ValidationError(
                f"query dim {vector.shape} does not match index dim {self.dim}"
            )
        q64 = vector.astype(np.float64)
        probed = self._probe_order(q64)
        cand = np.concatenate([self.partitions[p] for p in probed])
        sims = self._rows64[cand] @ q64
        if exclude_id is not None:
            sims[cand == exclude_id] = -np.inf
        local = _select_topk(sims, k)
        return NeighborList(
            exclude_id, tuple((int(cand[i]), s) for i, s in local)
        )

    def query_id(self, query_id: int, k: int) -> NeighborList:
        if not 0 <= query_id < self.count:
            raise ValidationError(f"unknown query id {query_id}")
        return self.query_vector(self.matrix.row(query_id), k, exclude_id=query_id)

    def query_ids(self, ids: Sequence[int], k: int, chunk: int = 1024) -> list[NeighborList]:
        return [self.query_id(int(i), k) for i in ids]


Index = ExactIndex | PartitionedIndex


def build_exact(matrix: FeatureMatrix, config: IndexConfig | None = None) -> ExactIndex:
    """Full-scan index over a normalized matrix."""
    if not is_normalized(matrix):
        raise ValidationError("matrix rows must be unit-norm; call normalize() first")
    return ExactIndex(matrix, config)


def _spherical_kmeans(rows64: np.ndarray, p: int, seed: int) -> np.ndarray:
    """Seeded k-means on a sample, max-dot assignment, renormalized means."""
    n = rows64.shape[0]
    rng = np.random.default_rng(seed)
    sample_n = min(n, _KMEANS_SAMPLE_FACTOR * p)
    sample = rows64[np.sort(rng.choice(n, size=sample_n, replace=False))]
    centroids = sample[rng.choice(sample_n, size=p, replace=False)].copy()
    for _ in range(_KMEANS_ITERS):
        assign = np.argmax(sample @ centroids.T, axis=1)
        for c in range(p):
            members = sample[assign == c]
            if members.shape[0] == 0:
                centroids[c] = sample[rng.integers(sample_n)]
                continue
            mean = members.mean(axis=0)
            norm = np.linalg.norm(mean)
            centroids[c] = mean / norm if norm > 0 else sample[rng.integers(sample_n)]
    norms = np.linalg.norm(centroids, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return centroids / norms


def build_partitioned(matrix: FeatureMatrix, config: IndexConfig) -> PartitionedIndex:
    """Bucket rows by nearest centroid; see default_partitioned_config."""
    if not is_normalized(matrix):
        raise ValidationError("matrix rows must be unit-norm; call normalize() first")
    if config.mode != MODE_PARTITIONED:
        raise ValidationError("config.mode must be 'partitioned'")
    if config.num_partitions > matrix.count:
        raise ValidationError(
            f"num_partitions ({config.num_partitions}) > row count ({matrix.count})"
        )
    rows64 = matrix.rows.astype(np.float64)
    centroids = _spherical_kmeans(rows64, config.num_partitions, config.seed)
    assign = np.argmax(rows64 @ centroids.T, axis=1)
    partitions = [
        np.flatnonzero(assign == c).astype(np.int64)
        for c in range(config.num_partitions)
    ]
    return PartitionedIndex(matrix, config, centroids, partitions)


def query_topk(index: Index, query, k: int) -> NeighborList:
    """Top-k by cosine. `query` is a row id (self excluded) or a raw vector."""
    if k < 1:
        raise ValidationError("k must be >= 1")
    if isinstance(query, (int, np.integer)):
        return index.query_id(int(query), k)
    return index.query_vector(query, k)


def recall_eval(approx: Index, exact: Index, query_ids: Sequence[int], k: int) -> float:
    """Mean fraction of the exact top-k recovered by the approximate index.

    The denominator is the exact result size, which equals k whenever the
    corpus has at least k+1 rows.
    """
    ids = list(query_ids)
    if not ids:
        raise ValidationError("empty query set")
    if approx.count != exact.count or approx.dim != exact.dim:
        raise ValidationError("indexes cover different matrices")
    total = 0.0
    for qid in ids:
        truth = exact.query_id(int(qid), k).ids()
        if not truth:
            total += 1.0 if not approx.query_id(int(qid), k).ids() else 0.0
            continue
        got = set(approx.query_id(int(qid), k).ids())
        total += len(got.intersection(truth)) / len(truth)
    return total / len(ids)


def save_index(index: Index, path) -> None:
    """Persist an index (structure only; features live in the OMFV file)."""
    path = Path(path)
    partitioned = isinstance(index, PartitionedIndex)
    cfg = index.config
    with open(path, "wb") as fh:
        fh.write(
            _OMIX_HEADER.pack(
                OMIX_MAGIC,
                OMIX_VERSION,
                1 if partitioned else 0,
                index.dim,
                index.count,
                cfg.num_partitions if partitioned else 0,
                cfg.probes if partitioned else 0,
            )
        )
        fh.write(struct.pack("<II", cfg.search_k, cfg.seed))
        if partitioned:
            fh.write(index.centroids.astype("<f4").tobytes())
            for part in index.partitions:
                fh.write(struct.pack("<Q", part.size))
                fh.write(part.astype("<u8").tobytes())


def load_index(path, matrix: FeatureMatrix) -> Index:
    """Load an OMIX file back over the matrix it was built from."""
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_OMIX_HEADER.size)
        if len(header) < _OMIX_HEADER.size:
            raise FormatError(f"{path}: file too short for OMIX header")
        magic, version, mode_flag, dim, count, num_partitions, probes = _OMIX_HEADER.unpack(header)
        if magic != OMIX_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {OMIX_MAGIC!r}")
        if version != OMIX_VERSION:
            raise FormatError(f"{path}: unsupported OMIX version {version}")
        search_k, seed = struct.unpack("<II", fh.read(8))
        if dim != matrix.dim or count != matrix.count:
            raise ValidationError(
                f"{path}: index built over {count} x {dim}, matrix is "
                f"{matrix.count} x {matrix.dim}"
            )
        if mode_flag == 0:
            return ExactIndex(matrix, IndexConfig(mode=MODE_EXACT, search_k=search_k, seed=seed))
        centroids = np.frombuffer(
            fh.read(num_partitions * dim * 4), dtype="<f4"
        ).reshape(num_partitions, dim).astype(np.float64)
        partitions = []
        for _ in range(num_partitions):
            (size,) = struct.unpack("<Q", fh.read(8))
            partitions.append(
                np.frombuffer(fh.read(size * 8), dtype="<u8").astype(np.int64)
            )
    config = IndexConfig(
        mode=MODE_PARTITIONED,
        num_partitions=num_partitions,
        probes=probes,
        search_k=search_k,
        seed=seed,
    )
    return PartitionedIndex(matrix, config, centroids, partitions)
