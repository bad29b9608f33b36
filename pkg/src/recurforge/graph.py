"""Sparse band-filtered kNN graph over detected objects, plus corpus
recurrence statistics.

An edge A -> B means B is one of A's nearest neighbors with cosine
similarity inside the retained band. Edges are directional, never point at
the same source image, and each node keeps at most k_max of them, best
first. Similarities above the band are treated as near-duplicates and
dropped; below it, as different objects.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

from .errors import FormatError, ValidationError
from .feature_store import ObjectRecord
from .knn_index import Index, NeighborList

DEFAULT_BAND_LO = 0.93
DEFAULT_BAND_HI = 0.975
DEFAULT_K_MAX = 5


@dataclass(frozen=True)
class SimilarityBand:
    """Inclusive cosine interval retained as true recurrences."""

    lo: float = DEFAULT_BAND_LO
    hi: float = DEFAULT_BAND_HI

    def __post_init__(self):
        if not (-1.0 <= self.lo < self.hi <= 1.0):
            raise ValidationError(f"invalid band [{self.lo}, {self.hi}]")

    def contains(self, sim: float) -> bool:
        return self.lo <= sim <= self.hi


@dataclass(frozen=True)
class RecurrenceStats:
    """Corpus-level recurrence counts; percentages are of all objects,
    rounded to one decimal."""

    num_images: int
    num_objects: int
    count_ge1: int
    count_ge3: int
    pct_ge1: float
    pct_ge3: float

    @classmethod
    def from_counts(
        cls, num_images: int, num_objects: int, count_ge1: int, count_ge3: int
    ) -> "RecurrenceStats":
        return cls(
            num_images=num_images,
            num_objects=num_objects,
            count_ge1=count_ge1,
            count_ge3=count_ge3,
            pct_ge1=_pct(count_ge1, num_objects),
            pct_ge3=_pct(count_ge3, num_objects),
        )

    @property
    def pct_ge1_str(self) -> str:
        return f"{self.pct_ge1:.1f}%"

    @property
    def pct_ge3_str(self) -> str:
        return f"{self.pct_ge3:.1f}%"

    def as_dict(self) -> dict:
        return {
            "num_images": self.num_images,
            "num_objects": self.num_objects,
            "count_ge1": self.count_ge1,
            "count_ge3": self.count_ge3,
            "pct_ge1": self.pct_ge1,
            "pct_ge3": self.pct_ge3,
        }


def _pct(count: int, total: int) -> float:
    if total == 0:
        return 0.0
    return round(100.0 * count / total, 1)


class KnnGraph:
    """Per-object retained neighbor lists, sorted by similarity descending."""

    def __init__(
        self,
        neighbors: dict[int, list[tuple[int, float]]],
        band: SimilarityBand | None,
        k_max: int,
    ):
        self.neighbors = neighbors
        self.band = band
        self.k_max = k_max

    def degree(self, object_id: int) -> int:
        return len(self.neighbors.get(object_id, ()))

    def num_nodes_with_edges(self) -> int:
        return len(self.neighbors)

    def num_edges(self) -> int:
        return sum(len(v) for v in self.neighbors.values())

    def iter_edges(self) -> Iterator[tuple[int, int, float]]:
        for src in sorted(self.neighbors):
            for dst, sim in self.neighbors[src]:
                yield src, dst, sim

    def save_jsonl(self, path) -> None:
        """One line per object with >= 1 retained neighbor, ascending by id."""
        with open(path, "w", encoding="utf-8") as fh:
            for src in sorted(self.neighbors):
                nn = [{"id": dst, "sim": sim} for dst, sim in self.neighbors[src]]
                fh.write(json.dumps({"id": src, "nn": nn}, separators=(",", ":")) + "\n")


def load_graph(path, band: SimilarityBand | None = None, k_max: int = DEFAULT_K_MAX) -> KnnGraph:
    """Read a neighbors.jsonl file. The band is not stored in the file; pass
    it when known so downstream invariant checks can run."""
    path = Path(path)
    neighbors: dict[int, list[tuple[int, float]]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            if "id" not in obj or "nn" not in obj:
                raise FormatError(f"{path}: line {lineno}: missing 'id' or 'nn'")
            src = int(obj["id"])
            if src in neighbors:
                raise ValidationError(f"{path}: line {lineno}: duplicate id {src}")
            neighbors[src] = [(int(e["id"]), float(e["sim"])) for e in obj["nn"]]
    return KnnGraph(neighbors, band, k_max)


def filter_band(nlist: NeighborList, band: SimilarityBand) -> NeighborList:
    """Keep only entries whose similarity lies inside the band, order preserved."""
    kept = tuple((i, s) for i, s in nlist.neighbors if band.contains(s))
    return NeighborList(nlist.query_id, kept)


def build_graph(
    index: Index,
    records: Sequence[ObjectRecord],
    band: SimilarityBand | None = None,
    k_max: int = DEFAULT_K_MAX,
    search_k: int | None = None,
    threads: int = 1,
) -> KnnGraph:
    """Build the retained-recurrence graph.

    Index row i must back records[i]. For each object: fetch search_k
    candidates, drop same-image hits, band-filter, truncate to k_max.
    Edges carry record ids, not row ids.
    """
    if index.count != len(records):
        raise ValidationError(
            f"index/record count mismatch: {index.count} rows vs {len(records)} records"
        )
    if band is None:
        band = SimilarityBand()
    if k_max < 1:
        raise ValidationError("k_max must be >= 1")
    if search_k is None:
        search_k = index.config.search_k

    images = [r.image_ref for r in records]
    ids = [r.id for r in records]

    def process(rows: range) -> dict[int, list[tuple[int, float]]]:
        out: dict[int, list[tuple[int, float]]] = {}
        for row, nlist in zip(rows, index.query_ids(list(rows), search_k)):
            kept: list[tuple[int, float]] = []
            for cand_row, sim in nlist.neighbors:
                if images[cand_row] == images[row]:
                    continue
                if not band.contains(sim):
                    continue
                kept.append((ids[cand_row], sim))
                if len(kept) == k_max:
                    break
            if kept:
                out[ids[row]] = kept
        return out

    n = len(records)
    neighbors: dict[int, list[tuple[int, float]]] = {}
    if threads > 1 and n > 1:
        from concurrent.futures import ThreadPoolExecutor

        step = max(1, -(-n // threads))
        chunks = [range(s, min(s + step, n)) for s in range(0, n, step)]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            for part in pool.map(process, chunks):
                neighbors.update(part)
    else:
        neighbors = process(range(n))
    return KnnGraph(neighbors, band, k_max)


def degree_stats(graph: KnnGraph, records: Sequence[ObjectRecord]) -> RecurrenceStats:
    """Recurrence counts over all records, whether or not they have edges."""
    num_images = len({r.image_ref for r in records})
    degrees = [graph.degree(r.id) for r in records]
    return RecurrenceStats.from_counts(
        num_images=num_images,
        num_objects=len(records),
        count_ge1=sum(1 for d in degrees if d >= 1),
        count_ge3=sum(1 for d in degrees if d >= 3),
    )
