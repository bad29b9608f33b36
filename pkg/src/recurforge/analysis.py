"""Recurrence analyses: precision vs. threshold, similarity distribution,
recurrence vs. corpus scale, and per-class breakdowns.

All analyses are read-only over immutable inputs and emit plain dict/JSON
reports (plot rendering is out of scope; see the CSV/JSON outputs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .feature_store import FeatureMatrix, ObjectRecord
from .graph import KnnGraph, SimilarityBand, build_graph, degree_stats
from .knn_index import DEFAULT_SEARCH_K, Index, build_exact

DEFAULT_THRESHOLD_LO = 0.85
DEFAULT_THRESHOLD_HI = 1.0
DEFAULT_THRESHOLD_STEP = 0.005


@dataclass(frozen=True)
class PairLabel:
    """One human (or synthetic) verdict on a retrieved pair."""

    id_a: int
    id_b: int
    similarity: float
    match: bool
    source: str = "human"

    def __post_init__(self):
        if self.id_a == self.id_b:
            raise ValidationError(f"pair label with identical ids ({self.id_a})")
        if not -1.0 <= self.similarity <= 1.0:
            raise ValidationError(f"similarity {self.similarity} outside [-1, 1]")


@dataclass(frozen=True)
class CurvePoint:
    threshold: float
    precision: float | None  # None when no labels reach the threshold
    support: int


@dataclass(frozen=True)
class PrecisionCurve:
    points: tuple[CurvePoint, ...]

    def at(self, threshold: float) -> CurvePoint:
        for p in self.points:
            if p.threshold == threshold:
                return p
        raise KeyError(threshold)

    def as_dict(self) -> dict:
        return {
            "points": [
                {"threshold": p.threshold, "precision": p.precision, "support": p.support}
                for p in self.points
            ]
        }


def default_thresholds(
    lo: float = DEFAULT_THRESHOLD_LO,
    hi: float = DEFAULT_THRESHOLD_HI,
    step: float = DEFAULT_THRESHOLD_STEP,
) -> list[float]:
    if step <= 0 or hi < lo:
        raise ValidationError(f"bad threshold sweep [{lo}, {hi}] step {step}")
    n = int(round((hi - lo) / step))
    return [round(lo + i * step, 10) for i in range(n + 1)]


def precision_curve(labels: Sequence[PairLabel], thresholds: Sequence[float] | None = None) -> PrecisionCurve:
    """Precision and support of the >=-threshold rule at each swept threshold.

    precision(t) = matches with sim >= t / labels with sim >= t, None at
    zero support.
    """
    labels = list(labels)
    if not labels:
        raise ValidationError("precision_curve needs at least one label")
    if thresholds is None:
        thresholds = default_thresholds()
    thresholds = sorted(set(float(t) for t in thresholds))
    sims = np.array([l.similarity for l in labels])
    matches = np.array([l.match for l in labels], dtype=bool)
    points = []
    for t in thresholds:
        mask = sims >= t
        support = int(mask.sum())
        precision = float(matches[mask].sum() / support) if support else None
        points.append(CurvePoint(t, precision, support))
    return PrecisionCurve(tuple(points))


def load_labels(path) -> list[PairLabel]:
    """Read a labels.jsonl file (the label-service log format)."""
    path = Path(path)
    labels = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            for field in ("a", "b", "similarity", "match"):
                if field not in obj:
                    raise FormatError(f"{path}: line {lineno}: missing field '{field}'")
            labels.append(
                PairLabel(
                    id_a=int(obj["a"]),
                    id_b=int(obj["b"]),
                    similarity=float(obj["similarity"]),
                    match=bool(obj["match"]),
                    source=str(obj.get("source", "human")),
                )
            )
    return labels


def save_labels(labels: Iterable[PairLabel], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for l in labels:
            fh.write(
                json.dumps(
                    {
                        "a": l.id_a,
                        "b": l.id_b,
                        "similarity": l.similarity,
                        "match": l.match,
                        "source": l.source,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


@dataclass(frozen=True)
class SimilarityHistogram:
    bin_edges: tuple[float, ...]
    counts: tuple[int, ...]
    n_objects: int
    n_values: int
    band: SimilarityBand
    values_in_band: int
    objects_in_band: int

    @property
    def band_fraction(self) -> float:
        """Fraction of collected similarities inside the band."""
        return self.values_in_band / self.n_values if self.n_values else 0.0

    @property
    def objects_in_band_fraction(self) -> float:
        """Fraction of objects with at least one top-k similarity in the band."""
        return self.objects_in_band / self.n_objects if self.n_objects else 0.0

    def as_dict(self) -> dict:
        return {
            "bin_edges": list(self.bin_edges),
            "counts": list(self.counts),
            "n_objects": self.n_objects,
            "n_values": self.n_values,
            "band": {"lo": self.band.lo, "hi": self.band.hi},
            "band_fraction": self.band_fraction,
            "objects_in_band_fraction": self.objects_in_band_fraction,
        }


def topk_similarities(
    index: Index,
    records: Sequence[ObjectRecord],
    k: int = 3,
    exclude_same_image: bool = True,
) -> list[list[float]]:
    """Per-object top-k raw similarities (pre band filter), self excluded.

    Fetches the index's search_k candidates so same-image drops do not
    starve the top k.
    """
    if index.count != len(records):
        raise ValidationError("index/record count mismatch")
    fetch = max(k, index.config.search_k)
    images = [r.image_ref for r in records]
    out: list[list[float]] = []
    for row, nlist in enumerate(index.query_ids(range(len(records)), fetch)):
        sims = [
            s
            for cand, s in nlist.neighbors
            if not (exclude_same_image and images[cand] == images[row])
        ]
        out.append(sims[:k])
    return out


def similarity_histogram(
    sims_per_object: Iterable[Iterable[float]] | KnnGraph,
    bins: int,
    band: SimilarityBand | None = None,
) -> SimilarityHistogram:
    """Histogram of per-object neighbor similarities over [-1, 1].

    Accepts either raw per-object top-k similarity lists or an existing
    graph (whose stored similarities are then already band-filtered).
    """
    if bins < 1:
        raise ValidationError("bins must be >= 1")
    if band is None:
        band = SimilarityBand()
    if isinstance(sims_per_object, KnnGraph):
        lists: list[list[float]] = [
            [s for _, s in nbrs] for _, nbrs in sorted(sims_per_object.neighbors.items())
        ]
    else:
        lists = [list(sims) for sims in sims_per_object]
    values = np.array([s for sims in lists for s in sims], dtype=np.float64)
    counts, edges = np.histogram(values, bins=bins, range=(-1.0, 1.0))
    in_band = (values >= band.lo) & (values <= band.hi)
    objects_in_band = sum(
        1 for sims in lists if any(band.lo <= s <= band.hi for s in sims)
    )
    return SimilarityHistogram(
        bin_edges=tuple(float(e) for e in edges),
        counts=tuple(int(c) for c in counts),
        n_objects=len(lists),
        n_values=int(values.size),
        band=band,
        values_in_band=int(in_band.sum()),
        objects_in_band=objects_in_band,
    )


@dataclass(frozen=True)
class ScalingPoint:
    fraction: float
    size: int
    count_ge1: int
    count_ge3: int
    pct_ge1: float
    pct_ge3: float


@dataclass(frozen=True)
class ScalingCurve:
    points: tuple[ScalingPoint, ...]
    seed: int

    def as_dict(self) -> dict:
        return {
            "seed": self.seed,
            "points": [
                {
                    "fraction": p.fraction,
                    "size": p.size,
                    "count_ge1": p.count_ge1,
                    "count_ge3": p.count_ge3,
                    "pct_ge1": p.pct_ge1,
                    "pct_ge3": p.pct_ge3,
                }
                for p in self.points
            ],
        }


def scaling_curve(
    matrix: FeatureMatrix,
    records: Sequence[ObjectRecord],
    fractions: Sequence[float],
    seed: int = 0,
    band: SimilarityBand | None = None,
    k_max: int = 5,
    search_k: int = DEFAULT_SEARCH_K,
) -> ScalingCurve:
    """Recurrence rate on uniform subsets of the corpus.

    For each fraction, sample floor(fraction * N) objects without
    replacement, rebuild the graph on the subset only, and report the
    counts and percentages of objects with >= 1 and >= 3 retained
    neighbors. Both normalizations (percent of subset, absolute count)
    are emitted. Matrix row i must back records[i].
    """
    if matrix.count != len(records):
        raise ValidationError("matrix/record count mismatch")
    if band is None:
        band = SimilarityBand()
    fractions = sorted(float(f) for f in fractions)
    for f in fractions:
        if not 0.0 < f <= 1.0:
            raise ValidationError(f"fraction {f} outside (0, 1]")
    n = len(records)
    rng = np.random.default_rng(seed)
    points = []
    for f in fractions:
        size = int(f * n)
        if size < 4:
            raise ValidationError(f"fraction {f} yields subset of {size} < 4 objects")
        subset = np.sort(rng.choice(n, size=size, replace=False))
        sub_records = [records[i] for i in subset]
        sub_index = build_exact(
            matrix.take(subset)
        )
        sub_graph = build_graph(sub_index, sub_records, band, k_max, search_k)
        stats = degree_stats(sub_graph, sub_records)
        points.append(
            ScalingPoint(
                fraction=f,
                size=size,
                count_ge1=stats.count_ge1,
                count_ge3=stats.count_ge3,
                pct_ge1=stats.pct_ge1,
                pct_ge3=stats.pct_ge3,
            )
        )
    return ScalingCurve(tuple(points), seed)


@dataclass(frozen=True)
class ClassRow:
    num_objects: int
    num_with_ge3: int
    percentage: float


@dataclass(frozen=True)
class ClassBreakdown:
    rows: dict[str, ClassRow]

    def as_dict(self) -> dict:
        return {
            label: {
                "num_objects": row.num_objects,
                "num_with_ge3": row.num_with_ge3,
                "percentage": row.percentage,
            }
            for label, row in sorted(self.rows.items())
        }


def class_breakdown(graph: KnnGraph, records: Sequence[ObjectRecord]) -> ClassBreakdown:
    """Per-class share of objects with at least 3 retained neighbors."""
    totals: dict[str, int] = {}
    hits: dict[str, int] = {}
    for rec in records:
        totals[rec.class_label] = totals.get(rec.class_label, 0) + 1
        if graph.degree(rec.id) >= 3:
            hits[rec.class_label] = hits.get(rec.class_label, 0) + 1
    rows = {
        label: ClassRow(
            num_objects=total,
            num_with_ge3=hits.get(label, 0),
            percentage=100.0 * hits.get(label, 0) / total,
        )
        for label, total in totals.items()
    }
    return ClassBreakdown(rows)
