"""Evaluation harness: identity scoring between embedding pairs, agreement
of a metric with human pairwise choices, and the quadruplet benchmark
expansion plus its report.

The harness is encoder-agnostic: crops go out, embeddings come back in as
OMFV files with id maps. No detector or encoder runs here.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import FormatError, ValidationError
from .feature_store import cosine, load_features


def crop_to_bbox(image: np.ndarray, bbox: tuple[int, int, int, int]) -> np.ndarray:
    """Exact sub-image at (x, y, w, h); out-of-bounds boxes are errors."""
    image = np.asarray(image)
    x, y, w, h = (int(v) for v in bbox)
    img_h, img_w = image.shape[:2]
    if w <= 0 or h <= 0 or x < 0 or y < 0 or x + w > img_w or y + h > img_h:
        raise ValidationError(
            f"bbox ({x}, {y}, {w}, {h}) outside image of {img_w}x{img_h}"
        )
    return image[y : y + h, x : x + w].copy()


@dataclass(frozen=True)
class IdentityScore:
    value: float
    generated_crop_ref: str = ""
    reference_crop_ref: str = ""


def identity_score(emb_gen, emb_ref, generated_crop_ref: str = "", reference_crop_ref: str = "") -> IdentityScore:
    """Cosine between the generated and reference crop embeddings.

    Delegates to the shared cosine so the value matches the feature store's
    bit for bit.
    """
    return IdentityScore(
        value=cosine(emb_gen, emb_ref),
        generated_crop_ref=generated_crop_ref,
        reference_crop_ref=reference_crop_ref,
    )


@dataclass(frozen=True)
class AgreementTriplet:
    """One human comparison: which of two generations preserved identity
    better, plus the three embeddings behind it."""

    ref: np.ndarray
    gen1: np.ndarray
    gen2: np.ndarray
    user_choice: int  # 1 or 2

    def __post_init__(self):
        if self.user_choice not in (1, 2):
            raise ValidationError(f"user_choice must be 1 or 2, got {self.user_choice}")


def metric_agreement(triplets: Sequence[AgreementTriplet]) -> float:
    """Fraction of triplets where the higher-cosine generation matches the
    user's choice; exact cosine ties score 0.5."""
    triplets = list(triplets)
    if not triplets:
        raise ValidationError("metric_agreement needs at least one triplet")
    total = 0.0
    for t in triplets:
        s1 = cosine(t.ref, t.gen1)
        s2 = cosine(t.ref, t.gen2)
        if s1 == s2:
            total += 0.5
        else:
            predicted = 1 if s1 > s2 else 2
            total += 1.0 if predicted == t.user_choice else 0.0
    return total / len(triplets)


@dataclass(frozen=True)
class BenchmarkCapture:
    image_ref: str
    background_ref: str


@dataclass(frozen=True)
class BenchmarkQuadruplet:
    """One benchmark object photographed in 4 scenes, with and without the
    object (tripod pairs)."""

    object_id: str
    captures: tuple[BenchmarkCapture, ...]


@dataclass(frozen=True)
class BenchmarkSample:
    sample_id: str
    object_id: str
    ground_truth: BenchmarkCapture
    scene_background_ref: str
    references: tuple[str, str, str]


def expand_quadruplets(quadruplets: Sequence[BenchmarkQuadruplet]) -> list[BenchmarkSample]:
    """4 samples per quadruplet: each capture takes a turn as ground truth,
    its background is the scene, and the other 3 captures are references."""
    samples = []
    for quad in quadruplets:
        if len(quad.captures) != 4:
            raise ValidationError(
                f"quadruplet {quad.object_id!r} has {len(quad.captures)} captures, expected 4"
            )
        for i, gt in enumerate(quad.captures):
            refs = tuple(
                c.image_ref for j, c in enumerate(quad.captures) if j != i
            )
            samples.append(
                BenchmarkSample(
                    sample_id=f"{quad.object_id}_{i}",
                    object_id=quad.object_id,
                    ground_truth=gt,
                    scene_background_ref=gt.background_ref,
                    references=refs,
                )
            )
    return samples


def load_quadruplets(path) -> list[BenchmarkQuadruplet]:
    path = Path(path)
    quads = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
            captures = tuple(
                BenchmarkCapture(str(c["image"]), str(c["background"]))
                for c in obj.get("captures", ())
            )
            quads.append(BenchmarkQuadruplet(str(obj["object_id"]), captures))
    return quads


def load_embedding_map(features_path, ids_path) -> dict[str, np.ndarray]:
    """OMFV rows keyed by the aligned id list in ids_path (JSON array)."""
    matrix = load_features(features_path)
    with open(ids_path, "r", encoding="utf-8") as fh:
        ids = json.load(fh)
    if len(ids) != matrix.count:
        raise ValidationError(
            f"{ids_path} lists {len(ids)} ids for {matrix.count} embedding rows"
        )
    return {str(i): matrix.row(r) for r, i in enumerate(ids)}


@dataclass(frozen=True)
class SampleScores:
    sample_id: str
    composition: dict[str, float]
    identity: float | None


@dataclass(frozen=True)
class BenchmarkReport:
    per_sample: tuple[SampleScores, ...]
    composition_means: dict[str, float]
    identity_mean: float | None
    identity_failures: int

    def as_dict(self) -> dict:
        return {
            "per_sample": [
                {
                    "sample_id": s.sample_id,
                    "composition": s.composition,
                    "identity": s.identity,
                }
                for s in self.per_sample
            ],
            "composition_means": self.composition_means,
            "identity_mean": self.identity_mean,
            "identity_failures": self.identity_failures,
        }

    def write_json(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.as_dict(), fh, indent=2)
            fh.write("\n")

    def write_csv(self, path) -> None:
        metrics = sorted(self.composition_means)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["sample_id", *metrics, "identity"])
            for s in self.per_sample:
                writer.writerow(
                    [s.sample_id]
                    + [s.composition.get(m, "") for m in metrics]
                    + [s.identity if s.identity is not None else ""]
                )
            writer.writerow(
                ["mean"]
                + [self.composition_means[m] for m in metrics]
                + [self.identity_mean if self.identity_mean is not None else ""]
            )


def benchmark_report(
    samples: Sequence[BenchmarkSample],
    outputs: Mapping[str, str] | Path | str,
    semantic_sets: Mapping[str, tuple[Mapping[str, np.ndarray], Mapping[str, np.ndarray]]],
    identity_gen: Mapping[str, np.ndarray] | None = None,
    identity_ref: Mapping[str, np.ndarray] | None = None,
) -> BenchmarkReport:
    """Score every sample's output against its ground truth.

    semantic_sets maps a metric name (e.g. several embedding flavors, shown
    side by side) to (generated, ground-truth) embedding maps keyed by
    sample id; the composition score is their cosine. Identity scores come
    from the identity_gen/identity_ref pair; a sample id missing from
    identity_gen counts as a detection failure and scores null.

    outputs is a sample_id -> path mapping, or a directory holding
    <sample_id>.png; a missing output is an error.
    """
    if isinstance(outputs, (str, Path)):
        out_dir = Path(outputs)
        outputs = {s.sample_id: str(out_dir / f"{s.sample_id}.png") for s in samples}
    per_sample = []
    identity_values = []
    failures = 0
    for sample in samples:
        sid = sample.sample_id
        out_path = outputs.get(sid)
        if out_path is None or not Path(out_path).exists():
            raise ValidationError(f"missing output for sample {sid}")
        composition = {}
        for name, (gen_map, gt_map) in semantic_sets.items():
            if sid not in gen_map or sid not in gt_map:
                raise ValidationError(f"missing {name} embedding for sample {sid}")
            composition[name] = cosine(gen_map[sid], gt_map[sid])
        identity = None
        if identity_gen is not None and identity_ref is not None:
            if sid in identity_gen and sid in identity_ref:
                identity = identity_score(
                    identity_gen[sid],
                    identity_ref[sid],
                    generated_crop_ref=str(out_path),
                    reference_crop_ref=sample.references[0],
                ).value
                identity_values.append(identity)
            else:
                failures += 1
        per_sample.append(SampleScores(sid, composition, identity))
    composition_means = {
        name: float(np.mean([s.composition[name] for s in per_sample]))
        for name in semantic_sets
    }
    identity_mean = float(np.mean(identity_values)) if identity_values else None
    return BenchmarkReport(
        per_sample=tuple(per_sample),
        composition_means=composition_means,
        identity_mean=identity_mean,
        identity_failures=failures,
    )
