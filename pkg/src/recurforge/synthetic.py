"""Synthetic corpora with planted recurrence structure.

Construction trick: a group is built from a base unit vector u and
per-member orthonormal tilt directions w_i perpendicular to u. Member i is
cos(a)*u + sin(a)*w_i, so every within-group pair has cosine exactly
cos(a)^2 (up to float32 storage), while cross-group similarities stay near
zero for reasonable dimensions. That gives corpora whose retained-edge
structure is known by construction.
"""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .feature_store import (
    CorpusManifest,
    FeatureMatrix,
    ObjectRecord,
    save_manifest,
    write_features,
    write_objects,
)

CLASS_VOCAB = (
    "mug",
    "sneaker",
    "lamp",
    "backpack",
    "kettle",
    "chair",
    "bottle",
    "keyboard",
)


def _unit_rows(rng: np.random.Generator, count: int, dim: int) -> np.ndarray:
    rows = rng.standard_normal((count, dim))
    return rows / np.linalg.norm(rows, axis=1, keepdims=True)


def planted_groups(
    num_groups: int,
    group_size: int,
    dim: int,
    pair_sim: float | list[float] = 0.95,
    seed: int = 0,
) -> tuple[FeatureMatrix, np.ndarray]:
    """Corpus of groups whose within-group pairwise cosine is pair_sim.

    pair_sim may be a single value or one value per group. Returns the
    float32 matrix (rows grouped contiguously) and each row's group id.
    """
    if group_size + 1 > dim:
        raise ValidationError(f"dim {dim} too small for groups of {group_size}")
    sims = (
        [float(pair_sim)] * num_groups
        if np.isscalar(pair_sim)
        else [float(s) for s in pair_sim]
    )
    if len(sims) != num_groups:
        raise ValidationError("need one pair_sim per group")
    rng = np.random.default_rng(seed)
    rows = np.empty((num_groups * group_size, dim), dtype=np.float64)
    group_of = np.empty(num_groups * group_size, dtype=np.int64)
    for g in range(num_groups):
        base = _unit_rows(rng, 1, dim)[0]
        # orthonormal tilt directions perpendicular to the base
        raw = rng.standard_normal((dim, group_size))
        raw -= np.outer(base, base @ raw)
        tilts, _ = np.linalg.qr(raw)
        tilts = tilts.T[:group_size]
        cos_a = math.sqrt(sims[g])
        sin_a = math.sqrt(1.0 - sims[g])
        for m in range(group_size):
            i = g * group_size + m
            rows[i] = cos_a * base + sin_a * tilts[m]
            group_of[i] = g
    return FeatureMatrix(rows.astype(np.float32)), group_of


def partner_pairs(
    num_pairs: int, dim: int, pair_sim: float = 0.95, seed: int = 0
) -> FeatureMatrix:
    """Corpus of 2*num_pairs rows where rows (2i, 2i+1) have cosine pair_sim
    and everything else is approximately orthogonal."""
    rng = np.random.default_rng(seed)
    u = _unit_rows(rng, num_pairs, dim)
    w = rng.standard_normal((num_pairs, dim))
    w -= u * np.sum(u * w, axis=1, keepdims=True)
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    v = pair_sim * u + math.sqrt(1.0 - pair_sim**2) * w
    rows = np.empty((2 * num_pairs, dim), dtype=np.float64)
    rows[0::2] = u
    rows[1::2] = v
    return FeatureMatrix(rows.astype(np.float32))


def records_for(
    matrix: FeatureMatrix,
    group_of: np.ndarray | None = None,
    seed: int = 0,
    image_size: int = 64,
    det_conf_range: tuple[float, float] = (0.85, 1.0),
) -> list[ObjectRecord]:
    """One record per feature row, each from its own source image."""
    rng = np.random.default_rng(seed)
    lo, hi = det_conf_range
    records = []
    margin = image_size // 4
    for i in range(matrix.count):
        group = int(group_of[i]) if group_of is not None else i
        records.append(
            ObjectRecord(
                id=i,
                image_ref=f"images/{i}.png",
                bbox=(margin // 2, margin // 2, image_size - margin, image_size - margin),
                class_label=CLASS_VOCAB[group % len(CLASS_VOCAB)],
                det_conf=round(float(lo + (hi - lo) * rng.random()), 4),
                feature_row=i,
            )
        )
    return records


def write_corpus(
    out_dir,
    matrix: FeatureMatrix,
    records: list[ObjectRecord],
    min_det_conf: float = 0.8,
    with_images: bool = False,
    with_backgrounds: bool = False,
    with_captions: bool = False,
    image_size: int = 64,
    seed: int = 0,
) -> Path:
    """Materialize a corpus directory; returns the manifest path.

    Images, when requested, are flat-color frames with a per-object colored
    rectangle at the bbox, plus matching background/caption sidecars keyed
    by object id.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_objects(records, out_dir / "objects.jsonl")
    write_features(matrix, out_dir / "features.bin")
    manifest = CorpusManifest(
        objects_path="objects.jsonl",
        features_path="features.bin",
        dim=matrix.dim,
        count=matrix.count,
        min_det_conf=min_det_conf,
    )
    save_manifest(manifest, out_dir / "manifest.json")
    if with_images or with_backgrounds:
        from PIL import Image

        rng = np.random.default_rng(seed)
        (out_dir / "images").mkdir(exist_ok=True)
        if with_backgrounds:
            (out_dir / "backgrounds").mkdir(exist_ok=True)
        for rec in records:
            back = tuple(int(c) for c in rng.integers(0, 80, size=3))
            fore = tuple(int(c) for c in rng.integers(120, 256, size=3))
            frame = np.empty((image_size, image_size, 3), dtype=np.uint8)
            frame[:, :] = back
            x, y, w, h = rec.bbox
            frame[y : y + h, x : x + w] = fore
            Image.fromarray(frame).save(out_dir / rec.image_ref)
            if with_backgrounds:
                bg = np.empty_like(frame)
                bg[:, :] = back
                Image.fromarray(bg).save(out_dir / "backgrounds" / f"{rec.id}.png")
    if with_captions:
        (out_dir / "captions").mkdir(exist_ok=True)
        for rec in records:
            (out_dir / "captions" / f"{rec.id}.txt").write_text(
                f"a photo of a {rec.class_label}\n", encoding="utf-8"
            )
    return out_dir / "manifest.json"
