"""On-disk corpus formats and the similarity primitives built on them.

Two artifact formats back everything downstream:

* ``objects.jsonl`` -- one detected object per line:
  ``{"id": int, "image": str, "bbox": [x, y, w, h], "class": str,
  "det_conf": float}``, with an optional ``"feature_row"`` override.
  By default line ``i`` pairs with feature row ``i``.
* ``features.bin`` (OMFV) -- magic ``OMFV``, u32 LE version = 1, u32 LE dim,
  u64 LE count, then ``count * dim`` little-endian float32 values, row-major.

Feature rows are stored as float32; all dot products accumulate in float64.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import FormatError, ValidationError

OMFV_MAGIC = b"OMFV"
OMFV_VERSION = 1
_OMFV_HEADER = struct.Struct("<4sIIQ")

DEFAULT_MIN_DET_CONF = 0.8

_OBJECT_FIELDS = ("id", "image", "bbox", "class", "det_conf")


@dataclass(frozen=True)
class ObjectRecord:
    """One detected object: source image, pixel bbox, class, confidence."""

    id: int
    image_ref: str
    bbox: tuple[int, int, int, int]
    class_label: str
    det_conf: float
    feature_row: int


@dataclass(frozen=True)
class CorpusManifest:
    """Binds an objects file to its feature file and ingest settings."""

    objects_path: str
    features_path: str
    dim: int
    count: int
    min_det_conf: float = DEFAULT_MIN_DET_CONF


class FeatureMatrix:
    """N x D float32 feature rows.

    Immutable after construction; safe for concurrent reads.
    """

    def __init__(self, rows: np.ndarray):
        rows = np.ascontiguousarray(rows, dtype=np.float32)
        if rows.ndim != 2:
            raise ValidationError(f"feature matrix must be 2-D, got shape {rows.shape}")
        if rows.shape[0] < 1 or rows.shape[1] < 1:
            raise ValidationError(f"feature matrix must be non-empty, got shape {rows.shape}")
        self._rows = rows
        self._rows.setflags(write=False)

    @property
    def rows(self) -> np.ndarray:
        return self._rows

    @property
    def dim(self) -> int:
        return self._rows.shape[1]

    @property
    def count(self) -> int:
        return self._rows.shape[0]

    def row(self, i: int) -> np.ndarray:
        return self._rows[i]

    def take(self, indices) -> "FeatureMatrix":
        """New matrix holding the given rows, in the given order."""
        return FeatureMatrix(self._rows[np.asarray(indices, dtype=np.int64)])

    def __len__(self) -> int:
        return self.count


def _parse_object(obj: dict, lineno: int, default_row: int, path) -> ObjectRecord:
    for field in _OBJECT_FIELDS:
        if field not in obj:
            raise FormatError(f"{path}: line {lineno}: missing field '{field}'")
    bbox = obj["bbox"]
    if not (isinstance(bbox, (list, tuple)) and len(bbox) == 4):
        raise FormatError(f"{path}: line {lineno}: bbox must be [x, y, w, h]")
    det_conf = float(obj["det_conf"])
    if not 0.0 <= det_conf <= 1.0:
        raise ValidationError(
            f"{path}: line {lineno}: det_conf {det_conf} outside [0, 1]"
        )
    return ObjectRecord(
        id=int(obj["id"]),
        image_ref=str(obj["image"]),
        bbox=tuple(int(v) for v in bbox),
        class_label=str(obj["class"]),
        det_conf=det_conf,
        feature_row=int(obj.get("feature_row", default_row)),
    )


def load_objects(path) -> Iterator[ObjectRecord]:
    """Stream ObjectRecords from a JSONL file, in file order.

    Lazy: lines are parsed as the iterator advances, so corpora far larger
    than memory can be scanned.

    Raises:
        FormatError: malformed JSON or missing field, with the line number.
        ValidationError: duplicate or non-increasing ids, det_conf outside [0, 1].
    """
    path = Path(path)

    def gen() -> Iterator[ObjectRecord]:
        last_id: int | None = None
        row = 0
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise FormatError(f"{path}: line {lineno}: invalid JSON: {exc}") from exc
                record = _parse_object(obj, lineno, default_row=row, path=path)
                if last_id is not None:
                    if record.id == last_id:
                        raise ValidationError(
                            f"{path}: line {lineno}: duplicate id {record.id}"
                        )
                    if record.id < last_id:
                        raise ValidationError(
                            f"{path}: line {lineno}: ids not strictly increasing "
                            f"({record.id} after {last_id})"
                        )
                last_id = record.id
                row += 1
                yield record

    return gen()


def write_objects(records: Iterable[ObjectRecord], path) -> None:
    """Write records in the canonical objects.jsonl form (load round-trips)."""
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for pos, rec in enumerate(records):
            obj = {
                "id": rec.id,
                "image": rec.image_ref,
                "bbox": list(rec.bbox),
                "class": rec.class_label,
                "det_conf": rec.det_conf,
            }
            if rec.feature_row != pos:
                obj["feature_row"] = rec.feature_row
            fh.write(json.dumps(obj, separators=(",", ":")) + "\n")


def load_features(path) -> FeatureMatrix:
    """Read an OMFV feature file.

    Raises:
        FormatError: bad magic, unsupported version, or payload size that does
            not match the declared count * dim * 4 bytes.
    """
    path = Path(path)
    with open(path, "rb") as fh:
        header = fh.read(_OMFV_HEADER.size)
        if len(header) < _OMFV_HEADER.size:
            raise FormatError(f"{path}: file too short for OMFV header")
        magic, version, dim, count = _OMFV_HEADER.unpack(header)
        if magic != OMFV_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {OMFV_MAGIC!r}")
        if version != OMFV_VERSION:
            raise FormatError(f"{path}: unsupported OMFV version {version}")
        expected = count * dim * 4
        payload = fh.read()
    if len(payload) < expected:
        raise FormatError(
            f"{path}: truncated payload: header declares {expected} bytes "
            f"({count} x {dim} float32), found {len(payload)}"
        )
    if len(payload) > expected:
        raise FormatError(
            f"{path}: {len(payload) - expected} trailing bytes after declared payload"
        )
    rows = np.frombuffer(payload, dtype="<f4").reshape(count, dim)
    return FeatureMatrix(rows)


def write_features(matrix: FeatureMatrix, path) -> None:
    """Write a FeatureMatrix in OMFV form; load_features round-trips bit-exactly."""
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_OMFV_HEADER.pack(OMFV_MAGIC, OMFV_VERSION, matrix.dim, matrix.count))
        fh.write(np.ascontiguousarray(matrix.rows, dtype="<f4").tobytes())


def normalize(matrix: FeatureMatrix) -> FeatureMatrix:
    """Scale every row to unit Euclidean norm (norms computed in float64).

    Raises:
        ValidationError: a zero-norm row, named by index.
    """
    rows64 = matrix.rows.astype(np.float64)
    norms = np.linalg.norm(rows64, axis=1)
    zero = np.flatnonzero(norms == 0.0)
    if zero.size:
        raise ValidationError(f"row {int(zero[0])} has zero norm")
    return FeatureMatrix((rows64 / norms[:, None]).astype(np.float32))


def is_normalized(matrix: FeatureMatrix, tol: float = 1e-4) -> bool:
    norms = np.linalg.norm(matrix.rows.astype(np.float64), axis=1)
    return bool(np.all(np.abs(norms - 1.0) <= tol))


def cosine(a, b) -> float:
    """Cosine similarity of two unit vectors: their dot product.

    Inputs are taken as float32 and accumulated in float64.
    """
    a = np.asarray(a, dtype=np.float32)
    b = np.asarray(b, dtype=np.float32)
    if a.ndim != 1 or a.shape != b.shape:
        raise ValidationError(f"dimension mismatch: {a.shape} vs {b.shape}")
    return float(np.dot(a.astype(np.float64), b.astype(np.float64)))


def filter_by_confidence(
    records: Iterable[ObjectRecord], min_det_conf: float = DEFAULT_MIN_DET_CONF
) -> list[ObjectRecord]:
    """Keep exactly the records with det_conf >= min_det_conf."""
    return [r for r in records if r.det_conf >= min_det_conf]


def aligned_features(records: list[ObjectRecord], matrix: FeatureMatrix) -> FeatureMatrix:
    """Gather each record's feature row so row i backs records[i]."""
    for rec in records:
        if not 0 <= rec.feature_row < matrix.count:
            raise ValidationError(
                f"object {rec.id}: feature_row {rec.feature_row} outside matrix "
                f"of {matrix.count} rows"
            )
    return matrix.take([r.feature_row for r in records])


def load_manifest(path) -> CorpusManifest:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as fh:
            obj = json.load(fh)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid JSON: {exc}") from exc
    for field in ("objects_path", "features_path", "dim", "count"):
        if field not in obj:
            raise FormatError(f"{path}: missing field '{field}'")
    return CorpusManifest(
        objects_path=str(obj["objects_path"]),
        features_path=str(obj["features_path"]),
        dim=int(obj["dim"]),
        count=int(obj["count"]),
        min_det_conf=float(obj.get("min_det_conf", DEFAULT_MIN_DET_CONF)),
    )


def save_manifest(manifest: CorpusManifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(dataclasses.asdict(manifest), fh, indent=2)
        fh.write("\n")


def load_corpus(manifest_path) -> tuple[CorpusManifest, list[ObjectRecord], FeatureMatrix]:
    """Load and cross-validate a corpus from its manifest.

    Relative objects/features paths resolve against the manifest's directory.

    Raises:
        ValidationError: manifest counts disagree with file contents.
    """
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    records = list(load_objects(base / manifest.objects_path))
    matrix = load_features(base / manifest.features_path)
    if len(records) != manifest.count:
        raise ValidationError(
            f"manifest declares {manifest.count} objects, "
            f"{manifest.objects_path} holds {len(records)}"
        )
    if matrix.count != manifest.count:
        raise ValidationError(
            f"manifest declares {manifest.count} feature rows, "
            f"{manifest.features_path} holds {matrix.count}"
        )
    if matrix.dim != manifest.dim:
        raise ValidationError(
            f"manifest declares dim {manifest.dim}, features have dim {matrix.dim}"
        )
    for rec in records:
        if not 0 <= rec.feature_row < matrix.count:
            raise ValidationError(
                f"object {rec.id}: feature_row {rec.feature_row} outside matrix"
            )
    return manifest, records, matrix
