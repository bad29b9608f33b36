"""Training-example assembly: pick references from the graph, attach scene
descriptions, compose the 2x2 conditioning grid, and emit the run manifest.

A training example is (scene S, reference set O, target y). The grid packs
the noisy target tile top-left with the 3 reference tiles around it, and
the loss mask covers exactly the target quadrant. For insertion, the
background and bbox-mask planes are concatenated along the channel axis.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ValidationError
from .feature_store import ObjectRecord
from .graph import DEFAULT_K_MAX, KnnGraph, SimilarityBand

TILE = 512
CANVAS = 1024

TASK_INSERTION = "insertion"
TASK_SUBJECT_GEN = "subject_gen"
TASKS = (TASK_INSERTION, TASK_SUBJECT_GEN)

REFS_REQUIRED = 3

DEFAULT_STEPS = 100_000
DEFAULT_BATCH_SIZE = 128
DEFAULT_REF_DROPOUT = 0.10
DEFAULT_TEXT_DROPOUT = 0.10
DEFAULT_REF_SCALE = {TASK_INSERTION: 2.0, TASK_SUBJECT_GEN: 1.5}
DEFAULT_TEXT_SCALE = 7.5

# (row, col) offsets of each tile on the 1024x1024 canvas
GRID_SLOTS = {
    "target": (0, 0),
    "ref1": (0, TILE),
    "ref2": (TILE, 0),
    "ref3": (TILE, TILE),
}


@dataclass(frozen=True)
class SceneDescription:
    """Scene half of a training example: background+position for insertion,
    caption for subject generation."""

    kind: str
    background_ref: str | None = None
    position_mask_bbox: tuple[int, int, int, int] | None = None
    caption: str | None = None

    def __post_init__(self):
        if self.kind not in TASKS:
            raise ValidationError(f"unknown scene kind {self.kind!r}")
        if self.kind == TASK_INSERTION and self.caption is not None:
            raise ValidationError("insertion scene cannot carry a caption")
        if self.kind == TASK_SUBJECT_GEN and (
            self.background_ref is not None or self.position_mask_bbox is not None
        ):
            raise ValidationError("subject_gen scene cannot carry background or bbox")

    def as_dict(self) -> dict:
        if self.kind == TASK_INSERTION:
            return {
                "kind": self.kind,
                "background": self.background_ref,
                "bbox": list(self.position_mask_bbox) if self.position_mask_bbox else None,
            }
        return {"kind": self.kind, "caption": self.caption}


@dataclass(frozen=True)
class TrainingExample:
    target: ObjectRecord
    references: tuple[ObjectRecord, ObjectRecord, ObjectRecord]
    similarities: tuple[float, float, float]
    task: str
    scene: SceneDescription | None = None


@dataclass(frozen=True)
class TrainingManifest:
    task: str
    steps: int = DEFAULT_STEPS
    batch_size: int = DEFAULT_BATCH_SIZE
    ref_dropout: float = DEFAULT_REF_DROPOUT
    text_dropout: float | None = None
    ref_scale: float = 2.0
    text_scale: float | None = None
    band: SimilarityBand = SimilarityBand()
    k_max: int = DEFAULT_K_MAX
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.ref_dropout <= 1.0:
            raise ValidationError("ref_dropout outside [0, 1]")
        if self.text_dropout is not None:
            if not 0.0 <= self.text_dropout <= 1.0:
                raise ValidationError("text_dropout outside [0, 1]")
            if self.ref_dropout + self.text_dropout > 1.0:
                raise ValidationError("dropout buckets overlap: rates sum > 1")

    def as_dict(self) -> dict:
        out = {
            "task": self.task,
            "steps": self.steps,
            "batch_size": self.batch_size,
            "ref_dropout": self.ref_dropout,
            "ref_scale": self.ref_scale,
            "band": {"lo": self.band.lo, "hi": self.band.hi},
            "k_max": self.k_max,
            "seed": self.seed,
        }
        if self.task == TASK_SUBJECT_GEN:
            out["text_dropout"] = self.text_dropout
            out["text_scale"] = self.text_scale
        return out


def assemble_examples(
    graph: KnnGraph,
    records: Sequence[ObjectRecord],
    task: str,
    counters: dict | None = None,
) -> Iterator[TrainingExample]:
    """One example per object with >= 3 retained neighbors, ascending by
    target id; the 3 highest-similarity neighbors become the references.

    Objects with fewer neighbors are skipped and counted in
    counters["skipped"] when a dict is supplied.
    """
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    by_id = {r.id: r for r in records}
    if counters is not None:
        counters.setdefault("emitted", 0)
        counters.setdefault("skipped", 0)
    for rec in sorted(records, key=lambda r: r.id):
        nbrs = graph.neighbors.get(rec.id, [])
        if len(nbrs) < REFS_REQUIRED:
            if counters is not None:
                counters["skipped"] += 1
            continue
        top = nbrs[:REFS_REQUIRED]
        refs = tuple(by_id[nid] for nid, _ in top)
        sims = tuple(s for _, s in top)
        if counters is not None:
            counters["emitted"] += 1
        yield TrainingExample(
            target=rec, references=refs, similarities=sims, task=task
        )


def validate_example(example: TrainingExample, band: SimilarityBand | None = None) -> None:
    """Raise ValidationError if any TrainingExample invariant is broken."""
    ref_ids = [r.id for r in example.references]
    if len(example.references) != REFS_REQUIRED:
        raise ValidationError(
            f"target {example.target.id}: expected {REFS_REQUIRED} references"
        )
    if len(set(ref_ids)) != REFS_REQUIRED:
        raise ValidationError(f"target {example.target.id}: duplicate reference ids")
    if example.target.id in ref_ids:
        raise ValidationError(f"target {example.target.id} appears in its references")
    for ref in example.references:
        if ref.image_ref == example.target.image_ref:
            raise ValidationError(
                f"target {example.target.id}: reference {ref.id} shares its source image"
            )
    if band is not None:
        for sim in example.similarities:
            if not band.contains(sim):
                raise ValidationError(
                    f"target {example.target.id}: similarity {sim} outside band"
                )
    if example.scene is not None and example.scene.kind != example.task:
        raise ValidationError(
            f"target {example.target.id}: scene kind {example.scene.kind!r} "
            f"does not match task {example.task!r}"
        )


def _image_size(path) -> tuple[int, int]:
    from PIL import Image

    with Image.open(path) as im:
        return im.size  # (w, h)


def attach_background(example: TrainingExample, removal_output_path, corpus_root=None) -> TrainingExample:
    """Bind the object-free background image to an insertion example.

    The background must exist and match the target image's dimensions; the
    position mask bbox is the target's bbox verbatim.
    """
    if example.task != TASK_INSERTION:
        raise ValidationError(f"attach_background on a {example.task} example")
    removal_output_path = Path(removal_output_path)
    if not removal_output_path.exists():
        raise ValidationError(f"background file not found: {removal_output_path}")
    target_path = (
        Path(corpus_root) / example.target.image_ref
        if corpus_root is not None
        else Path(example.target.image_ref)
    )
    bg_size = _image_size(removal_output_path)
    target_size = _image_size(target_path)
    if bg_size != target_size:
        raise ValidationError(
            f"background {removal_output_path} is {bg_size[0]}x{bg_size[1]}, "
            f"target image is {target_size[0]}x{target_size[1]}"
        )
    scene = SceneDescription(
        kind=TASK_INSERTION,
        background_ref=str(removal_output_path),
        position_mask_bbox=example.target.bbox,
    )
    return dataclasses.replace(example, scene=scene)


def attach_caption(example: TrainingExample, caption: str) -> TrainingExample:
    """Bind a scene caption to a subject-generation example."""
    if example.task != TASK_SUBJECT_GEN:
        raise ValidationError(f"attach_caption on a {example.task} example")
    if not caption or not caption.strip():
        raise ValidationError("empty caption")
    scene = SceneDescription(kind=TASK_SUBJECT_GEN, caption=caption)
    return dataclasses.replace(example, scene=scene)


def letterbox(image: np.ndarray, tile: int = TILE) -> np.ndarray:
    """Aspect-preserving square pad (centered, zeros) followed by a resize."""
    from PIL import Image

    image = np.asarray(image)
    if image.ndim == 2:
        image = image[:, :, None].repeat(3, axis=2)
    h, w = image.shape[:2]
    side = max(h, w)
    padded = np.zeros((side, side, image.shape[2]), dtype=image.dtype)
    top = (side - h) // 2
    left = (side - w) // 2
    padded[top : top + h, left : left + w] = image
    if side == tile:
        return padded
    return np.asarray(Image.fromarray(padded).resize((tile, tile), Image.BILINEAR))


def _check_tile(img: np.ndarray, name: str) -> np.ndarray:
    img = np.asarray(img)
    if img.shape != (TILE, TILE, 3):
        raise ValidationError(
            f"{name} tile must be {TILE}x{TILE}x3, got {img.shape}"
        )
    return img


def compose_grid(target_img: np.ndarray, ref_imgs: Sequence[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Place target and 3 reference tiles on the 2x2 canvas.

    Returns (grid, loss_mask): the 1024x1024x3 canvas and the binary mask
    that is 1 exactly on the target (top-left) quadrant. Placement is
    lossless; extracting a quadrant returns the input tile bit-exactly.
    """
    if len(ref_imgs) != REFS_REQUIRED:
        raise ValidationError(f"expected {REFS_REQUIRED} reference tiles, got {len(ref_imgs)}")
    target_img = _check_tile(target_img, "target")
    tiles = {"target": target_img}
    for i, ref in enumerate(ref_imgs, start=1):
        tiles[f"ref{i}"] = _check_tile(ref, f"ref{i}")
    grid = np.zeros((CANVAS, CANVAS, 3), dtype=target_img.dtype)
    for slot, (r, c) in GRID_SLOTS.items():
        grid[r : r + TILE, c : c + TILE] = tiles[slot]
    return grid, make_loss_mask()


def make_loss_mask() -> np.ndarray:
    """1024x1024 uint8 map: 1 on rows/cols 0..511, 0 elsewhere."""
    mask = np.zeros((CANVAS, CANVAS), dtype=np.uint8)
    mask[:TILE, :TILE] = 1
    return mask


def extract_quadrant(grid: np.ndarray, slot: str) -> np.ndarray:
    r, c = GRID_SLOTS[slot]
    return grid[r : r + TILE, c : c + TILE].copy()


@dataclass(frozen=True)
class ChannelStack:
    """Channel-concatenated conditioning planes with their layout recorded."""

    data: np.ndarray  # (1024, 1024, C) float32
    layout: dict[str, tuple[int, int]]  # name -> [start, stop) channel range

    @property
    def channels(self) -> int:
        return self.data.shape[2]


def _as_plane(arr: np.ndarray, name: str, enforce_quadrant: bool) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValidationError(f"{name} plane must be 2-D or 3-D, got shape {arr.shape}")
    h, w = arr.shape[:2]
    if (h, w) == (TILE, TILE):
        plane = np.zeros((CANVAS, CANVAS, arr.shape[2]), dtype=np.float32)
        plane[:TILE, :TILE] = arr
        return plane
    if (h, w) == (CANVAS, CANVAS):
        if enforce_quadrant:
            outside = arr.copy()
            outside[:TILE, :TILE] = 0
            if np.any(outside):
                bad = np.argwhere(outside)[0]
                raise ValidationError(
                    f"{name} plane has nonzero values outside the top-left "
                    f"quadrant (first at row {int(bad[0])}, col {int(bad[1])})"
                )
        return arr
    raise ValidationError(
        f"{name} plane must be {TILE}x{TILE} or {CANVAS}x{CANVAS}, got {h}x{w}"
    )


def insertion_channels(
    noisy_target_tile: np.ndarray,
    background_tile: np.ndarray,
    bbox_mask_tile: np.ndarray,
) -> ChannelStack:
    """Stack (noisy, background, mask) along the channel axis.

    512x512 inputs are embedded in the top-left quadrant of a zeroed
    1024x1024 plane. Background and mask planes must be zero outside that
    quadrant; the noisy plane may be a full grid canvas. The mask
    contributes exactly one channel.
    """
    noisy = _as_plane(noisy_target_tile, "noisy", enforce_quadrant=False)
    background = _as_plane(background_tile, "background", enforce_quadrant=True)
    mask = _as_plane(bbox_mask_tile, "mask", enforce_quadrant=True)
    if mask.shape[2] != 1:
        raise ValidationError(f"mask must be single-channel, got {mask.shape[2]}")
    stacked = np.concatenate([noisy, background, mask], axis=2)
    cn, cb = noisy.shape[2], background.shape[2]
    layout = {
        "noisy": (0, cn),
        "background": (cn, cn + cb),
        "mask": (cn + cb, cn + cb + 1),
    }
    return ChannelStack(stacked, layout)


def bbox_mask_tile(bbox: tuple[int, int, int, int], image_size: tuple[int, int]) -> np.ndarray:
    """Filled-rectangle position mask in source-image pixels, letterboxed to
    the tile size (the mask is the bounding box, not a precise mask)."""
    w_img, h_img = image_size
    mask = np.zeros((h_img, w_img), dtype=np.uint8)
    x, y, w, h = bbox
    mask[y : y + h, x : x + w] = 255
    return letterbox(mask)[:, :, 0]


def emit_manifest(
    task: str,
    path=None,
    band: SimilarityBand | None = None,
    k_max: int = DEFAULT_K_MAX,
    seed: int = 0,
    steps: int = DEFAULT_STEPS,
    batch_size: int = DEFAULT_BATCH_SIZE,
    ref_dropout: float = DEFAULT_REF_DROPOUT,
    text_dropout: float | None = None,
    ref_scale: float | None = None,
    text_scale: float | None = None,
) -> TrainingManifest:
    """Build (and optionally write) the training manifest for a task.

    Defaults: reference guidance 2.0 for insertion, 1.5 with text guidance
    7.5 for subject generation; 100k steps at batch 128; disjoint 10%
    condition-dropout buckets.
    """
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    if band is None:
        band = SimilarityBand()
    if ref_scale is None:
        ref_scale = DEFAULT_REF_SCALE[task]
    if task == TASK_SUBJECT_GEN:
        if text_scale is None:
            text_scale = DEFAULT_TEXT_SCALE
        if text_dropout is None:
            text_dropout = DEFAULT_TEXT_DROPOUT
    else:
        text_scale = None
        text_dropout = None
    manifest = TrainingManifest(
        task=task,
        steps=steps,
        batch_size=batch_size,
        ref_dropout=ref_dropout,
        text_dropout=text_dropout,
        ref_scale=ref_scale,
        text_scale=text_scale,
        band=band,
        k_max=k_max,
        seed=seed,
    )
    if path is not None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(manifest.as_dict(), fh, indent=2)
            fh.write("\n")
    return manifest


def load_training_manifest(path) -> TrainingManifest:
    with open(path, "r", encoding="utf-8") as fh:
        obj = json.load(fh)
    return TrainingManifest(
        task=obj["task"],
        steps=int(obj["steps"]),
        batch_size=int(obj["batch_size"]),
        ref_dropout=float(obj["ref_dropout"]),
        text_dropout=(
            float(obj["text_dropout"]) if obj.get("text_dropout") is not None else None
        ),
        ref_scale=float(obj["ref_scale"]),
        text_scale=(
            float(obj["text_scale"]) if obj.get("text_scale") is not None else None
        ),
        band=SimilarityBand(obj["band"]["lo"], obj["band"]["hi"]),
        k_max=int(obj["k_max"]),
        seed=int(obj["seed"]),
    )


def _crop_record(record: ObjectRecord, corpus_root: Path) -> np.ndarray:
    from PIL import Image

    from .eval_protocol import crop_to_bbox

    with Image.open(corpus_root / record.image_ref) as im:
        return crop_to_bbox(np.asarray(im.convert("RGB")), record.bbox)


def emit_dataset(
    graph: KnnGraph,
    records: Sequence[ObjectRecord],
    task: str,
    out_dir,
    corpus_root=None,
    backgrounds_dir=None,
    captions_dir=None,
    grids: str = "auto",
    counters: dict | None = None,
) -> Path:
    """Write examples.jsonl (plus grid PNGs and the training manifest).

    grids: "on" composes a grid for every example (missing images are
    errors), "off" skips composition, "auto" composes when the source
    images are present. Output is deterministic: examples are ordered by
    target id and serialized canonically.
    """
    if grids not in ("auto", "on", "off"):
        raise ValidationError(f"grids must be auto|on|off, got {grids!r}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus_root = Path(corpus_root) if corpus_root is not None else Path(".")
    grids_dir = out_dir / "grids"
    if counters is None:
        counters = {}
    counters.setdefault("grids_written", 0)
    counters.setdefault("grids_skipped", 0)

    from PIL import Image

    examples_path = out_dir / "examples.jsonl"
    with open(examples_path, "w", encoding="utf-8") as fh:
        for example in assemble_examples(graph, records, task, counters):
            if backgrounds_dir is not None and task == TASK_INSERTION:
                example = attach_background(
                    example,
                    Path(backgrounds_dir) / f"{example.target.id}.png",
                    corpus_root=corpus_root,
                )
            elif captions_dir is not None and task == TASK_SUBJECT_GEN:
                caption_path = Path(captions_dir) / f"{example.target.id}.txt"
                if not caption_path.exists():
                    raise ValidationError(f"caption file not found: {caption_path}")
                example = attach_caption(example, caption_path.read_text(encoding="utf-8").strip())
            elif task == TASK_INSERTION:
                example = dataclasses.replace(
                    example,
                    scene=SceneDescription(
                        kind=TASK_INSERTION, position_mask_bbox=example.target.bbox
                    ),
                )
            validate_example(example, graph.band)

            grid_ref = None
            all_imgs = (example.target,) + example.references
            have_images = all(
                (corpus_root / r.image_ref).exists() for r in all_imgs
            )
            if grids == "on" and not have_images:
                missing = next(
                    r.image_ref
                    for r in all_imgs
                    if not (corpus_root / r.image_ref).exists()
                )
                raise ValidationError(f"grid requested but image missing: {missing}")
            if grids != "off" and have_images:
                tiles = [
                    letterbox(_crop_record(r, corpus_root)) for r in all_imgs
                ]
                grid, _ = compose_grid(tiles[0], tiles[1:])
                grids_dir.mkdir(exist_ok=True)
                grid_ref = f"grids/{example.target.id}.png"
                Image.fromarray(grid).save(out_dir / grid_ref)
                counters["grids_written"] += 1
            elif grids != "off":
                counters["grids_skipped"] += 1

            scene_dict = example.scene.as_dict() if example.scene else None
            fh.write(
                json.dumps(
                    {
                        "target": example.target.id,
                        "refs": [r.id for r in example.references],
                        "sims": list(example.similarities),
                        "task": task,
                        "scene": scene_dict,
                        "grid": grid_ref,
                        "mask_bbox": list(example.target.bbox),
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
    emit_manifest(
        task,
        out_dir / "training_manifest.json",
        band=graph.band,
        k_max=graph.k_max,
    )
    return examples_path
