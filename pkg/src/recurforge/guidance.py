"""Classifier-free guidance combinators and the condition-dropout plan.

Pure vector math: denoiser outputs are plain 1-D float arrays, so
everything here is testable without a model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .dataset import TASK_INSERTION, TASK_SUBJECT_GEN, TASKS


@dataclass(frozen=True)
class GuidanceConfig:
    ref_scale: float
    text_scale: float | None = None

    def __post_init__(self):
        if self.ref_scale < 0:
            raise ValidationError("ref_scale must be >= 0")
        if self.text_scale is not None and self.text_scale < 0:
            raise ValidationError("text_scale must be >= 0")

    @classmethod
    def for_task(cls, task: str) -> "GuidanceConfig":
        if task == TASK_INSERTION:
            return cls(ref_scale=2.0)
        if task == TASK_SUBJECT_GEN:
            return cls(ref_scale=1.5, text_scale=7.5)
        raise ValidationError(f"unknown task {task!r}")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValidationError(f"length mismatch: {a.shape} vs {b.shape}")
    return a, b


def cfg_single(uncond, cond, ref_scale: float) -> np.ndarray:
    """uncond + ref_scale * (cond - uncond), elementwise.

    Scales 0 and 1 short-circuit to the respective input so the endpoint
    identities are exact in floating point.
    """
    a, b = _pair(uncond, cond)
    if ref_scale == 0.0:
        return a.copy()
    if ref_scale == 1.0:
        return b.copy()
    return a + ref_scale * (b - a)


def cfg_dual(uncond, ref_only, ref_and_text, text_scale: float, ref_scale: float) -> np.ndarray:
    """Two-condition combination for subject generation:

    uncond + text_scale * (ref_and_text - ref_only)
           + ref_scale  * (ref_only - uncond)

    At text_scale = 0 this reduces to cfg_single(uncond, ref_only,
    ref_scale) exactly (same operation sequence), and at unit scales the
    telescoping sum collapses to the fully conditioned output exactly.
    """
    a, m = _pair(uncond, ref_only)
    _, f = _pair(uncond, ref_and_text)
    if text_scale == 0.0:
        return cfg_single(a, m, ref_scale)
    if text_scale == 1.0 and ref_scale == 1.0:
        return f.copy()
    return a + text_scale * (f - m) + ref_scale * (m - a)


@dataclass(frozen=True)
class DropoutPlan:
    """Per-example condition-dropout flags; the two buckets are disjoint."""

    drop_refs: np.ndarray
    drop_text: np.ndarray
    rate_refs: float
    rate_text: float
    task: str
    seed: int

    @property
    def n(self) -> int:
        return self.drop_refs.shape[0]


def dropout_plan(
    n_examples: int,
    rate_refs: float = 0.10,
    rate_text: float = 0.10,
    task: str = TASK_SUBJECT_GEN,
    seed: int = 0,
) -> DropoutPlan:
    """Assign exactly floor(rate * n) examples to each dropout bucket.

    For subject generation the reference-dropout and text-dropout buckets
    are disjoint (no example trains with both conditions removed); for
    insertion the text bucket is unused.
    """
    if task not in TASKS:
        raise ValidationError(f"unknown task {task!r}")
    if not 0.0 <= rate_refs <= 1.0:
        raise ValidationError("rate_refs outside [0, 1]")
    if not 0.0 <= rate_text <= 1.0:
        raise ValidationError("rate_text outside [0, 1]")
    use_text = task == TASK_SUBJECT_GEN
    if use_text and rate_refs + rate_text > 1.0:
        raise ValidationError("rates sum > 1: dropout buckets cannot be disjoint")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(n_examples)
    drop_refs = np.zeros(n_examples, dtype=bool)
    drop_text = np.zeros(n_examples, dtype=bool)
    n_refs = math.floor(rate_refs * n_examples)
    drop_refs[perm[:n_refs]] = True
    if use_text:
        n_text = math.floor(rate_text * n_examples)
        drop_text[perm[n_refs : n_refs + n_text]] = True
    return DropoutPlan(
        drop_refs=drop_refs,
        drop_text=drop_text,
        rate_refs=rate_refs,
        rate_text=rate_text if use_text else 0.0,
        task=task,
        seed=seed,
    )
