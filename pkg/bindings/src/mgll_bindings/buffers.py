"""Plain-buffer forward/backward surface over the combined objective.

The caller owns every buffer: flat float arrays for embeddings, CSR-style
integer arrays for label assignments, and preallocated output buffers for
the gradients. Shapes and scalars travel in plain-old-data descriptors, so
any host that can produce contiguous memory (numpy, torch, ctypes) can call
in. float32 inputs are widened to float64 internally and the gradients are
narrowed back on the way out; nothing is retained across calls.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mgll.gradients import loss_grad
from mgll.losses import AlignmentBatch, LevelData, LossConfig


class ValidationError(ValueError):
    """Raised with a field path when a buffer disagrees with its descriptor."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass(frozen=True)
class BatchShape:
    """Buffer layout: sample count, embedding width, per-level text counts."""

    n_samples: int
    dim: int
    texts_per_level: tuple[int, ...]
    dtype: str = "f64"  # "f32" or "f64"

    def validate(self) -> None:
        if self.n_samples < 1:
            raise ValidationError("shape.n_samples", f"must be >= 1, got {self.n_samples}")
        if self.dim < 1:
            raise ValidationError("shape.dim", f"must be >= 1, got {self.dim}")
        if not self.texts_per_level:
            raise ValidationError("shape.texts_per_level", "needs at least one level")
        for g, r in enumerate(self.texts_per_level):
            if r < 1:
                raise ValidationError(f"shape.texts_per_level[{g}]", f"must be >= 1, got {r}")
        if self.dtype not in ("f32", "f64"):
            raise ValidationError("shape.dtype", f"must be f32 or f64, got {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.float32 if self.dtype == "f32" else np.float64


@dataclass(frozen=True)
class LossScalars:
    """Scalar configuration mirrored from the primary LossConfig."""

    tau: float = 0.07
    alpha1: float = 0.5
    alpha2: float = 1.0
    alpha3: float = 1.0
    pointwise_tau: float | None = None
    kl_exact: bool = True
    kl_use_tau: bool = True

    def to_config(self) -> LossConfig:
        cfg = LossConfig(
            tau=self.tau,
            alpha1=self.alpha1,
            alpha2=self.alpha2,
            alpha3=self.alpha3,
            kl_grad_mode="exact" if self.kl_exact else "approximate",
            pointwise_tau=self.pointwise_tau,
            kl_use_tau=self.kl_use_tau,
        )
        try:
            cfg.validate()
        except Exception as exc:
            raise ValidationError("config", str(exc)) from exc
        return cfg


def _as_flat(buf, dtype, field: str, expected: int) -> np.ndarray:
    try:
        arr = np.asarray(buf, dtype=dtype)
    except (TypeError, ValueError) as exc:
        raise ValidationError(field, f"not convertible to {dtype}: {exc}") from exc
    arr = arr.reshape(-1)
    if arr.size != expected:
        raise ValidationError(field, f"expected {expected} elements, got {arr.size}")
    return arr


def _build_batch(shape: BatchShape, images, texts, label_offsets, label_indices,
                 weights) -> AlignmentBatch:
    shape.validate()
    n, d = shape.n_samples, shape.dim
    n_levels = len(shape.texts_per_level)
    for name, seq in (("texts", texts), ("label_offsets", label_offsets),
                      ("label_indices", label_indices), ("weights", weights)):
        if len(seq) != n_levels:
            raise ValidationError(name, f"expected {n_levels} levels, got {len(seq)}")

    img = _as_flat(images, np.float64, "images", n * d).reshape(n, d)
    levels = []
    for g, r in enumerate(shape.texts_per_level):
        t = _as_flat(texts[g], np.float64, f"texts[{g}]", r * d).reshape(r, d)
        offsets = _as_flat(label_offsets[g], np.int64, f"label_offsets[{g}]", n + 1)
        if offsets[0] != 0 or np.any(np.diff(offsets) < 1):
            raise ValidationError(
                f"label_offsets[{g}]",
                "must start at 0 and assign every sample at least one label",
            )
        total = int(offsets[-1])
        idx = _as_flat(label_indices[g], np.int64, f"label_indices[{g}]", total)
        if np.any(idx < 0) or np.any(idx >= r):
            raise ValidationError(f"label_indices[{g}]", f"label index outside [0, {r})")
        w = _as_flat(weights[g], np.float64, f"weights[{g}]", total)
        label_rows = []
        weight_rows = []
        for i in range(n):
            lo, hi = int(offsets[i]), int(offsets[i + 1])
            label_rows.append(idx[lo:hi])
            weight_rows.append(w[lo:hi])
        try:
            levels.append(LevelData(texts=t, label_rows=label_rows, weights=weight_rows))
        except Exception as exc:
            raise ValidationError(f"levels[{g}]", str(exc)) from exc
    return AlignmentBatch(img, levels)


def forward_backward(shape: BatchShape, config: LossScalars, images, texts,
                     label_offsets, label_indices, weights,
                     out_grad_images=None, out_grad_texts=None) -> float:
    """Combined-objective loss and gradients over caller-owned flat buffers.

    Returns the loss; when output buffers are given, writes d(loss)/d(images)
    and d(loss)/d(texts[g]) into them (narrowing to float32 for f32 shapes).
    Inputs are never modified or retained.
    """
    cfg = config.to_config()
    batch = _build_batch(shape, images, texts, label_offsets, label_indices, weights)
    result = loss_grad(batch, cfg, "mgll")

    if out_grad_images is not None:
        out = np.asarray(out_grad_images)
        if out.size != batch.images.size:
            raise ValidationError(
                "out_grad_images",
                f"expected {batch.images.size} elements, got {out.size}",
            )
        flat = result.grad_images.reshape(-1).astype(shape.np_dtype)
        out.reshape(-1)[:] = flat
    if out_grad_texts is not None:
        if len(out_grad_texts) != batch.n_levels:
            raise ValidationError(
                "out_grad_texts",
                f"expected {batch.n_levels} buffers, got {len(out_grad_texts)}",
            )
        for g, buf in enumerate(out_grad_texts):
            out = np.asarray(buf)
            expected = batch.levels[g].texts.size
            if out.size != expected:
                raise ValidationError(
                    f"out_grad_texts[{g}]",
                    f"expected {expected} elements, got {out.size}",
                )
            out.reshape(-1)[:] = (
                result.grad_texts_per_level[g].reshape(-1).astype(shape.np_dtype)
            )
    return result.value
