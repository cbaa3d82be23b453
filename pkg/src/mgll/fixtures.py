"""Seeded batch builders used by the gradcheck CLI and the test suite."""

from __future__ import annotations

import numpy as np

from .losses import AlignmentBatch, LevelData
from .numerics import row_normalize


def random_batch(seed: int, n_samples: int = 8, dim: int = 16,
                 texts_per_level=(6, 6), max_labels: int = 2,
                 weights: str = "random") -> AlignmentBatch:
    """Random unit-row batch with per-level assignments and convex weights.

    weights: "random" draws Dirichlet weights, "uniform" gives 1/M each.
    Deterministic for a fixed seed.
    """
    rng = np.random.default_rng(seed)
    images = row_normalize(rng.standard_normal((n_samples, dim)))
    levels = []
    for g, n_texts in enumerate(texts_per_level):
        texts = row_normalize(rng.standard_normal((n_texts, dim)))
        label_rows = []
        sample_weights = []
        for _ in range(n_samples):
            m = int(rng.integers(1, max_labels + 1))
            m = min(m, n_texts)
            rows = np.sort(rng.choice(n_texts, size=m, replace=False))
            label_rows.append(rows)
            if weights == "uniform":
                w = np.full(m, 1.0 / m)
            else:
                w = rng.dirichlet(np.ones(m))
            sample_weights.append(w)
        levels.append(
            LevelData(texts=texts, label_rows=label_rows, weights=sample_weights,
                      name=f"level{g}")
        )
    return AlignmentBatch(images, levels)


def diagonal_pair_batch(dim: int = 2) -> AlignmentBatch:
    """Two samples, one level, one label each; similarity matrix is identity."""
    images = np.eye(2, dim)
    texts = np.eye(2, dim)
    level = LevelData(
        texts=texts,
        label_rows=[np.array([0]), np.array([1])],
        weights=[np.array([1.0]), np.array([1.0])],
        name="only",
    )
    return AlignmentBatch(images, [level], ["a", "b"])
