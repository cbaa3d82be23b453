import numpy as np
import pytest

from mgll.annotations import (
    GranularitySchema,
    LevelSchema,
    Manifest,
    SampleAnnotation,
    write_manifest,
)


@pytest.fixture
def diagonal_manifest_dir(tmp_path):
    """Two samples, one level, unit-basis embeddings: sims are the identity."""
    schema = GranularitySchema(levels=[LevelSchema(name="only", vocab=["t0", "t1"])])
    samples = [
        SampleAnnotation(sample_id="s0", labels_per_level=[[0]]),
        SampleAnnotation(sample_id="s1", labels_per_level=[[1]]),
    ]
    manifest = Manifest(
        schema=schema,
        samples=samples,
        sample_embeddings={
            "s0": np.array([1.0, 0.0]),
            "s1": np.array([0.0, 1.0]),
        },
        text_embeddings={
            (0, 0): np.array([1.0, 0.0]),
            (0, 1): np.array([0.0, 1.0]),
        },
    )
    out = tmp_path / "diag"
    write_manifest(manifest, out)
    return out


@pytest.fixture
def twin_level_manifest_dir(tmp_path):
    """Two identical granularity levels: all per-level logits coincide."""
    schema = GranularitySchema(
        levels=[
            LevelSchema(name="a", vocab=["x", "y"]),
            LevelSchema(name="b", vocab=["x", "y"]),
        ]
    )
    samples = [
        SampleAnnotation(sample_id="s0", labels_per_level=[[0], [0]]),
        SampleAnnotation(sample_id="s1", labels_per_level=[[1], [1]]),
    ]
    anchors = {
        0: np.array([1.0, 0.0, 0.0]),
        1: np.array([0.0, 1.0, 0.0]),
    }
    manifest = Manifest(
        schema=schema,
        samples=samples,
        sample_embeddings={
            "s0": np.array([0.8, 0.6, 0.0]),
            "s1": np.array([0.0, 0.6, 0.8]),
        },
        text_embeddings={
            (0, 0): anchors[0],
            (0, 1): anchors[1],
            (1, 0): anchors[0],
            (1, 1): anchors[1],
        },
    )
    out = tmp_path / "twin"
    write_manifest(manifest, out)
    return out
