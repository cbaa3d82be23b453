"""Multi-granular annotation schema, alignment weights, and synthetic data.

A manifest couples a label schema (one vocabulary per granularity level) with
per-sample label assignments and optional embedding files. Alignment weights
normalize per-sample label counts into the convex weights used by the soft
contrastive objective.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import (
    AllZeroCounts,
    InvalidSpec,
    LevelOutOfRange,
    MissingEmbeddingFile,
    ParseError,
    SchemaViolation,
)
from .numerics import read_mgem, row_normalize, write_mgem


@dataclass
class LevelSchema:
    name: str
    vocab: list[str]


@dataclass
class GranularitySchema:
    levels: list[LevelSchema]

    def validate(self) -> None:
        if not self.levels:
            raise SchemaViolation("schema needs at least one granularity level")
        for g, level in enumerate(self.levels):
            if not level.vocab:
                raise SchemaViolation(f"level {g} ({level.name!r}) has an empty vocabulary")
            if len(set(level.vocab)) != len(level.vocab):
                raise SchemaViolation(f"level {g} ({level.name!r}) has duplicate labels")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass
class SampleAnnotation:
    sample_id: str
    labels_per_level: list[list[int]]

    def validate(self, schema: GranularitySchema) -> None:
        if len(self.labels_per_level) != schema.n_levels:
            raise SchemaViolation(
                f"sample {self.sample_id!r} annotates {len(self.labels_per_level)} "
                f"levels, schema has {schema.n_levels}"
            )
        for g, labels in enumerate(self.labels_per_level):
            vocab_size = len(schema.levels[g].vocab)
            if not labels:
                raise SchemaViolation(
                    f"sample {self.sample_id!r} has no label at level {g}"
                )
            if len(set(labels)) != len(labels):
                raise SchemaViolation(
                    f"sample {self.sample_id!r} repeats a label at level {g}"
                )
            for lab in labels:
                if not 0 <= lab < vocab_size:
                    raise SchemaViolation(
                        f"sample {self.sample_id!r} label {lab} out of range at level {g}"
                    )


@dataclass
class CooccurrenceTable:
    """Per-sample raw counts for one level, aligned with each sample's labels."""

    level: int
    sample_ids: list[str]
    counts: list[np.ndarray]


@dataclass
class AlignmentWeights:
    """Per-sample convex weights over that sample's labels at one level."""

    level: int
    per_sample: list[np.ndarray]

    def validate(self) -> None:
        for i, w in enumerate(self.per_sample):
            if np.any(w < 0):
                raise SchemaViolation(f"negative alignment weight for sample index {i}")
            if abs(float(w.sum()) - 1.0) > 1e-12:
                raise SchemaViolation(f"weights of sample index {i} sum to {w.sum()!r}")


@dataclass
class Manifest:
    schema: GranularitySchema
    samples: list[SampleAnnotation]
    sample_embeddings: dict[str, np.ndarray] | None = None
    text_embeddings: dict[tuple[int, int], np.ndarray] | None = None
    source_path: str | None = None

    def validate(self) -> None:
        self.schema.validate()
        seen = set()
        for sample in self.samples:
            if sample.sample_id in seen:
                raise SchemaViolation(f"duplicate sample id {sample.sample_id!r}")
            seen.add(sample.sample_id)
            sample.validate(self.schema)

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def subset(self, indices) -> "Manifest":
        """View onto a subset of samples; embedding dicts are shared."""
        return replace(self, samples=[self.samples[i] for i in indices])


def alignment_weights(counts: CooccurrenceTable) -> AlignmentWeights:
    """Normalize raw per-sample counts into convex weights (w_ik)."""
    per_sample = []
    for sid, c in zip(counts.sample_ids, counts.counts):
        c = np.asarray(c, dtype=np.float64)
        total = float(c.sum())
        if total <= 0.0:
            raise AllZeroCounts(sid)
        per_sample.append(c / total)
    return AlignmentWeights(level=counts.level, per_sample=per_sample)


def uniform_counts(manifest: Manifest, level: int) -> CooccurrenceTable:
    """All-ones counts: every assigned label weighs the same."""
    _check_level(manifest, level)
    counts = [
        np.ones(len(s.labels_per_level[level]), dtype=np.float64)
        for s in manifest.samples
    ]
    return CooccurrenceTable(
        level=level,
        sample_ids=[s.sample_id for s in manifest.samples],
        counts=counts,
    )


def corpus_cooccurrence(manifest: Manifest, level: int) -> CooccurrenceTable:
    """Label frequencies among corpus samples sharing at least one label.

    count(i, k) = number of samples whose level label set contains k and
    intersects sample i's label set. Each sample counts itself, so every
    count is at least 1.
    """
    _check_level(manifest, level)
    label_sets = [frozenset(s.labels_per_level[level]) for s in manifest.samples]
    counts = []
    for i, own in enumerate(label_sets):
        sharers = [ls for ls in label_sets if own & ls]
        labels_i = manifest.samples[i].labels_per_level[level]
        row = np.array(
            [sum(1.0 for ls in sharers if k in ls) for k in labels_i],
            dtype=np.float64,
        )
        counts.append(row)
    return CooccurrenceTable(
        level=level,
        sample_ids=[s.sample_id for s in manifest.samples],
        counts=counts,
    )


def weights_for_level(manifest: Manifest, level: int, mode: str) -> AlignmentWeights:
    """Build alignment weights for one level in the requested mode."""
    if mode == "uniform":
        return alignment_weights(uniform_counts(manifest, level))
    if mode == "cooccurrence":
        return alignment_weights(corpus_cooccurrence(manifest, level))
    raise SchemaViolation(f"unknown weights mode {mode!r}")


def _check_level(manifest: Manifest, level: int) -> None:
    if not 0 <= level < manifest.schema.n_levels:
        raise LevelOutOfRange(
            f"level {level} outside schema with {manifest.schema.n_levels} levels"
        )


# --- manifest JSON ------------------------------------------------------------


def ingest_manifest(path) -> Manifest:
    """Load and validate a manifest JSON file, reading referenced embeddings."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ParseError(f"cannot read manifest {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}:{exc.lineno}: {exc.msg}") from exc

    try:
        schema = GranularitySchema(
            levels=[LevelSchema(name=l["name"], vocab=list(l["vocab"])) for l in doc["schema"]["levels"]]
        )
        raw_samples = doc["samples"]
        raw_texts = doc.get("texts", [])
    except (KeyError, TypeError) as exc:
        raise ParseError(f"{path}: missing or malformed field: {exc}") from exc

    samples = []
    sample_embeddings: dict[str, np.ndarray] = {}
    base = path.parent
    for entry in raw_samples:
        try:
            sample = SampleAnnotation(
                sample_id=str(entry["id"]),
                labels_per_level=[list(map(int, lv)) for lv in entry["labels"]],
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: malformed sample entry: {exc}") from exc
        samples.append(sample)
        if "embedding" in entry and entry["embedding"] is not None:
            ref = base / entry["embedding"]
            if not ref.exists():
                raise MissingEmbeddingFile(str(ref))
            vec = read_mgem(ref)
            sample_embeddings[sample.sample_id] = vec.reshape(-1)

    text_embeddings: dict[tuple[int, int], np.ndarray] = {}
    for entry in raw_texts:
        try:
            level = int(entry["level"])
            label = int(entry["label"])
            ref = base / entry["embedding"]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"{path}: malformed text entry: {exc}") from exc
        if not 0 <= level < schema.n_levels:
            raise SchemaViolation(f"text entry level {level} out of range")
        if not 0 <= label < len(schema.levels[level].vocab):
            raise SchemaViolation(f"text entry label {label} out of range at level {level}")
        if not ref.exists():
            raise MissingEmbeddingFile(str(ref))
        text_embeddings[(level, label)] = read_mgem(ref).reshape(-1)

    manifest = Manifest(
        schema=schema,
        samples=samples,
        sample_embeddings=sample_embeddings or None,
        text_embeddings=text_embeddings or None,
        source_path=str(path),
    )
    manifest.validate()
    return manifest


def write_manifest(manifest: Manifest, out_dir) -> Path:
    """Write manifest.json plus one MGEM file per sample and per text anchor.

    Output bytes are a pure function of the manifest contents, so identical
    manifests produce identical files.
    """
    out_dir = Path(out_dir)
    emb_dir = out_dir / "embeddings"
    emb_dir.mkdir(parents=True, exist_ok=True)

    doc_samples = []
    for sample in manifest.samples:
        entry = {"id": sample.sample_id, "labels": sample.labels_per_level}
        if manifest.sample_embeddings and sample.sample_id in manifest.sample_embeddings:
            rel = f"embeddings/sample_{sample.sample_id}.mgem"
            write_mgem(out_dir / rel, manifest.sample_embeddings[sample.sample_id][None, :])
            entry["embedding"] = rel
        doc_samples.append(entry)

    doc_texts = []
    if manifest.text_embeddings:
        for (level, label) in sorted(manifest.text_embeddings):
            rel = f"embeddings/text_L{level}_{label}.mgem"
            write_mgem(out_dir / rel, manifest.text_embeddings[(level, label)][None, :])
            doc_texts.append({"level": level, "label": label, "embedding": rel})

    doc = {
        "schema": {
            "levels": [{"name": l.name, "vocab": l.vocab} for l in manifest.schema.levels]
        },
        "samples": doc_samples,
        "texts": doc_texts,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return manifest_path


# --- synthetic two-level corpus -----------------------------------------------


@dataclass
class SyntheticSpec:
    """Parameters of the generated two-level (coarse/fine) corpus."""

    seed: int
    n_samples: int = 2000
    dim: int = 64
    coarse_labels: int = 8
    fine_per_coarse: int = 3
    labels_per_sample: int = 5
    noise_sigma: float = 0.3
    # How far child anchors scatter around their coarse parent direction.
    child_spread: float = 0.75

    def validate(self) -> None:
        if self.dim < 2:
            raise InvalidSpec(f"dim must be >= 2, got {self.dim}")
        if self.coarse_labels < 2:
            raise InvalidSpec(f"coarse_labels must be >= 2, got {self.coarse_labels}")
        if self.fine_per_coarse < 1:
            raise InvalidSpec(f"fine_per_coarse must be >= 1, got {self.fine_per_coarse}")
        if self.labels_per_sample < 1:
            raise InvalidSpec(f"labels_per_sample must be >= 1, got {self.labels_per_sample}")
        total_fine = self.coarse_labels * self.fine_per_coarse
        if self.labels_per_sample > total_fine:
            raise InvalidSpec(
                f"labels_per_sample {self.labels_per_sample} exceeds fine vocabulary {total_fine}"
            )
        if self.n_samples < 1:
            raise InvalidSpec(f"n_samples must be >= 1, got {self.n_samples}")
        if self.noise_sigma < 0:
            raise InvalidSpec(f"noise_sigma must be >= 0, got {self.noise_sigma}")


def fine_parent(fine_index: int, fine_per_coarse: int) -> int:
    """Coarse parent of a fine label under the generator's block layout."""
    return fine_index // fine_per_coarse


def generate_synthetic(spec: SyntheticSpec) -> Manifest:
    """Draw a deterministic two-level corpus with anchored embeddings.

    Coarse anchors are uniform on the unit sphere; each fine anchor scatters
    around its parent so that coarse supervision carries information about
    fine placement. A sample draws labels_per_sample distinct fine labels,
    inherits their coarse parents, and its embedding is the renormalized sum
    of its fine anchors plus Gaussian noise.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n_fine = spec.coarse_labels * spec.fine_per_coarse

    coarse = row_normalize(rng.standard_normal((spec.coarse_labels, spec.dim)))
    scatter = rng.standard_normal((n_fine, spec.dim))
    parents = np.repeat(np.arange(spec.coarse_labels), spec.fine_per_coarse)
    fine = row_normalize(coarse[parents] + spec.child_spread * scatter)

    samples = []
    sample_embeddings: dict[str, np.ndarray] = {}
    width = len(str(max(spec.n_samples - 1, 1)))
    for i in range(spec.n_samples):
        fine_labels = np.sort(
            rng.choice(n_fine, size=spec.labels_per_sample, replace=False)
        )
        noise = rng.standard_normal(spec.dim)
        centroid = row_normalize(fine[fine_labels].sum(axis=0)[None, :])[0]
        emb = centroid + spec.noise_sigma * noise
        emb = row_normalize(emb[None, :])[0]
        coarse_labels = sorted({fine_parent(int(f), spec.fine_per_coarse) for f in fine_labels})
        sid = f"{i:0{width}d}"
        samples.append(
            SampleAnnotation(
                sample_id=sid,
                labels_per_level=[list(coarse_labels), [int(f) for f in fine_labels]],
            )
        )
        sample_embeddings[sid] = emb

    schema = GranularitySchema(
        levels=[
            LevelSchema(
                name="coarse",
                vocab=[f"coarse{c}" for c in range(spec.coarse_labels)],
            ),
            LevelSchema(
                name="fine",
                vocab=[
                    f"coarse{fine_parent(k, spec.fine_per_coarse)}/fine{k}"
                    for k in range(n_fine)
                ],
            ),
        ]
    )
    text_embeddings = {(0, c): coarse[c] for c in range(spec.coarse_labels)}
    text_embeddings.update({(1, k): fine[k] for k in range(n_fine)})

    manifest = Manifest(
        schema=schema,
        samples=samples,
        sample_embeddings=sample_embeddings,
        text_embeddings=text_embeddings,
    )
    manifest.validate()
    return manifest


def drop_fine_labels(manifest: Manifest, fraction: float, seed) -> Manifest:
    """Randomly hide a fraction of fine-level assignments (training-time noise).

    Mirrors partially missing fine-granularity annotations: each sample keeps
    at least one fine label, and its coarse (category-level) annotations stay
    intact, the way a missing clinical explanation leaves the diagnosis in
    place. Expects the generator's two-level layout: level 0 coarse, level 1
    fine.
    """
    if manifest.schema.n_levels != 2:
        raise SchemaViolation("label dropping expects the two-level synthetic layout")

    rng = np.random.default_rng(seed)
    new_samples = []
    for sample in manifest.samples:
        fine_labels = list(sample.labels_per_level[1])
        keep = [lab for lab in fine_labels if rng.random() >= fraction]
        if not keep:
            keep = [fine_labels[0]]
        new_samples.append(
            SampleAnnotation(
                sample_id=sample.sample_id,
                labels_per_level=[list(sample.labels_per_level[0]), keep],
            )
        )
    return replace(manifest, samples=new_samples)
