"""Forward evaluation of the CLIP baseline and the multi-granular objectives.

The batch couples image embeddings with one text-anchor matrix per
granularity level, per-sample label assignments, and convex per-sample
alignment weights. Every loss is a pure function of (batch, config); the
private *_core helpers additionally return the gradient with respect to the
similarity logits so the gradients module can share one set of formulas.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np

from .annotations import Manifest, weights_for_level
from .errors import (
    EmptyBatch,
    LevelMismatch,
    MultiLabelAmbiguity,
    SchemaViolation,
    SingleGranularity,
)
from .numerics import (
    as_float_array,
    cosine_similarity_matrix,
    row_normalize,
    sigmoid,
)

# Probabilities below this are clamped before any KL logarithm; 0*log(0) := 0.
KL_CLAMP = 1e-12


@dataclass
class LossConfig:
    """Scalar knobs shared by all objectives.

    tau is the softmax temperature of the contrastive terms; alpha1..alpha3
    weight the soft-CLIP, point-wise, and smooth-KL terms of the combined
    objective. The point-wise term uses raw cosine logits unless
    pointwise_tau is set; the smooth-KL distributions are tempered by tau
    unless kl_use_tau is disabled.
    """

    tau: float = 0.07
    alpha1: float = 0.5
    alpha2: float = 1.0
    alpha3: float = 1.0
    weights_mode: str = "uniform"
    kl_grad_mode: str = "exact"
    pointwise_tau: float | None = None
    kl_use_tau: bool = True

    def validate(self) -> None:
        if not self.tau > 0:
            raise SchemaViolation(f"tau must be positive, got {self.tau}")
        for name in ("alpha1", "alpha2", "alpha3"):
            if getattr(self, name) < 0:
                raise SchemaViolation(f"{name} must be non-negative")
        if self.weights_mode not in ("uniform", "cooccurrence"):
            raise SchemaViolation(f"unknown weights_mode {self.weights_mode!r}")
        if self.kl_grad_mode not in ("exact", "approximate"):
            raise SchemaViolation(f"unknown kl_grad_mode {self.kl_grad_mode!r}")
        if self.pointwise_tau is not None and not self.pointwise_tau > 0:
            raise SchemaViolation("pointwise_tau must be positive when set")


class LevelData:
    """Texts, assignments, and weights of one granularity level."""

    def __init__(self, texts, label_rows, weights, name: str = "",
                 vocab_indices=None):
        self.texts = as_float_array(texts)
        if self.texts.ndim != 2 or self.texts.shape[0] == 0:
            raise SchemaViolation("level text matrix must be a non-empty 2-d array")
        self.name = name
        n_rows = self.texts.shape[0]
        self.label_rows = [np.asarray(r, dtype=np.intp) for r in label_rows]
        self.weights = [np.asarray(w, dtype=np.float64) for w in weights]
        if len(self.label_rows) != len(self.weights):
            raise SchemaViolation("label_rows and weights must align per sample")
        self.vocab_indices = (
            np.asarray(vocab_indices, dtype=np.intp)
            if vocab_indices is not None
            else np.arange(n_rows, dtype=np.intp)
        )

        n = len(self.label_rows)
        self.y = np.zeros((n, n_rows), dtype=np.float64)
        self.pair_weight = np.zeros((n, n_rows), dtype=np.float64)
        self.designated = np.zeros(n, dtype=np.intp)
        n_pairs = 0
        for i, (rows, w) in enumerate(zip(self.label_rows, self.weights)):
            if rows.size == 0:
                raise SchemaViolation(f"sample index {i} has no labels at level {name!r}")
            if rows.size != w.size:
                raise SchemaViolation(f"sample index {i}: {rows.size} labels, {w.size} weights")
            if np.any(rows < 0) or np.any(rows >= n_rows):
                raise SchemaViolation(f"sample index {i} references a missing text row")
            if len(np.unique(rows)) != rows.size:
                raise SchemaViolation(f"sample index {i} repeats a text row")
            if np.any(w < 0) or abs(float(w.sum()) - 1.0) > 1e-9:
                raise SchemaViolation(f"sample index {i} weights are not convex")
            self.y[i, rows] = 1.0
            self.pair_weight[i, rows] = w
            self.designated[i] = rows[0]
            n_pairs += rows.size
        self.n_pairs = int(n_pairs)
        # Text-row usage counts (pair multiplicity) and total weight mass.
        self.multiplicity = self.y.sum(axis=0)
        self.weight_mass = self.pair_weight.sum(axis=0)

    @property
    def n_texts(self) -> int:
        return self.texts.shape[0]

    def max_labels(self) -> int:
        return max(r.size for r in self.label_rows)

    def with_texts(self, texts) -> "LevelData":
        clone = copy.copy(self)
        clone.texts = texts
        return clone


class AlignmentBatch:
    """Unit-row image embeddings plus per-level text data."""

    def __init__(self, images, levels, sample_ids=None):
        self.images = as_float_array(images)
        if self.images.ndim != 2:
            raise SchemaViolation("images must be a 2-d matrix")
        if self.images.shape[0] == 0:
            raise EmptyBatch("batch has no samples")
        self.levels = list(levels)
        if not self.levels:
            raise SchemaViolation("batch needs at least one granularity level")
        n = self.images.shape[0]
        for level in self.levels:
            if len(level.label_rows) != n:
                raise SchemaViolation("level annotations do not match sample count")
        self.sample_ids = (
            list(sample_ids) if sample_ids is not None else [str(i) for i in range(n)]
        )

    @property
    def n_samples(self) -> int:
        return self.images.shape[0]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def with_arrays(self, images, texts_per_level) -> "AlignmentBatch":
        """Shallow copy with replaced embedding arrays (annotations shared)."""
        clone = copy.copy(self)
        clone.images = images
        clone.levels = [
            lvl.with_texts(t) for lvl, t in zip(self.levels, texts_per_level)
        ]
        return clone


@dataclass
class LossResult:
    value: float
    grad_images: np.ndarray | None = None
    grad_texts_per_level: list[np.ndarray] | None = None


def build_batch(manifest: Manifest, cfg: LossConfig | None = None) -> AlignmentBatch:
    """Assemble an AlignmentBatch from an ingested manifest.

    Every vocabulary label at every level must carry an embedding; image and
    text rows are renormalized after the float32 file round trip.
    """
    cfg = cfg or LossConfig()
    if manifest.n_samples == 0:
        raise EmptyBatch("manifest has no samples")
    if not manifest.sample_embeddings or not manifest.text_embeddings:
        raise SchemaViolation("manifest carries no embeddings; cannot build a batch")

    images = []
    for sample in manifest.samples:
        if sample.sample_id not in manifest.sample_embeddings:
            raise SchemaViolation(f"sample {sample.sample_id!r} has no embedding")
        images.append(manifest.sample_embeddings[sample.sample_id])
    images = row_normalize(np.vstack(images))

    levels = []
    for g, level_schema in enumerate(manifest.schema.levels):
        vocab_indices = [
            lab
            for lab in range(len(level_schema.vocab))
            if (g, lab) in manifest.text_embeddings
        ]
        if not vocab_indices:
            raise SchemaViolation(f"level {g} has no text embeddings")
        row_of = {lab: r for r, lab in enumerate(vocab_indices)}
        texts = row_normalize(
            np.vstack([manifest.text_embeddings[(g, lab)] for lab in vocab_indices])
        )
        weights = weights_for_level(manifest, g, cfg.weights_mode)
        label_rows = []
        for sample in manifest.samples:
            try:
                rows = np.array(
                    [row_of[lab] for lab in sample.labels_per_level[g]], dtype=np.intp
                )
            except KeyError as exc:
                raise SchemaViolation(
                    f"sample {sample.sample_id!r} uses label {exc} without an embedding"
                ) from exc
            label_rows.append(rows)
        levels.append(
            LevelData(
                texts=texts,
                label_rows=label_rows,
                weights=weights.per_sample,
                name=level_schema.name,
                vocab_indices=vocab_indices,
            )
        )
    return AlignmentBatch(images, levels, [s.sample_id for s in manifest.samples])


# --- similarity-level cores ---------------------------------------------------


def _row_softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _clip_grouped_core(sims, designated, tau: float, direction: str,
                       want_grad: bool):
    """Contrastive loss over designated pairs, grouped by distinct text rows.

    sims is the N x R image/text similarity matrix; each batch sample j
    contributes the column designated[j] to the denominator, so duplicate
    designations enter as multiplicities instead of materialized N x N
    logits.
    """
    z = sims / tau
    n, r = z.shape
    cnt = np.bincount(designated, minlength=r).astype(np.float64)
    active = cnt > 0
    rows = np.arange(n)
    diag = z[rows, designated]
    if direction == "i2t":
        # inactive columns never enter the denominator; mask them before exp
        # so extreme temperatures cannot produce inf * 0
        z_act = np.where(active, z, -np.inf)
        m = z_act.max(axis=1, keepdims=True)
        e = np.exp(z_act - m)
        den = (e * cnt).sum(axis=1, keepdims=True)
        lse = (m + np.log(den))[:, 0]
        value = (lse - diag).sum() / n
        if not want_grad:
            return value, None
        d_z = (e * cnt) / den
        d_z[rows, designated] -= 1.0
        return value, d_z / (n * tau)
    # text-to-image: one log-sum-exp over images per designated column
    mc = z.max(axis=0, keepdims=True)
    e = np.exp(z - mc)
    den = e.sum(axis=0, keepdims=True)
    lse_cols = (mc + np.log(den))[0]
    value = ((cnt[active] * lse_cols[active]).sum() - diag.sum()) / n
    if not want_grad:
        return value, None
    d_z = (e / den) * cnt
    d_z[rows, designated] -= 1.0
    return value, d_z / (n * tau)


def _soft_clip_core(sims, pair_weight, multiplicity, weight_mass, n_pairs,
                    tau, want_grad):
    """Weighted multi-positive contrastive loss over an N x R similarity matrix.

    The pair-expanded denominator of the image-to-text direction counts each
    text row once per assignment, which is equivalent to a multiplicity-
    weighted log-sum-exp over distinct rows. The text-to-image direction uses
    one log-sum-exp per assigned text column over the batch images.
    """
    z = sims / tau
    active = multiplicity > 0
    z_act = z[:, active]
    m = z_act.max(axis=1, keepdims=True)
    weighted = multiplicity[active] * np.exp(z_act - m)
    denom = weighted.sum(axis=1, keepdims=True)
    lse_rows = (m + np.log(denom))[:, 0]

    assigned = weight_mass > 0
    z_cols = z[:, assigned]
    mc = z_cols.max(axis=0, keepdims=True)
    col_exp = np.exp(z_cols - mc)
    col_denom = col_exp.sum(axis=0, keepdims=True)
    lse_cols = (mc + np.log(col_denom))[0]

    aligned = (pair_weight * z).sum()
    i2t = lse_rows.sum() - aligned
    t2i = (weight_mass[assigned] * lse_cols).sum() - aligned
    value = (i2t + t2i) / (2.0 * n_pairs)
    if not want_grad:
        return value, None

    d_z = np.zeros_like(z)
    d_z[:, active] += weighted / denom
    d_z[:, assigned] += (col_exp / col_denom) * weight_mass[assigned]
    d_z -= 2.0 * pair_weight
    return value, d_z / (2.0 * n_pairs * tau)


def _pointwise_core(sims, y, tau, want_grad):
    """Per-pair binary cross entropy on similarity logits, averaged over N."""
    x = sims if tau is None else sims / tau
    n = x.shape[0]
    softplus_neg = np.log1p(np.exp(-np.abs(x))) + np.maximum(-x, 0)
    softplus_pos = np.log1p(np.exp(-np.abs(x))) + np.maximum(x, 0)
    value = (y * softplus_neg + (1.0 - y) * softplus_pos).sum() / n
    if not want_grad:
        return value, None
    d_x = (sigmoid(x) - y) / n
    if tau is not None:
        d_x = d_x / tau
    return value, d_x


def _kl_terms(p, mean):
    """Elementwise p*log(p/mean) with the 1e-12 clamp and 0*log(0) := 0."""
    log_ratio = np.log(np.maximum(p, KL_CLAMP)) - np.log(np.maximum(mean, KL_CLAMP))
    return np.where(p > KL_CLAMP, p * log_ratio, 0.0), log_ratio


def _smooth_kl_grouped(sims_list, desig_list, tau: float | None, grad_mode: str,
                       want_grad: bool):
    """Smooth-KL over batch-designated distributions, grouped by designation.

    Each sample's per-level distribution ranges over the batch's designated
    texts; samples sharing the same designation tuple are interchangeable, so
    probabilities and gradients are computed once per distinct tuple and
    weighted by its multiplicity. Exact math, far cheaper than N x N logits.
    """
    m = len(sims_list)
    n = sims_list[0].shape[0]
    z_list = [s / tau if tau is not None else s for s in sims_list]
    key_matrix = np.stack(desig_list, axis=1)
    keys, gcounts = np.unique(key_matrix, axis=0, return_counts=True)
    gweights = gcounts.astype(np.float64)

    probs = []  # per level: (N, U) probability of one sample in group u
    for g in range(m):
        cnt = np.bincount(desig_list[g], minlength=z_list[g].shape[1]).astype(np.float64)
        active = cnt > 0
        z = np.where(active, z_list[g], -np.inf)
        shift = z.max(axis=1, keepdims=True)
        e = np.exp(z - shift)
        den = (e * cnt).sum(axis=1, keepdims=True)
        probs.append((e / den)[:, keys[:, g]])
    mean = sum(probs) / m

    value = 0.0
    log_ratios = []
    kl_rows = []
    for g in range(m):
        terms, log_ratio = _kl_terms(probs[g], mean)
        kl_g = (terms * gweights).sum(axis=1)
        value = value + kl_g.sum()
        log_ratios.append(log_ratio)
        kl_rows.append(kl_g)
    value = value / n
    if not want_grad:
        return value, None

    grads = []
    for g in range(m):
        if grad_mode == "exact":
            local = probs[g] * (log_ratios[g] - kl_rows[g][:, None]) * gweights
        else:
            local = probs[g] * (log_ratios[g] + 1.0) * gweights
        d_z = np.zeros_like(z_list[g])
        np.add.at(d_z.T, keys[:, g], local.T)
        d_z = d_z / n
        grads.append(d_z / tau if tau is not None else d_z)
    return value, grads


def _smooth_kl_core(z_list, grad_mode, want_grad):
    """Sum over levels of KL(P_g || mean), averaged over batch rows.

    Exact gradients differentiate through the mean's dependence on every
    distribution, which collapses to d/dP = log(P/M); the approximate mode
    keeps the textbook per-term form log(P/M) + 1 and skips the off-diagonal
    softmax coupling, so it is not a true descent direction (it stays nonzero
    at the consensus point).
    """
    probs = [_row_softmax(z) for z in z_list]
    mean = sum(probs) / len(probs)
    n = probs[0].shape[0]
    value = 0.0
    terms = []
    for p in probs:
        t, log_ratio = _kl_terms(p, mean)
        kl_rows = t.sum(axis=1)
        value = value + kl_rows.sum()
        terms.append((p, kl_rows, log_ratio))
    value /= n
    if not want_grad:
        return value, None
    grads = []
    for p, kl_rows, log_ratio in terms:
        if grad_mode == "exact":
            g = p * (log_ratio - kl_rows[:, None])
        else:
            g = p * (log_ratio + 1.0)
        grads.append(g / n)
    return value, grads


# --- public loss surface --------------------------------------------------------


def _level_sims(batch: AlignmentBatch, level: int) -> np.ndarray:
    return cosine_similarity_matrix(batch.images, batch.levels[level].texts)


def _check_level_index(batch: AlignmentBatch, level: int) -> None:
    if not 0 <= level < batch.n_levels:
        raise LevelMismatch(f"level {level} outside batch with {batch.n_levels} levels")


def _clip_forward(batch: AlignmentBatch, level: int, cfg: LossConfig,
                  direction: str = "i2t", strict: bool = False):
    _check_level_index(batch, level)
    lvl = batch.levels[level]
    if strict:
        for i, rows in enumerate(lvl.label_rows):
            if rows.size > 1:
                raise MultiLabelAmbiguity(
                    f"sample {batch.sample_ids[i]!r} has {rows.size} labels at level {level}"
                )
    if direction not in ("i2t", "t2i"):
        raise SchemaViolation(f"unknown clip direction {direction!r}")
    sims = _level_sims(batch, level)
    value, _ = _clip_grouped_core(sims, lvl.designated, cfg.tau, direction,
                                  want_grad=False)
    return value


def clip_loss(batch: AlignmentBatch, level: int, cfg: LossConfig,
              direction: str = "i2t", strict: bool = False) -> LossResult:
    """Single-positive contrastive baseline at one level.

    Each sample is paired with its first assigned label; strict mode refuses
    multi-label samples instead. The default direction contrasts each image
    against the batch's designated texts; "t2i" mirrors the roles.
    """
    return LossResult(value=float(_clip_forward(batch, level, cfg, direction, strict)))


def _soft_clip_forward(batch: AlignmentBatch, level: int, cfg: LossConfig):
    _check_level_index(batch, level)
    lvl = batch.levels[level]
    sims = _level_sims(batch, level)
    value, _ = _soft_clip_core(
        sims, lvl.pair_weight, lvl.multiplicity, lvl.weight_mass, lvl.n_pairs,
        cfg.tau, want_grad=False,
    )
    return value


def soft_clip_loss(batch: AlignmentBatch, level: int, cfg: LossConfig) -> LossResult:
    """Weighted multi-positive contrastive loss (both directions) at one level."""
    return LossResult(value=float(_soft_clip_forward(batch, level, cfg)))


def _pointwise_forward(batch: AlignmentBatch, level: int,
                       cfg: LossConfig | None = None):
    _check_level_index(batch, level)
    cfg = cfg or LossConfig()
    sims = _level_sims(batch, level)
    value, _ = _pointwise_core(
        sims, batch.levels[level].y, cfg.pointwise_tau, want_grad=False
    )
    return value


def pointwise_loss(batch: AlignmentBatch, level: int,
                   cfg: LossConfig | None = None) -> LossResult:
    """Per-pair binary cross entropy on cosine logits at one level."""
    return LossResult(value=float(_pointwise_forward(batch, level, cfg)))


def granularity_distributions(batch: AlignmentBatch, sample: int, cfg: LossConfig,
                              mode: str = "batch") -> list[np.ndarray]:
    """Per-level probability distributions for one sample.

    The default "batch" mode softmaxes the sample's similarities against each
    level's designated texts (one per batch sample), so every level yields an
    N-length distribution regardless of vocabulary size. "vocab" mode uses
    each level's full text matrix and requires equal text counts.
    """
    if not 0 <= sample < batch.n_samples:
        raise LevelMismatch(f"sample index {sample} out of range")
    v = batch.images[sample : sample + 1]
    dists = []
    if mode == "batch":
        for g in range(batch.n_levels):
            lvl = batch.levels[g]
            sims = cosine_similarity_matrix(v, lvl.texts[lvl.designated])[0]
            dists.append(_row_softmax((sims / cfg.tau)[None, :])[0])
    elif mode == "vocab":
        sizes = {batch.levels[g].n_texts for g in range(batch.n_levels)}
        if len(sizes) != 1:
            raise LevelMismatch(
                f"vocab-mode distributions need equal text counts, got {sorted(sizes)}"
            )
        for g in range(batch.n_levels):
            sims = cosine_similarity_matrix(v, batch.levels[g].texts)[0]
            dists.append(_row_softmax((sims / cfg.tau)[None, :])[0])
    else:
        raise SchemaViolation(f"unknown distribution mode {mode!r}")
    return dists


def smooth_kl_divergence(distributions) -> float:
    """Sum of KL(P_g || mean) over explicit probability vectors."""
    dists = [np.asarray(p, dtype=np.float64) for p in distributions]
    if len(dists) < 2:
        raise SingleGranularity("smooth KL needs at least two distributions")
    length = dists[0].size
    for p in dists:
        if p.size != length:
            raise LevelMismatch("distributions differ in length")
    mean = sum(dists) / len(dists)
    total = 0.0
    for p in dists:
        t, _ = _kl_terms(p, mean)
        total += float(t.sum())
    return total


def _smooth_kl_inputs(batch: AlignmentBatch, cfg: LossConfig):
    sims_list = [_level_sims(batch, g) for g in range(batch.n_levels)]
    desig_list = [batch.levels[g].designated for g in range(batch.n_levels)]
    tau = cfg.tau if cfg.kl_use_tau else None
    return sims_list, desig_list, tau


def _smooth_kl_z_list(batch: AlignmentBatch, cfg: LossConfig):
    """Full per-sample logit rows (over the batch's designated texts)."""
    sims_list, desig_list, tau = _smooth_kl_inputs(batch, cfg)
    return [
        (s[:, d] / tau if tau is not None else s[:, d])
        for s, d in zip(sims_list, desig_list)
    ]


def _smooth_kl_forward(batch: AlignmentBatch, cfg: LossConfig):
    if batch.n_levels < 2:
        raise SingleGranularity("smooth KL loss needs at least two levels")
    sims_list, desig_list, tau = _smooth_kl_inputs(batch, cfg)
    value, _ = _smooth_kl_grouped(
        sims_list, desig_list, tau, cfg.kl_grad_mode, want_grad=False
    )
    return value


def smooth_kl_loss(batch: AlignmentBatch, cfg: LossConfig) -> LossResult:
    """Cross-granularity consistency: mean over samples of summed KLs."""
    return LossResult(value=float(_smooth_kl_forward(batch, cfg)))


def _mgll_forward(batch: AlignmentBatch, cfg: LossConfig):
    cfg.validate()
    value = 0.0
    if cfg.alpha1 > 0:
        sclip = sum(
            _soft_clip_forward(batch, g, cfg) for g in range(batch.n_levels)
        ) / batch.n_levels
        value = value + cfg.alpha1 * sclip
    if cfg.alpha2 > 0:
        pw = sum(
            _pointwise_forward(batch, g, cfg) for g in range(batch.n_levels)
        ) / batch.n_levels
        value = value + cfg.alpha2 * pw
    if cfg.alpha3 > 0 and batch.n_levels >= 2:
        value = value + cfg.alpha3 * _smooth_kl_forward(batch, cfg)
    return value


def mgll_loss(batch: AlignmentBatch, cfg: LossConfig) -> LossResult:
    """Combined objective: alpha1*softCLIP + alpha2*pointwise + alpha3*smoothKL.

    Soft-CLIP and point-wise terms are averaged across granularity levels;
    the smooth-KL term requires at least two levels and is omitted otherwise.
    Terms with a zero coefficient are never constructed.
    """
    return LossResult(value=float(_mgll_forward(batch, cfg)))
