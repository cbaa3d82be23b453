"""Desk-scale projected gradient descent on embeddings.

Free embedding matrices stand in for encoder outputs: descent steps move
them along analytical loss gradients and reproject onto the unit sphere.
This is enough to verify the objectives' fixed points (weighted text
centroid, cross-granularity consensus) and to reproduce the ablation
orderings on synthetic data.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .annotations import Manifest, drop_fine_labels
from .errors import ConfigError, DegenerateCentroid, DivergenceDetected, ZeroRow
from .gradients import loss_grad, smooth_kl_logit_grad
from .losses import AlignmentBatch, LossConfig, build_batch, _smooth_kl_z_list
from .metrics import ScoredLabels, evaluate
from .numerics import row_normalize

log = logging.getLogger(__name__)

# Loss plateau detection compares values this many iterations apart.
CONVERGENCE_WINDOW = 10
CENTROID_FLOOR = 1e-12


@dataclass
class DescentConfig:
    step_size: float
    max_iters: int = 1000
    tolerance: float = 1e-10
    renormalize: bool = True
    seed: int = 0

    def validate(self) -> None:
        if not self.step_size > 0:
            raise ConfigError(f"step_size must be positive, got {self.step_size}")
        if self.max_iters < 1:
            raise ConfigError(f"max_iters must be >= 1, got {self.max_iters}")


@dataclass
class Trajectory:
    losses: list[float]
    final_images: np.ndarray
    final_texts: list[np.ndarray]
    converged: bool
    iterations: int


def descend(batch: AlignmentBatch, cfg: LossConfig, dcfg: DescentConfig,
            which: str, train_images: bool = True, train_texts: bool = False,
            level: int | None = None) -> Trajectory:
    """Projected gradient descent on the selected loss.

    Stops once the loss decrease across a 10-iteration window falls below
    dcfg.tolerance, or at max_iters. Raises DivergenceDetected when the loss
    or an update leaves the finite/normalizable domain.
    """
    dcfg.validate()
    if not (train_images or train_texts):
        raise ConfigError("descend needs at least one trainable embedding set")

    work = batch.with_arrays(
        batch.images.copy(), [lvl.texts.copy() for lvl in batch.levels]
    )
    losses: list[float] = []
    converged = False
    for _ in range(dcfg.max_iters):
        res = loss_grad(work, cfg, which, level=level)
        if not np.isfinite(res.value):
            raise DivergenceDetected(f"loss became non-finite after {len(losses)} iters")
        losses.append(res.value)
        if (
            len(losses) > CONVERGENCE_WINDOW
            and losses[-(CONVERGENCE_WINDOW + 1)] - losses[-1] < dcfg.tolerance
        ):
            converged = True
            break
        try:
            if train_images:
                new_images = work.images - dcfg.step_size * res.grad_images
                if dcfg.renormalize:
                    new_images = row_normalize(new_images)
            else:
                new_images = work.images
            new_texts = []
            for g in range(work.n_levels):
                if train_texts:
                    t = work.levels[g].texts - dcfg.step_size * res.grad_texts_per_level[g]
                    if dcfg.renormalize:
                        t = row_normalize(t)
                else:
                    t = work.levels[g].texts
                new_texts.append(t)
        except ZeroRow as exc:
            raise DivergenceDetected(f"update collapsed a row to zero: {exc}") from exc
        work = work.with_arrays(new_images, new_texts)

    return Trajectory(
        losses=losses,
        final_images=work.images,
        final_texts=[lvl.texts for lvl in work.levels],
        converged=converged,
        iterations=len(losses),
    )


# --- weighted-centroid fixed point (alignment-only objective) -----------------


def _weighted_centroid(texts, weights) -> np.ndarray:
    t_hat = row_normalize(texts)
    w = np.asarray(weights, dtype=np.float64)
    c = w @ t_hat
    norm = float(np.linalg.norm(c))
    if norm < CENTROID_FLOOR:
        raise DegenerateCentroid("weighted text directions sum to zero")
    return c


def alignment_objective_residual(v, texts, weights) -> float:
    """Distance of a unit vector from the normalized weighted text centroid.

    The maximizer of sum_k w_k cos(v, t_k) over the unit sphere is exactly
    the normalized centroid, so a zero residual certifies optimality.
    """
    c = _weighted_centroid(texts, weights)
    c_hat = c / np.linalg.norm(c)
    v = np.asarray(v, dtype=np.float64)
    return float(np.linalg.norm(v - c_hat))


def maximize_alignment(texts, weights, dcfg: DescentConfig):
    """Projected gradient ascent of the weighted alignment objective.

    Returns (v, residual): the optimized unit vector and its distance from
    the directly computed normalized weighted centroid.
    """
    dcfg.validate()
    c = _weighted_centroid(texts, weights)
    c_hat = c / np.linalg.norm(c)
    rng = np.random.default_rng(dcfg.seed)
    dim = np.asarray(texts).shape[1]
    v = row_normalize(rng.standard_normal((1, dim)))[0]
    for _ in range(dcfg.max_iters):
        residual = float(np.linalg.norm(v - c_hat))
        if residual < 1e-9:
            break
        grad = c - float(v @ c) * v
        v = v + dcfg.step_size * grad
        v = v / np.linalg.norm(v)
    return v, float(np.linalg.norm(v - c_hat))


# --- smooth-KL consensus probe --------------------------------------------------


def total_variation(p, q) -> float:
    """Half the L1 distance between probability vectors (rows allowed)."""
    return 0.5 * float(np.abs(np.asarray(p) - np.asarray(q)).sum(axis=-1).max())


def _max_tv_from_logits(z_list) -> float:
    probs = []
    for z in z_list:
        e = np.exp(z - z.max(axis=1, keepdims=True))
        probs.append(e / e.sum(axis=1, keepdims=True))
    mean = sum(probs) / len(probs)
    return max(total_variation(p, mean) for p in probs)


def kl_logit_descent(logits, dcfg: DescentConfig, grad_mode: str = "exact"):
    """Gradient descent of the smooth-KL objective over free logit rows.

    Rows are independent distribution tuples. Returns (max_tv, final_logits)
    where max_tv is the largest remaining total-variation distance of any
    per-level distribution from the per-row mean distribution.
    """
    dcfg.validate()
    z_list = [np.atleast_2d(np.asarray(z, dtype=np.float64)).copy() for z in logits]
    n_rows = z_list[0].shape[0]
    losses: list[float] = []
    for _ in range(dcfg.max_iters):
        value, grads = smooth_kl_logit_grad(z_list, mode=grad_mode)
        losses.append(value)
        if (
            len(losses) > CONVERGENCE_WINDOW
            and losses[-(CONVERGENCE_WINDOW + 1)] - losses[-1] < dcfg.tolerance
        ):
            break
        for z, g in zip(z_list, grads):
            # undo the core's 1/n averaging so each row descends independently
            z -= dcfg.step_size * n_rows * g
    return _max_tv_from_logits(z_list), z_list


def kl_consistency_probe(batch: AlignmentBatch, cfg: LossConfig,
                         dcfg: DescentConfig) -> float:
    """Descend smooth-KL over the batch's per-level logits; report max TV.

    Verifies the consensus fixed point: all per-level distributions converge
    to their mean. Requires the exact gradient mode. Saturated initial
    distributions (softmax of very spread logits, e.g. tiny temperatures)
    sit in a near-flat region and converge impractically slowly; probe
    instances should use moderate logit scales.
    """
    if cfg.kl_grad_mode != "exact":
        raise ConfigError("kl_consistency_probe requires kl_grad_mode='exact'")
    z_list = [np.asarray(z, dtype=np.float64) for z in _smooth_kl_z_list(batch, cfg)]
    tv, _ = kl_logit_descent(z_list, dcfg, grad_mode="exact")
    return tv


# --- ablation harness ------------------------------------------------------------


@dataclass
class AblationVariant:
    name: str
    selector: str                  # "clip" or "mgll"
    cfg: LossConfig
    level: int | None = None       # designated level for the clip baseline
    drop_fine: float = 0.0         # fraction of fine labels hidden from training


def paper_ladder(base: LossConfig) -> list[AblationVariant]:
    """Objective ablation: CLIP, P, sCLIP, sCLIP+P, full combined loss.

    The CLIP baseline designates each sample's first category-level label,
    the single-caption pairing the other objectives improve upon.
    """
    def with_alphas(a1, a2, a3):
        return replace(base, alpha1=a1, alpha2=a2, alpha3=a3)

    return [
        AblationVariant("clip", "clip", base, level=0),
        AblationVariant("pointwise", "mgll", with_alphas(0.0, 1.0, 0.0)),
        AblationVariant("soft_clip", "mgll", with_alphas(1.0, 0.0, 0.0)),
        AblationVariant("soft_clip+pointwise", "mgll", with_alphas(0.5, 1.0, 0.0)),
        AblationVariant("full", "mgll", with_alphas(0.5, 1.0, 1.0)),
    ]


def alpha_ladder(base: LossConfig) -> list[AblationVariant]:
    """Loss-weight ablation rows around the default (0.5, 1, 1)."""
    combos = [(1.0, 1.0, 1.0), (0.5, 1.0, 1.0), (1.0, 0.5, 1.0), (1.0, 1.0, 0.5)]
    return [
        AblationVariant(
            f"alpha({a1},{a2},{a3})", "mgll",
            replace(base, alpha1=a1, alpha2=a2, alpha3=a3),
        )
        for a1, a2, a3 in combos
    ]


def tau_ladder(base: LossConfig) -> list[AblationVariant]:
    """Temperature sweep of the full objective."""
    return [
        AblationVariant(f"tau={t}", "mgll", replace(base, tau=t))
        for t in (0.05, 0.07, 0.20, 0.50)
    ]


def robustness_ladder(base: LossConfig, drop: float = 0.3) -> list[AblationVariant]:
    """Full objective with and without hidden fine labels, plus the baseline."""
    return [
        AblationVariant("clip", "clip", base, level=0),
        AblationVariant("full", "mgll", base),
        AblationVariant(f"full-drop{int(drop * 100)}", "mgll", base, drop_fine=drop),
    ]


LADDERS = {
    "paper": paper_ladder,
    "alphas": alpha_ladder,
    "tau": tau_ladder,
    "robustness": robustness_ladder,
}


def _prototype_scores(trained_images, train_labels_rows, held_images, n_rows):
    """Cosine scores of held samples against per-label training prototypes."""
    dim = trained_images.shape[1]
    protos = np.zeros((n_rows, dim))
    counts = np.zeros(n_rows)
    for i, rows in enumerate(train_labels_rows):
        for r in rows:
            protos[r] += trained_images[i]
            counts[r] += 1
    norms = np.sqrt((protos * protos).sum(axis=1))
    norms = np.where(norms < 1e-30, 1.0, norms)
    protos = protos / norms[:, None]
    return held_images @ protos.T


def ablation_run(manifest: Manifest, variants, dcfg: DescentConfig,
                 split_seed: int, train_fraction: float = 0.8,
                 eval_level: int | None = None) -> list[dict]:
    """Train embeddings per variant and score held-out retrieval.

    The corpus is split by split_seed; image embeddings start from a shared
    random initialization and descend each variant's objective against fixed
    text anchors. Held-out samples keep their manifest embeddings and are
    scored against per-label prototypes of the trained embeddings, so the
    ranking reflects how faithfully each objective organizes the embedding
    space around the label structure. Evaluation defaults to the coarsest
    level, matching how category-level downstream tasks probe a pretrained
    encoder; finer levels act as auxiliary supervision. Deterministic per
    (manifest, seed).
    """
    n = manifest.n_samples
    if n < 5:
        raise ConfigError("ablation needs at least 5 samples")
    eval_level = 0 if eval_level is None else eval_level

    rng_split = np.random.default_rng([split_seed, 0])
    perm = rng_split.permutation(n)
    n_train = int(round(train_fraction * n))
    train_idx = perm[:n_train]
    held_idx = perm[n_train:]
    train_clean = manifest.subset(train_idx)
    held = manifest.subset(held_idx)

    rows = []
    init_cache: np.ndarray | None = None
    for variant in variants:
        train_manifest = train_clean
        if variant.drop_fine > 0:
            train_manifest = drop_fine_labels(
                train_clean, variant.drop_fine, seed=[split_seed, 2]
            )
        batch = build_batch(train_manifest, variant.cfg)
        if init_cache is None:
            rng_init = np.random.default_rng([split_seed, 1])
            init_cache = row_normalize(
                rng_init.standard_normal(batch.images.shape)
            )
        batch = batch.with_arrays(init_cache, [lvl.texts for lvl in batch.levels])

        level = variant.level
        if variant.selector == "clip" and level is None:
            level = batch.n_levels - 1
        traj = descend(
            batch, variant.cfg, dcfg, variant.selector,
            train_images=True, train_texts=False, level=level,
        )

        # Prototypes use the clean training labels (the probe is downstream
        # of pretraining; only the training objective saw degraded labels).
        clean_batch_rows = [
            np.asarray(s.labels_per_level[eval_level], dtype=np.intp)
            for s in train_clean.samples
        ]
        eval_lvl = batch.levels[eval_level]
        held_images = row_normalize(
            np.vstack([
                manifest.sample_embeddings[s.sample_id] for s in held.samples
            ])
        )
        # map vocabulary labels to text rows of the eval level
        row_of = {lab: r for r, lab in enumerate(eval_lvl.vocab_indices)}
        train_rows = [
            np.array([row_of[int(l)] for l in labs], dtype=np.intp)
            for labs in clean_batch_rows
        ]
        scores = _prototype_scores(
            traj.final_images, train_rows, held_images, eval_lvl.n_texts
        )
        truth = np.zeros_like(scores)
        for i, s in enumerate(held.samples):
            for lab in s.labels_per_level[eval_level]:
                truth[i, row_of[int(lab)]] = 1.0
        report = evaluate(ScoredLabels(scores=scores, truth=truth))
        rows.append({
            "variant": variant.name,
            "split_seed": split_seed,
            "auc": report.auc,
            "map": report.map,
            "acc": report.acc,
            "final_loss": traj.losses[-1],
            "iterations": traj.iterations,
            "converged": traj.converged,
        })
        log.debug("ablation %s seed %d: auc=%.4f", variant.name, split_seed, report.auc)
    return rows
