"""Analytical gradients of every loss plus a central-difference oracle.

Gradients are taken with respect to the raw image and text embedding
matrices. Cosine similarity is differentiated with the full quotient rule,
so the formulas hold at unnormalized points and the checker may probe any
coordinate. The finite-difference oracle evaluates the forward losses in
extended precision (longdouble) to keep the difference quotient's rounding
noise far below the tolerances it certifies.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import losses as _losses
from .errors import NonFiniteLoss, ShapeMismatch, SingleGranularity
from .losses import AlignmentBatch, LossConfig, LossResult
from .numerics import as_float_array, cosine_similarity_matrix, sigmoid

LOSS_SELECTORS = ("clip", "soft_clip", "pointwise", "smooth_kl", "mgll")


def cosine_backward(a, b, d_sim):
    """Backpropagate d(loss)/d(sim) through sim = cos(a_i, b_j).

    Returns (d_a, d_b) for raw (not necessarily unit) row matrices.
    """
    a = as_float_array(a)
    b = as_float_array(b)
    d_sim = np.asarray(d_sim)
    na = np.sqrt((a * a).sum(axis=1))
    nb = np.sqrt((b * b).sum(axis=1))
    a_hat = a / na[:, None]
    b_hat = b / nb[:, None]
    sim = a_hat @ b_hat.T
    row_dot = (d_sim * sim).sum(axis=1)
    col_dot = (d_sim * sim).sum(axis=0)
    d_a = (d_sim @ b_hat - row_dot[:, None] * a_hat) / na[:, None]
    d_b = (d_sim.T @ a_hat - col_dot[:, None] * b_hat) / nb[:, None]
    return d_a, d_b


def pointwise_grad_logits(x, y) -> np.ndarray:
    """Closed-form point-wise gradient (sigmoid(x) - y) / N on raw logits."""
    x = as_float_array(x)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeMismatch(f"logits {x.shape} vs labels {y.shape}")
    return (sigmoid(x) - y) / x.shape[0]


def smooth_kl_logit_grad(z_list, mode: str = "exact"):
    """Value and per-level gradients of the smooth-KL objective on raw logits.

    Rows of each (n, L) logit array are independent distribution tuples; the
    value averages over rows exactly like the embedding-level loss.
    """
    z_list = [np.atleast_2d(as_float_array(z)) for z in z_list]
    value, grads = _losses._smooth_kl_core(z_list, mode, want_grad=True)
    return float(value), grads


def _zero_grads(batch: AlignmentBatch):
    d_images = np.zeros_like(batch.images)
    d_texts = [np.zeros_like(lvl.texts) for lvl in batch.levels]
    return d_images, d_texts


def _clip_grad(batch, cfg, level):
    lvl = batch.levels[level]
    sims = cosine_similarity_matrix(batch.images, lvl.texts)
    value, d_sims = _losses._clip_grouped_core(
        sims, lvl.designated, cfg.tau, "i2t", want_grad=True
    )
    d_images, d_texts = cosine_backward(batch.images, lvl.texts, d_sims)
    return value, d_images, d_texts


def _soft_clip_grad(batch, cfg, level):
    lvl = batch.levels[level]
    sims = cosine_similarity_matrix(batch.images, lvl.texts)
    value, d_sims = _losses._soft_clip_core(
        sims, lvl.pair_weight, lvl.multiplicity, lvl.weight_mass, lvl.n_pairs,
        cfg.tau, want_grad=True,
    )
    d_images, d_texts = cosine_backward(batch.images, lvl.texts, d_sims)
    return value, d_images, d_texts


def _pointwise_grad(batch, cfg, level):
    lvl = batch.levels[level]
    sims = cosine_similarity_matrix(batch.images, lvl.texts)
    value, d_sims = _losses._pointwise_core(
        sims, lvl.y, cfg.pointwise_tau, want_grad=True
    )
    d_images, d_texts = cosine_backward(batch.images, lvl.texts, d_sims)
    return value, d_images, d_texts


def _smooth_kl_grad(batch, cfg):
    if batch.n_levels < 2:
        raise SingleGranularity("smooth KL loss needs at least two levels")
    sims_list, desig_list, tau = _losses._smooth_kl_inputs(batch, cfg)
    value, d_sims_list = _losses._smooth_kl_grouped(
        sims_list, desig_list, tau, cfg.kl_grad_mode, want_grad=True
    )
    d_images, d_texts = _zero_grads(batch)
    for g, d_sims in enumerate(d_sims_list):
        lvl = batch.levels[g]
        d_img, d_t = cosine_backward(batch.images, lvl.texts, d_sims)
        d_images += d_img
        d_texts[g] += d_t
    return value, d_images, d_texts


def _averaged_level_grad(batch, cfg, per_level_fn, level):
    if level is not None:
        value, d_images, d_t = per_level_fn(batch, cfg, level)
        _, d_texts = _zero_grads(batch)
        d_texts[level] = d_t
        return value, d_images, d_texts
    n = batch.n_levels
    value = 0.0
    d_images, d_texts = _zero_grads(batch)
    for g in range(n):
        v, d_img, d_t = per_level_fn(batch, cfg, g)
        value += v / n
        d_images += d_img / n
        d_texts[g] += d_t / n
    return value, d_images, d_texts


def loss_grad(batch: AlignmentBatch, cfg: LossConfig, which: str,
              level: int | None = None) -> LossResult:
    """Loss value plus gradients w.r.t. image and per-level text embeddings.

    which selects the objective: clip (single designated level, image-to-text),
    soft_clip / pointwise (one level, or the across-level average when level
    is None), smooth_kl, or the combined mgll objective. Embedding rows never
    referenced by the selected objective receive exactly zero gradient.
    """
    if which == "clip":
        value, d_images, d_t = _clip_grad(batch, cfg, level if level is not None else 0)
        _, d_texts = _zero_grads(batch)
        d_texts[level if level is not None else 0] = d_t
    elif which == "soft_clip":
        value, d_images, d_texts = _averaged_level_grad(batch, cfg, _soft_clip_grad, level)
    elif which == "pointwise":
        value, d_images, d_texts = _averaged_level_grad(batch, cfg, _pointwise_grad, level)
    elif which == "smooth_kl":
        value, d_images, d_texts = _smooth_kl_grad(batch, cfg)
    elif which == "mgll":
        cfg.validate()
        value = 0.0
        d_images, d_texts = _zero_grads(batch)
        if cfg.alpha1 > 0:
            v, d_img, d_t = _averaged_level_grad(batch, cfg, _soft_clip_grad, None)
            value += cfg.alpha1 * v
            d_images += cfg.alpha1 * d_img
            for g in range(batch.n_levels):
                d_texts[g] += cfg.alpha1 * d_t[g]
        if cfg.alpha2 > 0:
            v, d_img, d_t = _averaged_level_grad(batch, cfg, _pointwise_grad, None)
            value += cfg.alpha2 * v
            d_images += cfg.alpha2 * d_img
            for g in range(batch.n_levels):
                d_texts[g] += cfg.alpha2 * d_t[g]
        if cfg.alpha3 > 0 and batch.n_levels >= 2:
            v, d_img, d_t = _smooth_kl_grad(batch, cfg)
            value += cfg.alpha3 * v
            d_images += cfg.alpha3 * d_img
            for g in range(batch.n_levels):
                d_texts[g] += cfg.alpha3 * d_t[g]
    else:
        raise ValueError(f"unknown loss selector {which!r}; use one of {LOSS_SELECTORS}")
    return LossResult(
        value=float(value),
        grad_images=d_images,
        grad_texts_per_level=d_texts,
    )


def forward_value(batch: AlignmentBatch, cfg: LossConfig, which: str,
                  level: int | None = None):
    """Dtype-preserving forward value matching loss_grad's level semantics."""
    if which == "clip":
        return _losses._clip_forward(batch, level if level is not None else 0, cfg)
    if which == "soft_clip":
        if level is not None:
            return _losses._soft_clip_forward(batch, level, cfg)
        return sum(
            _losses._soft_clip_forward(batch, g, cfg) for g in range(batch.n_levels)
        ) / batch.n_levels
    if which == "pointwise":
        if level is not None:
            return _losses._pointwise_forward(batch, level, cfg)
        return sum(
            _losses._pointwise_forward(batch, g, cfg) for g in range(batch.n_levels)
        ) / batch.n_levels
    if which == "smooth_kl":
        return _losses._smooth_kl_forward(batch, cfg)
    if which == "mgll":
        return _losses._mgll_forward(batch, cfg)
    raise ValueError(f"unknown loss selector {which!r}; use one of {LOSS_SELECTORS}")


@dataclass
class GradCheckReport:
    max_abs_error: float
    max_rel_error: float
    worst_coordinate: tuple[str, int, int]
    step: float
    probes: int

    def to_dict(self) -> dict:
        return {
            "max_abs_error": self.max_abs_error,
            "max_rel_error": self.max_rel_error,
            "worst_coordinate": {
                "matrix": self.worst_coordinate[0],
                "row": self.worst_coordinate[1],
                "col": self.worst_coordinate[2],
            },
            "step": self.step,
            "probes": self.probes,
        }


# Relative errors use this floor so near-zero coordinates cannot blow up.
REL_ERROR_FLOOR = 1e-8


def _pointwise_forward_mp(batch: AlignmentBatch, cfg: LossConfig,
                          level: int | None, perturb=None, dps: int = 30):
    """Arbitrary-precision point-wise forward (independent mpmath code path).

    perturb = (matrix_index, row, col, delta) applies an exact perturbation,
    where matrix index 0 is the image matrix and 1 + g the level-g texts.
    Used by the checker when the 64-bit difference quotient's own error floor
    (~1e-13 absolute) would mask closed-form gradient defects.
    """
    from mpmath import mp, mpf

    with mp.workdps(dps):
        images = [[mpf(float(x)) for x in row] for row in batch.images]
        texts = [
            [[mpf(float(x)) for x in row] for row in lvl.texts]
            for lvl in batch.levels
        ]
        if perturb is not None:
            m_idx, row, col, delta = perturb
            target = images if m_idx == 0 else texts[m_idx - 1]
            target[row][col] = target[row][col] + mpf(delta)

        def norm(vec):
            return mp.sqrt(mp.fsum(x * x for x in vec))

        img_norms = [norm(v) for v in images]
        selected = [level] if level is not None else list(range(batch.n_levels))
        tau = None if cfg.pointwise_tau is None else mpf(cfg.pointwise_tau)
        total = mpf(0)
        n = batch.n_samples
        for g in selected:
            lvl = batch.levels[g]
            t_rows = texts[g]
            t_norms = [norm(t) for t in t_rows]
            level_sum = mpf(0)
            for i in range(n):
                vi = images[i]
                for j in range(len(t_rows)):
                    dot = mp.fsum(a * b for a, b in zip(vi, t_rows[j]))
                    x = dot / (img_norms[i] * t_norms[j])
                    if tau is not None:
                        x = x / tau
                    # y=1: softplus(-x); y=0: softplus(x)
                    arg = -x if lvl.y[i, j] > 0.5 else x
                    level_sum += mp.log(1 + mp.exp(arg))
            total += level_sum / n
        return total / len(selected)


def finite_difference_check(batch: AlignmentBatch, cfg: LossConfig, which: str,
                            step: float = 1e-6, probes: int = 64, seed: int = 0,
                            level: int | None = None,
                            precision: str = "longdouble") -> GradCheckReport:
    """Compare analytical gradients against central differences.

    Random coordinates of the image and text matrices are perturbed by
    +-step. With the default precision the forward evaluations run in
    longdouble, keeping the difference quotient trustworthy to ~1e-13
    absolute; precision="mpmath" (point-wise loss only) evaluates in
    30-digit arithmetic so steps near 1e-8 certify the closed form to
    better than 1e-9 relative.
    """
    if not 1e-9 < step < 1e-3:
        raise ValueError(f"step must lie in (1e-9, 1e-3), got {step}")
    if precision not in ("longdouble", "mpmath"):
        raise ValueError(f"unknown precision {precision!r}")
    if precision == "mpmath" and which != "pointwise":
        raise ValueError("mpmath-precision checking is implemented for the "
                         "pointwise loss only")

    analytic = loss_grad(batch, cfg, which, level=level)
    if not np.isfinite(analytic.value):
        raise NonFiniteLoss(f"loss {which!r} is not finite at the given batch")
    grads = [("images", analytic.grad_images)] + [
        (f"texts[{g}]", analytic.grad_texts_per_level[g])
        for g in range(batch.n_levels)
    ]

    ld_images = batch.images.astype(np.longdouble)
    ld_texts = [lvl.texts.astype(np.longdouble) for lvl in batch.levels]
    ld_batch = batch.with_arrays(ld_images, ld_texts)
    arrays = [ld_images] + ld_texts

    total = sum(a.size for a in arrays)
    rng = np.random.default_rng(seed)
    flat_choices = rng.integers(0, total, size=probes)

    h = np.longdouble(step)
    max_abs = 0.0
    max_rel = 0.0
    worst = (grads[0][0], 0, 0)
    for flat in flat_choices:
        which_arr = 0
        remaining = int(flat)
        while remaining >= arrays[which_arr].size:
            remaining -= arrays[which_arr].size
            which_arr += 1
        arr = arrays[which_arr]
        row, col = divmod(remaining, arr.shape[1])

        if precision == "mpmath":
            from mpmath import mp, mpf

            with mp.workdps(30):
                f_plus = _pointwise_forward_mp(
                    batch, cfg, level, perturb=(which_arr, int(row), int(col), step)
                )
                f_minus = _pointwise_forward_mp(
                    batch, cfg, level, perturb=(which_arr, int(row), int(col), -step)
                )
                numeric = float((f_plus - f_minus) / (2 * mpf(step)))
        else:
            original = arr[row, col]
            arr[row, col] = original + h
            f_plus = forward_value(ld_batch, cfg, which, level=level)
            arr[row, col] = original - h
            f_minus = forward_value(ld_batch, cfg, which, level=level)
            arr[row, col] = original
            numeric = float((f_plus - f_minus) / (2 * h))
        if not (np.isfinite(float(f_plus)) and np.isfinite(float(f_minus))):
            raise NonFiniteLoss(f"loss {which!r} non-finite under perturbation")

        analytic_coord = float(grads[which_arr][1][row, col])
        abs_err = abs(analytic_coord - numeric)
        rel_err = abs_err / max(abs(analytic_coord), abs(numeric), REL_ERROR_FLOOR)
        if rel_err > max_rel:
            max_rel = rel_err
            worst = (grads[which_arr][0], int(row), int(col))
        max_abs = max(max_abs, abs_err)

    return GradCheckReport(
        max_abs_error=max_abs,
        max_rel_error=max_rel,
        worst_coordinate=worst,
        step=step,
        probes=probes,
    )
