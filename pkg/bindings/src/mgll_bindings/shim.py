"""Toy end-to-end training loop using forward_backward as a torch criterion.

A linear encoder maps raw sample features to embeddings; the combined
objective's loss and input-gradients come from the analytical kernels via
the buffer API, wrapped in a torch autograd Function so the host framework
backpropagates them through the encoder. This doubles as a cross-check of
torch autodiff against the analytical gradients.
"""

from __future__ import annotations

import numpy as np
import torch

from mgll.annotations import Manifest, weights_for_level

from .buffers import BatchShape, LossScalars, forward_backward


def _batch_buffers(manifest: Manifest, weights_mode: str = "uniform"):
    """Flatten a manifest's annotations into the binding's buffer layout."""
    n = manifest.n_samples
    features = np.vstack(
        [manifest.sample_embeddings[s.sample_id] for s in manifest.samples]
    )
    dim = features.shape[1]
    texts = []
    offsets = []
    indices = []
    weights = []
    texts_per_level = []
    for g, level in enumerate(manifest.schema.levels):
        r = len(level.vocab)
        texts_per_level.append(r)
        texts.append(
            np.vstack([manifest.text_embeddings[(g, lab)] for lab in range(r)]).reshape(-1)
        )
        level_weights = weights_for_level(manifest, g, weights_mode)
        offs = [0]
        idx = []
        w = []
        for i, sample in enumerate(manifest.samples):
            labs = sample.labels_per_level[g]
            idx.extend(labs)
            w.extend(level_weights.per_sample[i].tolist())
            offs.append(len(idx))
        offsets.append(np.asarray(offs, dtype=np.int64))
        indices.append(np.asarray(idx, dtype=np.int64))
        weights.append(np.asarray(w, dtype=np.float64))
    shape = BatchShape(n_samples=n, dim=dim, texts_per_level=tuple(texts_per_level))
    return shape, features, texts, offsets, indices, weights


class _MgllCriterion(torch.autograd.Function):
    """Loss node whose backward returns the analytically computed gradient."""

    @staticmethod
    def forward(ctx, embeddings, shape, scalars, texts, offsets, indices, weights):
        emb = embeddings.detach().cpu().numpy().astype(np.float64)
        grad_out = np.zeros_like(emb)
        value = forward_backward(
            shape, scalars, emb.reshape(-1), texts, offsets, indices, weights,
            out_grad_images=grad_out.reshape(-1),
        )
        ctx.save_for_backward(
            torch.from_numpy(grad_out).to(embeddings.dtype)
        )
        return embeddings.new_tensor(value)

    @staticmethod
    def backward(ctx, grad_output):
        (grad_embeddings,) = ctx.saved_tensors
        return grad_output * grad_embeddings, None, None, None, None, None, None


def training_shim(manifest: Manifest, epochs: int = 20, scalars: LossScalars | None = None,
                  lr: float = 0.05, seed: int = 0,
                  weights_mode: str = "uniform"):
    """Train a linear encoder on manifest features with the bound criterion.

    Returns (trace, encoder): the per-epoch loss trace of full-batch steps
    and the trained encoder module. Deterministic for a fixed seed; lr=0
    leaves the trace constant.
    """
    scalars = scalars or LossScalars()
    shape, features, texts, offsets, indices, weights = _batch_buffers(
        manifest, weights_mode
    )
    torch.manual_seed(seed)
    x = torch.from_numpy(features).to(torch.float64)
    encoder = torch.nn.Linear(shape.dim, shape.dim, bias=False).to(torch.float64)
    with torch.no_grad():
        encoder.weight.copy_(
            torch.eye(shape.dim, dtype=torch.float64)
            + 0.5 * torch.randn(shape.dim, shape.dim, dtype=torch.float64)
        )
    optimizer = torch.optim.SGD(encoder.parameters(), lr=lr)
    trace = []
    for _ in range(epochs):
        optimizer.zero_grad()
        embeddings = encoder(x)
        loss = _MgllCriterion.apply(
            embeddings, shape, scalars, texts, offsets, indices, weights
        )
        loss.backward()
        optimizer.step()
        trace.append(float(loss.item()))
    return trace, encoder


def encode(manifest: Manifest, encoder: torch.nn.Module) -> np.ndarray:
    """Apply a trained encoder to a manifest's raw features."""
    features = np.vstack(
        [manifest.sample_embeddings[s.sample_id] for s in manifest.samples]
    )
    with torch.no_grad():
        out = encoder(torch.from_numpy(features).to(torch.float64))
    return out.numpy()
