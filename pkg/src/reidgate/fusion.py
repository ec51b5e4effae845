"""Vision-language fusion and the joint identification + triplet objective."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass
class FusionParams:
    W_fc: Tensor  # (r, h) reduction of the final hidden state
    b_fc: Tensor  # (r,)
    theta: Tensor  # (K, r + dim_F) identity classifier

    def tensors(self):
        return [self.W_fc, self.b_fc, self.theta]

    @property
    def fused_dim(self):
        return self.theta.data.shape[1]


def init_fusion_params(hidden_dim, reduced_dim, dim_f, num_classes, rng, name=""):
    s = 1.0 / math.sqrt(hidden_dim)
    W_fc = Tensor(rng.uniform(-s, s, size=(reduced_dim, hidden_dim)), requires_grad=True, name=f"{name}W_fc")
    b_fc = Tensor(np.zeros(reduced_dim), requires_grad=True, name=f"{name}b_fc")
    fused = reduced_dim + dim_f
    st = 1.0 / math.sqrt(fused)
    theta = Tensor(rng.uniform(-st, st, size=(num_classes, fused)), requires_grad=True, name=f"{name}theta")
    return FusionParams(W_fc=W_fc, b_fc=b_fc, theta=theta)


def fuse(h_final: Tensor, F: Tensor, params: FusionParams) -> Tensor:
    """concat(W_fc @ h + b_fc, F); the visual half passes through verbatim."""
    reduced = ad.affine(params.W_fc, h_final, params.b_fc)
    f = ad.concat([reduced, F])
    if f.data.shape[0] != params.fused_dim:
        raise ad.ShapeError(
            f"fuse: fused dim {f.data.shape[0]} does not match classifier dim {params.fused_dim}"
        )
    return f


def id_loss(f: Tensor, label: int, theta: Tensor) -> Tensor:
    """K-class cross entropy over identity labels."""
    return ad.softmax_cross_entropy(ad.matmul(theta, f), label)


def triplet_loss(f_a: Tensor, f_p: Tensor, f_n: Tensor, alpha: float) -> Tensor:
    """Hinge on squared Euclidean distances with margin alpha."""
    if alpha < 0:
        raise ValueError(f"triplet_loss: margin must be nonnegative, got {alpha}")
    gap = ad.sub(ad.squared_euclidean(f_a, f_p), ad.squared_euclidean(f_a, f_n))
    return ad.max_with_zero(ad.add_const(gap, alpha))


def _pairwise_sq_dists(data):
    sq = np.sum(data * data, axis=1)
    d = sq[:, None] + sq[None, :] - 2.0 * data @ data.T
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def batch_hard_triplet(embeddings, labels, alpha: float) -> Tensor:
    """Mean hinge over batch-hard triplets (hardest positive and negative
    per anchor, mined on current forward values)."""
    n = len(embeddings)
    labels = np.asarray(labels)
    data = np.stack([e.data for e in embeddings])
    dists = _pairwise_sq_dists(data)
    losses = []
    for i in range(n):
        pos_mask = (labels == labels[i]) & (np.arange(n) != i)
        neg_mask = labels != labels[i]
        if not pos_mask.any() or not neg_mask.any():
            raise ValueError(
                f"batch_hard_triplet: anchor {i} (identity {labels[i]}) lacks a "
                f"{'positive' if not pos_mask.any() else 'negative'} in the batch"
            )
        p = int(np.where(pos_mask)[0][np.argmax(dists[i, pos_mask])])
        q = int(np.where(neg_mask)[0][np.argmin(dists[i, neg_mask])])
        losses.append(triplet_loss(embeddings[i], embeddings[p], embeddings[q], alpha))
    return ad.mean_of(losses)


def total_loss(embeddings, labels, theta: Tensor, alpha: float, use_triplet=True):
    """Mean id loss plus (optionally) mean batch-hard triplet loss, summed 1:1.

    Returns (total, id_term, triplet_term) scalar tensors; the triplet term
    is a constant zero when disabled.
    """
    id_term = ad.mean_of([id_loss(f, int(k), theta) for f, k in zip(embeddings, labels)])
    if use_triplet:
        trip_term = batch_hard_triplet(embeddings, labels, alpha)
        return ad.add(id_term, trip_term), id_term, trip_term
    return id_term, id_term, Tensor(0.0)
