"""Training objectives: contrastive attention, foreground consistency,
classification, and their unweighted sum.

The contrastive term treats the dropped-foreground embedding as an anchor:
it is pulled toward the full-foreground embedding and pushed away from the
background embedding with a hinge margin.  Embeddings are masked global
average pools of a bias-free 1x1 projection of the feature map; because the
projection is linear, embedding-then-pooling equals pooling-then-embedding.

The consistency term penalizes the squared difference between an early
attention map and a later reference map; the reference is gradient-blocked
(and bilinearly resized when resolutions differ), so only the early layer
learns from it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .attention import AttentionBundle
from .errors import ShapeError
from .resize import bilinear_resize
from .tensor import Tensor

EMBED_DIM = 128


@dataclass
class RegionEmbeddings:
    """Pooled embeddings of the three regions for one sample at one layer.

    ``valid`` is False when any source mask was empty; such samples are
    skipped by the batch-level contrastive loss.
    """

    z_dfg: Optional[Tensor]
    z_fg: Optional[Tensor]
    z_bg: Optional[Tensor]
    valid: bool


@dataclass
class LossBreakdown:
    l_cls: float
    l_ca: float
    l_fc: float
    l_total: float
    n_ca_skipped: int = 0


def embed_and_pool(f: Tensor, w_emb: Tensor, mask: np.ndarray) -> Optional[Tensor]:
    """Masked global average pool of the per-pixel embedding w_emb . F.

    Returns None when the mask has no active pixel (empty-region signal);
    the mask itself is a constant of the pass.
    """
    if f.ndim != 3:
        raise ShapeError(f"expected [C, H, W] features, got {f.shape}")
    c, h, w = f.shape
    if w_emb.shape[1] != c:
        raise ShapeError(f"embedding expects {w_emb.shape[1]} channels, features have {c}")
    m = np.asarray(mask, dtype=np.float64)
    if m.shape != (h, w):
        raise ShapeError(f"mask shape {m.shape} does not match features {f.shape}")
    total = m.sum()
    if total == 0:
        return None
    weights = Tensor((m / total).reshape(h * w, 1))
    pixels = T.matmul(w_emb, T.reshape(f, (c, h * w)))        # [D, HW]
    return T.reshape(T.matmul(pixels, weights), (w_emb.shape[0],))


def region_embeddings(f: Tensor, w_emb: Tensor, bundle: AttentionBundle) -> RegionEmbeddings:
    """Embeddings for the dropped-foreground / foreground / background regions."""
    z_dfg = embed_and_pool(f, w_emb, bundle.m_dfg)
    z_fg = embed_and_pool(f, w_emb, bundle.m_fg)
    z_bg = embed_and_pool(f, w_emb, bundle.m_bg)
    valid = z_dfg is not None and z_fg is not None and z_bg is not None
    return RegionEmbeddings(z_dfg, z_fg, z_bg, valid)


def contrastive_attention_loss(e: RegionEmbeddings, margin: float = 1.0) -> Tensor:
    """Hinge loss max(0, d(z_dfg, z_fg) - d(z_dfg, z_bg) + margin).

    Subgradient 0 at the hinge kink and at zero distance.
    """
    if not e.valid:
        raise ValueError("contrastive loss needs valid embeddings; skip invalid samples")
    d_pos = T.euclidean_distance(e.z_dfg, e.z_fg)
    d_neg = T.euclidean_distance(e.z_dfg, e.z_bg)
    return T.relu(T.add(T.sub(d_pos, d_neg), float(margin)))


def contrastive_attention_loss_batch(embeddings: Sequence[RegionEmbeddings],
                                     margin: float = 1.0) -> tuple[Tensor, int]:
    """Mean hinge loss over valid samples; returns (loss, n_skipped).

    Samples with an empty region contribute nothing (no spurious gradients);
    with no valid sample at all the loss is a constant zero.
    """
    terms = [contrastive_attention_loss(e, margin) for e in embeddings if e.valid]
    n_skipped = len(embeddings) - len(terms)
    if not terms:
        return Tensor(0.0), n_skipped
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.mul(acc, 1.0 / len(terms)), n_skipped


def foreground_consistency_loss(a_i: Tensor, a_j: Tensor) -> Tensor:
    """Squared L2 difference between maps; gradients reach only a_i.

    a_j is the later (reference) layer's map: it is detached, and bilinearly
    resized to a_i's resolution when the two differ.  For batched [N, H, W]
    maps the per-sample pixel sums are averaged over the batch.
    """
    if a_i.ndim not in (2, 3) or a_j.ndim != a_i.ndim:
        raise ShapeError(f"expected matching [H,W] or [N,H,W] maps, got {a_i.shape}, {a_j.shape}")
    ref = a_j.data
    if a_i.shape != a_j.shape:
        if a_i.ndim == 3 and a_i.shape[0] != a_j.shape[0]:
            raise ShapeError(f"batch extents differ: {a_i.shape} vs {a_j.shape}")
        ref = bilinear_resize(ref, a_i.shape[-2:])
    total = T.reduce_sum(T.square(T.sub(a_i, Tensor(ref))))
    if a_i.ndim == 3:
        return T.mul(total, 1.0 / a_i.shape[0])
    return total


def classification_loss(logits: Tensor, onehot: np.ndarray) -> Tensor:
    """Mean cross entropy from logits; labels must be exact one-hot rows."""
    return T.cross_entropy_logits(logits, onehot)


def mean_over_layers(terms: Sequence[Tensor]) -> Tensor:
    """Average per-layer loss terms so layer count does not rescale the
    objective; empty input yields a constant zero."""
    if not terms:
        return Tensor(0.0)
    acc = terms[0]
    for t in terms[1:]:
        acc = T.add(acc, t)
    return T.mul(acc, 1.0 / len(terms))


def total_loss(l_cls: Tensor, l_ca: Optional[Tensor] = None,
               l_fc: Optional[Tensor] = None,
               n_ca_skipped: int = 0) -> tuple[Tensor, LossBreakdown]:
    """Unweighted sum of the three terms plus a float breakdown."""
    l_ca = Tensor(0.0) if l_ca is None else l_ca
    l_fc = Tensor(0.0) if l_fc is None else l_fc
    total = T.add(T.add(l_cls, l_ca), l_fc)
    breakdown = LossBreakdown(l_cls=l_cls.item(), l_ca=l_ca.item(),
                              l_fc=l_fc.item(), l_total=total.item(),
                              n_ca_skipped=n_ca_skipped)
    return total, breakdown
