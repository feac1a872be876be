"""Non-local attention maps, thresholds, region masks and stochastic gating.

Given a feature map, the non-local block embeds it three ways with bias-free
1x1 projections, weights locations by pairwise similarity (softmax over the
key axis, so each query location holds a probability distribution over all
locations), aggregates the third embedding with those weights, and channel-
averages the result into a single spatial attention map A.

From A we derive an importance map (sigmoid), a pair of scalar thresholds, a
foreground/background partition, and the dropped-foreground mask that keeps
only the band between the two thresholds.  During training either the
importance map or the dropped-foreground mask (chosen at random per sample
per layer) gates the feature map by pixel-wise multiplication broadcast over
channels.

Thresholds and the binary masks are constants of a forward pass: gradients
reach A only through the importance map and the losses, never through the
hard binarization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import rng as _rng
from . import tensor as T
from .errors import NumericError, ShapeError
from .tensor import Tensor

IMPORTANCE = "importance"
DROPPED_FOREGROUND = "dropped_foreground"

# Published (drop_rate, gamma_fg, gamma_bg) tunings per backbone family.
PRESETS = {
    "vgg16": (0.33, 0.72, 1.2),
    "inception_v3": (0.69, 0.86, 1.2),
    "resnet50": (0.85, 0.95, 1.2),
}


@dataclass(frozen=True)
class MaskHyperparams:
    """drop_rate in [0,1]; gamma_fg scales max(A), gamma_bg scales mean(A)."""

    drop_rate: float = 0.85
    gamma_fg: float = 0.95
    gamma_bg: float = 1.2

    def __post_init__(self):
        if not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError(f"drop_rate must be in [0, 1], got {self.drop_rate}")
        if self.gamma_fg <= 0 or self.gamma_bg <= 0:
            raise ValueError("gamma_fg and gamma_bg must be positive")

    @classmethod
    def preset(cls, name: str) -> "MaskHyperparams":
        return cls(*PRESETS[name])


def default_embed_channels(c: int) -> int:
    """Reduced channel count for the similarity embeddings: ceil(C/8), >= 1."""
    return max(1, math.ceil(c / 8))


@dataclass
class NonLocalParams:
    """1x1 projection weights: w_f, w_g are [C~, C]; w_z is [C, C]."""

    w_f: Tensor
    w_g: Tensor
    w_z: Tensor

    def __post_init__(self):
        ct, c = self.w_f.shape
        if self.w_g.shape != (ct, c) or self.w_z.shape != (c, c):
            raise ShapeError(
                f"inconsistent projection shapes {self.w_f.shape}, "
                f"{self.w_g.shape}, {self.w_z.shape}")
        if ct > c:
            raise ShapeError(f"embed channels {ct} exceed input channels {c}")

    @property
    def channels(self) -> int:
        return self.w_f.shape[1]

    @classmethod
    def init(cls, c: int, c_tilde: Optional[int] = None, seed: int = 0) -> "NonLocalParams":
        ct = default_embed_channels(c) if c_tilde is None else c_tilde
        std = 1.0 / math.sqrt(c)

        def mk(name, shape):
            data = _rng.gaussian(shape, std=std, seed=seed, path=("nonlocal", name))
            return Tensor(data, requires_grad=True)

        return cls(mk("f", (ct, c)), mk("g", (ct, c)), mk("z", (c, c)))

    def tensors(self) -> tuple:
        return (self.w_f, self.w_g, self.w_z)


@dataclass
class AttentionBundle:
    """Everything derived from one attention map for one sample."""

    a: Tensor                      # [H, W]
    a_tilde: Tensor                # sigmoid(a), in (0, 1)
    theta_fg: float
    theta_bg: float
    m_dfg: np.ndarray              # binary [H, W]
    m_fg: np.ndarray
    m_bg: np.ndarray
    selected: Optional[str] = None  # IMPORTANCE or DROPPED_FOREGROUND


@dataclass
class SelectionDiagnostics:
    """Counters for the stochastic map selection."""

    n_draws: int = 0
    n_dfg_selected: int = 0
    n_empty_fallback: int = 0


def _map_data(a) -> np.ndarray:
    return a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)


def enhanced_attention(x: Tensor, p: NonLocalParams) -> Tensor:
    """Attention map [H, W] from a feature map [C, H, W].

    S = softmax_rows(f(x)^T g(x)) over all HW locations; the output at
    location i is the channel mean of sum_j S[i, j] * z(x)[:, j].
    Differentiable with respect to x and all three projections.
    """
    if x.ndim != 3:
        raise ShapeError(f"expected [C, H, W] features, got {x.shape}")
    c, h, w = x.shape
    if p.channels != c:
        raise ShapeError(f"params expect {p.channels} channels, features have {c}")
    flat = T.reshape(x, (c, h * w))
    f = T.matmul(p.w_f, flat)
    g = T.matmul(p.w_g, flat)
    z = T.matmul(p.w_z, flat)
    sim = T.softmax_rows(T.matmul(T.transpose_last2(f), g))     # [HW, HW]
    agg = T.matmul(z, T.transpose_last2(sim))                   # [C, HW]
    return T.reshape(T.reduce_mean(agg, axes=0), (h, w))


def enhanced_attention_batch(x: Tensor, p: NonLocalParams) -> Tensor:
    """Batched variant: [N, C, H, W] -> [N, H, W], identical per sample."""
    if x.ndim != 4:
        raise ShapeError(f"expected [N, C, H, W] features, got {x.shape}")
    n, c, h, w = x.shape
    if p.channels != c:
        raise ShapeError(f"params expect {p.channels} channels, features have {c}")
    flat = T.reshape(x, (n, c, h * w))
    f = T.matmul(p.w_f, flat)
    g = T.matmul(p.w_g, flat)
    z = T.matmul(p.w_z, flat)
    sim = T.softmax_rows(T.matmul(T.transpose_last2(f), g))     # [N, HW, HW]
    agg = T.matmul(z, T.transpose_last2(sim))                   # [N, C, HW]
    return T.reshape(T.reduce_mean(agg, axes=1), (n, h, w))


def channel_mean_attention(x: Tensor) -> Tensor:
    """Plain attention for the no-non-local ablation: channel mean of x."""
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got {x.shape}")
    return T.reduce_mean(x, axes=0 if x.ndim == 3 else 1)


def thresholds(a, h: MaskHyperparams) -> tuple[float, float]:
    """(theta_fg, theta_bg) = (gamma_fg * max(A), gamma_bg * mean(A)).

    Computed on the raw values; both are constants of the forward pass.
    """
    data = _map_data(a)
    if data.size == 0:
        raise ValueError("cannot derive thresholds from an empty map")
    if not np.isfinite(data).all():
        raise NumericError("attention map has non-finite values")
    return float(h.gamma_fg * data.max()), float(h.gamma_bg * data.mean())


def region_masks(a, theta_bg: float) -> tuple[np.ndarray, np.ndarray]:
    """Foreground 1[A > theta_bg] and its complement.

    Ties at theta_bg land in the background so the two masks always form an
    exact partition.
    """
    data = _map_data(a)
    if not np.isfinite(data).all():
        raise NumericError("attention map has non-finite values")
    m_fg = (data > theta_bg).astype(np.float64)
    return m_fg, 1.0 - m_fg


def dropped_foreground_mask(a, theta_fg: float, theta_bg: float) -> np.ndarray:
    """1[A < theta_fg] AND 1[A > theta_bg]: foreground minus its peak region."""
    data = _map_data(a)
    if not np.isfinite(data).all():
        raise NumericError("attention map has non-finite values")
    return ((data < theta_fg) & (data > theta_bg)).astype(np.float64)


def drop_mask(a, theta_fg: float) -> np.ndarray:
    """Classic erasing mask 1[A < theta_fg] (keeps background); used by the
    plain-drop ablation."""
    data = _map_data(a)
    return (data < theta_fg).astype(np.float64)


def attention_bundle(a: Tensor, h: MaskHyperparams) -> AttentionBundle:
    """Derive importance map, thresholds and all three masks from A."""
    t_fg, t_bg = thresholds(a, h)
    m_fg, m_bg = region_masks(a, t_bg)
    m_dfg = dropped_foreground_mask(a, t_fg, t_bg)
    return AttentionBundle(a=a, a_tilde=T.sigmoid(a), theta_fg=t_fg,
                           theta_bg=t_bg, m_dfg=m_dfg, m_fg=m_fg, m_bg=m_bg)


def select_and_apply(f: Tensor, a_tilde: Tensor, m_dfg: np.ndarray,
                     drop_rate: float, rng: np.random.Generator,
                     diagnostics: Optional[SelectionDiagnostics] = None
                     ) -> tuple[Tensor, str]:
    """Gate features with the dropped-foreground mask (probability
    ``drop_rate``) or the importance map.

    An entirely empty dropped-foreground mask falls back to the importance
    map (dropping everything would zero the features); the event is counted
    on ``diagnostics`` when given.  Gradients flow through the importance map
    but never through the binary mask.
    """
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError(f"drop_rate must be in [0, 1], got {drop_rate}")
    if a_tilde.shape != f.shape[-2:] or np.shape(m_dfg) != f.shape[-2:]:
        raise ShapeError(
            f"maps {a_tilde.shape}/{np.shape(m_dfg)} do not match features {f.shape}")
    want_dfg = rng.random() < drop_rate
    if diagnostics is not None:
        diagnostics.n_draws += 1
    if want_dfg and np.any(m_dfg):
        if diagnostics is not None:
            diagnostics.n_dfg_selected += 1
        return T.mul(f, Tensor(m_dfg)), DROPPED_FOREGROUND
    if want_dfg and diagnostics is not None:
        diagnostics.n_empty_fallback += 1
    return T.mul(f, a_tilde), IMPORTANCE
