"""Tiny three-stage convolutional backbone with attention gating.

Each stage is a bias-free 3x3 convolution, ReLU, and 2x2 average pooling.
Attention layers sit after stages 2 and 3; the stage-3 map is the reference
for the consistency loss.  Classification logits come from global average
pooling of the (gated) stage-3 features through a bias-free linear
classifier, which is also what the class activation maps are read from.

At inference the attention machinery is bypassed entirely: images flow
through the plain trunk and the heatmap is the CAM of the predicted class,
bilinearly upsampled to the input resolution so boxes live in image
coordinates.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

from . import rng as _rng
from . import tensor as T
from .attention import (DROPPED_FOREGROUND, IMPORTANCE, MaskHyperparams,
                        NonLocalParams, SelectionDiagnostics,
                        channel_mean_attention, default_embed_channels,
                        enhanced_attention_batch)
from .errors import ShapeError
from .loceval import ScoreMap
from .losses import (LossBreakdown, classification_loss,
                     foreground_consistency_loss, mean_over_layers,
                     total_loss)
from .resize import bilinear_resize
from .tensor import Tensor

ATTENTION_STAGES = (2, 3)   # stage 3 is the consistency reference


@dataclass
class BackboneConfig:
    in_channels: int = 1
    stage_channels: Tuple[int, int, int] = (8, 16, 32)
    n_classes: int = 2
    embed_dim: int = 128
    attn_channels: Optional[int] = None   # None: ceil(C/8) per layer

    def __post_init__(self):
        if len(self.stage_channels) != 3 or min(self.stage_channels) < 1:
            raise ValueError(f"need three positive stage channels, got {self.stage_channels}")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.embed_dim < 1:
            raise ValueError("embed_dim must be >= 1")


@dataclass
class AblationFlags:
    """Switches mirroring the component ablations.

    attention=False is the classification-only baseline (no gating, no
    auxiliary losses).  nonlocal_block=False swaps in the plain channel-mean
    attention map.  dfg_mask=False gates with the classic erasing mask that
    keeps the background.
    """

    attention: bool = True
    contrastive: bool = True
    consistency: bool = True
    nonlocal_block: bool = True
    dfg_mask: bool = True


@dataclass
class BatchAttentionBundle:
    """Per-layer attention products for a whole batch."""

    stage: int
    a: Tensor                    # [N, h, w]
    a_tilde: Tensor
    theta_fg: np.ndarray         # [N]
    theta_bg: np.ndarray
    m_dfg: np.ndarray            # [N, h, w] binary
    m_fg: np.ndarray
    m_bg: np.ndarray
    selected: List[str]


class TinyBackbone:
    """Parameter container; all weights live in one flat name->Tensor dict."""

    def __init__(self, params: Dict[str, Tensor], cfg: BackboneConfig):
        self.params = params
        self.cfg = cfg

    @classmethod
    def init(cls, cfg: BackboneConfig, seed: int = 0) -> "TinyBackbone":
        c1, c2, c3 = cfg.stage_channels
        chans = {2: c2, 3: c3}
        params: Dict[str, Tensor] = {}

        def gauss(name, shape, std):
            data = _rng.gaussian(shape, std=std, seed=seed, path=("init", name))
            params[name] = Tensor(data, requires_grad=True)

        # He-style fan-in scaling for the ReLU conv stack.
        gauss("conv1", (c1, cfg.in_channels, 3, 3), math.sqrt(2.0 / (cfg.in_channels * 9)))
        gauss("conv2", (c2, c1, 3, 3), math.sqrt(2.0 / (c1 * 9)))
        gauss("conv3", (c3, c2, 3, 3), math.sqrt(2.0 / (c2 * 9)))
        gauss("cls_w", (cfg.n_classes, c3), 1.0 / math.sqrt(c3))
        for stage in ATTENTION_STAGES:
            c = chans[stage]
            ct = cfg.attn_channels or default_embed_channels(c)
            std = 1.0 / math.sqrt(c)
            gauss(f"att{stage}_f", (ct, c), std)
            gauss(f"att{stage}_g", (ct, c), std)
            gauss(f"att{stage}_z", (c, c), std)
            gauss(f"emb{stage}", (cfg.embed_dim, c), std)
        return cls(params, cfg)

    @classmethod
    def from_arrays(cls, arrays: Dict[str, np.ndarray]) -> "TinyBackbone":
        """Rebuild a model from checkpoint arrays; shapes define the config."""
        missing = {"conv1", "conv2", "conv3", "cls_w"} - set(arrays)
        if missing:
            raise ShapeError(f"checkpoint lacks parameters: {sorted(missing)}")
        cfg = BackboneConfig(
            in_channels=arrays["conv1"].shape[1],
            stage_channels=(arrays["conv1"].shape[0], arrays["conv2"].shape[0],
                            arrays["conv3"].shape[0]),
            n_classes=arrays["cls_w"].shape[0],
            embed_dim=arrays["emb2"].shape[0] if "emb2" in arrays else 1,
            attn_channels=arrays["att2_f"].shape[0] if "att2_f" in arrays else None,
        )
        params = {name: Tensor(arr, requires_grad=True) for name, arr in arrays.items()}
        return cls(params, cfg)

    def arrays(self) -> Dict[str, np.ndarray]:
        return {name: np.array(p.data) for name, p in sorted(self.params.items())}

    def nonlocal_params(self, stage: int) -> NonLocalParams:
        return NonLocalParams(self.params[f"att{stage}_f"],
                              self.params[f"att{stage}_g"],
                              self.params[f"att{stage}_z"])


def _stage(x: Tensor, w: Tensor) -> Tensor:
    return T.avgpool2(T.relu(T.conv3x3(x, w)))


def _batch_thresholds(a_data: np.ndarray, hp: MaskHyperparams):
    t_fg = hp.gamma_fg * a_data.max(axis=(1, 2))
    t_bg = hp.gamma_bg * a_data.mean(axis=(1, 2))
    return t_fg, t_bg


def _attention_layer(f: Tensor, stage: int, model: TinyBackbone,
                     hp: MaskHyperparams, rng: np.random.Generator,
                     flags: AblationFlags,
                     diagnostics: Optional[SelectionDiagnostics]):
    """Gate one stage's features; returns (gated features, bundle)."""
    n, c, h, w = f.shape
    if flags.nonlocal_block:
        a = enhanced_attention_batch(f, model.nonlocal_params(stage))
    else:
        a = channel_mean_attention(f)
    a_tilde = T.sigmoid(a)

    t_fg, t_bg = _batch_thresholds(a.data, hp)
    above_bg = a.data > t_bg[:, None, None]
    below_fg = a.data < t_fg[:, None, None]
    m_fg = above_bg.astype(np.float64)
    m_bg = 1.0 - m_fg
    m_dfg = (below_fg & above_bg).astype(np.float64)
    gate_mask = m_dfg if flags.dfg_mask else below_fg.astype(np.float64)

    # Per-sample draw, in sample order, one uniform per sample per layer.
    use_imp = np.ones(n, dtype=np.float64)
    const_part = np.zeros_like(gate_mask)
    selected = []
    for i in range(n):
        want_dfg = rng.random() < hp.drop_rate
        if diagnostics is not None:
            diagnostics.n_draws += 1
        if want_dfg and gate_mask[i].any():
            use_imp[i] = 0.0
            const_part[i] = gate_mask[i]
            selected.append(DROPPED_FOREGROUND)
            if diagnostics is not None:
                diagnostics.n_dfg_selected += 1
        else:
            selected.append(IMPORTANCE)
            if want_dfg and diagnostics is not None:
                diagnostics.n_empty_fallback += 1

    gate = T.add(T.mul(a_tilde, Tensor(use_imp[:, None, None])), Tensor(const_part))
    gated = T.mul(f, T.reshape(gate, (n, 1, h, w)))
    bundle = BatchAttentionBundle(stage=stage, a=a, a_tilde=a_tilde,
                                  theta_fg=t_fg, theta_bg=t_bg, m_dfg=m_dfg,
                                  m_fg=m_fg, m_bg=m_bg, selected=selected)
    return gated, bundle


def _layer_contrastive(f: Tensor, bundle: BatchAttentionBundle,
                       w_emb: Tensor, margin: float):
    """Batched hinge loss over the three region embeddings of one layer.

    Samples with any empty region are masked out of the mean (they reach the
    graph only through a zero multiplier, so they contribute no gradient).
    Returns (loss term or None, n_skipped).
    """
    n, c, h, w = f.shape
    hw = h * w

    def pool_weights(masks):
        counts = masks.reshape(n, hw).sum(axis=1)
        weights = np.zeros((n, hw, 1), dtype=np.float64)
        nonzero = counts > 0
        weights[nonzero, :, 0] = masks.reshape(n, hw)[nonzero] / counts[nonzero, None]
        return weights, nonzero

    w_dfg, ok_dfg = pool_weights(bundle.m_dfg)
    w_fg, ok_fg = pool_weights(bundle.m_fg)
    w_bg, ok_bg = pool_weights(bundle.m_bg)
    valid = ok_dfg & ok_fg & ok_bg
    n_valid = int(valid.sum())
    n_skipped = n - n_valid
    if n_valid == 0:
        return None, n_skipped

    d = w_emb.shape[0]
    pixels = T.matmul(w_emb, T.reshape(f, (n, c, hw)))          # [N, D, HW]
    z_dfg = T.reshape(T.matmul(pixels, Tensor(w_dfg)), (n, d))
    z_fg = T.reshape(T.matmul(pixels, Tensor(w_fg)), (n, d))
    z_bg = T.reshape(T.matmul(pixels, Tensor(w_bg)), (n, d))
    hinge = T.relu(T.add(T.sub(T.euclidean_distance(z_dfg, z_fg),
                               T.euclidean_distance(z_dfg, z_bg)),
                         float(margin)))                        # [N]
    picked = T.mul(hinge, Tensor(valid.astype(np.float64)))
    return T.mul(T.reduce_sum(picked), 1.0 / n_valid), n_skipped


def forward_train(images: np.ndarray, labels_onehot: np.ndarray,
                  model: TinyBackbone, hp: MaskHyperparams,
                  margin: float, rng: np.random.Generator,
                  flags: Optional[AblationFlags] = None,
                  diagnostics: Optional[SelectionDiagnostics] = None):
    """Training forward pass for one batch.

    Returns (logits, bundles, total-loss tensor, LossBreakdown).  Bundles is
    empty when attention is ablated away.
    """
    flags = flags or AblationFlags()
    p = model.params
    x = Tensor(np.asarray(images, dtype=np.float64))
    if x.ndim != 4:
        raise ShapeError(f"expected [N, C, H, W] images, got {x.shape}")

    f1 = _stage(x, p["conv1"])
    f2 = _stage(f1, p["conv2"])
    bundles: List[BatchAttentionBundle] = []
    ca_terms: List[Tensor] = []
    n_skipped = 0

    if flags.attention:
        f2_in = f2
        f2, b2 = _attention_layer(f2, 2, model, hp, rng, flags, diagnostics)
        bundles.append(b2)
        if flags.contrastive:
            term, sk = _layer_contrastive(f2_in, b2, p["emb2"], margin)
            n_skipped += sk
            if term is not None:
                ca_terms.append(term)

    f3 = _stage(f2, p["conv3"])
    if flags.attention:
        f3_in = f3
        f3, b3 = _attention_layer(f3, 3, model, hp, rng, flags, diagnostics)
        bundles.append(b3)
        if flags.contrastive:
            term, sk = _layer_contrastive(f3_in, b3, p["emb3"], margin)
            n_skipped += sk
            if term is not None:
                ca_terms.append(term)

    gap = T.reduce_mean(f3, axes=(2, 3))
    logits = T.matmul(gap, T.transpose_last2(p["cls_w"]))
    l_cls = classification_loss(logits, labels_onehot)

    l_ca = mean_over_layers(ca_terms) if flags.attention and flags.contrastive else None
    l_fc = None
    if flags.attention and flags.consistency and len(bundles) >= 2:
        ref = bundles[-1].a
        fc_terms = [foreground_consistency_loss(b.a, ref) for b in bundles[:-1]]
        l_fc = mean_over_layers(fc_terms)

    total, breakdown = total_loss(l_cls, l_ca, l_fc, n_skipped)
    return logits, bundles, total, breakdown


def plain_features(images: np.ndarray, model: TinyBackbone) -> Tensor:
    """Stage-3 features of the vanilla trunk (no attention, no gating)."""
    p = model.params
    x = Tensor(np.asarray(images, dtype=np.float64))
    return _stage(_stage(_stage(x, p["conv1"]), p["conv2"]), p["conv3"])


def infer_batch(images: np.ndarray, model: TinyBackbone):
    """Deterministic inference: (predicted classes [N], heatmaps [N, S, S]).

    The heatmap is the predicted class's activation map upsampled to the
    input resolution.
    """
    feats = plain_features(images, model).data          # [N, C, h, w]
    w = model.params["cls_w"].data
    logits = np.tensordot(feats.mean(axis=(2, 3)), w.T, axes=1)
    preds = logits.argmax(axis=1)
    cams = np.einsum("kc,nchw->nkhw", w, feats)[np.arange(len(preds)), preds]
    return preds, bilinear_resize(cams, images.shape[-2:])


def forward_infer(image: np.ndarray, model: TinyBackbone,
                  image_id: str = "") -> tuple[int, ScoreMap]:
    """Single-image inference: (predicted class, image-resolution ScoreMap)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    preds, cams = infer_batch(img, model)
    return int(preds[0]), ScoreMap(image_id, cams[0])
