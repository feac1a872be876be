"""SGD training of the benchmark model with per-epoch localization metrics.

The optimizer is momentum SGD with decoupled-nothing, classic L2 weight
decay folded into the gradient: v <- mu * v + (g + wd * p); p <- p - lr * v.
Runs are bitwise reproducible for a fixed seed: data generation, parameter
init, batch shuffling and map selection each use an independent Philox
stream derived from the run seed, and all reductions happen in fixed order.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional

import numpy as np

from . import rng as _rng
from .attention import MaskHyperparams, SelectionDiagnostics
from .errors import TrainingAborted
from .loceval import (EvalConfig, ScoreMap, choose_fixed_threshold,
                      max_box_acc_v2, top1_classification, top1_localization)
from .model import AblationFlags, BackboneConfig, TinyBackbone, forward_train, infer_batch
from .synth import SplitData, SynthConfig, SynthDataset, generate_dataset, onehot
from .tensor import Tensor, backward


@dataclass
class TrainConfig:
    batch_size: int = 32
    learning_rate: float = 0.001
    momentum: float = 0.9
    weight_decay: float = 0.0001
    epochs: int = 30
    mask: MaskHyperparams = field(default_factory=MaskHyperparams)
    margin: float = 1.0
    seed: int = 0
    stage_channels: tuple = (8, 16, 32)
    embed_dim: int = 128
    ablation: AblationFlags = field(default_factory=AblationFlags)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.learning_rate < 0 or self.weight_decay < 0 or not 0 <= self.momentum < 1:
            raise ValueError("invalid optimizer settings")


class SGD:
    """Momentum SGD with L2 weight decay over a named parameter dict."""

    def __init__(self, params: Dict[str, Tensor], lr: float,
                 momentum: float = 0.9, weight_decay: float = 0.0):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = {name: np.zeros(p.shape) for name, p in sorted(params.items())}

    def step(self):
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            g = p.grad + self.weight_decay * p.data
            v = self.momentum * self.velocity[name] + g
            self.velocity[name] = v
            p.data = np.ascontiguousarray(p.data - self.lr * v)
            p.data.flags.writeable = False

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _score_split(split: SplitData, model: TinyBackbone, batch: int = 64):
    preds = np.empty(len(split), dtype=np.int64)
    maps: List[ScoreMap] = []
    for start in range(0, len(split), batch):
        chunk = slice(start, start + batch)
        p, cams = infer_batch(split.images[chunk], model)
        preds[chunk] = p
        maps.extend(ScoreMap(i, c) for i, c in zip(split.ids[chunk], cams))
    return preds, maps


def evaluate(model: TinyBackbone, test: SplitData, val: SplitData,
             eval_cfg: EvalConfig) -> dict:
    """Test-split metrics; the top-1 localization threshold is tuned on the
    validation split unless the config pins one."""
    preds, maps = _score_split(test, model)
    gt = test.boxsets()
    v2, per_delta = max_box_acc_v2(maps, gt, eval_cfg.iou_deltas, eval_cfg.n_thresholds)
    tau = eval_cfg.fixed_threshold
    if tau is None:
        _, val_maps = _score_split(val, model)
        tau = choose_fixed_threshold(val_maps, val.boxsets(), eval_cfg.n_thresholds)
    return {
        "maxboxaccv2": v2,
        "per_delta": per_delta,
        "top1_loc": top1_localization(preds, maps, test.labels, gt, tau),
        "top1_cls": top1_classification(preds, test.labels),
        "fixed_threshold": tau,
    }


@dataclass
class TrainResult:
    model: TinyBackbone
    history: List[dict]
    dataset: SynthDataset
    diagnostics: SelectionDiagnostics


def train(train_cfg: TrainConfig, synth_cfg: SynthConfig,
          log=None) -> TrainResult:
    """Full training run; raises TrainingAborted on a non-finite loss."""
    ds = generate_dataset(synth_cfg)
    backbone_cfg = BackboneConfig(
        in_channels=ds.train.images.shape[1],
        stage_channels=tuple(train_cfg.stage_channels),
        n_classes=synth_cfg.n_classes,
        embed_dim=train_cfg.embed_dim,
    )
    model = TinyBackbone.init(backbone_cfg, seed=train_cfg.seed)
    opt = SGD(model.params, lr=train_cfg.learning_rate,
              momentum=train_cfg.momentum, weight_decay=train_cfg.weight_decay)
    select_rng = _rng.stream(train_cfg.seed, "select")
    shuffle_rng = _rng.stream(train_cfg.seed, "shuffle")
    diagnostics = SelectionDiagnostics()

    n = len(ds.train)
    labels_1h = onehot(ds.train.labels, synth_cfg.n_classes)
    history: List[dict] = []
    last_breakdown = None

    for epoch in range(train_cfg.epochs):
        perm = shuffle_rng.permutation(n)
        sums = {"l_cls": 0.0, "l_ca": 0.0, "l_fc": 0.0}
        for bi, start in enumerate(range(0, n, train_cfg.batch_size)):
            idx = perm[start:start + train_cfg.batch_size]
            _, _, total, breakdown = forward_train(
                ds.train.images[idx], labels_1h[idx], model, train_cfg.mask,
                train_cfg.margin, select_rng, train_cfg.ablation, diagnostics)
            if not np.isfinite(breakdown.l_total):
                raise TrainingAborted(
                    f"non-finite loss at epoch {epoch}, batch {bi}",
                    epoch=epoch, batch_index=bi, last_losses=last_breakdown)
            last_breakdown = breakdown
            opt.zero_grad()
            backward(total)
            opt.step()
            for key in sums:
                sums[key] += getattr(breakdown, key) * len(idx)

        metrics = evaluate(model, ds.test, ds.val, train_cfg.eval)
        row = {
            "epoch": epoch,
            "l_cls": sums["l_cls"] / n,
            "l_ca": sums["l_ca"] / n,
            "l_fc": sums["l_fc"] / n,
            "maxboxaccv2": metrics["maxboxaccv2"],
            "top1_loc": metrics["top1_loc"],
            "top1_cls": metrics["top1_cls"],
        }
        history.append(row)
        if log is not None:
            log(f"epoch {epoch}: cls={row['l_cls']:.4f} ca={row['l_ca']:.4f} "
                f"fc={row['l_fc']:.4f} mbaV2={row['maxboxaccv2']:.4f} "
                f"top1loc={row['top1_loc']:.4f} top1cls={row['top1_cls']:.4f}")

    return TrainResult(model=model, history=history, dataset=ds,
                       diagnostics=diagnostics)
