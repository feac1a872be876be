"""Synthetic localization benchmark data.

Every image holds exactly one foreground object (an ellipse or rectangle)
over a cluttered background.  The class signal is deliberately split into a
strong local cue and a weak distributed cue: a small high-contrast marker
disk inside the object identifies the class outright, while the object body
carries only a faint class-correlated stripe texture.  A classifier can
therefore win by looking at the marker alone, which makes the ground-truth
box (always the tight box of the whole object) a meaningful localization
target rather than a byproduct of classification.

Backgrounds mix smooth low-frequency shading with small neutral distractor
blobs that are uncorrelated with the class, so suppressing background
activation is actually exercised.

Generation is a single deterministic stream per split ((seed, split-name)
via :func:`wsolkit.rng.stream`); identical configs produce bitwise-identical
datasets.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Tuple

import numpy as np

from . import rng as _rng
from .loceval import Box
from .resize import bilinear_resize

SHAPES = ("ellipse", "rect")
TEXTURES = ("stripes_h", "stripes_v", "plain")
MARKERS = ("bright", "dark", "none")

DEFAULT_KINDS = (("ellipse", "stripes_h", "bright"),
                 ("ellipse", "stripes_v", "dark"))

_BODY_LEVEL = 0.55
_STRIPE_AMP = 0.07
_STRIPE_PERIOD = 4.0
_MARKER_LEVELS = {"bright": 0.97, "dark": 0.06}
_BG_LEVEL = 0.22
_MIN_BOX_FRACTION = 0.05
_MAX_BOX_FRACTION = 0.60


@dataclass
class SynthConfig:
    image_size: int = 64
    n_classes: int = 2
    n_train: int = 2000
    n_test: int = 500
    n_val: int = 200
    class_kinds: Tuple[Tuple[str, str, str], ...] = DEFAULT_KINDS
    background: str = "textured"     # textured | plain
    noise_std: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ValueError(f"image_size must be >= 32 so objects fit, got {self.image_size}")
        if self.n_classes < 1:
            raise ValueError("need at least one class")
        if self.background not in ("textured", "plain"):
            raise ValueError(f"unknown background family {self.background!r}")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        for kind in self.class_kinds:
            shape, texture, marker = kind
            if shape not in SHAPES or texture not in TEXTURES or marker not in MARKERS:
                raise ValueError(f"unknown object kind {kind!r}")

    def kind_for(self, label: int) -> Tuple[str, str, str]:
        return self.class_kinds[label % len(self.class_kinds)]


@dataclass
class SplitData:
    images: np.ndarray            # [n, 1, S, S] float64 in [0, 1]
    labels: np.ndarray            # [n] int64
    boxes: List[Box]
    ids: List[str]

    def __len__(self) -> int:
        return len(self.labels)

    def boxsets(self) -> Dict[str, List[Box]]:
        return {i: [b] for i, b in zip(self.ids, self.boxes)}


@dataclass
class SynthDataset:
    train: SplitData
    test: SplitData
    val: SplitData


def _grids(s: int):
    ys, xs = np.mgrid[0:s, 0:s].astype(np.float64)
    return ys, xs


def _render_background(cfg: SynthConfig, gen: np.random.Generator,
                       ys: np.ndarray, xs: np.ndarray) -> np.ndarray:
    s = cfg.image_size
    img = np.full((s, s), _BG_LEVEL, dtype=np.float64)
    if cfg.background == "plain":
        return img
    coarse = gen.uniform(-1.0, 1.0, size=(8, 8)) * 0.05
    img += bilinear_resize(coarse, (s, s))
    for _ in range(int(gen.integers(2, 5))):
        cx = gen.uniform(0, s)
        cy = gen.uniform(0, s)
        ax = gen.uniform(2.0, 6.0)
        bx = gen.uniform(2.0, 6.0)
        level = gen.uniform(0.38, 0.60)
        blob = ((xs - cx) / ax) ** 2 + ((ys - cy) / bx) ** 2 <= 1.0
        img[blob] = level
    return img


def _draw_object_geometry(cfg: SynthConfig, gen: np.random.Generator,
                          ys: np.ndarray, xs: np.ndarray, shape: str):
    """Object mask with a tight box whose area is 5%-60% of the image."""
    s = cfg.image_size
    for _ in range(100):
        a = gen.uniform(0.11, 0.28) * s
        b = gen.uniform(0.11, 0.28) * s
        cx = gen.uniform(a + 2.0, s - a - 2.0)
        cy = gen.uniform(b + 2.0, s - b - 2.0)
        if shape == "ellipse":
            mask = ((xs - cx) / a) ** 2 + ((ys - cy) / b) ** 2 <= 1.0
        else:
            mask = (np.abs(xs - cx) <= a) & (np.abs(ys - cy) <= b)
        if not mask.any():
            continue
        box = tight_box(mask)
        frac = box.area / (s * s)
        if _MIN_BOX_FRACTION <= frac <= _MAX_BOX_FRACTION:
            return mask, box, (cx, cy, a, b)
    raise ValueError("could not place an object within the area bounds; "
                     "image_size too small for the configured geometry")


def tight_box(mask: np.ndarray) -> Box:
    """Tight half-open bounding box of a non-empty boolean mask."""
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    return Box(x0=int(cols[0]), y0=int(rows[0]),
               x1=int(cols[-1]) + 1, y1=int(rows[-1]) + 1)


def _render_sample(cfg: SynthConfig, gen: np.random.Generator, label: int,
                   ys: np.ndarray, xs: np.ndarray):
    shape, texture, marker = cfg.kind_for(label)
    img = _render_background(cfg, gen, ys, xs)
    mask, box, (cx, cy, a, b) = _draw_object_geometry(cfg, gen, ys, xs, shape)

    body = np.full_like(img, _BODY_LEVEL)
    phase = gen.uniform(0.0, 2.0 * np.pi)
    if texture == "stripes_h":
        body += _STRIPE_AMP * np.sin(2.0 * np.pi * ys / _STRIPE_PERIOD + phase)
    elif texture == "stripes_v":
        body += _STRIPE_AMP * np.sin(2.0 * np.pi * xs / _STRIPE_PERIOD + phase)
    img[mask] = body[mask]

    if marker != "none":
        angle = gen.uniform(0.0, 2.0 * np.pi)
        radius = gen.uniform(0.0, 0.45)
        mcx = cx + radius * a * np.cos(angle)
        mcy = cy + radius * b * np.sin(angle)
        rm = 2.0 if min(a, b) < 12.0 else 3.0
        disk = ((xs - mcx) ** 2 + (ys - mcy) ** 2 <= rm * rm) & mask
        img[disk] = _MARKER_LEVELS[marker]

    if cfg.noise_std > 0:
        img = img + cfg.noise_std * gen.standard_normal(img.shape)
    return np.clip(img, 0.0, 1.0), box


def generate_split(cfg: SynthConfig, split: str, n: int) -> SplitData:
    """Render n samples for a named split; labels are assigned round-robin."""
    gen = _rng.stream(cfg.seed, "synth", split)
    s = cfg.image_size
    ys, xs = _grids(s)
    images = np.empty((n, 1, s, s), dtype=np.float64)
    labels = np.empty(n, dtype=np.int64)
    boxes: List[Box] = []
    ids: List[str] = []
    for i in range(n):
        label = i % cfg.n_classes
        img, box = _render_sample(cfg, gen, label, ys, xs)
        images[i, 0] = img
        labels[i] = label
        boxes.append(box)
        ids.append(f"{split}_{i:05d}")
    return SplitData(images=images, labels=labels, boxes=boxes, ids=ids)


def generate_dataset(cfg: SynthConfig) -> SynthDataset:
    """All three splits (train / test / val) from one config."""
    return SynthDataset(
        train=generate_split(cfg, "train", cfg.n_train),
        test=generate_split(cfg, "test", cfg.n_test),
        val=generate_split(cfg, "val", cfg.n_val),
    )


def onehot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    out = np.zeros((len(labels), n_classes), dtype=np.float64)
    out[np.arange(len(labels)), labels] = 1.0
    return out
