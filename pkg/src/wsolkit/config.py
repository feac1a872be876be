"""key=value run configuration.

Config files are UTF-8 text, one ``key=value`` per line, with ``#`` comments
and blank lines allowed.  Unknown keys are rejected with their line number:
the method is sensitive to its hyperparameters, so a silently ignored typo
would be worse than a hard failure.  Every setting of the data generator,
mask thresholds, trainer and evaluator is addressable; flags given on the
command line override the file, and the effective result is echoed to the
output directory for provenance.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple

from .attention import MaskHyperparams
from .errors import ConfigError
from .loceval import EvalConfig
from .model import AblationFlags
from .synth import DEFAULT_KINDS, SynthConfig
from .train import TrainConfig

ABLATION_TOKENS = ("none", "no-ca", "no-fc", "no-nonlocal", "plain-drop", "no-attention")


def _parse_int(s): return int(s)
def _parse_float(s): return float(s)
def _parse_str(s): return s
def _parse_ints(s): return tuple(int(p) for p in s.split(",") if p.strip())
def _parse_floats(s): return tuple(float(p) for p in s.split(",") if p.strip())


def _parse_kinds(s):
    kinds = []
    for item in s.split(","):
        parts = item.strip().split(":")
        if len(parts) != 3:
            raise ValueError(f"object kind must be shape:texture:marker, got {item!r}")
        kinds.append(tuple(parts))
    return tuple(kinds)


def _parse_opt_float(s):
    return None if s.strip() == "" else float(s)


_SCHEMA = {
    # data
    "image_size": _parse_int,
    "n_classes": _parse_int,
    "n_train": _parse_int,
    "n_test": _parse_int,
    "n_val": _parse_int,
    "noise_std": _parse_float,
    "background": _parse_str,
    "class_kinds": _parse_kinds,
    "data_seed": _parse_int,
    # mask thresholds
    "drop_rate": _parse_float,
    "gamma_fg": _parse_float,
    "gamma_bg": _parse_float,
    # training
    "batch_size": _parse_int,
    "learning_rate": _parse_float,
    "momentum": _parse_float,
    "weight_decay": _parse_float,
    "epochs": _parse_int,
    "margin": _parse_float,
    "seed": _parse_int,
    "stage_channels": _parse_ints,
    "embed_dim": _parse_int,
    # evaluation
    "iou_deltas": _parse_floats,
    "n_thresholds": _parse_int,
    "fixed_threshold": _parse_opt_float,
}


@dataclass
class RunConfig:
    synth: SynthConfig
    train: TrainConfig
    ablation_tokens: Tuple[str, ...] = ()


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            values[key] = _SCHEMA[key](value.strip())
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from exc
    return values


def load_config_file(path) -> Dict[str, object]:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    return parse_config_text(text, source=str(path))


def ablation_flags(tokens: Sequence[str]) -> AblationFlags:
    flags = AblationFlags()
    for token in tokens:
        if token == "none":
            continue
        elif token == "no-ca":
            flags.contrastive = False
        elif token == "no-fc":
            flags.consistency = False
        elif token == "no-nonlocal":
            flags.nonlocal_block = False
        elif token == "plain-drop":
            flags.dfg_mask = False
        elif token == "no-attention":
            flags.attention = False
        else:
            raise ConfigError(f"unknown ablation flag {token!r}; "
                              f"choose from {', '.join(ABLATION_TOKENS)}")
    return flags


def build_run_config(values: Dict[str, object],
                     seed_override: Optional[int] = None,
                     ablation: Sequence[str] = ()) -> RunConfig:
    def pick(key, default):
        return values.get(key, default)

    try:
        synth = SynthConfig(
            image_size=pick("image_size", 64),
            n_classes=pick("n_classes", 2),
            n_train=pick("n_train", 2000),
            n_test=pick("n_test", 500),
            n_val=pick("n_val", 200),
            class_kinds=pick("class_kinds", DEFAULT_KINDS),
            background=pick("background", "textured"),
            noise_std=pick("noise_std", 0.02),
            seed=pick("data_seed", 0),
        )
        mask = MaskHyperparams(
            drop_rate=pick("drop_rate", 0.85),
            gamma_fg=pick("gamma_fg", 0.95),
            gamma_bg=pick("gamma_bg", 1.2),
        )
        eval_cfg = EvalConfig(
            iou_deltas=pick("iou_deltas", (0.3, 0.5, 0.7)),
            n_thresholds=pick("n_thresholds", 100),
            fixed_threshold=pick("fixed_threshold", None),
        )
        train = TrainConfig(
            batch_size=pick("batch_size", 32),
            learning_rate=pick("learning_rate", 0.001),
            momentum=pick("momentum", 0.9),
            weight_decay=pick("weight_decay", 0.0001),
            epochs=pick("epochs", 30),
            mask=mask,
            margin=pick("margin", 1.0),
            seed=seed_override if seed_override is not None else pick("seed", 0),
            stage_channels=pick("stage_channels", (8, 16, 32)),
            embed_dim=pick("embed_dim", 128),
            ablation=ablation_flags(ablation),
            eval=eval_cfg,
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return RunConfig(synth=synth, train=train, ablation_tokens=tuple(ablation))


def effective_config_lines(rc: RunConfig) -> list[str]:
    """Every addressable key with its effective value, for provenance."""
    synth, train = rc.synth, rc.train
    kinds = ",".join(":".join(k) for k in synth.class_kinds)
    fixed = train.eval.fixed_threshold
    entries = [
        ("image_size", synth.image_size),
        ("n_classes", synth.n_classes),
        ("n_train", synth.n_train),
        ("n_test", synth.n_test),
        ("n_val", synth.n_val),
        ("noise_std", repr(synth.noise_std)),
        ("background", synth.background),
        ("class_kinds", kinds),
        ("data_seed", synth.seed),
        ("drop_rate", repr(train.mask.drop_rate)),
        ("gamma_fg", repr(train.mask.gamma_fg)),
        ("gamma_bg", repr(train.mask.gamma_bg)),
        ("batch_size", train.batch_size),
        ("learning_rate", repr(train.learning_rate)),
        ("momentum", repr(train.momentum)),
        ("weight_decay", repr(train.weight_decay)),
        ("epochs", train.epochs),
        ("margin", repr(train.margin)),
        ("seed", train.seed),
        ("stage_channels", ",".join(str(c) for c in train.stage_channels)),
        ("embed_dim", train.embed_dim),
        ("iou_deltas", ",".join(repr(d) for d in train.eval.iou_deltas)),
        ("n_thresholds", train.eval.n_thresholds),
        ("fixed_threshold", "" if fixed is None else repr(fixed)),
    ]
    lines = [f"{k}={v}" for k, v in entries]
    lines.append("ablation=" + (",".join(rc.ablation_tokens) or "none"))
    return lines
