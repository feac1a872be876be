"""On-disk artifact formats.

All multi-byte fields are little-endian.

Score map (.wsm)      magic ``WSM1``, u32 H, u32 W, then H*W float32 values
                      row-major.  One file per image; the file stem is the
                      image id.
Checkpoint (.ckpt)    magic ``WSCK``, u32 version (currently 1), u32 block
                      count, then per parameter: u32 name length, UTF-8
                      name, u32 ndim, u32 extents, float64 values row-major.
Ground-truth boxes    UTF-8 lines ``image_id,x0,y0,x1,y1``; half-open pixel
                      coordinates; multiple lines per image allowed; ``#``
                      starts a comment.
Results report        UTF-8 ``key=value`` lines (see write_report).
Heatmap export        binary PGM (P5, maxval 255) of the min-max-normalized
                      map.
Metric history        CSV ``epoch,l_cls,l_ca,l_fc,maxboxaccv2,top1_loc,top1_cls``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, List, Sequence

import numpy as np

from .errors import DataError, FormatError
from .loceval import Box, ScoreMap, normalize

SCOREMAP_MAGIC = b"WSM1"
CHECKPOINT_MAGIC = b"WSCK"
CHECKPOINT_VERSION = 1
SCOREMAP_SUFFIX = ".wsm"
HISTORY_COLUMNS = ("epoch", "l_cls", "l_ca", "l_fc", "maxboxaccv2", "top1_loc", "top1_cls")


# ---------------------------------------------------------------------------
# score maps


def write_score_map(path, smap: ScoreMap) -> None:
    h, w = smap.values.shape
    payload = smap.values.astype("<f4").tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(SCOREMAP_MAGIC)
        fh.write(struct.pack("<II", h, w))
        fh.write(payload)


def read_score_map(path) -> ScoreMap:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != SCOREMAP_MAGIC:
        raise FormatError(f"{path}: bad score-map magic {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated score-map header")
    h, w = struct.unpack("<II", blob[4:12])
    expected = 12 + 4 * h * w
    if h < 1 or w < 1 or len(blob) != expected:
        raise FormatError(f"{path}: score-map payload size mismatch "
                          f"({len(blob)} bytes for {h}x{w})")
    values = np.frombuffer(blob, dtype="<f4", offset=12).reshape(h, w)
    return ScoreMap(path.stem, values.astype(np.float64))


# ---------------------------------------------------------------------------
# ground-truth boxes


def write_gt_boxes(path, gt: Dict[str, List[Box]]) -> None:
    lines = []
    for image_id in sorted(gt):
        for b in gt[image_id]:
            lines.append(f"{image_id},{b.x0},{b.y0},{b.x1},{b.y1}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_gt_boxes(path) -> Dict[str, List[Box]]:
    gt: Dict[str, List[Box]] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split(",")
        if len(parts) != 5:
            raise DataError(f"{path}:{lineno}: expected image_id,x0,y0,x1,y1, got {raw!r}")
        image_id = parts[0].strip()
        try:
            coords = [int(p) for p in parts[1:]]
            box = Box(*coords)
        except ValueError as exc:
            raise DataError(f"{path}:{lineno}: {exc}") from exc
        gt.setdefault(image_id, []).append(box)
    return gt


# ---------------------------------------------------------------------------
# results report


def write_report(path, n_samples: int, per_delta: dict, mean_v2: float) -> None:
    """key=value report: per-delta accuracy and best tau, the mean, and count."""
    deltas = sorted(per_delta)
    lines = [f"n_samples={n_samples}",
             "deltas=" + ",".join(_fmt(d) for d in deltas)]
    for d in deltas:
        acc, tau = per_delta[d]
        lines.append(f"maxboxacc_{_fmt(d)}={acc!r}")
        lines.append(f"best_tau_{_fmt(d)}={tau!r}")
    lines.append(f"maxboxaccv2={mean_v2!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _fmt(x: float) -> str:
    s = f"{x:g}"
    return s


# ---------------------------------------------------------------------------
# heatmap export


def write_pgm(path, values: np.ndarray) -> None:
    """P5 PGM of the min-max-normalized map; min maps to 0, max to 255."""
    norm = normalize(values)
    pixels = np.round(norm * 255.0).astype(np.uint8)
    h, w = pixels.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes(order="C"))


# ---------------------------------------------------------------------------
# checkpoints


def write_checkpoint(path, params: Dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(params)))
        for name, arr in params.items():
            arr = np.asarray(arr, dtype=np.float64)
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8").tobytes(order="C"))


def read_checkpoint(path) -> Dict[str, np.ndarray]:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    if len(blob) < 12:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, count = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    params: Dict[str, np.ndarray] = {}
    off = 12
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", blob, off)
            off += 4
            name = blob[off:off + name_len].decode("utf-8")
            off += name_len
            (ndim,) = struct.unpack_from("<I", blob, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", blob, off)
            off += 4 * ndim
            n = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(blob, dtype="<f8", count=n, offset=off).reshape(shape)
            off += 8 * n
            params[name] = arr.astype(np.float64)
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: corrupt checkpoint payload: {exc}") from exc
    if off != len(blob):
        raise FormatError(f"{path}: {len(blob) - off} trailing bytes after last block")
    return params


# ---------------------------------------------------------------------------
# metric history


def write_history_csv(path, rows: Sequence[dict]) -> None:
    lines = [",".join(HISTORY_COLUMNS)]
    for row in rows:
        lines.append(",".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                              for c in HISTORY_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_history_csv(path) -> List[dict]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != ",".join(HISTORY_COLUMNS):
        raise FormatError(f"{path}: unexpected history header")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        row = {"epoch": int(parts[0])}
        for name, value in zip(HISTORY_COLUMNS[1:], parts[1:]):
            row[name] = float(value)
        rows.append(row)
    return rows
