"""Deterministic random streams built on the Philox 4x64 counter-based generator.

Reproducibility contract
------------------------
All randomness in this package flows through two primitives:

* :func:`stream` derives an independent ``numpy.random.Generator`` from an
  integer seed plus a path of labels.  The path is hashed into a
  ``SeedSequence`` spawn key, so ``stream(7, "data", 3)`` is the same stream
  on every platform and never collides with ``stream(7, "model")``.
* :func:`gaussian` draws normal variates with an explicit Box-Muller
  transform over the raw 64-bit Philox output.  Philox raw output is part of
  numpy's stability guarantee for bit generators, and the transform is
  spelled out below, so arrays are bitwise reproducible across platforms and
  numpy versions.

Box-Muller, as implemented here: take raw 64-bit words ``x``, form uniforms
``u = (x >> 11) * 2**-53`` in ``[0, 1)``, pair them up as ``(u1, u2)``, and
emit ``r * cos(2*pi*u2)`` and ``r * sin(2*pi*u2)`` with
``r = sqrt(-2 * log(1 - u1))``.  ``1 - u1`` lies in ``(0, 1]`` so the log is
always finite.  Pairs are consumed in order; a trailing odd element discards
the sine half.
"""

from __future__ import annotations

import zlib

import numpy as np

__all__ = ["stream", "gaussian", "spawn_key_of"]


def spawn_key_of(*path) -> tuple[int, ...]:
    """Map a path of ints / strings to a SeedSequence spawn key."""
    key = []
    for part in path:
        if isinstance(part, str):
            key.append(zlib.crc32(part.encode("utf-8")))
        else:
            key.append(int(part))
    return tuple(key)


def stream(seed: int, *path) -> np.random.Generator:
    """Independent Philox-backed generator for (seed, path)."""
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key_of(*path))
    return np.random.Generator(np.random.Philox(seq))


def _raw_uniforms(n: int, seed: int, path) -> np.ndarray:
    seq = np.random.SeedSequence(entropy=int(seed), spawn_key=spawn_key_of(*path))
    raw = np.random.Philox(seq).random_raw(n)
    return (raw >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def gaussian(shape, mean: float = 0.0, std: float = 0.0, seed: int = 0, *, path=()) -> np.ndarray:
    """Normal(mean, std) array via Box-Muller over Philox raw output.

    Identical (shape, mean, std, seed, path) always yields bitwise-identical
    arrays; see the module docstring for the exact transform.
    """
    if std < 0:
        raise ValueError(f"std must be non-negative, got {std}")
    n = int(np.prod(shape)) if len(tuple(shape)) else 1
    n = max(n, 0)
    pairs = (n + 1) // 2
    u = _raw_uniforms(2 * pairs, seed, path)
    u1, u2 = u[:pairs], u[pairs:]
    r = np.sqrt(-2.0 * np.log1p(-u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(2 * pairs, dtype=np.float64)
    z[0::2] = r * np.cos(theta)
    z[1::2] = r * np.sin(theta)
    out = mean + std * z[:n]
    return out.reshape(tuple(shape))
