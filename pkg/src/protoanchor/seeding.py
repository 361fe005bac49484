"""Deterministic RNG derivation from structured seed components.

Every random draw in the toolkit comes from a numpy Generator seeded by a
SeedSequence whose entropy is the tuple (base_seed, condition, shot, task,
repeat, tag, ...). Strings are folded in via CRC32 so seeds are stable
across processes and platforms.
"""

from __future__ import annotations

import zlib

import numpy as np


def _flatten(parts) -> list[int]:
    out: list[int] = []
    for p in parts:
        if isinstance(p, (tuple, list)):
            out.extend(_flatten(p))
        elif isinstance(p, np.random.SeedSequence):
            entropy = p.entropy if isinstance(p.entropy, (tuple, list)) else [p.entropy]
            out.extend(_flatten(entropy))
            out.extend(int(k) & 0xFFFFFFFF for k in p.spawn_key)
        elif isinstance(p, str):
            out.append(zlib.crc32(p.encode("utf-8")))
        elif isinstance(p, (int, np.integer)):
            out.append(int(p) & 0xFFFFFFFF)
        else:
            raise TypeError(f"seed components must be ints or strings, got {type(p).__name__}")
    return out


def seed_for(*parts) -> np.random.SeedSequence:
    return np.random.SeedSequence(_flatten(parts))


def rng_for(*parts) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed_for(*parts)))
