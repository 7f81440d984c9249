"""
Module: utils.helpers
---------------------

General-purpose helpers used across the services: deterministic seed
derivation for named random streams, fuzzy matching of user-supplied names
and small formatting utilities for result tables.
"""

import math
import zlib
from typing import Iterable, Optional, Sequence, Union

import numpy as np
from rapidfuzz import process

SeedPart = Union[int, str]


def _stable_int(part: SeedPart) -> int:
    if isinstance(part, str):
        return zlib.crc32(part.encode("utf-8"))
    return int(part) & 0xFFFFFFFFFFFFFFFF


def make_rng(seed: int, *names: SeedPart) -> np.random.Generator:
    """Counter-based (Philox) generator for the stream ``seed/names...``.

    Streams with different names are independent; the same (seed, names)
    always yields the same sequence.
    """
    sequence = np.random.SeedSequence(
        entropy=_stable_int(seed), spawn_key=tuple(_stable_int(n) for n in names)
    )
    return np.random.Generator(np.random.Philox(sequence))


def derive_seed(seed: int, *names: SeedPart) -> int:
    """A 63-bit integer seed for the named sub-stream."""
    return int(make_rng(seed, *names).integers(0, 2**63 - 1))


def suggest_name(query: str, choices: Iterable[str]) -> Optional[str]:
    choices = list(choices)
    if not choices:
        return None
    match, score, _ = process.extractOne(query, choices)
    return match if score > 60 else None


def mean_std(values: Sequence[float]) -> tuple:
    values = [v for v in values if v is not None and not math.isnan(v)]
    if not values:
        return float("nan"), float("nan")
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def format_mean_std(values: Sequence[float], digits: int = 4) -> str:
    mean, std = mean_std(values)
    if math.isnan(mean):
        return "n/a"
    return f"{mean:.{digits}f} ± {std:.{digits}f}"
