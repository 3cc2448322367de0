"""MLM corruption: pick positions, then mask / randomize / keep each one."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Sequence

import numpy as np

from .text import MASK, N_SPECIAL


@dataclass(frozen=True)
class EnnoiseConfig:
    mask_ratio: float = 0.15
    p_mask: float = 0.8
    p_random: float = 0.1
    p_keep: float = 0.1
    seed: int = 0
    dynamic: bool = True  # re-sample masks every step rather than once per sequence

    def __post_init__(self):
        if not 0.0 < self.mask_ratio < 1.0:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        probs = (self.p_mask, self.p_random, self.p_keep)
        if min(probs) < 0 or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"p_mask + p_random + p_keep must equal 1, got {sum(probs)}")


@dataclass
class EnnoisedInstance:
    original: list[int]
    corrupted: list[int]
    masked_positions: list[int]
    labels: list[int]

    @property
    def maskable_count(self) -> int:
        return len(maskable_positions(self.original))


def maskable_positions(seq: Sequence[int]) -> list[int]:
    """Positions holding regular tokens; specials (PAD/UNK/CLS/SEP/MASK) are never chosen."""
    return [i for i, t in enumerate(seq) if t >= N_SPECIAL]


def n_to_mask(maskable: int, ratio: float) -> int:
    """``max(1, round_half_up(ratio * maskable))``, computed in exact decimal."""
    scaled = (Decimal(repr(ratio)) * maskable).quantize(Decimal(1), rounding=ROUND_HALF_UP)
    return max(1, int(scaled))


def ennoise(seq: Sequence[int], config: EnnoiseConfig, rng: np.random.Generator, vocab_size: int) -> EnnoisedInstance:
    candidates = maskable_positions(seq)
    if not candidates:
        raise ValueError("ennoise: sequence has no maskable positions")
    if vocab_size <= N_SPECIAL:
        raise ValueError("ennoise: vocabulary has no regular tokens to sample replacements from")
    m = n_to_mask(len(candidates), config.mask_ratio)
    chosen = np.sort(rng.choice(np.asarray(candidates), size=m, replace=False))
    corrupted = list(seq)
    for pos in chosen:
        u = rng.random()
        if u < config.p_mask:
            corrupted[pos] = MASK
        elif u < config.p_mask + config.p_random:
            corrupted[pos] = int(rng.integers(N_SPECIAL, vocab_size))
    positions = [int(p) for p in chosen]
    return EnnoisedInstance(list(seq), corrupted, positions, [int(seq[p]) for p in positions])


def corruption_rate(instance: EnnoisedInstance) -> float:
    maskable = instance.maskable_count
    return len(instance.masked_positions) / maskable if maskable else 0.0


ENNOISE_STREAM = 0


def sequence_rng(seed: int, step: int, index: int) -> np.random.Generator:
    """Independent stream for one sequence of one step, so batches can be ennoised in any order."""
    return np.random.default_rng([seed, step, ENNOISE_STREAM, index])
