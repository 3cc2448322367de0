"""Instance regularization: corruption and prediction penalties on hidden-state distributions.

Three forwards of the same encoder are compared position by position:

* the corrupted input W' gives ``H``,
* the original input W gives ``H_hat`` (the target),
* the filled-back input P, i.e. W' with the model's own predictions written
  over the masked slots, gives ``H_tilde``.

Each hidden row is turned into a distribution with a softmax across the
hidden dimension. The corruption penalty is ``KL(H || H_hat)``; the
prediction penalty is ``KL(H_tilde || H_hat)``. Both are averaged over the
real (non-pad) positions of each sequence and then over the batch.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .model import HiddenStates
from .tensor import ShapeError, Tensor
from .text import MASK

DISTANCES = ("kl", "mse")
POSITION_MODES = ("all", "masked")


@dataclass(frozen=True)
class RegularizerConfig:
    weight_ecp: float = 1.0
    weight_dpp: float = 1.0
    detach_original: bool = True
    detach_filled: bool = False
    eps_kl: float = 1e-8
    distance: str = "kl"
    swap_kl: bool = False  # use KL(H_hat || .) instead of KL(. || H_hat)
    positions: str = "all"

    def __post_init__(self):
        if self.weight_ecp < 0 or self.weight_dpp < 0:
            raise ValueError("regularizer weights must be >= 0")
        if self.distance not in DISTANCES:
            raise ValueError(f"distance must be one of {DISTANCES}, got {self.distance!r}")
        if self.positions not in POSITION_MODES:
            raise ValueError(f"positions must be one of {POSITION_MODES}, got {self.positions!r}")


@dataclass
class FilledSequence:
    ids: list[int]
    masked_positions: list[int]


@dataclass
class LossBreakdown:
    l_dae: float
    l_ecp: float
    l_dpp: float
    l_total: float
    step: int = 0
    learning_rate: float = 0.0
    wall_time: float = 0.0
    loss: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def row(self) -> dict:
        return {
            "step": self.step, "l_dae": self.l_dae, "l_ecp": self.l_ecp, "l_dpp": self.l_dpp,
            "l_total": self.l_total, "lr": self.learning_rate, "wall_time_s": self.wall_time,
        }


def fill_back(corrupted: Sequence[int], masked_positions: Sequence[int], predictions: Sequence[int]) -> FilledSequence:
    if len(predictions) != len(masked_positions):
        raise ValueError(f"fill_back: {len(predictions)} predictions for {len(masked_positions)} masked positions")
    ids = list(corrupted)
    for pos, tok in zip(masked_positions, predictions):
        if tok == MASK:
            raise ValueError(f"fill_back: prediction at position {pos} is the mask symbol")
        ids[pos] = int(tok)
    return FilledSequence(ids, list(masked_positions))


def hidden_to_distribution(h) -> Tensor:
    """Softmax of every position's hidden vector across the hidden dimension."""
    values = h.values if isinstance(h, HiddenStates) else h
    return T.softmax(values, axis=-1)


def _masked_mean(per_position: Tensor, mask: np.ndarray) -> Tensor:
    m = np.asarray(mask).astype(per_position.dtype)
    counts = m.sum(axis=1)
    if np.any(counts == 0):
        raise ValueError("every sequence needs at least one position to average over")
    return ((per_position * m).sum(axis=1) / counts).mean()


def mse_distance(p_a, p_b, attention_mask: np.ndarray) -> Tensor:
    """Mean squared difference of two distribution tensors over the unmasked positions."""
    if p_a.shape != p_b.shape:
        raise ShapeError(f"mse_distance shape mismatch: {p_a.shape} vs {p_b.shape}")
    diff = p_a - p_b
    return _masked_mean((diff * diff).mean(axis=-1), attention_mask)


def kl_distance(p: Tensor, q: Tensor, attention_mask: np.ndarray, eps: float = 1e-8) -> Tensor:
    return _masked_mean(T.kl_divergence(p, q, axis=-1, eps=eps), attention_mask)


def _penalty(first: HiddenStates, target: HiddenStates, mask, config: RegularizerConfig, detach_first: bool) -> Tensor:
    if first.values.shape != target.values.shape:
        raise ShapeError(f"hidden-state shape mismatch: {first.values.shape} vs {target.values.shape}")
    if mask is None:
        mask = first.attention_mask
    a = first.values.detach() if detach_first else first.values
    b = target.values.detach() if config.detach_original else target.values
    p, q = T.softmax(a, axis=-1), T.softmax(b, axis=-1)
    if config.distance == "mse":
        return mse_distance(p, q, mask)
    if config.swap_kl:
        p, q = q, p
    return kl_distance(p, q, mask, config.eps_kl)


def ecp(h_corrupted: HiddenStates, h_original: HiddenStates, attention_mask=None, config: RegularizerConfig | None = None) -> Tensor:
    """Corruption penalty ``D(H, H_hat)``."""
    config = config or RegularizerConfig()
    if h_corrupted.provenance != "corrupted" or h_original.provenance != "original":
        raise ValueError(
            f"ecp expects (corrupted, original) hidden states, got ({h_corrupted.provenance}, {h_original.provenance})"
        )
    return _penalty(h_corrupted, h_original, attention_mask, config, detach_first=False)


def dpp(h_filled: HiddenStates, h_original: HiddenStates, attention_mask=None, config: RegularizerConfig | None = None) -> Tensor:
    """Prediction penalty ``D(H_tilde, H_hat)``."""
    config = config or RegularizerConfig()
    if h_filled.provenance != "filled" or h_original.provenance != "original":
        raise ValueError(
            f"dpp expects (filled, original) hidden states, got ({h_filled.provenance}, {h_original.provenance})"
        )
    return _penalty(h_filled, h_original, attention_mask, config, detach_first=config.detach_filled)


def _value(x) -> float:
    return x.item() if isinstance(x, Tensor) else float(x)


def regularized_loss(l_dae, l_ecp, l_dpp, config: RegularizerConfig | None = None) -> LossBreakdown:
    """``l_dae + w_ecp * l_ecp + w_dpp * l_dpp``; accepts tensors or plain floats."""
    config = config or RegularizerConfig()
    terms = {"l_dae": _value(l_dae), "l_ecp": _value(l_ecp), "l_dpp": _value(l_dpp)}
    for name, v in terms.items():
        if not math.isfinite(v):
            dump = ", ".join(f"{k}={x!r}" for k, x in terms.items())
            raise FloatingPointError(f"regularized_loss: {name} is not finite ({dump})")
    total = l_dae + config.weight_ecp * l_ecp + config.weight_dpp * l_dpp
    return LossBreakdown(
        l_dae=_value(l_dae), l_ecp=_value(l_ecp), l_dpp=_value(l_dpp), l_total=_value(total),
        loss=total if isinstance(total, Tensor) else None,
    )
