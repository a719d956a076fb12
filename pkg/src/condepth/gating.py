"""Soft gate, exact per-sequence top-k, straight-through mask, budget/alive losses."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tapecore as tc
from .tapecore import ConfigError, Tensor


@dataclass(frozen=True)
class GateConfig:
    budget: float = 0.5
    temperature: float = 2.0
    min_alive: float = 0.05

    def __post_init__(self) -> None:
        if not 0.0 < self.budget <= 1.0:
            raise ConfigError(f"budget must lie in (0, 1], got {self.budget}")
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")
        if not 0.0 <= self.min_alive < 1.0:
            raise ConfigError("min_alive must lie in [0, 1)")


@dataclass
class GateDecision:
    u: Tensor
    p: Tensor
    m_hard: np.ndarray
    m_st: Tensor
    k: int


def n_full(seq_len: int, budget: float) -> int:
    """``ceil(budget * seq_len)``, immune to products like 0.1*30 = 3.0000000000000004."""
    if seq_len < 1:
        raise ConfigError("sequence length must be >= 1")
    return min(seq_len, math.ceil(round(budget * seq_len, 9)))


def soft_gate(u: Tensor, temperature: float) -> Tensor:
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    return tc.sigmoid(tc.mul(u, 1.0 / temperature))


def topk_mask(u: np.ndarray, budget: float) -> tuple[np.ndarray, int]:
    """Select the ``ceil(budget*T)`` highest scores along the last axis.

    Ties go to the lower token index (stable sort on the negated scores).
    """
    u = np.asarray(u)
    if np.isnan(u).any():
        raise ValueError("NaN utility score")
    k = n_full(u.shape[-1], budget)
    order = np.argsort(-u, axis=-1, kind="stable")
    m = np.zeros(u.shape, dtype=u.dtype)
    np.put_along_axis(m, order[..., :k], 1.0, axis=-1)
    return m, k


def decide(u: Tensor, cfg: GateConfig) -> GateDecision:
    p = soft_gate(u, cfg.temperature)
    m_hard, k = topk_mask(u.data, cfg.budget)
    return GateDecision(u=u, p=p, m_hard=m_hard, m_st=tc.straight_through(m_hard, p), k=k)


def budget_loss(p_means: Sequence[Tensor], budget: float) -> Tensor:
    """Mean over controlled layers of ``(p_bar - budget)^2``."""
    terms = [tc.mul(tc.sub(p, budget), tc.sub(p, budget)) for p in p_means]
    return tc.mul(_stack_sum(terms), 1.0 / len(terms))


def alive_loss(p_means: Sequence[Tensor], min_alive: float) -> Tensor:
    terms = [tc.relu(tc.sub(min_alive, p)) for p in p_means]
    return tc.mul(_stack_sum(terms), 1.0 / len(terms))


def _stack_sum(terms: Sequence[Tensor]) -> Tensor:
    if not terms:
        raise ConfigError("need at least one controlled layer")
    total = terms[0]
    for t in terms[1:]:
        total = tc.add(total, t)
    return total
