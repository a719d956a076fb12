"""Counterfactual utility labels and the losses that regress gate scores onto them.

A label for controlled layer ``l`` and position ``t`` forks the trajectory at
``l`` into a full and a cheap branch, forces every later controlled layer to
run full, and takes the difference of the two branches' discounted windowed
next-token cross-entropies.  Everything here runs without a tape.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tapecore as tc
from .backbone import CHEAP, FULL, GATE, ConditionalLM, ExecCounter
from .gating import GateConfig, topk_mask
from .tapecore import ConfigError, Tensor

PREFIX_FULL = "full"
PREFIX_GATE = "gate"


@dataclass(frozen=True)
class OracleConfig:
    window: int = 8
    decay: float = 0.5
    warmup: int = 100
    refresh_every: int = 5
    rank_pairs: int = 256
    huber_delta: float = 1.0
    prefix: str = PREFIX_FULL

    def __post_init__(self) -> None:
        if self.window < 1 or self.refresh_every < 1 or self.warmup < 0:
            raise ConfigError("window and refresh interval must be >= 1, warmup >= 0")
        if not 0.0 < self.decay <= 1.0:
            raise ConfigError("decay must lie in (0, 1]")
        if self.rank_pairs < 1 or self.huber_delta <= 0:
            raise ConfigError("rank_pairs and huber_delta must be positive")
        if self.prefix not in (PREFIX_FULL, PREFIX_GATE):
            raise ConfigError(f"prefix must be 'full' or 'gate', got {self.prefix!r}")


@dataclass
class UtilityLabels:
    """``u_star[b, l, t]`` for controlled layer ``l``; ``valid[t]`` is False
    at the last position, which has no next token."""

    u_star: np.ndarray
    valid: np.ndarray
    active: bool = True


def labels_due(step: int, cfg: OracleConfig) -> bool:
    """No labels during warmup; afterwards every ``refresh_every`` steps,
    the first refresh landing at ``warmup + refresh_every``."""
    if step < 1:
        raise ValueError("steps count from 1")
    return step > cfg.warmup and (step - cfg.warmup) % cfg.refresh_every == 0


def windowed_ce(ce: np.ndarray, t: int, window: int, decay: float) -> float:
    """``sum_{d<window} decay^d * ce[t+d]``, truncated at the end of ``ce``."""
    ce = np.asarray(ce, dtype=np.float64)
    if not 0 <= t < ce.shape[-1]:
        raise IndexError(t)
    seg = ce[..., t:t + window]
    return float(np.sum(seg * decay ** np.arange(seg.shape[-1])))


def windowed_ce_all(ce: np.ndarray, window: int, decay: float) -> np.ndarray:
    """Vectorised :func:`windowed_ce` over the last axis."""
    out = np.zeros_like(ce)
    n = ce.shape[-1]
    w = 1.0
    for d in range(min(window, n)):
        out[..., : n - d] += w * ce[..., d:]
        w *= decay
    return out


def _position_ce(model: ConditionalLM, h: Tensor, tokens: np.ndarray) -> np.ndarray:
    logits = model.head(h)
    return tc.cross_entropy(logits[:, :-1], tokens[:, 1:]).data


def _suffix_full(model: ConditionalLM, h: Tensor, start: int) -> Tensor:
    """Run controlled layers ``start..C-1`` (0-based) forced full."""
    layers = list(model.cfg.controlled)
    for i in layers[start:]:
        a = model.attention_sublayer(i, h)
        h = tc.add(a, model.full_ffn(i, a))
    return h


def utility_labels(model: ConditionalLM, tokens: np.ndarray, cfg: OracleConfig,
                   controller=None, gate: GateConfig | None = None,
                   counter: ExecCounter | None = None) -> UtilityLabels:
    """Labels for every controlled layer, using one shared prefix pass.

    With ``prefix='full'`` the full branch of every fork is the all-full
    trajectory, so it is computed once; each layer then needs one cheap fork.
    With ``prefix='gate'`` the layers before the fork follow the current gate
    policy and each fork needs both branches.
    """
    tokens = np.atleast_2d(tokens)
    mc = model.cfg
    C, n_tok = mc.n_controlled, tokens.size
    layers = list(mc.controlled)
    ce_full = np.zeros((tokens.shape[0], C, tokens.shape[1] - 1), dtype=model["lm_head"].dtype)
    ce_cheap = np.zeros_like(ce_full)
    local = ExecCounter()
    with tc.no_tape():
        h = model.prefix(tokens)
        if cfg.prefix == PREFIX_FULL:
            shared_ce = None
            for j, i in enumerate(layers):
                a = model.attention_sublayer(i, h)
                h_cheap = tc.add(a, model.cheap_ffn(i, a))
                ce_cheap[:, j] = _position_ce(model, _suffix_full(model, h_cheap, j + 1), tokens)
                local.cheap += n_tok
                local.full += n_tok * (C - j - 1)
                local.oracle_passes += 1
                h = tc.add(a, model.full_ffn(i, a))
            shared_ce = _position_ce(model, h, tokens)
            local.full += n_tok * C
            local.oracle_passes += 1
            ce_full[:] = shared_ce[:, None, :]
        else:
            if controller is None or gate is None:
                raise ConfigError("gate-prefix labels need the controller and gate config")
            for j, i in enumerate(layers):
                a = model.attention_sublayer(i, h)
                h_full = tc.add(a, model.full_ffn(i, a))
                h_cheap = tc.add(a, model.cheap_ffn(i, a))
                ce_full[:, j] = _position_ce(model, _suffix_full(model, h_full, j + 1), tokens)
                ce_cheap[:, j] = _position_ce(model, _suffix_full(model, h_cheap, j + 1), tokens)
                local.full += n_tok * (1 + 2 * (C - j - 1))
                local.cheap += n_tok
                local.oracle_passes += 2
                if j + 1 < C:
                    u, _ = controller.score(a)
                    m, _ = topk_mask(u.data, gate.budget)
                    m = Tensor(m[..., None])
                    h = tc.add(tc.mul(m, h_full), tc.mul(tc.sub(1.0, m), h_cheap))
                    local.controller += n_tok
    if counter is not None:
        counter.add(local)
    return _finish(ce_full, ce_cheap, cfg)


def utility_labels_naive(model: ConditionalLM, tokens: np.ndarray, cfg: OracleConfig,
                         controller=None, gate: GateConfig | None = None) -> UtilityLabels:
    """Reference construction: two complete forwards per controlled layer."""
    tokens = np.atleast_2d(tokens)
    C = model.cfg.n_controlled
    before = FULL if cfg.prefix == PREFIX_FULL else GATE
    ce_full = np.zeros((tokens.shape[0], C, tokens.shape[1] - 1), dtype=model["lm_head"].dtype)
    ce_cheap = np.zeros_like(ce_full)
    with tc.no_tape():
        for j in range(C):
            for mode, dest in ((FULL, ce_full), (CHEAP, ce_cheap)):
                plan = [before] * j + [mode] + [FULL] * (C - j - 1)
                logits, _ = model.forward(tokens, plan, controller=controller, gate=gate)
                dest[:, j] = tc.cross_entropy(logits[:, :-1], tokens[:, 1:]).data
    return _finish(ce_full, ce_cheap, cfg)


def _finish(ce_full: np.ndarray, ce_cheap: np.ndarray, cfg: OracleConfig) -> UtilityLabels:
    wf = windowed_ce_all(ce_full, cfg.window, cfg.decay)
    wc = windowed_ce_all(ce_cheap, cfg.window, cfg.decay)
    b, c, n = wf.shape
    u_star = np.zeros((b, c, n + 1), dtype=wf.dtype)
    u_star[..., :n] = wc - wf
    valid = np.ones(n + 1, dtype=bool)
    valid[n] = False
    return UtilityLabels(u_star, valid)


def huber_util_loss(scores: list[Tensor], labels: UtilityLabels | None, delta: float = 1.0) -> Tensor:
    """Mean Huber distance between per-layer scores ``[B, T]`` and labels.

    Returns an exact zero when no labels are active this step.
    """
    if labels is None or not labels.active:
        return Tensor(np.zeros((), dtype=scores[0].dtype))
    n = int(labels.valid.sum())
    terms = []
    for j, u in enumerate(scores):
        target = labels.u_star[:, j, :n].astype(u.dtype)
        terms.append(tc.mean(tc.huber(u[:, :n], target, delta)))
    total = terms[0]
    for t in terms[1:]:
        total = tc.add(total, t)
    return tc.mul(total, 1.0 / len(terms))


def sample_pairs(labels: UtilityLabels, n_pairs: int, rng: np.random.Generator):
    """Per controlled layer, ``n_pairs`` uniform (sequence, i, j) triples with
    distinct label values; returns a list of ``(b, i, j, sign)`` arrays."""
    bsz, C, _ = labels.u_star.shape
    n = int(labels.valid.sum())
    out = []
    for layer in range(C):
        b = rng.integers(0, bsz, n_pairs)
        i = rng.integers(0, n, n_pairs)
        j = rng.integers(0, n, n_pairs)
        us = labels.u_star[:, layer]
        sign = np.sign(us[b, i] - us[b, j])
        keep = sign != 0
        out.append((b[keep], i[keep], j[keep], sign[keep]))
    return out


def pairwise_rank_loss(scores: list[Tensor], labels: UtilityLabels | None,
                       rng: np.random.Generator, n_pairs: int = 256, pairs=None) -> Tensor:
    """Mean over sampled pairs of ``softplus(-sign(u*_i - u*_j) (u_i - u_j))``."""
    dtype = scores[0].dtype
    if labels is None or not labels.active:
        return Tensor(np.zeros((), dtype=dtype))
    pairs = sample_pairs(labels, n_pairs, rng) if pairs is None else pairs
    terms, count = [], 0
    for u, (b, i, j, sign) in zip(scores, pairs):
        if b.size == 0:
            continue
        diff = tc.sub(u[b, i], u[b, j])
        terms.append(tc.tsum(tc.softplus(tc.mul(diff, (-sign).astype(dtype)))))
        count += b.size
    if not count:
        return Tensor(np.zeros((), dtype=dtype))
    total = terms[0]
    for t in terms[1:]:
        total = tc.add(total, t)
    return tc.mul(total, 1.0 / count)
