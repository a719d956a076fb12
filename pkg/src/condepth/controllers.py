"""Utility-score controllers: the MLP gate (G1, and its cost-matched variant) and
the JEPA-guided gate (G3) with its fixed target head and alignment loss.

Controllers are shared across controlled layers; each layer calls ``score`` on
its own post-attention activation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tapecore as tc
from .tapecore import ConfigError, Tensor


def _linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    lead = x.shape[:-1]
    y = tc.matmul(tc.reshape(x, (-1, x.shape[-1])), w)
    if b is not None:
        y = tc.add(y, b)
    return tc.reshape(y, lead + (w.shape[-1],))


def _fan_in(rng, shape, dtype) -> Tensor:
    return Tensor(rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape).astype(dtype))


def orthogonal_init(rows: int, cols: int, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    """``rows x cols`` matrix with orthonormal rows, from QR of a seeded Gaussian.

    Columns of Q are sign-fixed by ``diag(R)`` so the result is deterministic.
    """
    if rows > cols:
        raise ConfigError(f"cannot make {rows} orthonormal rows in dimension {cols}")
    g = rng.normal(size=(cols, rows))
    q, r = np.linalg.qr(g)
    q = q * np.where(np.diag(r) < 0, -1.0, 1.0)
    return q.T.astype(dtype)


# ------------------------------------------------------------------ G1

def g1_param_count(d_model: int, hidden: int) -> int:
    return d_model * hidden + hidden + hidden + 1


class G1Controller:
    """``u = W2 SiLU(W1 h + b1) + b2``."""

    kind = "g1"

    def __init__(self, params: dict[str, Tensor]) -> None:
        self.params = params

    @staticmethod
    def init_params(d_model: int, hidden: int, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
        return {
            "g1.w1": _fan_in(rng, (d_model, hidden), dtype),
            "g1.b1": Tensor(np.zeros(hidden, dtype)),
            "g1.w2": _fan_in(rng, (hidden, 1), dtype),
            "g1.b2": Tensor(np.zeros(1, dtype)),
        }

    @property
    def hidden(self) -> int:
        return self.params["g1.w1"].shape[1]

    def score(self, h: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        p = self.params
        z = tc.silu(_linear(h, p["g1.w1"], p["g1.b1"]))
        u = _linear(z, p["g1.w2"], p["g1.b2"])
        return tc.reshape(u, u.shape[:-1]), {}

    def macs_per_token(self) -> int:
        d, hid = self.params["g1.w1"].shape
        return d * hid + hid


# ------------------------------------------------------------------ G3

@dataclass(frozen=True)
class G3Dims:
    d_model: int
    d_context: int
    d_action: int
    d_summary: int
    d_pred_hidden: int
    d_dec_hidden: int

    @classmethod
    def from_model(cls, cfg) -> "G3Dims":
        return cls(cfg.d_model, cfg.d_context, cfg.d_action, cfg.d_summary,
                   2 * cfg.d_summary, cfg.d_summary)

    def trainable_count(self) -> int:
        d, c, a, s, hp, hd = (self.d_model, self.d_context, self.d_action, self.d_summary,
                              self.d_pred_hidden, self.d_dec_hidden)
        return d * c + 2 * a + (c + a) * hp + hp + hp * s + s + 3 * s * hd + hd + hd + 1

    def macs_per_token(self) -> int:
        d, c, a, s, hp, hd = (self.d_model, self.d_context, self.d_action, self.d_summary,
                              self.d_pred_hidden, self.d_dec_hidden)
        return d * c + 2 * ((c + a) * hp + hp * s) + 3 * s * hd + hd

    def target_macs_per_token(self) -> int:
        return 2 * self.d_model * self.d_summary


class G3Controller:
    """Context projection of ``sg(h)``, two action embeddings, a shared predictor
    producing ``q_full``/``q_cheap``, and a decision head on
    ``[q_full; q_cheap; q_full - q_cheap]``."""

    kind = "g3"

    def __init__(self, params: dict[str, Tensor]) -> None:
        self.params = params

    @staticmethod
    def init_params(dims: G3Dims, rng: np.random.Generator, dtype) -> dict[str, Tensor]:
        c, a, s = dims.d_context, dims.d_action, dims.d_summary
        return {
            "g3.w_c": _fan_in(rng, (dims.d_model, c), dtype),
            "g3.e_full": Tensor(rng.normal(size=a).astype(dtype)),
            "g3.e_cheap": Tensor(rng.normal(size=a).astype(dtype)),
            "g3.predictor.w1": _fan_in(rng, (c + a, dims.d_pred_hidden), dtype),
            "g3.predictor.b1": Tensor(np.zeros(dims.d_pred_hidden, dtype)),
            "g3.predictor.w2": _fan_in(rng, (dims.d_pred_hidden, s), dtype),
            "g3.predictor.b2": Tensor(np.zeros(s, dtype)),
            "g3.decision.w1": _fan_in(rng, (3 * s, dims.d_dec_hidden), dtype),
            "g3.decision.b1": Tensor(np.zeros(dims.d_dec_hidden, dtype)),
            "g3.decision.w2": _fan_in(rng, (dims.d_dec_hidden, 1), dtype),
            "g3.decision.b2": Tensor(np.zeros(1, dtype)),
            "g3.target_head": Tensor(orthogonal_init(s, dims.d_model, rng, dtype)),
        }

    @property
    def dims(self) -> G3Dims:
        p = self.params
        d, c = p["g3.w_c"].shape
        return G3Dims(d, c, p["g3.e_full"].shape[0], p["g3.predictor.w2"].shape[1],
                      p["g3.predictor.w1"].shape[1], p["g3.decision.w1"].shape[1])

    def predict(self, c: Tensor, action: str) -> Tensor:
        p = self.params
        e = tc.broadcast_to(p[f"g3.e_{action}"], c.shape[:-1] + (p[f"g3.e_{action}"].shape[0],))
        x = tc.concat([c, e], axis=-1)
        z = tc.silu(_linear(x, p["g3.predictor.w1"], p["g3.predictor.b1"]))
        return _linear(z, p["g3.predictor.w2"], p["g3.predictor.b2"])

    def score(self, h: Tensor) -> tuple[Tensor, dict[str, Tensor]]:
        p = self.params
        c = _linear(tc.stop_gradient(h), p["g3.w_c"])
        q_full = self.predict(c, "full")
        q_cheap = self.predict(c, "cheap")
        feat = tc.concat([q_full, q_cheap, tc.sub(q_full, q_cheap)], axis=-1)
        z = tc.silu(_linear(feat, p["g3.decision.w1"], p["g3.decision.b1"]))
        u = _linear(z, p["g3.decision.w2"], p["g3.decision.b2"])
        return tc.reshape(u, u.shape[:-1]), {"q_full": q_full, "q_cheap": q_cheap}

    def macs_per_token(self) -> int:
        return self.dims.macs_per_token()

    def targets(self, h_full: Tensor, h_cheap: Tensor) -> tuple[Tensor, Tensor]:
        return jepa_targets(h_full, h_cheap, self.params["g3.target_head"])


def jepa_targets(h_full: Tensor, h_cheap: Tensor, target_head: Tensor) -> tuple[Tensor, Tensor]:
    """``z_a = sg(T h_a)``; computed outside the tape, recomputed per call."""
    t = target_head.data.T
    return Tensor(h_full.data @ t), Tensor(h_cheap.data @ t)


def jepa_loss(q_full: Tensor, q_cheap: Tensor, z_full: Tensor, z_cheap: Tensor) -> Tensor:
    """Token-mean of ``(1 - cos(q_f, z_f)) + (1 - cos(q_c, z_c))``."""
    per_tok = tc.add(tc.sub(1.0, tc.cosine_similarity(q_full, z_full)),
                     tc.sub(1.0, tc.cosine_similarity(q_cheap, z_cheap)))
    return tc.mean(per_tok)


def layer_mean(losses: Sequence[Tensor]) -> Tensor:
    total = losses[0]
    for x in losses[1:]:
        total = tc.add(total, x)
    return tc.mul(total, 1.0 / len(losses))


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Cyclic shift by a random offset in ``[1, n-1]``: never a fixed point."""
    if n < 2:
        raise ConfigError("a derangement needs at least two elements")
    offset = int(rng.integers(1, n))
    return (np.arange(n) + offset) % n


def shuffle_targets(z_full: Tensor, z_cheap: Tensor, rng: np.random.Generator):
    """Apply one derangement over the flattened batch x sequence axis to both targets."""
    shape = z_full.shape
    n = int(np.prod(shape[:-1]))
    perm = derangement(n, rng)
    zf = z_full.data.reshape(n, -1)[perm].reshape(shape)
    zc = z_cheap.data.reshape(n, -1)[perm].reshape(shape)
    return Tensor(zf), Tensor(zc), perm


# ----------------------------------------------------------- construction

def costmatch_hidden(d_model: int, g3_count: int) -> int:
    """Smallest G1 hidden width whose parameter count reaches ``g3_count``."""
    h = 1
    while g1_param_count(d_model, h) < g3_count:
        h += 1
    return h


def build_controller(kind: str, cfg, rng: np.random.Generator):
    """Return ``(controller, params)`` for ``g1``, ``g1_costmatch`` or ``g3``."""
    dt = cfg.np_dtype
    if kind == "g1":
        params = G1Controller.init_params(cfg.d_model, cfg.d_model // 4, rng, dt)
        return G1Controller(params), params
    if kind == "g1_costmatch":
        target = G3Dims.from_model(cfg).trainable_count()
        hidden = max(costmatch_hidden(cfg.d_model, target), cfg.d_model // 4)
        params = G1Controller.init_params(cfg.d_model, hidden, rng, dt)
        if g1_param_count(cfg.d_model, hidden) < target:
            raise AssertionError("costmatch gate smaller than G3")
        return G1Controller(params), params
    if kind == "g3":
        params = G3Controller.init_params(G3Dims.from_model(cfg), rng, dt)
        return G3Controller(params), params
    raise ConfigError(f"unknown controller kind {kind!r}")
