"""Finite-difference and invariant checks on small random configurations.

Used by ``condepth check`` and by the test suite.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .. import tapecore as tc
from ..backbone import CHEAP, ConditionalLM, ModelConfig, init_backbone, init_cheap_path
from ..controllers import build_controller, jepa_loss, layer_mean
from ..gating import GateConfig, alive_loss, budget_loss
from ..oracle import OracleConfig, huber_util_loss, pairwise_rank_loss, sample_pairs, utility_labels
from ..trainer import LossWeights, total_loss, trainable_names

FD_TERMS = ("lm", "jepa", "util", "rank", "budget", "alive", "total")


def random_small_config(rng: np.random.Generator, dtype: str = "float64") -> ModelConfig:
    heads = int(rng.choice([1, 2]))
    d = heads * int(rng.choice([4, 6, 8]))
    d_ff = int(rng.choice([8, 12, 16]))
    n_layers = int(rng.integers(2, 4))
    return ModelConfig(n_layers=n_layers, n_controlled=int(rng.integers(1, n_layers + 1)),
                       d_model=d, n_heads=heads, d_ff=d_ff, cheap_rank=int(rng.integers(1, 4)),
                       vocab_size=int(rng.choice([11, 17, 32])), seq_len=int(rng.integers(4, 9)),
                       d_context=int(rng.integers(2, 6)), d_summary=int(rng.integers(2, 5)),
                       d_action=int(rng.integers(1, 4)), init_std=0.3, dtype=dtype)


@dataclass
class SmallSetup:
    cfg: ModelConfig
    model: ConditionalLM
    controller: object
    params: dict
    gate_kind: str
    gate: GateConfig
    tokens: np.ndarray


def small_setup(rng: np.random.Generator, gate_kind: str, dtype: str = "float64",
                warm_cheap: bool = True) -> SmallSetup:
    """Random model, cheap path and controller.  ``warm_cheap`` replaces the
    zero cheap down-projection with random values so gradients reach every
    cheap-path parameter."""
    cfg = random_small_config(rng, dtype)
    params = init_backbone(cfg, rng)
    params.update(init_cheap_path(cfg, rng))
    if warm_cheap:
        for name, t in params.items():
            if name.endswith("cheap_ffn.down"):
                t.data = rng.normal(0, 0.3, t.shape).astype(cfg.np_dtype)
    ctrl, cparams = build_controller(gate_kind, cfg, rng)
    for name, t in cparams.items():
        if name.endswith(("b1", "b2")):
            t.data = rng.normal(0, 0.1, t.shape).astype(cfg.np_dtype)
    gate = GateConfig(budget=float(rng.choice([0.25, 0.5, 0.75])),
                      temperature=float(rng.uniform(0.5, 3.0)), min_alive=0.9)
    tokens = rng.integers(0, cfg.vocab_size, (int(rng.integers(1, 4)), cfg.seq_len))
    return SmallSetup(cfg, ConditionalLM(cfg, params), ctrl, {**params, **cparams},
                      gate_kind, gate, tokens)


class _FrozenInputs:
    """Controller wrapper that records the stop-gradient inputs of the G3
    controller (its context input and the JEPA targets) and, when replaying,
    substitutes the recorded values.  Finite differences must hold these
    constant, exactly as the stop-gradient does for the analytic gradient."""

    def __init__(self, inner) -> None:
        self.inner = inner
        self.kind = inner.kind
        self.record = True
        self.replay = False
        self._h: list[np.ndarray] = []
        self._z: list[tuple[np.ndarray, np.ndarray]] = []
        self._i = self._j = 0

    def rewind(self) -> None:
        self._i = self._j = 0

    def score(self, h):
        if self.kind != "g3":
            return self.inner.score(h)
        if self.record:
            self._h.append(h.data.copy())
        elif self.replay:
            h = tc.Tensor(self._h[self._i])
            self._i += 1
        return self.inner.score(h)

    def macs_per_token(self) -> int:
        return self.inner.macs_per_token()

    def targets(self, h_full, h_cheap):
        zf, zc = self.inner.targets(h_full, h_cheap)
        if self.record:
            self._z.append((zf.data.copy(), zc.data.copy()))
        elif self.replay:
            zf, zc = (tc.Tensor(z) for z in self._z[self._j])
            self._j += 1
        return zf, zc


def _loss_fn(s: SmallSetup, term: str, rng: np.random.Generator):
    """Scalar loss closure.  Under a tape it uses the straight-through gate;
    without one (finite differences) it replays the routing and the
    stop-gradient inputs frozen at the base point, which is the function whose
    derivative the surrogate reports."""
    ctrl = _FrozenInputs(s.controller)
    with tc.no_tape():
        _, traces = s.model.forward(s.tokens, controller=ctrl, gate=s.gate)
        for tr in traces:
            if ctrl.kind == "g3":
                ctrl.targets(tr.h_full, tr.h_cheap)
    ctrl.record = False
    replay = [(tr.m_hard, tr.m_hard - tr.p.data) for tr in traces]
    labels = utility_labels(s.model, s.tokens, OracleConfig(), s.controller, s.gate)
    pairs = sample_pairs(labels, 64, rng)
    weights = LossWeights(jepa=1.0 if s.gate_kind == "g3" else 0.0)

    def f():
        frozen = None if tc.active_tape() is not None else replay
        ctrl.replay = frozen is not None
        ctrl.rewind()
        logits, trs = s.model.forward(s.tokens, controller=ctrl, gate=s.gate,
                                      frozen_routing=frozen)
        p_means = [tc.mean(tr.p) for tr in trs]
        scores = [tr.u for tr in trs]
        parts = {
            "lm": tc.mean(tc.cross_entropy(logits[:, :-1], s.tokens[:, 1:])),
            "budget": budget_loss(p_means, s.gate.budget),
            "alive": alive_loss(p_means, s.gate.min_alive),
            "util": huber_util_loss(scores, labels, 1.0),
            "rank": pairwise_rank_loss(scores, labels, rng, pairs=pairs),
        }
        if s.gate_kind == "g3":
            parts["jepa"] = layer_mean([
                jepa_loss(tr.extras["q_full"], tr.extras["q_cheap"],
                          *ctrl.targets(tr.h_full, tr.h_cheap)) for tr in trs])
        if term == "total":
            return total_loss(parts, weights)
        return parts[term]

    return f


@dataclass
class FDResult:
    config: int
    gate: str
    term: str
    max_rel_err: float
    n_checked: int


def fd_suite(n_configs: int = 20, seed: int = 0, n_coords: int = 4, h: float = 1e-5) -> list[FDResult]:
    """Gradient check of every loss term on ``n_configs`` random 64-bit configs,
    alternating the two controller families."""
    rng = np.random.default_rng(seed)
    out = []
    for c in range(n_configs):
        kind = ("g1", "g3")[c % 2]
        s = small_setup(rng, kind)
        wrt = {n: s.params[n] for n in sorted(trainable_names(s.params, kind))}
        for term in FD_TERMS:
            if term == "jepa" and kind != "g3":
                continue
            rep = tc.finite_difference_check(_loss_fn(s, term, rng), wrt, n_coords=n_coords,
                                             h=h, rng=rng)
            out.append(FDResult(c, kind, term, rep.max_rel_err, rep.n_checked))
    return out


def st_identity(n_draws: int = 100, seed: int = 1, dtype: str = "float64") -> float:
    """Largest |training logits - inference logits| over random draws."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(n_draws):
        s = small_setup(rng, ("g1", "g3")[i % 2], dtype=dtype)
        with tc.Tape():
            for t in s.params.values():
                t.requires_grad = True
            train_logits, _ = s.model.forward(s.tokens, controller=s.controller, gate=s.gate)
        infer_logits = s.model.inference_forward(s.tokens, s.controller, s.gate)
        worst = max(worst, float(np.max(np.abs(train_logits.data - infer_logits.data))))
    return worst


def zero_init_identity(n_draws: int = 10, seed: int = 2) -> float:
    """Largest |h_out - a| at controlled layers forced cheap, fresh cheap path."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_draws):
        s = small_setup(rng, "g1", warm_cheap=False)
        with tc.no_tape():
            _, traces = s.model.forward(s.tokens, plan=[CHEAP] * s.cfg.n_controlled)
        for tr in traces:
            worst = max(worst, float(np.max(np.abs(tr.h_out.data - tr.a.data))))
    return worst
