"""Diagnostics, LM summary metrics, seed aggregation and the FFN-equivalent cost proxy."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .backbone import ExecCounter, ModelConfig
from .controllers import G3Dims, costmatch_hidden, g1_param_count
from .tapecore import COSINE_EPS, UsageError


# ----------------------------------------------------------- diagnostics

def collapse_diag(q_full: np.ndarray, q_cheap: np.ndarray) -> tuple[float, float]:
    """Token-mean L2 distance and cosine between paired action summaries."""
    qf = np.asarray(q_full, dtype=np.float64).reshape(-1, np.shape(q_full)[-1])
    qc = np.asarray(q_cheap, dtype=np.float64).reshape(qf.shape)
    l2 = np.linalg.norm(qf - qc, axis=-1)
    den = np.maximum(np.linalg.norm(qf, axis=-1) * np.linalg.norm(qc, axis=-1), COSINE_EPS)
    cos = np.sum(qf * qc, axis=-1) / den
    return float(l2.mean()), float(cos.mean())


def score_variance(u: np.ndarray) -> float:
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    if u.size < 2:
        raise UsageError("score variance needs at least two scores")
    return float(np.var(u))


def grad_norm_mean(norms: Sequence[float]) -> float:
    if len(norms) == 0:
        raise UsageError("no gradient norms recorded")
    return float(np.mean(np.asarray(norms, dtype=np.float64)))


# ------------------------------------------------------------ LM summary

def first_hit(curve: Sequence[tuple[int, float]], threshold: float) -> int | None:
    """First step whose eval loss is at or below ``threshold``; None if never."""
    for step, value in curve:
        if value <= threshold:
            return int(step)
    return None


def lm_summary(curve: Sequence[tuple[int, float]], thresholds: Sequence[float] = (),
               windows: Mapping[str, int] | None = None) -> dict[str, Any]:
    """Best/endpoint/window averages/threshold hits of an eval curve.

    ``windows`` maps an output name to an inclusive step bound; the average uses
    the eval points with ``step <= bound``.
    """
    curve = sorted((int(s), float(v)) for s, v in curve)
    if not curve:
        raise UsageError("empty eval curve")
    values = [v for _, v in curve]
    out: dict[str, Any] = {"best_eval_lm": min(values), "endpoint_eval_lm": values[-1]}
    for name, bound in (windows or {}).items():
        pts = [v for s, v in curve if s <= bound]
        out[name] = float(np.mean(pts)) if pts else None
    out["hits"] = {f"{th:.6g}": first_hit(curve, th) for th in thresholds}
    return out


def pilot_thresholds(curve: Sequence[tuple[int, float]],
                     fractions: Sequence[float] = (0.3, 0.2, 0.1)) -> list[float]:
    """``best + f * (worst - best)`` for each fraction: easy, medium, hard tiers."""
    values = np.array([v for _, v in curve], dtype=np.float64)
    lo, hi = values.min(), values.max()
    return [float(lo + f * (hi - lo)) for f in fractions]


# -------------------------------------------------------- seed aggregation

def _config_key(summary: Mapping[str, Any]) -> Any:
    cfg = dict(summary.get("config", {}))
    cfg.pop("seed", None)
    return repr(sorted(cfg.items()))


def _flatten(summary: Mapping[str, Any], fields: Iterable[str] | None) -> dict[str, Any]:
    flat = {}
    for k, v in summary.items():
        if k in ("config", "seed", "version"):
            continue
        if isinstance(v, Mapping):
            for kk, vv in v.items():
                flat[f"{k}.{kk}"] = vv
        else:
            flat[k] = v
    if fields is not None:
        flat = {k: flat.get(k) for k in fields}
    return flat


def aggregate_seeds(summaries: Sequence[Mapping[str, Any]],
                    fields: Iterable[str] | None = None) -> dict[str, dict[str, Any]]:
    """Mean and sample std (ddof=1) per numeric field across seeds.

    A field missing (None) in any seed aggregates to None, matching the
    "never hit" reading of threshold columns.
    """
    if len(summaries) < 2:
        raise UsageError("aggregation needs at least two summaries")
    keys = {_config_key(s) for s in summaries}
    if len(keys) != 1:
        raise UsageError("summaries differ in more than the seed")
    flats = [_flatten(s, fields) for s in summaries]
    names = fields if fields is not None else sorted(set().union(*flats))
    out = {}
    for name in names:
        vals = [f.get(name) for f in flats]
        if any(v is None or isinstance(v, (str, list, bool)) for v in vals):
            out[name] = {"mean": None, "std": None, "n": sum(v is not None for v in vals)}
            continue
        arr = np.asarray(vals, dtype=np.float64)
        out[name] = {"mean": float(arr.mean()), "std": float(arr.std(ddof=1)), "n": len(vals)}
    return out


def paired_deltas(a: Sequence[Mapping[str, Any]], b: Sequence[Mapping[str, Any]],
                  field: str) -> dict[str, Any]:
    """Per-seed ``a - b`` for ``field``, matched on seed, with a direction count."""
    by_seed = {s["seed"]: _flatten(s, None).get(field) for s in b}
    deltas = {}
    for s in a:
        seed = s["seed"]
        if seed in by_seed:
            va, vb = _flatten(s, None).get(field), by_seed[seed]
            deltas[seed] = None if va is None or vb is None else float(va) - float(vb)
    if not deltas:
        raise UsageError("no seeds in common")
    real = [d for d in deltas.values() if d is not None]
    return {
        "deltas": deltas,
        "mean": float(np.mean(real)) if real else None,
        "negative": sum(d < 0 for d in real),
        "positive": sum(d > 0 for d in real),
        "n": len(deltas),
    }


# -------------------------------------------------------------- cost proxy

@dataclass(frozen=True)
class CostModel:
    """Costs in units of one full-FFN execution for one token at one controlled
    layer.  Only matrix-multiply MACs are counted."""

    d_model: int
    d_ff: int
    cheap_rank: int
    n_controlled: int
    controller_macs: int
    target_macs: int = 0

    @property
    def full_macs(self) -> int:
        return 2 * self.d_model * self.d_ff

    @property
    def cheap_cost(self) -> float:
        return self.cheap_rank / self.d_ff

    @property
    def controller_cost(self) -> float:
        return self.controller_macs / self.full_macs

    @property
    def target_cost(self) -> float:
        return self.target_macs / self.full_macs

    @classmethod
    def for_controller(cls, cfg: ModelConfig, kind: str, g1_hidden: int | None = None) -> "CostModel":
        dims = G3Dims.from_model(cfg)
        if kind in ("g1", "g1_costmatch"):
            if g1_hidden is None:
                g1_hidden = cfg.d_model // 4
                if kind == "g1_costmatch":
                    g1_hidden = max(g1_hidden, costmatch_hidden(cfg.d_model, dims.trainable_count()))
            ctrl, target = cfg.d_model * g1_hidden + g1_hidden, 0
        elif kind == "g3":
            ctrl, target = dims.macs_per_token(), dims.target_macs_per_token()
        else:
            raise UsageError(f"unknown controller kind {kind!r}")
        return cls(cfg.d_model, cfg.d_ff, cfg.cheap_rank, cfg.n_controlled, ctrl, target)

    def units(self, counter: ExecCounter) -> float:
        return (counter.full + counter.cheap * self.cheap_cost
                + counter.controller * self.controller_cost + counter.target * self.target_cost)


def infer_vs_full(cost: CostModel, budget: float) -> float:
    """Selected path only, plus the controller; the target head is training-only."""
    return budget + (1.0 - budget) * cost.cheap_cost + cost.controller_cost


def oracle_units_per_refresh(cost: CostModel, prefix: str = "full") -> float:
    """Oracle cost of one refresh, per controlled token-layer."""
    C = cost.n_controlled
    if prefix == "full":
        total = C + C * cost.cheap_cost + C * (C - 1) / 2
    else:
        total = sum(1 + 2 * (C - j - 1) for j in range(C)) + C * cost.cheap_cost \
            + (C - 1) * cost.controller_cost
    return total / C


def train_proxy(cost: CostModel, *, oracle: bool, jepa: bool, refresh_fraction: float,
                prefix: str = "full") -> float:
    """Expected training ``compute_vs_full``: both branches for every token,
    the controller, the target head when JEPA is evaluated, and amortised
    oracle refreshes."""
    per = 1.0 + cost.cheap_cost + cost.controller_cost + (cost.target_cost if jepa else 0.0)
    if oracle:
        per += refresh_fraction * oracle_units_per_refresh(cost, prefix)
    return per


@dataclass
class RunAccounting:
    counter: ExecCounter
    steps: int
    tokens_per_step: int
    budget: float


def compute_proxy(acc: RunAccounting, cost: CostModel) -> tuple[float, float]:
    """``(compute_vs_full, infer_vs_full)`` from a run's execution counters."""
    if acc.steps < 1:
        raise UsageError("no steps accounted")
    dense = acc.steps * cost.n_controlled * acc.tokens_per_step
    return cost.units(acc.counter) / dense, infer_vs_full(cost, acc.budget)


def isfinite_record(record: Mapping[str, Any]) -> bool:
    for v in record.values():
        if isinstance(v, float) and not math.isfinite(v):
            return False
        if isinstance(v, list) and any(isinstance(x, float) and not math.isfinite(x) for x in v):
            return False
    return True


__all__ = [
    "CostModel", "RunAccounting", "aggregate_seeds", "collapse_diag", "compute_proxy",
    "first_hit", "g1_param_count", "grad_norm_mean", "infer_vs_full", "lm_summary",
    "oracle_units_per_refresh", "paired_deltas", "pilot_thresholds", "score_variance",
    "train_proxy",
]
