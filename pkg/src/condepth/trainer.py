"""Loss assembly, the controller-only parameter partition, train/eval loops and
experiment execution.

A run loads (or builds) the shared dense backbone, adds a cheap path and a
controller, freezes everything else, and trains for ``steps`` steps.  Every
step appends one JSON line to ``log.jsonl``; eval points append
``{"kind": "eval", "step", "eval_lm_loss"}`` lines.  A ``summary.json`` and a
``config.toml`` snapshot are written next to the log.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import subprocess
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Iterator, Mapping

import numpy as np

from . import tapecore as tc
from .backbone import FULL, ConditionalLM, ExecCounter, ModelConfig, init_backbone, init_cheap_path, \
    load_checkpoint, save_checkpoint
from .controllers import build_controller, jepa_loss, layer_mean, shuffle_targets
from .gating import GateConfig, alive_loss, budget_loss
from .harness.corpus import Corpus, CorpusSpec, ingest_corpus, train_batches, val_batches
from .metrics import CostModel, RunAccounting, collapse_diag, compute_proxy, grad_norm_mean, \
    lm_summary, score_variance
from .oracle import OracleConfig, huber_util_loss, labels_due, pairwise_rank_loss, utility_labels
from .tapecore import ConfigError, OptimConfig, ParamStore, Tensor

GATE_KINDS = ("g1", "g1_costmatch", "g3")
DIAG_TAIL = 50


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    jepa: float = 1.0
    util: float = 1.0
    rank: float = 0.2
    budget: float = 1.0
    alive: float = 0.5

    def __post_init__(self) -> None:
        if min(asdict(self).values()) < 0:
            raise ConfigError("loss weights must be nonnegative")

    @property
    def uses_oracle(self) -> bool:
        return self.util > 0 or self.rank > 0


@dataclass(frozen=True)
class PretrainConfig:
    """Dense backbone phase shared by every run with the same model and corpus."""

    steps: int = 1500
    batch_size: int = 16
    lr: float = 3e-3
    warmup_steps: int = 150
    seed: int = 0


@dataclass(frozen=True)
class ExperimentConfig:
    name: str = "g3"
    gate: str = "g3"
    seed: int = 42
    steps: int = 2000
    eval_every: int = 100
    batch_size: int = 8
    eval_batches: int = 8
    a2_shuffled: bool = False
    thresholds: tuple[float, ...] = ()
    weights: LossWeights = field(default_factory=LossWeights)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    gate_cfg: GateConfig = field(default_factory=GateConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=lambda: OptimConfig(warmup_steps=100, total_steps=2000))
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    corpus: CorpusSpec = field(default_factory=CorpusSpec)

    def __post_init__(self) -> None:
        if self.gate not in GATE_KINDS:
            raise ConfigError(f"gate must be one of {GATE_KINDS}, got {self.gate!r}")
        if self.a2_shuffled and self.gate != "g3":
            raise ConfigError("target shuffling applies to the g3 gate only")
        if min(self.steps, self.eval_every, self.batch_size, self.eval_batches) < 1:
            raise ConfigError("steps, eval_every, batch_size and eval_batches must be >= 1")
        if self.corpus.seq_len != self.model.seq_len:
            raise ConfigError("corpus and model seq_len differ")

    def to_dict(self) -> dict[str, Any]:
        d = asdict(self)
        d["thresholds"] = list(self.thresholds)
        d["optim"]["betas"] = list(self.optim.betas)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ExperimentConfig":
        sections = {"weights": LossWeights, "oracle": OracleConfig, "gate_cfg": GateConfig,
                    "model": ModelConfig, "optim": OptimConfig, "pretrain": PretrainConfig,
                    "corpus": CorpusSpec}
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {}
        for k, v in d.items():
            if k in sections:
                sub_known = {f.name for f in dataclasses.fields(sections[k])}
                bad = set(v) - sub_known
                if bad:
                    raise ConfigError(f"unknown keys in [{k}]: {sorted(bad)}")
                v = dict(v)
                if k == "optim" and "betas" in v:
                    v["betas"] = tuple(v["betas"])
                kw[k] = sections[k](**v)
            elif k == "thresholds":
                kw[k] = tuple(float(x) for x in v)
            else:
                kw[k] = v
        return cls(**kw)


# ------------------------------------------------------------ named grid

MAIN_SEEDS = (42, 123, 7)


def _exp(name, gate="g3", **kw) -> ExperimentConfig:
    return ExperimentConfig(name=name, gate=gate, **kw)


EXPERIMENTS: dict[str, ExperimentConfig] = {
    "g1-base": _exp("g1-base", "g1"),
    "g1-costmatch": _exp("g1-costmatch", "g1_costmatch"),
    "g3": _exp("g3"),
    "a1": _exp("a1", weights=LossWeights(jepa=0.0)),
    "a2": _exp("a2", a2_shuffled=True),
    "a3-g3": _exp("a3-g3", weights=LossWeights(util=0.0, rank=0.0)),
    "a3-g1": _exp("a3-g1", "g1", weights=LossWeights(util=0.0, rank=0.0)),
    "a4-025": _exp("a4-025", weights=LossWeights(jepa=0.25)),
    "a4-200": _exp("a4-200", weights=LossWeights(jepa=2.0)),
    "g1-b25": _exp("g1-b25", "g1", gate_cfg=GateConfig(budget=0.25)),
    "g3-b25": _exp("g3-b25", gate_cfg=GateConfig(budget=0.25)),
}

SEED_PLAN: dict[str, tuple[int, ...]] = {
    name: (42,) if name == "g1-costmatch" else (42, 123) if name.endswith("-b25") else MAIN_SEEDS
    for name in EXPERIMENTS
}


def experiment(name: str, seed: int = 42) -> ExperimentConfig:
    if name not in EXPERIMENTS:
        raise ConfigError(f"unknown experiment {name!r}; valid: {', '.join(EXPERIMENTS)}")
    return replace(EXPERIMENTS[name], seed=seed)


def with_steps(cfg: ExperimentConfig, steps: int, eval_every: int | None = None) -> ExperimentConfig:
    """Shorten or lengthen a run, keeping warmups at the same 5% of the run."""
    warm = max(1, steps // 20)
    return replace(cfg, steps=steps, eval_every=eval_every or max(1, steps // 20),
                   optim=replace(cfg.optim, warmup_steps=warm, total_steps=steps),
                   oracle=replace(cfg.oracle, warmup=warm))


# ---------------------------------------------------------------- losses

LOSS_TERMS = ("lm", "jepa", "util", "rank", "budget", "alive")


def total_loss(parts: Mapping[str, Any], weights: LossWeights):
    """``lm + sum_k lambda_k * part_k``; zero-weight and missing terms are skipped."""
    coef = {"lm": 1.0, "jepa": weights.jepa, "util": weights.util, "rank": weights.rank,
            "budget": weights.budget, "alive": weights.alive}
    total = None
    for k in LOSS_TERMS:
        part = parts.get(k)
        if coef[k] == 0 or part is None:
            continue
        term = part if coef[k] == 1.0 else part * coef[k]
        total = term if total is None else total + term
    if total is None:
        raise ConfigError("no loss terms")
    return total


def trainable_names(names, gate: str) -> set[str]:
    """Cheap FFNs, cheap-path norms and the controller (never the target head)."""
    prefix = "g3." if gate == "g3" else "g1."
    return {n for n in names
            if ".cheap_ffn." in n or ".ln2_cheap." in n
            or (n.startswith(prefix) and n != "g3.target_head")}


def build_partition(params: Mapping[str, Tensor], gate: str) -> ParamStore:
    return ParamStore(params, trainable_names(params, gate))


# --------------------------------------------------------------- records

@dataclass
class StepRecord:
    step: int
    lm_loss: float
    jepa_loss: float
    util_loss: float
    rank_loss: float
    budget_loss: float
    alive_loss: float
    total: float
    grad_norm: float
    lr: float
    mean_gate_prob: list[float]
    full_ratio: list[float]
    diag_qf_qc_l2: float | None
    diag_qf_qc_cos: float | None
    diag_util_score_var: float
    compute_units: float
    labels: bool
    oracle_passes: int

    def to_json(self) -> dict[str, Any]:
        d = asdict(self)
        d["kind"] = "train"
        return d

    def finite(self) -> bool:
        vals = [v for k, v in asdict(self).items() if isinstance(v, float)]
        vals += self.mean_gate_prob + self.full_ratio
        return all(math.isfinite(v) for v in vals)


# ----------------------------------------------------------------- state

@dataclass
class RunState:
    cfg: ExperimentConfig
    model: ConditionalLM
    controller: Any
    store: ParamStore
    cost: CostModel
    counter: ExecCounter
    rng_pairs: np.random.Generator
    rng_shuffle: np.random.Generator
    step: int = 0


def _copy_params(params: Mapping[str, Tensor], dtype) -> dict[str, Tensor]:
    return {n: Tensor(np.array(t.data, dtype=dtype, copy=True)) for n, t in params.items()}


def init_state(cfg: ExperimentConfig, backbone: Mapping[str, Tensor]) -> RunState:
    mc = cfg.model
    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    rng_init, rng_pairs, rng_shuffle = (np.random.default_rng(s) for s in seeds)
    params = _copy_params(backbone, mc.np_dtype)
    params.update(init_cheap_path(mc, rng_init))
    controller, cparams = build_controller(cfg.gate, mc, rng_init)
    model = ConditionalLM(mc, params)
    store = build_partition({**params, **cparams}, cfg.gate)
    hidden = cparams["g1.w1"].shape[1] if "g1.w1" in cparams else None
    cost = CostModel.for_controller(mc, cfg.gate, g1_hidden=hidden)
    return RunState(cfg, model, controller, store, cost, ExecCounter(), rng_pairs, rng_shuffle)


def train_step(state: RunState, batch: np.ndarray) -> StepRecord:
    cfg, model, ctrl = state.cfg, state.model, state.controller
    w, gate = cfg.weights, cfg.gate_cfg
    state.step += 1
    step = state.step
    n_tok = batch.size
    before = dataclasses.replace(state.counter)
    with tc.Tape() as tape:
        logits, traces = model.forward(batch, controller=ctrl, gate=gate, counter=state.counter)
        lm = tc.mean(tc.cross_entropy(logits[:, :-1], batch[:, 1:]))
        scores = [tr.u for tr in traces]
        p_means = [tc.mean(tr.p) for tr in traces]
        parts: dict[str, Any] = {"lm": lm, "budget": budget_loss(p_means, gate.budget),
                                 "alive": alive_loss(p_means, gate.min_alive)}
        jepa_val = 0.0
        if cfg.gate == "g3":
            if w.jepa > 0:
                parts["jepa"] = _jepa(state, traces)
                state.counter.target += n_tok * len(traces)
                jepa_val = float(parts["jepa"].data)
            else:
                with tc.no_tape():
                    jepa_val = float(_jepa(state, traces).data)
        labels = None
        if w.uses_oracle and labels_due(step, cfg.oracle):
            labels = utility_labels(model, batch, cfg.oracle, controller=ctrl, gate=gate,
                                    counter=state.counter)
            parts["util"] = huber_util_loss(scores, labels, cfg.oracle.huber_delta)
            parts["rank"] = pairwise_rank_loss(scores, labels, state.rng_pairs, cfg.oracle.rank_pairs)
        total = total_loss(parts, w)
    rec_vals = {k: float(parts[k].data) if k in parts else 0.0 for k in LOSS_TERMS}
    rec_vals["jepa"] = jepa_val
    if not math.isfinite(float(total.data)):
        raise TrainingDiverged(f"non-finite loss at step {step}: {rec_vals}")
    grads = tc.backward(tape, total, state.store.trainable_tensors())
    grads, pre_norm = tc.clip_global_norm(grads, cfg.optim.clip_norm)
    if not math.isfinite(pre_norm):
        raise TrainingDiverged(f"non-finite gradient norm at step {step}: {rec_vals}")
    lr = tc.adamw_step(state.store, grads, step, cfg.optim)

    delta = ExecCounter(*(getattr(state.counter, k) - getattr(before, k)
                          for k in ("full", "cheap", "controller", "target", "oracle_passes")))
    l2 = cos = None
    if cfg.gate == "g3":
        diags = [collapse_diag(tr.extras["q_full"].data, tr.extras["q_cheap"].data) for tr in traces]
        l2 = float(np.mean([d[0] for d in diags]))
        cos = float(np.mean([d[1] for d in diags]))
    rec = StepRecord(
        step=step, lm_loss=rec_vals["lm"], jepa_loss=rec_vals["jepa"], util_loss=rec_vals["util"],
        rank_loss=rec_vals["rank"], budget_loss=rec_vals["budget"], alive_loss=rec_vals["alive"],
        total=float(total.data), grad_norm=float(pre_norm), lr=float(lr),
        mean_gate_prob=[float(tr.p.data.mean()) for tr in traces],
        full_ratio=[float(tr.m_hard.mean()) for tr in traces],
        diag_qf_qc_l2=l2, diag_qf_qc_cos=cos,
        diag_util_score_var=float(np.mean([score_variance(tr.u.data) for tr in traces])),
        compute_units=float(state.cost.units(delta)),
        labels=labels is not None, oracle_passes=delta.oracle_passes,
    )
    if not rec.finite():
        raise TrainingDiverged(f"non-finite record at step {step}: {rec.to_json()}")
    return rec


def _jepa(state: RunState, traces) -> Tensor:
    losses = []
    for tr in traces:
        zf, zc = state.controller.targets(tr.h_full, tr.h_cheap)
        if state.cfg.a2_shuffled:
            zf, zc, _ = shuffle_targets(zf, zc, state.rng_shuffle)
        losses.append(jepa_loss(tr.extras["q_full"], tr.extras["q_cheap"], zf, zc))
    return layer_mean(losses)


def evaluate(state: RunState, batches: list[np.ndarray]) -> float:
    """Mean next-token CE over the validation batches on the hard-routing path."""
    total = 0.0
    for b in batches:
        logits = state.model.inference_forward(b, state.controller, state.cfg.gate_cfg)
        with tc.no_tape():
            total += float(tc.mean(tc.cross_entropy(logits[:, :-1], b[:, 1:])).data)
    return total / len(batches)


def evaluate_full(model: ConditionalLM, batches: list[np.ndarray]) -> float:
    """Reference loss with every controlled layer forced full."""
    total = 0.0
    with tc.no_tape():
        for b in batches:
            logits, _ = model.forward(b, plan=[FULL] * model.cfg.n_controlled)
            total += float(tc.mean(tc.cross_entropy(logits[:, :-1], b[:, 1:])).data)
    return total / len(batches)


# ------------------------------------------------------------- pretraining

def pretrain_key(model: ModelConfig, pre: PretrainConfig, corpus: CorpusSpec) -> str:
    blob = json.dumps({"model": asdict(model), "pretrain": asdict(pre), "corpus": asdict(corpus)},
                      sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def pretrain_backbone(model_cfg: ModelConfig, pre: PretrainConfig, corpus: Corpus,
                      log=None) -> dict[str, Tensor]:
    """Train the dense model (every parameter, all layers full) from scratch."""
    rng_init, rng_data = (np.random.default_rng(s) for s in np.random.SeedSequence(pre.seed).spawn(2))
    params = init_backbone(model_cfg, rng_init)
    model = ConditionalLM(model_cfg, params)
    store = ParamStore(params, params.keys())
    optim = OptimConfig(lr=pre.lr, warmup_steps=pre.warmup_steps, total_steps=pre.steps)
    plan = [FULL] * model_cfg.n_controlled
    stream = train_batches(corpus.train, pre.batch_size, rng_data)
    for step in range(1, pre.steps + 1):
        batch = next(stream)
        with tc.Tape() as tape:
            logits, _ = model.forward(batch, plan=plan)
            loss = tc.mean(tc.cross_entropy(logits[:, :-1], batch[:, 1:]))
        if not math.isfinite(float(loss.data)):
            raise TrainingDiverged(f"pretraining diverged at step {step}")
        grads, _ = tc.clip_global_norm(tc.backward(tape, loss, store.trainable_tensors()), optim.clip_norm)
        tc.adamw_step(store, grads, step, optim)
        if log is not None and (step % 100 == 0 or step == pre.steps):
            log(f"pretrain step {step}/{pre.steps} lm {float(loss.data):.4f}")
    for t in params.values():
        t.requires_grad = False
    return params


def shared_backbone(cfg: ExperimentConfig, cache_dir: str | Path, corpus: Corpus | None = None,
                    log=None) -> dict[str, Tensor]:
    """Load the cached dense checkpoint for this model/pretrain/corpus, building it once."""
    path = Path(cache_dir) / f"backbone-{pretrain_key(cfg.model, cfg.pretrain, cfg.corpus)}.ckpt"
    if path.exists():
        params, _ = load_checkpoint(path)
        return params
    corpus = corpus if corpus is not None else ingest_corpus(cfg.corpus)
    params = pretrain_backbone(cfg.model, cfg.pretrain, corpus, log=log)
    tmp = path.with_suffix(".tmp")
    save_checkpoint(tmp, params, {"model": asdict(cfg.model), "pretrain": asdict(cfg.pretrain),
                                  "corpus": asdict(cfg.corpus)})
    tmp.replace(path)
    return params


# -------------------------------------------------------------- full runs

def version_string() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return out.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    from . import __version__
    return __version__


def run_dir_for(root: str | Path, cfg: ExperimentConfig) -> Path:
    return Path(root) / cfg.name / f"seed{cfg.seed}"


@dataclass
class RunResult:
    records: list[StepRecord]
    evals: list[tuple[int, float]]
    summary: dict[str, Any]
    run_dir: Path | None


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None,
                   backbone: Mapping[str, Tensor] | None = None, corpus: Corpus | None = None,
                   cache_dir: str | Path | None = None, log=None) -> RunResult:
    """Train one configuration and write its log, config snapshot and summary.

    With ``out_dir=None`` nothing is written and the result is only returned.
    """
    t0 = time.perf_counter()
    corpus = corpus if corpus is not None else ingest_corpus(cfg.corpus)
    if backbone is None:
        if cache_dir is None:
            raise ConfigError("need a backbone or a cache_dir to build one")
        backbone = shared_backbone(cfg, cache_dir, corpus, log=log)
    state = init_state(cfg, backbone)
    frozen_before = state.store.fingerprint()
    val = val_batches(corpus.val, cfg.batch_size, cfg.eval_batches)
    data_rng = np.random.default_rng(np.random.SeedSequence(cfg.seed).spawn(4)[3])
    stream: Iterator[np.ndarray] = train_batches(corpus.train, cfg.batch_size, data_rng)
    full_ref = evaluate_full(state.model, val)

    run_dir = None
    fh = None
    if out_dir is not None:
        run_dir = run_dir_for(out_dir, cfg)
        try:
            run_dir.mkdir(parents=True, exist_ok=True)
            from .harness.configio import write_config
            write_config(run_dir / "config.toml", cfg)
            fh = open(run_dir / "log.jsonl", "w")
        except OSError as e:
            raise OSError(f"{run_dir}: cannot write run files ({e})") from e

    records: list[StepRecord] = []
    evals: list[tuple[int, float]] = []
    try:
        for _ in range(cfg.steps):
            try:
                rec = train_step(state, next(stream))
            except TrainingDiverged as e:
                if run_dir is not None:
                    (run_dir / "diverged.txt").write_text(f"{e}\n")
                raise
            records.append(rec)
            if fh is not None:
                fh.write(json.dumps(rec.to_json()) + "\n")
            if rec.step % cfg.eval_every == 0 or rec.step == cfg.steps:
                ev = evaluate(state, val)
                evals.append((rec.step, ev))
                if fh is not None:
                    fh.write(json.dumps({"kind": "eval", "step": rec.step, "eval_lm_loss": ev}) + "\n")
                    fh.flush()
                if log is not None:
                    log(f"{cfg.name} seed {cfg.seed} step {rec.step} eval_lm {ev:.4f}")
    finally:
        if fh is not None:
            fh.close()

    summary = summarize_run(cfg, state, records, evals, full_ref)
    summary["frozen_unchanged"] = state.store.fingerprint() == frozen_before
    summary["wall_seconds"] = round(time.perf_counter() - t0, 3)
    if run_dir is not None:
        (run_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(records, evals, summary, run_dir)


def summarize_run(cfg: ExperimentConfig, state: RunState, records: list[StepRecord],
                  evals: list[tuple[int, float]], full_ref: float) -> dict[str, Any]:
    windows = {"avg_lm_0_half": cfg.steps // 2, "avg_lm_0_full": cfg.steps}
    summ = lm_summary(evals, cfg.thresholds, windows)
    tokens = cfg.batch_size * cfg.model.seq_len
    compute, infer = compute_proxy(RunAccounting(state.counter, len(records), tokens,
                                                 cfg.gate_cfg.budget), state.cost)
    tail = records[-DIAG_TAIL:]

    def tail_mean(key):
        vals = [getattr(r, key) for r in tail]
        if any(v is None for v in vals):
            return None
        return float(np.mean(vals))

    summ.update({
        "name": cfg.name,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "version": version_string(),
        "steps": len(records),
        "grad_norm_mean": grad_norm_mean([r.grad_norm for r in records]),
        "compute_vs_full": compute,
        "infer_vs_full": infer,
        "oracle_passes": state.counter.oracle_passes,
        "label_steps": sum(r.labels for r in records),
        "eval_lm_full_reference": full_ref,
        "first_eval_lm": evals[0][1] if evals else None,
        "n_trainable": state.store.n_trainable(),
        "final": {
            "diag_qf_qc_l2": tail_mean("diag_qf_qc_l2"),
            "diag_qf_qc_cos": tail_mean("diag_qf_qc_cos"),
            "diag_util_score_var": tail_mean("diag_util_score_var"),
            "mean_gate_prob": float(np.mean([np.mean(r.mean_gate_prob) for r in tail])),
            "full_ratio": float(np.mean([np.mean(r.full_ratio) for r in tail])),
            "jepa_loss": tail_mean("jepa_loss"),
        },
    })
    return summ


def read_log(path: str | Path) -> tuple[list[dict[str, Any]], list[tuple[int, float]]]:
    """Split a run log into train records and ``(step, eval_lm)`` points."""
    train, evals = [], []
    with open(path) as fh:
        for line in fh:
            rec = json.loads(line)
            if rec.get("kind") == "eval":
                evals.append((int(rec["step"]), float(rec["eval_lm_loss"])))
            else:
                train.append(rec)
    return train, evals
