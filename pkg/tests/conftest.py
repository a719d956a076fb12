"""Shared fixtures: a tiny fast configuration, lazily executed desk-scale runs,
and the per-criterion PASS/FAIL summary for the acceptance suite."""
from __future__ import annotations

import os
from dataclasses import replace
from pathlib import Path

import pytest

from condepth.backbone import ModelConfig
from condepth.gating import GateConfig
from condepth.harness.corpus import CorpusSpec, ingest_corpus
from condepth.oracle import OracleConfig
from condepth.tapecore import OptimConfig
from condepth.trainer import ExperimentConfig, PretrainConfig, experiment, run_experiment, shared_backbone

TINY_MODEL = ModelConfig(n_layers=2, n_controlled=2, d_model=16, n_heads=2, d_ff=32, cheap_rank=4,
                         vocab_size=256, seq_len=16, d_context=4, d_summary=4, d_action=2,
                         init_std=0.05, dtype="float64")
TINY_CORPUS = CorpusSpec(seq_len=16, synthetic_bytes=40_000)


def tiny_config(name: str = "g3", gate: str = "g3", **kw) -> ExperimentConfig:
    base = dict(name=name, gate=gate, seed=3, steps=20, eval_every=5, batch_size=4, eval_batches=2,
                model=TINY_MODEL, corpus=TINY_CORPUS,
                optim=OptimConfig(lr=1e-3, warmup_steps=2, total_steps=20),
                oracle=OracleConfig(warmup=5, refresh_every=5, rank_pairs=32),
                gate_cfg=GateConfig(budget=0.5),
                pretrain=PretrainConfig(steps=30, batch_size=8, lr=3e-3, warmup_steps=3))
    base.update(kw)
    return ExperimentConfig(**base)


@pytest.fixture(scope="session")
def tiny_corpus():
    return ingest_corpus(TINY_CORPUS)


@pytest.fixture(scope="session")
def tiny_backbone(tmp_path_factory, tiny_corpus):
    return shared_backbone(tiny_config(), tmp_path_factory.mktemp("tiny_cache"), tiny_corpus)


# ------------------------------------------------------------- desk runs

class DeskRuns:
    """Desk-scale runs with the default configuration, executed on first use and
    shared across the session.  ``CONDEPTH_TEST_RUNS`` names a directory to keep
    them in; otherwise a session temp dir is used."""

    def __init__(self, root: Path) -> None:
        self.root = root
        self.cache = root / "_cache"
        self._corpus = None
        self._backbone = None
        self._runs = {}

    @property
    def corpus(self):
        if self._corpus is None:
            self._corpus = ingest_corpus(experiment("g3").corpus)
        return self._corpus

    @property
    def backbone(self):
        if self._backbone is None:
            self._backbone = shared_backbone(experiment("g3"), self.cache, self.corpus)
        return self._backbone

    def run(self, name: str, seed: int = 42, **overrides):
        key = (name, seed, tuple(sorted(overrides.items())))
        if key not in self._runs:
            cfg = replace(experiment(name, seed), **overrides)
            out = self.root / ("default" if not overrides else "variant")
            self._runs[key] = run_experiment(cfg, out_dir=out, backbone=self.backbone, corpus=self.corpus)
        return self._runs[key]


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = os.environ.get("CONDEPTH_TEST_RUNS")
    root = Path(root) if root else tmp_path_factory.mktemp("desk")
    root.mkdir(parents=True, exist_ok=True)
    return DeskRuns(root)


# --------------------------------------------------------- criterion report

_CRITERIA: dict[int, dict] = {}


@pytest.fixture
def criterion(request):
    """Register the running acceptance test under a criterion number; the
    returned callable attaches a one-line measurement to the summary."""
    marker = request.node.get_closest_marker("criterion")
    num, title = marker.args
    entry = _CRITERIA.setdefault(num, {"title": title, "nodes": {}, "notes": []})
    entry["nodes"].setdefault(request.node.nodeid, None)
    return entry["notes"].append


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(num, title): acceptance criterion")


def pytest_runtest_logreport(report):
    for entry in _CRITERIA.values():
        if report.nodeid in entry["nodes"]:
            prev = entry["nodes"][report.nodeid]
            if report.when == "call" or report.failed:
                entry["nodes"][report.nodeid] = prev if prev is False else report.passed


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for num in sorted(_CRITERIA):
        entry = _CRITERIA[num]
        ok = all(v is True for v in entry["nodes"].values())
        notes = "; ".join(entry["notes"])
        tr.write_line(f"{'PASS' if ok else 'FAIL'} {num:2d}. {entry['title']}"
                      + (f"  [{notes}]" if notes else ""))
