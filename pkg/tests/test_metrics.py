import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from condepth.backbone import ExecCounter, ModelConfig
from condepth.metrics import (CostModel, RunAccounting, aggregate_seeds, collapse_diag, compute_proxy,
                              first_hit, grad_norm_mean, infer_vs_full, lm_summary,
                              oracle_units_per_refresh, paired_deltas, pilot_thresholds,
                              score_variance, train_proxy)
from condepth.tapecore import UsageError

REF = ModelConfig.reference()


def test_collapse_diag_by_hand():
    qf = np.array([[[3.0, 0.0], [1.0, 1.0]]])
    qc = np.array([[[0.0, 4.0], [1.0, 1.0]]])
    l2, cos = collapse_diag(qf, qc)
    assert l2 == pytest.approx(2.5)
    assert cos == pytest.approx(0.5)


def test_score_variance_and_grad_norm():
    assert score_variance(np.array([1.0, 3.0])) == 1.0
    assert grad_norm_mean([1.0, 2.0, 6.0]) == 3.0
    with pytest.raises(UsageError):
        score_variance(np.array([1.0]))
    with pytest.raises(UsageError):
        grad_norm_mean([])


CURVE = [(100, 5.0), (200, 4.0), (300, 4.5), (400, 3.2), (500, 3.3)]


@pytest.mark.parametrize("th,step", [(4.0, 200), (3.9, 400), (5.0, 100), (3.2, 400), (3.1, None)])
def test_first_hit_is_first_crossing(th, step):
    assert first_hit(CURVE, th) == step


def test_lm_summary_windows_and_hits():
    s = lm_summary(CURVE, thresholds=[4.2, 1.0], windows={"half": 250, "all": 500})
    assert s["best_eval_lm"] == 3.2 and s["endpoint_eval_lm"] == 3.3
    assert s["half"] == 4.5 and s["all"] == pytest.approx(4.0)
    assert s["hits"] == {"4.2": 200, "1": None}


def test_pilot_thresholds():
    assert pilot_thresholds(CURVE) == pytest.approx([3.2 + 0.3 * 1.8, 3.2 + 0.2 * 1.8, 3.2 + 0.1 * 1.8])


def _summ(seed, best, l2, hit, name="g3"):
    return {"name": name, "seed": seed, "config": {"name": name, "seed": seed, "steps": 10},
            "best_eval_lm": best, "final": {"diag_qf_qc_l2": l2}, "hits": {"easy": hit}}


def test_aggregate_seeds_exact_values():
    runs = [_summ(1, 2.0, 0.5, 100), _summ(2, 4.0, 0.25, 300), _summ(3, 6.0, 0.75, None)]
    agg = aggregate_seeds(runs, ["best_eval_lm", "final.diag_qf_qc_l2", "hits.easy"])
    assert agg["best_eval_lm"] == {"mean": 4.0, "std": 2.0, "n": 3}
    assert agg["final.diag_qf_qc_l2"]["mean"] == 0.5
    assert agg["final.diag_qf_qc_l2"]["std"] == 0.25
    assert agg["hits.easy"]["mean"] is None and agg["hits.easy"]["n"] == 2
    two = aggregate_seeds(runs[:2], ["hits.easy"])
    assert two["hits.easy"]["mean"] == 200.0
    assert two["hits.easy"]["std"] == pytest.approx(math.sqrt(2) * 100)


def test_aggregate_rejects_config_mismatch_and_single_run():
    a = _summ(1, 2.0, 0.5, 1)
    b = _summ(2, 2.0, 0.5, 1)
    b["config"]["steps"] = 11
    with pytest.raises(UsageError):
        aggregate_seeds([a, b])
    with pytest.raises(UsageError):
        aggregate_seeds([a])


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-100, 100), min_size=2, max_size=8))
def test_aggregate_matches_statistics_module(values):
    import statistics
    runs = [_summ(i, v, 0.0, None) for i, v in enumerate(values)]
    agg = aggregate_seeds(runs, ["best_eval_lm"])["best_eval_lm"]
    assert agg["mean"] == pytest.approx(statistics.fmean(values), abs=1e-9)
    assert agg["std"] == pytest.approx(statistics.stdev(values), abs=1e-9)


def test_paired_deltas_match_on_seed():
    a = [_summ(1, 3.0, 0, None, "a1"), _summ(2, 5.0, 0, None, "a1"), _summ(9, 1.0, 0, None, "a1")]
    b = [_summ(2, 4.0, 0, None), _summ(1, 3.5, 0, None)]
    d = paired_deltas(a, b, "best_eval_lm")
    assert d["deltas"] == {1: -0.5, 2: 1.0}
    assert d["mean"] == 0.25 and d["negative"] == 1 and d["positive"] == 1 and d["n"] == 2
    with pytest.raises(UsageError):
        paired_deltas(a, [_summ(5, 1.0, 0, None)], "best_eval_lm")


# ------------------------------------------------------------------ cost proxy

def test_cost_model_units_at_reference_dims():
    g1 = CostModel.for_controller(REF, "g1")
    assert g1.cheap_cost == 80 / 2560
    assert g1.controller_cost == (640 * 160 + 160) / (2 * 640 * 2560)
    g3 = CostModel.for_controller(REF, "g3")
    assert g3.target_cost == 640 * 64 / (640 * 2560)


def test_infer_vs_full_formula():
    g1 = CostModel.for_controller(REF, "g1", g1_hidden=160)
    expected = 0.5 + 0.5 * 80 / 2560 + (640 * 160 + 160) / (2 * 640 * 2560)
    assert infer_vs_full(g1, 0.5) == pytest.approx(expected, rel=1e-15)


def test_oracle_units_full_prefix_by_enumeration():
    cost = CostModel(8, 32, 4, 4, 10)
    # per refresh: one all-full pass (C) + per layer l: one cheap step and C-l-1 full suffix layers
    C = 4
    total = C + sum(cost.cheap_cost + (C - l - 1) for l in range(C))
    assert oracle_units_per_refresh(cost, "full") == pytest.approx(total / C)
    gate_total = sum(2 * (C - l - 1) + 1 + cost.cheap_cost for l in range(C)) + (C - 1) * cost.controller_cost
    assert oracle_units_per_refresh(cost, "gate") == pytest.approx(gate_total / C)


def test_train_proxy_components():
    cost = CostModel(8, 32, 4, 2, 16, target_macs=64)
    base = 1 + 4 / 32 + 16 / 512
    assert train_proxy(cost, oracle=False, jepa=False, refresh_fraction=0.2) == pytest.approx(base)
    assert train_proxy(cost, oracle=False, jepa=True, refresh_fraction=0.2) == pytest.approx(base + 64 / 512)
    assert train_proxy(cost, oracle=True, jepa=False, refresh_fraction=0.2) == pytest.approx(
        base + 0.2 * oracle_units_per_refresh(cost))


def test_compute_proxy_from_counter():
    cost = CostModel(8, 32, 4, 2, 16)
    c = ExecCounter(full=40, cheap=40, controller=40)
    comp, inf = compute_proxy(RunAccounting(c, steps=2, tokens_per_step=10, budget=0.5), cost)
    assert comp == pytest.approx((40 + 40 * 0.125 + 40 * 16 / 512) / 40)
    assert inf == pytest.approx(0.5 + 0.5 * 0.125 + 16 / 512)
    with pytest.raises(UsageError):
        compute_proxy(RunAccounting(c, 0, 10, 0.5), cost)
