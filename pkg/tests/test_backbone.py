import numpy as np
import pytest

from condepth import tapecore as tc
from condepth.backbone import (CHEAP, FULL, GATE, ConditionalLM, ExecCounter, ModelConfig,
                               init_backbone, init_cheap_path, load_checkpoint, save_checkpoint)
from condepth.controllers import build_controller
from condepth.gating import GateConfig
from condepth.tapecore import ConfigError, Tensor

CFG = ModelConfig(n_layers=3, n_controlled=2, d_model=8, n_heads=2, d_ff=16, cheap_rank=2,
                  vocab_size=13, seq_len=6, d_context=3, d_summary=3, d_action=2,
                  init_std=0.3, dtype="float64")


def _model(seed=0, warm=True):
    rng = np.random.default_rng(seed)
    p = init_backbone(CFG, rng)
    p.update(init_cheap_path(CFG, rng))
    if warm:
        for k, t in p.items():
            if k.endswith("cheap_ffn.down"):
                t.data = rng.normal(0, 0.3, t.shape)
    return ConditionalLM(CFG, p), p, rng


def _ln(x, w, b):
    mu = x.mean(-1, keepdims=True)
    var = ((x - mu) ** 2).mean(-1, keepdims=True)
    return (x - mu) / np.sqrt(var + 1e-5) * w + b


def _reference_dense(p, tokens):
    """Independent numpy forward of the all-full model."""
    t = tokens.shape[1]
    h = p["tok_emb"][tokens] + p["pos_emb"][:t]
    mask = np.tril(np.ones((t, t), bool))
    for i in range(CFG.n_layers):
        b = f"blocks.{i}"
        x = _ln(h, p[f"{b}.ln1.w"], p[f"{b}.ln1.b"])
        q, k, v = (x @ p[f"{b}.attn.{w}"] for w in ("wq", "wk", "wv"))
        outs = []
        for hd in range(CFG.n_heads):
            sl = slice(hd * 4, hd * 4 + 4)
            s = q[..., sl] @ np.swapaxes(k[..., sl], -1, -2) / 2.0
            s = np.where(mask, s, -np.inf)
            a = np.exp(s - s.max(-1, keepdims=True))
            a /= a.sum(-1, keepdims=True)
            outs.append(a @ v[..., sl])
        h = h + np.concatenate(outs, -1) @ p[f"{b}.attn.wo"]
        z = _ln(h, p[f"{b}.ln2.w"], p[f"{b}.ln2.b"]) @ p[f"{b}.ffn.up"]
        h = h + (z / (1 + np.exp(-z))) @ p[f"{b}.ffn.down"]
    return _ln(h, p["ln_f.w"], p["ln_f.b"]) @ p["lm_head"]


def test_all_full_forward_matches_reference():
    model, p, rng = _model()
    tokens = rng.integers(0, 13, (2, 6))
    with tc.no_tape():
        logits, traces = model.forward(tokens, plan=[FULL, FULL])
    ref = _reference_dense({k: v.data for k, v in p.items()}, tokens)
    np.testing.assert_allclose(logits.data, ref, rtol=1e-10, atol=1e-12)
    assert [tr.layer for tr in traces] == [1, 2]


def test_causality():
    model, _, rng = _model()
    ctrl, cp = build_controller("g1", CFG, rng)
    model.params.update(cp)
    tokens = rng.integers(0, 13, (1, 6))
    other = tokens.copy()
    other[0, 5] = (other[0, 5] + 1) % 13
    with tc.no_tape():
        a, _ = model.forward(tokens, plan=[FULL, CHEAP])
        b, _ = model.forward(other, plan=[FULL, CHEAP])
    np.testing.assert_array_equal(a.data[0, :5], b.data[0, :5])


def test_zero_init_cheap_path_is_identity():
    model, _, rng = _model(warm=False)
    tokens = rng.integers(0, 13, (2, 6))
    with tc.no_tape():
        _, traces = model.forward(tokens, plan=[CHEAP, CHEAP])
    for tr in traces:
        np.testing.assert_array_equal(tr.h_out.data, tr.a.data)


@pytest.mark.parametrize("kind", ["g1", "g3"])
@pytest.mark.parametrize("dtype", ["float64", "float32"])
def test_training_and_inference_logits_identical(kind, dtype):
    from dataclasses import replace
    cfg = replace(CFG, dtype=dtype)
    for seed in range(5):
        rng = np.random.default_rng(seed)
        p = init_backbone(cfg, rng)
        p.update(init_cheap_path(cfg, rng))
        for k, t in p.items():
            if k.endswith("cheap_ffn.down"):
                t.data = rng.normal(0, 0.3, t.shape).astype(dtype)
        ctrl, cp = build_controller(kind, cfg, rng)
        model = ConditionalLM(cfg, {**p, **cp})
        gate = GateConfig(budget=float(rng.choice([0.25, 0.5])))
        tokens = rng.integers(0, 13, (int(rng.integers(1, 4)), 6))
        with tc.Tape():
            train, _ = model.forward(tokens, controller=ctrl, gate=gate)
        infer = model.inference_forward(tokens, ctrl, gate)
        np.testing.assert_array_equal(train.data, infer.data)


def test_exec_counters():
    model, _, rng = _model()
    ctrl, cp = build_controller("g1", CFG, rng)
    model.params.update(cp)
    tokens = rng.integers(0, 13, (2, 6))
    gate = GateConfig(budget=0.5)
    c = ExecCounter()
    with tc.no_tape():
        model.forward(tokens, plan=[GATE, CHEAP], controller=ctrl, gate=gate, counter=c)
    assert (c.full, c.cheap, c.controller) == (12, 24, 12)
    c = ExecCounter()
    model.inference_forward(tokens, ctrl, gate, counter=c)
    assert (c.full, c.cheap, c.controller) == (12, 12, 24)


def test_forward_validation():
    model, _, rng = _model()
    with pytest.raises(ConfigError):
        model.forward(np.zeros((1, 6), int), plan=[FULL])
    with pytest.raises(ConfigError):
        model.forward(np.zeros((1, 6), int))
    with pytest.raises(ValueError):
        model.forward(np.full((1, 6), 13), plan=[FULL, FULL])
    with pytest.raises(ValueError):
        model.forward(np.zeros((1, 7), int), plan=[FULL, FULL])


def test_model_config_validation():
    for kw in ({"n_controlled": 5}, {"cheap_rank": 256}, {"n_heads": 3}, {"dtype": "float16"},
               {"d_model": 0}):
        with pytest.raises(ConfigError):
            ModelConfig(**kw)


def test_checkpoint_roundtrip(tmp_path):
    params = {"a": Tensor(np.arange(6.0).reshape(2, 3)), "b": Tensor(np.ones(4, np.float32)),
              "c": Tensor(np.array(3.5))}
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, params, {"k": 1})
    out, meta = load_checkpoint(path)
    assert meta == {"k": 1} and list(out) == ["a", "b", "c"]
    for k in params:
        assert out[k].data.dtype == params[k].data.dtype
        np.testing.assert_array_equal(out[k].data, params[k].data)
    (tmp_path / "bad").write_bytes(b"nope" * 8)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "bad")
