"""Pre-norm decoder-only transformer whose last C layers route each token's FFN
through either the full FFN or a zero-initialised low-rank cheap FFN."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Protocol, Sequence

import numpy as np

from . import tapecore as tc
from .gating import GateConfig, decide, topk_mask
from .tapecore import ConfigError, Tensor

GATE, FULL, CHEAP = "gate", "full", "cheap"
MODES = (GATE, FULL, CHEAP)


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int = 4
    n_controlled: int = 2
    d_model: int = 64
    n_heads: int = 4
    d_ff: int = 256
    cheap_rank: int = 8
    vocab_size: int = 256
    seq_len: int = 64
    d_context: int = 16
    d_summary: int = 8
    d_action: int = 4
    init_std: float = 0.02
    dtype: str = "float32"

    def __post_init__(self) -> None:
        ints = (self.n_layers, self.n_controlled, self.d_model, self.n_heads, self.d_ff,
                self.cheap_rank, self.vocab_size, self.seq_len, self.d_context,
                self.d_summary, self.d_action)
        if min(ints) <= 0:
            raise ConfigError("all model dimensions must be positive")
        if self.n_controlled > self.n_layers:
            raise ConfigError("n_controlled exceeds n_layers")
        if self.cheap_rank >= self.d_ff:
            raise ConfigError("cheap_rank must be smaller than d_ff")
        if self.d_model % self.n_heads:
            raise ConfigError("d_model must be divisible by n_heads")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"unsupported dtype {self.dtype}")

    @classmethod
    def reference(cls) -> "ModelConfig":
        """The 157.5M-parameter configuration (used for cost arithmetic only)."""
        return cls(n_layers=12, n_controlled=4, d_model=640, n_heads=10, d_ff=2560,
                   cheap_rank=80, vocab_size=151665, seq_len=256, d_context=128,
                   d_summary=64, d_action=16)

    @property
    def controlled(self) -> range:
        return range(self.n_layers - self.n_controlled, self.n_layers)

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)


def init_backbone(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Embeddings, attention, full FFNs, norms and LM head (no cheap path)."""
    d, f, std = cfg.d_model, cfg.d_ff, cfg.init_std
    dt = cfg.np_dtype
    resid_std = std / np.sqrt(2 * cfg.n_layers)

    def normal(shape, s=std):
        return Tensor(rng.normal(0.0, s, size=shape).astype(dt))

    p = {"tok_emb": normal((cfg.vocab_size, d)), "pos_emb": normal((cfg.seq_len, d))}
    for i in range(cfg.n_layers):
        b = f"blocks.{i}"
        p[f"{b}.ln1.w"] = Tensor(np.ones(d, dt))
        p[f"{b}.ln1.b"] = Tensor(np.zeros(d, dt))
        for w in ("wq", "wk", "wv"):
            p[f"{b}.attn.{w}"] = normal((d, d))
        p[f"{b}.attn.wo"] = normal((d, d), resid_std)
        p[f"{b}.ln2.w"] = Tensor(np.ones(d, dt))
        p[f"{b}.ln2.b"] = Tensor(np.zeros(d, dt))
        p[f"{b}.ffn.up"] = normal((d, f))
        p[f"{b}.ffn.down"] = normal((f, d), resid_std)
    p["ln_f.w"] = Tensor(np.ones(d, dt))
    p["ln_f.b"] = Tensor(np.zeros(d, dt))
    p["lm_head"] = normal((d, cfg.vocab_size))
    return p


def init_cheap_path(cfg: ModelConfig, rng: np.random.Generator) -> dict[str, Tensor]:
    """Per controlled layer: dedicated LN and rank-r FFN with an all-zero down projection."""
    d, r, dt = cfg.d_model, cfg.cheap_rank, cfg.np_dtype
    p = {}
    for i in cfg.controlled:
        b = f"blocks.{i}"
        p[f"{b}.ln2_cheap.w"] = Tensor(np.ones(d, dt))
        p[f"{b}.ln2_cheap.b"] = Tensor(np.zeros(d, dt))
        p[f"{b}.cheap_ffn.up"] = Tensor(rng.normal(0.0, 1.0 / np.sqrt(d), size=(d, r)).astype(dt))
        p[f"{b}.cheap_ffn.down"] = Tensor(np.zeros((r, d), dt))
    return p


class Controller(Protocol):
    kind: str

    def score(self, h: Tensor) -> tuple[Tensor, dict[str, Tensor]]: ...

    def macs_per_token(self) -> int: ...


@dataclass
class LayerTrace:
    layer: int
    mode: str
    a: Tensor
    h_out: Tensor
    h_full: Tensor | None = None
    h_cheap: Tensor | None = None
    u: Tensor | None = None
    p: Tensor | None = None
    m_hard: np.ndarray | None = None
    m_st: Tensor | None = None
    extras: dict[str, Tensor] = field(default_factory=dict)


@dataclass
class ExecCounter:
    """Token-layer executions at controlled layers, split by what ran."""

    full: int = 0
    cheap: int = 0
    controller: int = 0
    target: int = 0
    oracle_passes: int = 0

    def add(self, other: "ExecCounter") -> None:
        for k in ("full", "cheap", "controller", "target", "oracle_passes"):
            setattr(self, k, getattr(self, k) + getattr(other, k))


GEMM_COLS = 16


def _linear(x: Tensor, w: Tensor) -> Tensor:
    """``x @ w`` on the flattened token axis.

    Weights are zero-padded to a multiple of ``GEMM_COLS`` columns.  With
    narrower or ragged widths OpenBLAS switches to edge kernels whose result
    for a row depends on how many rows share the call, which would break the
    exact match between the gathered inference path and the training path.
    """
    lead = x.shape[:-1]
    n = w.shape[-1]
    pad = (-n) % GEMM_COLS
    if pad:
        w = tc.concat([w, Tensor(np.zeros((w.shape[0], pad), dtype=w.dtype))], axis=-1)
    y = tc.matmul(tc.reshape(x, (-1, x.shape[-1])), w)
    if pad:
        y = y[:, :n]
    return tc.reshape(y, lead + (n,))


class ConditionalLM:
    def __init__(self, cfg: ModelConfig, params: dict[str, Tensor]) -> None:
        self.cfg = cfg
        self.params = params
        t = cfg.seq_len
        self._causal = np.tril(np.ones((t, t), dtype=bool))

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    # ----------------------------------------------------------- sub-layers
    def embed(self, tokens: np.ndarray) -> Tensor:
        tokens = np.asarray(tokens)
        if tokens.min() < 0 or tokens.max() >= self.cfg.vocab_size:
            raise ValueError(f"token id out of range [0, {self.cfg.vocab_size})")
        if tokens.shape[-1] > self.cfg.seq_len:
            raise ValueError(f"sequence longer than seq_len={self.cfg.seq_len}")
        x = tc.embedding(self["tok_emb"], tokens)
        pos = tc.getitem(self["pos_emb"], slice(0, tokens.shape[-1]))
        return tc.add(x, pos)

    def attention_sublayer(self, i: int, h: Tensor) -> Tensor:
        """``a = h + Attn(LN1(h))`` with a causal mask."""
        cfg, b = self.cfg, f"blocks.{i}"
        bsz, t, d = h.shape
        nh, dh = cfg.n_heads, d // cfg.n_heads
        x = tc.layer_norm(h, self[f"{b}.ln1.w"], self[f"{b}.ln1.b"])

        def heads(w):
            y = tc.reshape(_linear(x, self[f"{b}.attn.{w}"]), (bsz, t, nh, dh))
            return tc.transpose(y, (0, 2, 1, 3))

        q, k, v = heads("wq"), heads("wk"), heads("wv")
        scores = tc.mul(tc.matmul(q, tc.transpose(k, (0, 1, 3, 2))), 1.0 / np.sqrt(dh))
        att = tc.softmax(scores, axis=-1, mask=self._causal[:t, :t])
        y = tc.reshape(tc.transpose(tc.matmul(att, v), (0, 2, 1, 3)), (bsz, t, d))
        return tc.add(h, _linear(y, self[f"{b}.attn.wo"]))

    def full_ffn(self, i: int, x: Tensor) -> Tensor:
        b = f"blocks.{i}"
        z = tc.layer_norm(x, self[f"{b}.ln2.w"], self[f"{b}.ln2.b"])
        return _linear(tc.silu(_linear(z, self[f"{b}.ffn.up"])), self[f"{b}.ffn.down"])

    def cheap_ffn(self, i: int, x: Tensor) -> Tensor:
        b = f"blocks.{i}"
        z = tc.layer_norm(x, self[f"{b}.ln2_cheap.w"], self[f"{b}.ln2_cheap.b"])
        return _linear(tc.silu(_linear(z, self[f"{b}.cheap_ffn.up"])), self[f"{b}.cheap_ffn.down"])

    def dense_block(self, i: int, h: Tensor) -> Tensor:
        a = self.attention_sublayer(i, h)
        return tc.add(a, self.full_ffn(i, a))

    def head(self, h: Tensor) -> Tensor:
        z = tc.layer_norm(h, self["ln_f.w"], self["ln_f.b"])
        return _linear(z, self["lm_head"])

    def conditional_layer(self, i: int, a: Tensor, m_st: Tensor) -> tuple[Tensor, Tensor, Tensor]:
        """Both branches for every token, mixed by the per-token mask."""
        h_full = tc.add(a, self.full_ffn(i, a))
        h_cheap = tc.add(a, self.cheap_ffn(i, a))
        m = tc.reshape(m_st, m_st.shape + (1,))
        h_out = tc.add(tc.mul(m, h_full), tc.mul(tc.sub(1.0, m), h_cheap))
        return h_out, h_full, h_cheap

    # ------------------------------------------------------------- forwards
    def prefix(self, tokens: np.ndarray) -> Tensor:
        """Hidden state entering the first controlled layer."""
        h = self.embed(tokens)
        for i in range(self.cfg.n_layers - self.cfg.n_controlled):
            h = self.dense_block(i, h)
        return h

    def forward(self, tokens: np.ndarray, plan: Sequence[str] | None = None,
                controller: Controller | None = None, gate: GateConfig | None = None,
                counter: ExecCounter | None = None,
                frozen_routing: Sequence[tuple[np.ndarray, np.ndarray]] | None = None):
        """Training-mode forward.

        ``plan`` gives one mode per controlled layer (default all ``gate``).
        ``frozen_routing`` replays a fixed ``(m_hard, offset)`` per layer with
        ``m_st = offset + p``; it exists so finite differences can probe the
        straight-through surrogate.
        Returns ``(logits, traces)``.
        """
        tokens = np.atleast_2d(tokens)
        cfg = self.cfg
        plan = tuple(plan) if plan is not None else (GATE,) * cfg.n_controlled
        if len(plan) != cfg.n_controlled or any(m not in MODES for m in plan):
            raise ConfigError(f"bad forcing plan {plan}")
        if GATE in plan and (controller is None or gate is None):
            raise ConfigError("gate mode needs a controller and a GateConfig")
        n_tok = tokens.size
        h = self.prefix(tokens)
        traces = []
        for j, i in enumerate(cfg.controlled):
            h, tr = self._controlled_step(j, i, h, plan[j], controller, gate, counter,
                                          None if frozen_routing is None else frozen_routing[j],
                                          n_tok)
            traces.append(tr)
        return self.head(h), traces

    def _controlled_step(self, j, i, h, mode, controller, gate, counter, replay, n_tok):
        a = self.attention_sublayer(i, h)
        if mode == FULL:
            h_full = tc.add(a, self.full_ffn(i, a))
            if counter is not None:
                counter.full += n_tok
            return h_full, LayerTrace(i, mode, a, h_full, h_full=h_full)
        if mode == CHEAP:
            h_cheap = tc.add(a, self.cheap_ffn(i, a))
            if counter is not None:
                counter.cheap += n_tok
            return h_cheap, LayerTrace(i, mode, a, h_cheap, h_cheap=h_cheap)
        u, extras = controller.score(a)
        dec = decide(u, gate)
        m_hard, m_st = dec.m_hard, dec.m_st
        if replay is not None:
            m_hard = replay[0]
            m_st = tc.add(Tensor(np.asarray(replay[1], dtype=a.dtype)), dec.p)
        h_out, h_full, h_cheap = self.conditional_layer(i, a, m_st)
        if counter is not None:
            counter.full += n_tok
            counter.cheap += n_tok
            counter.controller += n_tok
        return h_out, LayerTrace(i, mode, a, h_out, h_full=h_full, h_cheap=h_cheap, u=u,
                                 p=dec.p, m_hard=m_hard, m_st=m_st, extras=extras)

    def _rows(self, ffn, i: int, rows: np.ndarray) -> np.ndarray:
        """Residual FFN output for a gathered row subset.

        A single row is padded to two: BLAS routes one-row products through
        gemv, whose summation order differs from the full-batch gemm.
        """
        if rows.shape[0] == 0:
            return rows
        x = Tensor(np.concatenate([rows, rows]) if rows.shape[0] == 1 else rows)
        return tc.add(x, ffn(i, x)).data[: rows.shape[0]]

    def inference_forward(self, tokens: np.ndarray, controller: Controller, gate: GateConfig,
                          counter: ExecCounter | None = None) -> Tensor:
        """Hard top-k routing; each token runs only its selected branch."""
        tokens = np.atleast_2d(tokens)
        with tc.no_tape():
            h = self.prefix(tokens)
            for i in self.cfg.controlled:
                a = self.attention_sublayer(i, h)
                u, _ = controller.score(a)
                m_hard, _ = topk_mask(u.data, gate.budget)
                sel = m_hard.reshape(-1) > 0
                flat = a.data.reshape(-1, a.shape[-1])
                out = np.empty_like(flat)
                out[sel] = self._rows(self.full_ffn, i, flat[sel])
                out[~sel] = self._rows(self.cheap_ffn, i, flat[~sel])
                h = Tensor(out.reshape(a.shape))
                if counter is not None:
                    counter.full += int(sel.sum())
                    counter.cheap += int((~sel).sum())
                    counter.controller += sel.size
            return self.head(h)


# ------------------------------------------------------------- checkpoints

_MAGIC = b"CDCKPT01"


def save_checkpoint(path: str | Path, params: dict[str, Tensor], meta: dict[str, Any] | None = None) -> None:
    """Write ``MAGIC | u64 header_len | JSON header | raw little-endian arrays``.

    The header lists ``name``, ``shape``, ``dtype`` (numpy little-endian code),
    ``offset`` and ``nbytes`` for each tensor, offsets relative to the data
    section, in insertion order.
    """
    entries, blobs, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": arr.dtype.str,
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({"entries": entries, "meta": meta or {}}, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> tuple[dict[str, Tensor], dict[str, Any]]:
    raw = Path(path).read_bytes()
    if raw[:8] != _MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16:16 + hlen])
    base = 16 + hlen
    params = {}
    for e in header["entries"]:
        start = base + e["offset"]
        arr = np.frombuffer(raw[start:start + e["nbytes"]], dtype=np.dtype(e["dtype"]))
        params[e["name"]] = Tensor(arr.reshape(e["shape"]).astype(np.dtype(e["dtype"]).newbyteorder("="), copy=True))
    return params, header["meta"]


def config_dict(cfg: ModelConfig) -> dict[str, Any]:
    return asdict(cfg)
