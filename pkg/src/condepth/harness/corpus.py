"""Byte-level corpus ingestion: document split, window packing, seeded batch streams.

A local UTF-8 text file is split into documents on blank lines, documents are
assigned to train/val by a seeded permutation, and each split is packed into
non-overlapping windows of ``seq_len`` bytes.  With no file given, a
deterministic synthetic corpus is generated (see :func:`synthetic_text`).
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

MIN_DOC_BYTES = 64
SYNTHETIC = "synthetic"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class CorpusSpec:
    path: str = SYNTHETIC
    val_fraction: float = 0.05
    split_seed: int = 0
    seq_len: int = 64
    synthetic_bytes: int = 1_200_000

    def __post_init__(self) -> None:
        if not 0.0 < self.val_fraction < 1.0:
            raise CorpusError("val_fraction must lie in (0, 1)")
        if self.seq_len < 2:
            raise CorpusError("seq_len must be >= 2")


# ------------------------------------------------------------ synthetic text

_NAMES = ["Ada", "Bram", "Cleo", "Dov", "Edda", "Finn", "Greta", "Hugo", "Ines", "Jonas",
          "Kaia", "Lars", "Mara", "Nils", "Olga", "Pavel", "Quinn", "Rosa", "Sven", "Tilde",
          "Ulla", "Viggo", "Wren", "Xenia", "Yusuf", "Zora"]
_CITIES = ["Oslo", "Lyon", "Porto", "Graz", "Turku", "Riga", "Bergen", "Ghent", "Malmo",
           "Brno", "Cork", "Split", "Basel", "Delft", "Krakow", "Tartu"]
_COLORS = ["red", "blue", "green", "yellow", "black", "white", "orange", "purple", "grey", "brown"]
_THINGS = ["lamp", "bicycle", "kettle", "violin", "garden", "boat", "clock", "scarf",
           "notebook", "telescope", "piano", "map", "camera", "chair", "kite"]
_JOBS = ["baker", "teacher", "sailor", "doctor", "painter", "farmer", "engineer", "writer",
         "carpenter", "gardener", "pilot", "chemist"]
_DAYS = ["Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday"]
_NUMBERS = ["two", "three", "four", "five", "six", "seven", "eight", "nine", "ten", "eleven"]


def _document(rng: np.random.Generator) -> str:
    """One paragraph about a few characters whose facts stay fixed throughout,
    so later sentences are predictable from earlier ones."""
    k = int(rng.integers(2, 5))
    people = [str(x) for x in rng.choice(_NAMES, size=k, replace=False)]
    facts = {
        p: {
            "city": str(rng.choice(_CITIES)),
            "color": str(rng.choice(_COLORS)),
            "thing": str(rng.choice(_THINGS)),
            "job": str(rng.choice(_JOBS)),
            "day": str(rng.choice(_DAYS)),
            "n": str(rng.choice(_NUMBERS)),
        }
        for p in people
    }
    out = []
    for p in people:
        f = facts[p]
        out.append(f"{p} is a {f['job']} who lives in {f['city']}.")
        out.append(f"{p} likes the color {f['color']} and owns a {f['color']} {f['thing']}.")
    templates = [
        "On {day}, {p} took the {color} {thing} to the market in {city}.",
        "Every {day} {p} works as a {job} in {city}.",
        "{p} has {n} friends in {city}, and all of them know the {color} {thing}.",
        "When it rains in {city}, {p} stays home with the {thing}.",
        "The {job} from {city} is called {p}.",
        "Ask {p} about the {thing}; it is {color}, of course.",
        "{p} counted {n} boats in the harbour of {city} on {day}.",
        "People in {city} say that {p} the {job} never lends the {color} {thing}.",
    ]
    for _ in range(int(rng.integers(6, 20))):
        p = people[int(rng.integers(k))]
        tpl = templates[int(rng.integers(len(templates)))]
        out.append(tpl.format(p=p, **facts[p]))
    return " ".join(out)


def synthetic_text(n_bytes: int, seed: int = 0) -> str:
    """Deterministic English-like text of at least ``n_bytes`` bytes; documents are
    separated by blank lines."""
    rng = np.random.default_rng(seed)
    docs, size = [], 0
    while size < n_bytes:
        d = _document(rng)
        docs.append(d)
        size += len(d) + 2
    return "\n\n".join(docs) + "\n"


# ------------------------------------------------------------------ packing

def split_documents(text: str) -> list[bytes]:
    docs = [d.strip().encode("utf-8") for d in re.split(r"\n\s*\n", text)]
    return [d for d in docs if len(d) >= MIN_DOC_BYTES]


def pack_windows(docs: list[bytes], seq_len: int) -> np.ndarray:
    """Concatenate documents (newline-separated) and cut into ``[N, seq_len]`` windows."""
    stream = np.frombuffer(b"\n".join(docs), dtype=np.uint8)
    n = stream.size // seq_len
    return stream[: n * seq_len].reshape(n, seq_len).astype(np.int64)


@dataclass
class Corpus:
    train: np.ndarray
    val: np.ndarray
    n_train_docs: int
    n_val_docs: int


def load_text(spec: CorpusSpec) -> str:
    if spec.path == SYNTHETIC:
        return synthetic_text(spec.synthetic_bytes, seed=spec.split_seed)
    path = Path(spec.path)
    try:
        return path.read_text(encoding="utf-8")
    except OSError as e:
        raise CorpusError(f"{path}: {e.strerror}") from e


def ingest_corpus(spec: CorpusSpec) -> Corpus:
    text = load_text(spec)
    docs = split_documents(text)
    if len(docs) < 2:
        raise CorpusError("corpus needs at least two documents of >= 64 bytes")
    rng = np.random.default_rng(spec.split_seed)
    order = rng.permutation(len(docs))
    n_val = max(1, int(round(spec.val_fraction * len(docs))))
    val_docs = [docs[i] for i in sorted(order[:n_val])]
    train_docs = [docs[i] for i in sorted(order[n_val:])]
    train = pack_windows(train_docs, spec.seq_len)
    val = pack_windows(val_docs, spec.seq_len)
    if len(train) < 1 or len(val) < 1:
        raise CorpusError(f"corpus shorter than one window of {spec.seq_len} bytes per split")
    return Corpus(train, val, len(train_docs), len(val_docs))


def train_batches(windows: np.ndarray, batch_size: int, rng: np.random.Generator) -> Iterator[np.ndarray]:
    """Endless stream of ``[batch_size, T]`` batches; each epoch is a fresh
    permutation drawn from ``rng``."""
    if len(windows) < batch_size:
        raise CorpusError(f"{len(windows)} windows cannot fill a batch of {batch_size}")
    while True:
        order = rng.permutation(len(windows))
        for s in range(0, len(order) - batch_size + 1, batch_size):
            yield windows[order[s:s + batch_size]]


def val_batches(windows: np.ndarray, batch_size: int, n_batches: int) -> list[np.ndarray]:
    """Fixed leading validation batches, evenly strided through the split."""
    need = batch_size * n_batches
    if len(windows) < need:
        raise CorpusError(f"validation split has {len(windows)} windows, need {need}")
    idx = np.linspace(0, len(windows) - 1, need).round().astype(int)
    return [windows[idx[i * batch_size:(i + 1) * batch_size]] for i in range(n_batches)]
