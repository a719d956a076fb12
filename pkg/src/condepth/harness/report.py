"""Cross-run tables and curve exports over a directory of run outputs.

Layout expected under the root: ``<experiment>/seed<N>/{log.jsonl, summary.json}``.
"""
from __future__ import annotations

import csv
import json
from collections import defaultdict
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from ..metrics import aggregate_seeds, lm_summary, paired_deltas, pilot_thresholds
from ..trainer import read_log

ROLLING = 200

TABLE_COLUMNS = [
    ("best", "best_eval_lm"),
    ("end", "endpoint_eval_lm"),
    ("avg_0_50", "avg_lm_0_half"),
    ("avg_0_100", "avg_lm_0_full"),
    ("hit_easy", "hits.easy"),
    ("hit_mid", "hits.mid"),
    ("hit_hard", "hits.hard"),
    ("qf_qc_l2", "final.diag_qf_qc_l2"),
    ("score_var", "final.diag_util_score_var"),
    ("gnorm", "grad_norm_mean"),
    ("comp", "compute_vs_full"),
    ("infer", "infer_vs_full"),
]
TIERS = ("easy", "mid", "hard")


def discover(root: str | Path) -> dict[str, list[Path]]:
    """Run directories grouped by experiment name, seeds in numeric order."""
    groups: dict[str, list[Path]] = defaultdict(list)
    for summ in sorted(Path(root).glob("*/seed*/summary.json")):
        groups[summ.parent.parent.name].append(summ.parent)
    for name in groups:
        groups[name].sort(key=lambda p: int(p.name[4:]))
    return dict(groups)


def load_summary(run_dir: Path) -> dict[str, Any]:
    return json.loads((run_dir / "summary.json").read_text())


def thresholds_from_pilot(root: str | Path, pilot: str = "g1-base", seed: int = 42) -> list[float] | None:
    log = Path(root) / pilot / f"seed{seed}" / "log.jsonl"
    if not log.exists():
        return None
    _, evals = read_log(log)
    return pilot_thresholds(evals)


def _rescored(run_dir: Path, thresholds: Sequence[float] | None) -> dict[str, Any]:
    """Summary with hits recomputed against shared thresholds, keyed by tier."""
    summ = load_summary(run_dir)
    if thresholds is not None:
        _, evals = read_log(run_dir / "log.jsonl")
        hits = lm_summary(evals, thresholds)["hits"]
        summ["hits"] = dict(zip(TIERS, hits.values()))
    else:
        summ["hits"] = {t: None for t in TIERS}
    return summ


def _fmt(v, std=None, integer: bool = False) -> str:
    if v is None:
        return "---"
    if integer:
        return f"{v:.0f}" + ("" if std is None else f" ± {std:.0f}")
    if isinstance(v, float) and abs(v) < 1e-3 and v != 0:
        s = f"{v:.2e}"
    else:
        s = f"{v:.4f}" if isinstance(v, float) else str(v)
    if std is not None:
        s += f" ± {std:.2e}" if abs(std) < 1e-3 and std != 0 else f" ± {std:.4f}"
    return s


def summarize_dir(root: str | Path, thresholds: Sequence[float] | None = None,
                  reference: str = "g3") -> dict[str, Any]:
    """Aggregate every experiment under ``root``; writes ``summary.txt`` and
    ``summary.csv`` there and returns the aggregated table."""
    root = Path(root)
    groups = discover(root)
    if not groups:
        raise FileNotFoundError(f"{root}: no */seed*/summary.json found")
    if thresholds is None:
        thresholds = thresholds_from_pilot(root)
    fields = [f for _, f in TABLE_COLUMNS]
    table, per_seed = {}, {}
    for name, dirs in groups.items():
        summs = [_rescored(d, thresholds) for d in dirs]
        per_seed[name] = summs
        if len(summs) >= 2:
            table[name] = aggregate_seeds(summs, fields)
        else:
            flat = aggregate_seeds(summs * 2, fields)
            table[name] = {k: {**v, "std": None, "n": 1} for k, v in flat.items()}
    deltas = {}
    if reference in per_seed:
        for name, summs in per_seed.items():
            if name != reference:
                try:
                    deltas[name] = paired_deltas(summs, per_seed[reference], "best_eval_lm")
                except ValueError:
                    pass

    lines = []
    if thresholds is not None:
        lines.append("thresholds (easy/mid/hard): " + " / ".join(f"{t:.4f}" for t in thresholds))
    header = ["config", "n"] + [c for c, _ in TABLE_COLUMNS]
    rows = []
    for name in sorted(table):
        agg = table[name]
        rows.append([name, str(len(per_seed[name]))] +
                    [_fmt(agg[f]["mean"], agg[f]["std"], f.startswith("hits.")) for _, f in TABLE_COLUMNS])
    widths = [max(len(r[i]) for r in [header] + rows) for i in range(len(header))]
    for r in [header] + rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)))
    if deltas:
        lines.append("")
        lines.append(f"paired best_eval_lm deltas vs {reference} (per seed; negative = better):")
        for name, d in sorted(deltas.items()):
            per = ", ".join(f"{s}: {_fmt(v)}" for s, v in d["deltas"].items())
            lines.append(f"  {name}: mean {_fmt(d['mean'])}  [{per}]  "
                         f"lower in {d['negative']}/{d['n']} seeds")
    text = "\n".join(lines) + "\n"
    (root / "summary.txt").write_text(text)
    with open(root / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["config", "n_seeds"] + [f"{c}_{s}" for c, _ in TABLE_COLUMNS for s in ("mean", "std")])
        for name in sorted(table):
            agg = table[name]
            w.writerow([name, len(per_seed[name])] +
                       [agg[f][s] for _, f in TABLE_COLUMNS for s in ("mean", "std")])
    return {"table": table, "deltas": deltas, "thresholds": thresholds, "text": text}


# ------------------------------------------------------------------ curves

def rolling_mean(x: np.ndarray, window: int = ROLLING) -> np.ndarray:
    """Trailing mean over up to ``window`` points (shorter at the start)."""
    x = np.asarray(x, dtype=np.float64)
    c = np.concatenate([[0.0], np.cumsum(x)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(0, idx - window)
    return (c[idx] - c[lo]) / (idx - lo)


def _write_curve(path: Path, steps: np.ndarray, cols: dict[int, np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    mat = np.stack([cols[s] for s in sorted(cols)], axis=1)
    mean = mat.mean(axis=1)
    std = mat.std(axis=1, ddof=1) if mat.shape[1] > 1 else np.full(len(steps), np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step"] + [f"seed{s}" for s in sorted(cols)] + ["mean", "std"])
        for i, step in enumerate(steps):
            w.writerow([int(step)] + [repr(float(mat[i, j])) for j in range(mat.shape[1])]
                       + [repr(float(mean[i])), "" if np.isnan(std[i]) else repr(float(std[i]))])
    return mean, std


def export_curves(root: str | Path, out: str | Path | None = None, window: int = ROLLING,
                  figures: bool = True) -> list[Path]:
    """Per experiment: ``<name>_eval_lm.csv`` and ``<name>_grad_norm.csv`` with
    per-seed columns plus mean/std; optionally PNG figures of the means."""
    root = Path(root)
    out = Path(out) if out is not None else root / "curves"
    out.mkdir(parents=True, exist_ok=True)
    groups = discover(root)
    if not groups:
        raise FileNotFoundError(f"{root}: no runs found")
    written, curves = [], {}
    for name, dirs in sorted(groups.items()):
        evals, gnorms, steps_e, steps_g = {}, {}, None, None
        for d in dirs:
            seed = int(d.name[4:])
            train, ev = read_log(d / "log.jsonl")
            se = np.array([s for s, _ in ev])
            sg = np.array([r["step"] for r in train])
            if steps_e is not None and (not np.array_equal(se, steps_e) or not np.array_equal(sg, steps_g)):
                raise ValueError(f"{name}: seeds have different step grids")
            steps_e, steps_g = se, sg
            evals[seed] = np.array([v for _, v in ev])
            gnorms[seed] = rolling_mean(np.array([r["grad_norm"] for r in train]), window)
        p1, p2 = out / f"{name}_eval_lm.csv", out / f"{name}_grad_norm.csv"
        curves[name] = (steps_e, _write_curve(p1, steps_e, evals), steps_g, _write_curve(p2, steps_g, gnorms))
        written += [p1, p2]
    if figures:
        written += _figures(curves, out, window)
    return written


def _figures(curves, out: Path, window: int) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    paths = []
    for key, ylabel, fname in ((0, "eval LM loss (nats/byte)", "eval_lm.png"),
                               (1, f"grad norm (rolling {window})", "grad_norm.png")):
        fig, ax = plt.subplots(figsize=(6.4, 4.0))
        for name, (se, (me, sde), sg, (mg, sdg)) in sorted(curves.items()):
            steps, mean, std = (se, me, sde) if key == 0 else (sg, mg, sdg)
            line, = ax.plot(steps, mean, label=name, lw=1.2)
            if not np.all(np.isnan(std)):
                ax.fill_between(steps, mean - std, mean + std, color=line.get_color(), alpha=0.15, lw=0)
        ax.set_xlabel("step")
        ax.set_ylabel(ylabel)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=7, ncol=2, frameon=False)
        fig.tight_layout()
        path = out / fname
        fig.savefig(path, dpi=120)
        plt.close(fig)
        paths.append(path)
    return paths
