"""``condepth`` command line: pretrain, run, matrix, summarize, export-curves, check."""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from ..tapecore import ConfigError
from ..trainer import EXPERIMENTS, SEED_PLAN, ExperimentConfig, experiment, run_experiment, \
    shared_backbone, with_steps
from .configio import resolve_config
from .corpus import CorpusError

OUT_ENV = "CONDEPTH_OUT"
log = logging.getLogger("condepth")


def default_out() -> str:
    return os.environ.get(OUT_ENV, "runs")


def _csv(kind):
    def parse(s: str):
        return [kind(x) for x in s.split(",") if x.strip()]
    return parse


def _adjust(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "steps", None):
        cfg = with_steps(cfg, args.steps, args.eval_every)
    if getattr(args, "corpus", None):
        cfg = replace(cfg, corpus=replace(cfg.corpus, path=args.corpus))
    return cfg


def _run_one(cfg: ExperimentConfig, out: str) -> dict:
    res = run_experiment(cfg, out_dir=out, cache_dir=Path(out) / "_cache", log=log.info)
    s = res.summary
    return {"name": cfg.name, "seed": cfg.seed, "best": s["best_eval_lm"], "dir": str(res.run_dir)}


def cmd_pretrain(args) -> int:
    cfg = _adjust(resolve_config(args.config), args)
    shared_backbone(cfg, Path(args.out) / "_cache", log=log.info)
    log.info("backbone cached under %s", Path(args.out) / "_cache")
    return 0


def cmd_run(args) -> int:
    cfg = _adjust(resolve_config(args.config), args)
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    r = _run_one(cfg, args.out)
    print(f"{r['name']} seed {r['seed']}: best eval_lm {r['best']:.4f} -> {r['dir']}")
    return 0


def matrix_plan(experiments: list[str] | None, seeds: list[int] | None) -> list[tuple[str, int]]:
    names = experiments or list(EXPERIMENTS)
    for n in names:
        if n not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {n!r}; valid: {', '.join(EXPERIMENTS)}")
    return [(n, s) for n in names for s in (seeds or SEED_PLAN[n])]


def _matrix_worker(job):
    cfg, out = job
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    return _run_one(cfg, out)


def cmd_matrix(args) -> int:
    plan = matrix_plan(args.experiments, args.seeds)
    cfgs = [_adjust(experiment(n, s), args) for n, s in plan]
    log.info("%d runs", len(cfgs))
    for key in {(c.model, c.pretrain, c.corpus): c for c in cfgs}.values():
        shared_backbone(key, Path(args.out) / "_cache", log=log.info)
    jobs = [(c, args.out) for c in cfgs]
    if args.workers > 1:
        os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
        import multiprocessing as mp
        with ProcessPoolExecutor(args.workers, mp_context=mp.get_context("spawn")) as ex:
            results = list(ex.map(_matrix_worker, jobs))
    else:
        results = [_run_one(c, o) for c, o in jobs]
    for r in results:
        print(f"{r['name']:14s} seed {r['seed']:4d}  best {r['best']:.4f}")
    return 0


def cmd_summarize(args) -> int:
    from .report import summarize_dir
    res = summarize_dir(args.dir, thresholds=args.thresholds, reference=args.reference)
    sys.stdout.write(res["text"])
    return 0


def cmd_export(args) -> int:
    from .report import export_curves
    for p in export_curves(args.dir, args.out, window=args.window, figures=not args.no_figures):
        print(p)
    return 0


def cmd_check(args) -> int:
    from .checks import fd_suite, st_identity, zero_init_identity
    ok = True
    res = fd_suite(args.configs)
    worst = max(res, key=lambda r: r.max_rel_err)
    good = worst.max_rel_err < 1e-4
    ok &= good
    print(f"{'PASS' if good else 'FAIL'} gradients: {len(res)} term checks, worst rel err "
          f"{worst.max_rel_err:.2e} ({worst.term}, config {worst.config})")
    diff = st_identity(args.draws)
    ok &= diff == 0.0
    print(f"{'PASS' if diff == 0 else 'FAIL'} straight-through forward identity: max |diff| {diff:.3g}")
    diff = zero_init_identity()
    ok &= diff == 0.0
    print(f"{'PASS' if diff == 0 else 'FAIL'} zero-init cheap path identity: max |diff| {diff:.3g}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="condepth", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    def out_arg(p):
        p.add_argument("--out", default=default_out(),
                       help=f"output root (default ${OUT_ENV} or ./runs)")

    def length_args(p):
        p.add_argument("--steps", type=int, help="override run length (warmups stay at 5%%)")
        p.add_argument("--eval-every", type=int)
        p.add_argument("--corpus", help="UTF-8 text file (default: built-in synthetic corpus)")

    p = sub.add_parser("pretrain", help="build the shared dense backbone")
    p.add_argument("--config", default="g3")
    out_arg(p)
    length_args(p)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("run", help="train one experiment")
    p.add_argument("--config", required=True, help=f"name ({', '.join(EXPERIMENTS)}) or TOML file")
    p.add_argument("--seed", type=int)
    out_arg(p)
    length_args(p)
    p.set_defaults(fn=cmd_run)

    p = sub.add_parser("matrix", help="run a grid of experiments and seeds")
    p.add_argument("--experiments", type=_csv(str))
    p.add_argument("--seeds", type=_csv(int), help="override the per-experiment seed plan")
    p.add_argument("--workers", type=int, default=1)
    out_arg(p)
    length_args(p)
    p.set_defaults(fn=cmd_matrix)

    p = sub.add_parser("summarize", help="aggregate runs into a table")
    p.add_argument("--dir", default=default_out())
    p.add_argument("--thresholds", type=_csv(float),
                   help="easy,mid,hard eval thresholds (default: from the g1-base seed 42 run)")
    p.add_argument("--reference", default="g3")
    p.set_defaults(fn=cmd_summarize)

    p = sub.add_parser("export-curves", help="write eval/grad-norm curve CSVs and figures")
    p.add_argument("--dir", default=default_out())
    p.add_argument("--out")
    p.add_argument("--window", type=int, default=200)
    p.add_argument("--no-figures", action="store_true")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("check", help="gradient and invariant checks")
    p.add_argument("--configs", type=int, default=20)
    p.add_argument("--draws", type=int, default=100)
    p.set_defaults(fn=cmd_check)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.cmd in ("run", "matrix", "pretrain")
                        else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        return args.fn(args)
    except (ConfigError, CorpusError, FileNotFoundError) as e:
        print(f"condepth: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
