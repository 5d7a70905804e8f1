"""Command-line surface: data generation, strategy training, architecture
search, and the strategy-comparison table.

Exit codes: 0 ok, 2 config/usage error, 3 IO error, 4 numeric divergence.
AUXNAS_THREADS caps candidate/cell evaluation parallelism (default 1).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor

from .auxiliary import genotype_to_json, save_genotype
from .config import (
    aux_cfg_from_config,
    eval_cfg_from_config,
    load_config,
    search_cfg_from_config,
    tasks_from_config,
    train_cfg_from_config,
    write_resolved,
)
from .controller import CodecError, ControllerPolicy
from .data import FormatError, SyntheticDataset, gen_synthetic
from .layers import GenotypeError
from .metrics import METRICS_FOR_KIND
from .model import ConfigError, P_TAPS, load_checkpoint
from .search import search_loop
from .train import DataError, _write_csv, parse_strategy, run_strategy

import numpy as np

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("AUXNAS_THREADS", "1")))
    except ValueError:
        return 1


def cmd_gen_data(args) -> int:
    gen_synthetic(args.out, seed=args.seed, n=args.n, h=args.h, w=args.w, k=args.k,
                  val_n=args.val_n, test_n=args.test_n)
    print(f"wrote {args.n} samples to {args.out}")
    return EXIT_OK


def _donor_task_for(strategy_name: str, n_tasks: int) -> int:
    """Donor convention: prior-tK starts from single-tK; auxi-tK starts from
    a single baseline of the first other task (the paper's 2-task pairing)."""
    s = parse_strategy(strategy_name)
    if s.kind == "prior":
        return s.task
    if s.kind == "auxi_single":
        for t in range(1, n_tasks + 1):
            if t != s.task:
                return t
        return s.task
    raise ConfigError(f"strategy {strategy_name} has no donor")


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    out_dir = args.out or cfg["output_dir"]
    ds = SyntheticDataset(cfg["data"]["dir"])
    strategy = parse_strategy(args.strategy)
    need_genotype = strategy.kind == "auxi_nas" or (
        strategy.has_aux_modules and cfg["aux"]["mode"] == "genotype")
    aux_cfg = aux_cfg_from_config(cfg, need_genotype=need_genotype)
    if strategy.kind == "auxi_nas":
        strategy = parse_strategy(args.strategy, genotype=aux_cfg.genotype)
    donor_state = None
    if strategy.needs_donor:
        if not args.init_ckpt:
            raise ConfigError(f"strategy {strategy.name} requires --init-ckpt")
        _, donor_state = load_checkpoint(args.init_ckpt)
    write_resolved(cfg, out_dir)
    result = run_strategy(strategy, ds, cfg["model"]["variant"], tasks_from_config(cfg),
                          train_cfg_from_config(cfg), aux_cfg,
                          donor_state=donor_state, out_dir=out_dir)
    if result.diverged:
        print(f"run diverged; partial records in {out_dir}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"finished {strategy.name}: " + ", ".join(
        f"t{t} " + " ".join(f"{k}={v:.4f}" for k, v in m.items())
        for t, m in sorted(result.final_metrics.items())))
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = load_config(args.config)
    out_dir = cfg["output_dir"]
    ds = SyntheticDataset(cfg["data"]["dir"])
    for split in ("meta_train", "meta_val"):
        if not ds.splits.get(split):
            raise ConfigError(f"dataset has no {split} split")
    write_resolved(cfg, out_dir)
    search_cfg = search_cfg_from_config(cfg, threads=_threads())
    eval_cfg = eval_cfg_from_config(cfg, ds)
    policy = ControllerPolicy(P_TAPS, len(cfg["model"]["tasks"]),
                              np.random.default_rng(
                                  np.random.SeedSequence([search_cfg.seed, 0xC011])),
                              allow_own_task=cfg["aux"]["allow_own_task"])
    result = search_loop(policy, search_cfg, eval_cfg)
    with open(os.path.join(out_dir, "search.log"), "w", newline="\n") as fh:
        for rec in result.records:
            fh.write(json.dumps({
                "candidate_id": rec.candidate_id,
                "seed": rec.seed,
                "genotype": None if rec.genotype is None else genotype_to_json(rec.genotype),
                "metrics": rec.metrics,
                "reward": rec.reward,
                "diverged": rec.diverged,
                "wall_ms": rec.wall_ms,
            }, sort_keys=True) + "\n")
    _write_csv(os.path.join(out_dir, "opstats.csv"), result.opstats)
    if result.best_genotype is not None:
        save_genotype(os.path.join(out_dir, "best.genotype.json"), result.best_genotype)
        print(f"best reward {result.best_reward:.4f} over {len(result.records)} candidates")
    elif result.records:
        print("every candidate diverged or was invalid", file=sys.stderr)
        return EXIT_DIVERGED
    else:
        print("empty search budget; nothing to do")
    return EXIT_OK


def _metric_columns(cfg) -> list[str]:
    cols = []
    for kind in cfg["model"]["tasks"]:
        cols.extend(METRICS_FOR_KIND[kind])
    return cols


def cmd_compare(args) -> int:
    cfg = load_config(args.config)
    out_dir = cfg["output_dir"]
    ds = SyntheticDataset(cfg["data"]["dir"])
    strategies = [s.strip() for s in args.strategies.split(",") if s.strip()]
    seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
    if not strategies or not seeds:
        raise ConfigError("compare needs at least one strategy and one seed")
    tasks = tasks_from_config(cfg)
    write_resolved(cfg, out_dir)

    donors: dict[tuple[int, int], dict] = {}

    def donor_state(strategy_name, seed):
        dt = _donor_task_for(strategy_name, len(tasks))
        key = (dt, seed)
        if key not in donors:
            donor_dir = os.path.join(out_dir, "donors", f"single-t{dt}-s{seed}")
            res = run_strategy(parse_strategy(f"single-t{dt}"), ds,
                               cfg["model"]["variant"], tasks,
                               train_cfg_from_config(cfg, seed=seed),
                               aux_cfg_from_config(cfg), out_dir=donor_dir)
            if res.diverged:
                raise DataError(f"donor single-t{dt} seed {seed} diverged")
            _, state = load_checkpoint(res.ckpt_path)
            donors[key] = state
        return donors[key]

    cells = [(name, seed) for name in strategies for seed in seeds]

    def run_cell(cell):
        name, seed = cell
        strategy = parse_strategy(name)
        need_genotype = strategy.kind == "auxi_nas" or (
            strategy.has_aux_modules and cfg["aux"]["mode"] == "genotype")
        aux_cfg = aux_cfg_from_config(cfg, need_genotype=need_genotype)
        if strategy.kind == "auxi_nas":
            strategy = parse_strategy(name, genotype=aux_cfg.genotype)
        state = donor_state(name, seed) if strategy.needs_donor else None
        cell_dir = os.path.join(out_dir, "cells", f"{name}-s{seed}")
        res = run_strategy(strategy, ds, cfg["model"]["variant"], tasks,
                           train_cfg_from_config(cfg, seed=seed), aux_cfg,
                           donor_state=state, out_dir=cell_dir)
        return res

    # donors are built serially up front so parallel cells never race on them
    for name, seed in cells:
        if parse_strategy(name).needs_donor:
            donor_state(name, seed)

    threads = _threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_cell, cells))
    else:
        results = [run_cell(c) for c in cells]

    metric_cols = _metric_columns(cfg)
    rows = []
    by_strategy: dict[str, list[dict]] = {}
    any_diverged = False
    for (name, seed), res in zip(cells, results):
        row = {"strategy": name, "seed": seed,
               "status": "diverged" if res.diverged else "ok"}
        if res.diverged:
            any_diverged = True
        else:
            for t, m in res.final_metrics.items():
                row.update(m)
            by_strategy.setdefault(name, []).append(row)
        rows.append({c: row.get(c, "") for c in ["strategy", "seed", "status"] + metric_cols})
    for name in strategies:
        ok_rows = by_strategy.get(name, [])
        summary = {"strategy": name, "seed": "mean",
                   "status": f"{len(ok_rows)}/{len(seeds)} ok"}
        for c in metric_cols:
            vals = [r[c] for r in ok_rows if c in r]
            if vals:
                summary[c] = float(np.mean(vals))
        rows.append({c: summary.get(c, "") for c in ["strategy", "seed", "status"] + metric_cols})
    _write_csv(os.path.join(out_dir, "table.csv"), rows)
    print(f"wrote {os.path.join(out_dir, 'table.csv')} "
          f"({len(cells)} cells, {len(strategies)} summary rows)")
    return EXIT_DIVERGED if any_diverged else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="auxnas",
                                 description="Multi-task training with removable "
                                             "auxiliary modules and RL search over them.")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset directory")
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--h", type=int, default=32)
    g.add_argument("--w", type=int, default=32)
    g.add_argument("--k", type=int, default=5)
    g.add_argument("--val-n", type=int, default=None)
    g.add_argument("--test-n", type=int, default=None)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one strategy")
    t.add_argument("--config", default=None)
    t.add_argument("--strategy", required=True)
    t.add_argument("--init-ckpt", default=None)
    t.add_argument("--out", default=None, help="override config output_dir")
    t.set_defaults(fn=cmd_train)

    s = sub.add_parser("search", help="run the auxiliary-architecture search")
    s.add_argument("--config", default=None)
    s.set_defaults(fn=cmd_search)

    c = sub.add_parser("compare", help="strategy-matrix comparison table")
    c.add_argument("--config", default=None)
    c.add_argument("--strategies", required=True)
    c.add_argument("--seeds", required=True)
    c.set_defaults(fn=cmd_compare)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CodecError, GenotypeError, DataError,
            json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (OSError, FormatError) as e:
        print(f"io error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
