"""Config document: nested defaults, strict merging, and object builders.

Every field has a default; unknown keys are rejected with their path. The
effective document is echoed to output_dir/config.resolved.json and can be
fed back as --config to reproduce a run.
"""

from __future__ import annotations

import copy
import json
import os

from .auxiliary import load_genotype
from .layers import AggOp
from .model import ConfigError, TaskSpec
from .search import EvalCfg, PpoCfg, SearchCfg
from .train import DEFAULT_PROBE_LAYERS, AuxCfg, TrainCfg

DEFAULTS = {
    "data": {
        "dir": "data",
        "n": 256,
        "h": 32,
        "w": 32,
        "k": 5,
        "seed": 0,
        "val_n": None,
        "test_n": None,
    },
    "model": {
        "variant": "baseline",
        "tasks": ["seg", "depth"],
    },
    "train": {
        "iters": 2000,
        "lr0": 0.01,
        "batch": 12,
        "weight_decay": 1e-4,
        "momentum": 0.9,
        "seed": 0,
        "eval_every": 500,
        "augment": True,
        "probe_layers": list(DEFAULT_PROBE_LAYERS),
        "probe_seed": 20240501,
        "probe_count": 64,
    },
    "aux": {
        "mode": "basic",
        "agg": "sum",
        "c_aux": 16,
        "genotype_path": None,
        "allow_own_task": True,
    },
    "search": {
        "candidates": 200,
        "batch": 16,
        "short_iters": 200,
        "seed": 0,
        "ppo": {
            "clip": 0.2,
            "epochs": 4,
            "entropy_coef": 0.01,
            "lr": 0.001,
            "baseline_decay": 0.95,
        },
    },
    "output_dir": "out",
}


def _merge(defaults, user, path=""):
    if not isinstance(user, dict):
        raise ConfigError(f"config section {path or '<root>'} must be an object")
    out = {}
    for key, dval in defaults.items():
        if key not in user:
            out[key] = copy.deepcopy(dval)
        elif isinstance(dval, dict):
            out[key] = _merge(dval, user[key], f"{path}{key}.")
        else:
            out[key] = user[key]
    unknown = set(user) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config key(s): "
                          f"{', '.join(sorted(path + k for k in unknown))}")
    return out


def resolve_config(user: dict | None) -> dict:
    return _merge(DEFAULTS, user or {})


def load_config(path: str | None) -> dict:
    if path is None:
        return resolve_config(None)
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from e
    return resolve_config(doc)


def write_resolved(cfg: dict, out_dir: str) -> None:
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "config.resolved.json"), "w", newline="\n") as fh:
        json.dump(cfg, fh, sort_keys=True, indent=1)
        fh.write("\n")


# ---------------------------------------------------------------------------
# builders
# ---------------------------------------------------------------------------


def tasks_from_config(cfg: dict) -> list[TaskSpec]:
    k = cfg["data"]["k"]
    tasks = []
    for kind in cfg["model"]["tasks"]:
        tasks.append(TaskSpec(kind, classes=k if kind == "seg" else 0))
    return tasks


def train_cfg_from_config(cfg: dict, seed: int | None = None) -> TrainCfg:
    tc = cfg["train"]
    return TrainCfg(
        iters=tc["iters"], lr0=tc["lr0"], batch=tc["batch"],
        weight_decay=tc["weight_decay"], momentum=tc["momentum"],
        seed=tc["seed"] if seed is None else seed,
        eval_every=tc["eval_every"], augment=tc["augment"],
        probe_layers=tuple(tc["probe_layers"]), probe_seed=tc["probe_seed"],
        probe_count=tc["probe_count"])


def aux_cfg_from_config(cfg: dict, need_genotype: bool = False) -> AuxCfg:
    ac = cfg["aux"]
    if ac["mode"] not in ("none", "basic", "genotype"):
        raise ConfigError(f"aux.mode {ac['mode']!r} invalid")
    if ac["agg"] not in ("sum", "concat"):
        raise ConfigError(f"aux.agg {ac['agg']!r} invalid")
    genotype = None
    if ac["genotype_path"] is not None and (need_genotype or ac["mode"] == "genotype"):
        genotype = load_genotype(ac["genotype_path"])
    if need_genotype and genotype is None:
        raise ConfigError("aux.genotype_path is required for this strategy")
    return AuxCfg(mode=ac["mode"],
                  agg=int(AggOp.SUM if ac["agg"] == "sum" else AggOp.CONCAT),
                  c_aux=ac["c_aux"], genotype=genotype,
                  allow_own_task=ac["allow_own_task"])


def search_cfg_from_config(cfg: dict, threads: int = 1) -> SearchCfg:
    sc = cfg["search"]
    ppo = PpoCfg(clip=sc["ppo"]["clip"], epochs=sc["ppo"]["epochs"],
                 entropy_coef=sc["ppo"]["entropy_coef"], lr=sc["ppo"]["lr"],
                 baseline_decay=sc["ppo"]["baseline_decay"])
    return SearchCfg(candidates=sc["candidates"], batch=sc["batch"],
                     seed=sc["seed"], ppo=ppo, threads=threads)


def eval_cfg_from_config(cfg: dict, dataset) -> EvalCfg:
    return EvalCfg(dataset=dataset, variant=cfg["model"]["variant"],
                   tasks=tasks_from_config(cfg),
                   short_iters=cfg["search"]["short_iters"],
                   batch=cfg["train"]["batch"], lr0=cfg["train"]["lr0"],
                   c_aux=cfg["aux"]["c_aux"],
                   allow_own_task=cfg["aux"]["allow_own_task"],
                   augment=cfg["train"]["augment"])
