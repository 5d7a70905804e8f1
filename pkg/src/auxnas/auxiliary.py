"""Auxiliary modules: train-time-only networks reading the encoder taps,
supervised by task losses, and removable at inference.

Information flows one way (main -> aux), so main predictions never depend
on aux parameters. Searched modules are described by a Genotype: per task,
P cells of (two input locations, two adaptor ops, one aggregator). Cells
are instantiated task-major and every cell output joins a shared location
list, which is what lets later tasks tap earlier tasks' cells.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tensor, tag_aux
from .layers import (
    AdaptorOp,
    AggOp,
    BuildCtx,
    GenotypeError,
    TaskHead,
    build_adaptor_op,
    build_aggregator,
    build_basic_adaptor,
)
from .model import TaskSpec

OP_VOCAB_VERSION = 1


@dataclass(frozen=True)
class AuxCell:
    """Five tokens: two input locations, two adaptor ops, one aggregator."""

    in1: int
    in2: int
    op1: int
    op2: int
    agg: int

    def tokens(self) -> list[int]:
        return [self.in1, self.in2, self.op1, self.op2, self.agg]


def available_locations(p_taps: int, n_tasks: int, t: int, p: int,
                        allow_own_task: bool = True) -> list[int]:
    """Legal input locations for cell p of task t (0-based).

    The P taps are always available; a cell output (t2, p2) is available
    when p2 < p and t2 <= t (t2 < t under the strict cross-task-only
    variant). Location index of cell (t2, p2) is P + t2*P + p2, matching
    task-major generation order.
    """
    locs = list(range(p_taps))
    for t2 in range(t + 1 if allow_own_task else t):
        for p2 in range(p):
            locs.append(p_taps + t2 * p_taps + p2)
    return locs


@dataclass(frozen=True)
class Genotype:
    """Per task, exactly P cells in order; flattens to 5*P*T tokens."""

    p: int
    t: int
    cells: tuple[tuple[AuxCell, ...], ...]

    def __post_init__(self):
        if len(self.cells) != self.t or any(len(c) != self.p for c in self.cells):
            raise GenotypeError(f"genotype needs {self.t} x {self.p} cells")

    def flat_cells(self) -> list[AuxCell]:
        return [c for task_cells in self.cells for c in task_cells]

    def tokens(self) -> list[int]:
        return [tok for c in self.flat_cells() for tok in c.tokens()]

    def validate(self, allow_own_task: bool = True) -> None:
        for t in range(self.t):
            for p in range(self.p):
                cell = self.cells[t][p]
                avail = set(available_locations(self.p, self.t, t, p, allow_own_task))
                for loc in (cell.in1, cell.in2):
                    if loc not in avail:
                        raise GenotypeError(
                            f"cell (task {t}, pos {p}): location {loc} unavailable")
                for op in (cell.op1, cell.op2):
                    if not 0 <= op < len(AdaptorOp):
                        raise GenotypeError(f"adaptor op {op} out of range")
                if not 0 <= cell.agg < len(AggOp):
                    raise GenotypeError(f"aggregator {cell.agg} out of range")


def genotype_to_json(g: Genotype) -> dict:
    return {"P": g.p, "T": g.t, "op_vocab_version": OP_VOCAB_VERSION,
            "cells": [c.tokens() for c in g.flat_cells()]}


def genotype_from_json(doc: dict) -> Genotype:
    if doc.get("op_vocab_version") != OP_VOCAB_VERSION:
        raise GenotypeError(f"op_vocab_version {doc.get('op_vocab_version')} unsupported")
    p, t = int(doc["P"]), int(doc["T"])
    rows = doc["cells"]
    if len(rows) != p * t:
        raise GenotypeError(f"expected {p * t} cells, got {len(rows)}")
    cells = tuple(
        tuple(AuxCell(*map(int, rows[ti * p + pi])) for pi in range(p))
        for ti in range(t))
    g = Genotype(p, t, cells)
    g.validate()
    return g


def save_genotype(path: str, g: Genotype) -> None:
    with open(path, "w", newline="\n") as fh:
        json.dump(genotype_to_json(g), fh, sort_keys=True, indent=1)
        fh.write("\n")


def load_genotype(path: str) -> Genotype:
    with open(path) as fh:
        return genotype_from_json(json.load(fh))


# ---------------------------------------------------------------------------
# module construction
# ---------------------------------------------------------------------------


class BasicAuxModule:
    """Hand-designed chain for one task: adapt the first tap, then fold in
    each later tap through an aggregator (h_p = h_{p-1} (+) D_p(O_{p+1}))."""

    def __init__(self, ctx: BuildCtx, t: int, task: TaskSpec,
                 tap_channels: tuple[int, ...], c_aux: int, agg: AggOp):
        tag = tag_aux(t)
        prefix = f"aux.t{t}"
        self.adaptors = [
            build_basic_adaptor(ctx, f"{prefix}.adapt{p}", tag, cin, c_aux)
            for p, cin in enumerate(tap_channels)
        ]
        self.aggs = [
            build_aggregator(agg, ctx, f"{prefix}.agg{p}", tag, c_aux)
            for p in range(len(tap_channels) - 1)
        ]
        self.head = TaskHead(ctx, f"{prefix}.head", tag, c_aux, task.out_channels, task.kind)

    def forward(self, taps: list[Tensor], out_hw: tuple[int, int], mode: str) -> Tensor:
        ref_h, ref_w = taps[0].shape[2], taps[0].shape[3]

        def align(x):
            if x.shape[2] != ref_h or x.shape[3] != ref_w:
                return ad.bilinear_resize(x, ref_h, ref_w)
            return x

        h = align(self.adaptors[0](taps[0], mode))
        for p in range(1, len(taps)):
            adapted = align(self.adaptors[p](taps[p], mode))
            h = self.aggs[p - 1](h, adapted, mode)
        return self.head(h, out_hw[0], out_hw[1], mode)


class _BuiltCell:
    def __init__(self, cell: AuxCell, op1, op2, agg):
        self.cell = cell
        self.op1, self.op2, self.agg = op1, op2, agg


class GenotypeAuxSet:
    """All tasks' searched modules, instantiated in generation order so a
    shared location list (taps then cell outputs) resolves every input."""

    def __init__(self, genotype: Genotype, tasks: list[TaskSpec], ctx: BuildCtx,
                 tap_channels: tuple[int, ...], c_aux: int,
                 allow_own_task: bool = True):
        if genotype.t != len(tasks):
            raise GenotypeError(f"genotype supervises {genotype.t} tasks, model has {len(tasks)}")
        if genotype.p != len(tap_channels):
            raise GenotypeError(f"genotype has {genotype.p} cells/task, model exposes "
                                f"{len(tap_channels)} taps")
        genotype.validate(allow_own_task)
        self.genotype = genotype
        self.c_aux = c_aux
        loc_channels = list(tap_channels)
        self.built: list[_BuiltCell] = []
        self.heads: dict[int, TaskHead] = {}
        for ti, task_cells in enumerate(genotype.cells):
            tag = tag_aux(ti + 1)
            for pi, cell in enumerate(task_cells):
                prefix = f"aux.t{ti + 1}.cell{pi}"
                op1 = build_adaptor_op(AdaptorOp(cell.op1), ctx, f"{prefix}.op1", tag,
                                       loc_channels[cell.in1], c_aux)
                op2 = build_adaptor_op(AdaptorOp(cell.op2), ctx, f"{prefix}.op2", tag,
                                       loc_channels[cell.in2], c_aux)
                agg = build_aggregator(AggOp(cell.agg), ctx, f"{prefix}.agg", tag, c_aux)
                self.built.append(_BuiltCell(cell, op1, op2, agg))
                loc_channels.append(c_aux)
            task = tasks[ti]
            self.heads[ti + 1] = TaskHead(ctx, f"aux.t{ti + 1}.head", tag, c_aux,
                                          task.out_channels, task.kind)

    def forward(self, taps: list[Tensor], out_hw: tuple[int, int], mode: str,
                detach_taps: bool = False) -> dict[int, Tensor]:
        if len(taps) != self.genotype.p:
            raise GenotypeError(f"expected {self.genotype.p} taps, got {len(taps)}")
        if detach_taps:
            taps = [ad.detach(t) for t in taps]
        ref_h, ref_w = taps[0].shape[2], taps[0].shape[3]

        def align(x):
            if x.shape[2] != ref_h or x.shape[3] != ref_w:
                return ad.bilinear_resize(x, ref_h, ref_w)
            return x

        locs = list(taps)
        p = self.genotype.p
        for bc in self.built:
            a1 = align(bc.op1(locs[bc.cell.in1], mode))
            a2 = align(bc.op2(locs[bc.cell.in2], mode))
            locs.append(bc.agg(a1, a2, mode))
        preds = {}
        for t, head in self.heads.items():
            last = locs[len(taps) + (t - 1) * p + (p - 1)]
            preds[t] = head(last, out_hw[0], out_hw[1], mode)
        return preds


class BasicAuxSet:
    """Basic modules for a chosen subset of tasks (keyed by task index)."""

    def __init__(self, modules: dict[int, BasicAuxModule]):
        self.modules = modules

    def forward(self, taps: list[Tensor], out_hw: tuple[int, int], mode: str,
                detach_taps: bool = False) -> dict[int, Tensor]:
        if detach_taps:
            taps = [ad.detach(t) for t in taps]
        return {t: m.forward(taps, out_hw, mode) for t, m in self.modules.items()}


def build_basic_aux(params: ParamSet, rng: np.random.Generator, task_indices: list[int],
                    tasks: list[TaskSpec], tap_channels: tuple[int, ...], c_aux: int,
                    agg: AggOp = AggOp.SUM, dtype=np.float32) -> BasicAuxSet:
    ctx = BuildCtx(params, rng, dtype)
    modules = {}
    for t in task_indices:
        modules[t] = BasicAuxModule(ctx, t, tasks[t - 1], tap_channels, c_aux, AggOp(agg))
    return BasicAuxSet(modules)


def build_from_genotype(params: ParamSet, rng: np.random.Generator, genotype: Genotype,
                        tasks: list[TaskSpec], tap_channels: tuple[int, ...], c_aux: int,
                        allow_own_task: bool = True, dtype=np.float32) -> GenotypeAuxSet:
    ctx = BuildCtx(params, rng, dtype)
    return GenotypeAuxSet(genotype, tasks, ctx, tap_channels, c_aux, allow_own_task)


def strip_aux(params: ParamSet) -> ParamSet:
    """Drop every aux-tagged parameter; the remainder is the inference model."""
    return params.filtered(lambda path, tag: not tag.startswith("aux:"))
