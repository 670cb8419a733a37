"""Comparative runs: train several variants on one split and roll them out."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from .gnn import GnnConfig
from .graph import SplitSpec, TrajectoryDataset
from .presets import experiment_preset
from .rollout import RolloutReport, evaluate
from .simgen import ChainConfig, CouetteConfig, gen_couette_oldroydb, gen_damped_chain
from .training import TrainConfig, TrainState, best_model, prepare, train_epochs

log = logging.getLogger(__name__)


@dataclass
class Comparison:
    report: RolloutReport
    states: dict = field(default_factory=dict)  # variant -> TrainState
    seconds: dict = field(default_factory=dict)
    split: dict = field(default_factory=dict)

    def medians(self, method: str, split: str = "test") -> dict:
        out = {}
        for var in sorted({r[4] for r in self.report.errors}):
            x = self.report.select(method, split, var)
            out[var] = float(np.median(x)) if x.size else float("nan")
        return out


def generate(preset: dict) -> TrajectoryDataset:
    gen = dict(preset["generator"])
    kind, seed = gen.pop("kind"), gen.pop("seed", 0)
    if kind == "chain":
        return gen_damped_chain(ChainConfig(**gen), seed=seed)
    if kind == "couette":
        return gen_couette_oldroydb(CouetteConfig(**gen), seed=seed)
    raise ValueError(f"no generator for {kind!r}")


def compare(dataset: TrajectoryDataset, preset: dict, variants=("tignn", "gnn"), splits=("train", "test"),
            epochs: int | None = None, progress=None) -> Comparison:
    """Train every variant with identical settings and evaluate its best
    checkpoint on the requested splits."""
    cmp = Comparison(RolloutReport())
    for v in variants:
        tcfg = TrainConfig.from_dict({**preset["train"], "variant": v})
        if epochs is not None:
            tcfg.epochs = epochs
        gnn = GnnConfig(**{**preset.get("model", {}), "variant": v})
        t0 = time.perf_counter()
        state, train_ds, val_ds = prepare(tcfg, dataset, gnn, SplitSpec(**preset.get("split", {})))
        train_epochs(state, train_ds, val_ds, progress=progress)
        cmp.seconds[v] = time.perf_counter() - t0
        cmp.states[v] = state
        cmp.split = state.split
        log.info("%s trained in %.0f s, best val %.3e at epoch %d", v, cmp.seconds[v], state.best_val,
                 state.best_epoch)
        evaluate(best_model(state), dataset, {s: state.split[s] for s in splits}, v, cmp.report)
    return cmp


def run_preset(name: str, overrides: dict | None = None, **kw) -> Comparison:
    preset = experiment_preset(name)
    for section, values in (overrides or {}).items():
        preset.setdefault(section, {}).update(values)
    return compare(generate(preset), preset, **kw)


def final_losses(state: TrainState) -> dict:
    row = state.report.rows[-1]
    return {k: row[k] for k in ("train_data", "train_deg", "val_data") if k in row}
