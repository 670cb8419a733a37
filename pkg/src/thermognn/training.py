"""Single-snapshot supervised training with the data + degeneracy loss."""

from __future__ import annotations

import copy
import csv
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .autodiff import (DTYPE, AdamState, TrainingError, adam_step, load_arrays, load_module_arrays, lr_at,
                       module_arrays, save_arrays)
from .gnn import GenericModel, GnnConfig, Normalization, Variant, fit_normalization
from .graph import (ChannelLayout, GraphTemplate, SplitSpec, TrajectoryDataset, batch_templates, inject_noise,
                    make_template, split_indices)
from .metriplectic import degeneracy_residuals

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, msg, epoch=None):
        super().__init__(msg)
        self.epoch = epoch


@dataclass
class TrainConfig:
    lam: float = 10.0
    base_lr: float = 1e-3
    milestones: list = field(default_factory=lambda: [2000, 4000])
    lr_factor: float = 0.1
    epochs: int = 6000
    batch_size: int = 8
    noise_var: float = 1e-2
    seed: int = 0
    variant: str = "tignn"
    checkpoint_every: int = 100
    val_every: int = 1
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        self.variant = Variant(self.variant).value
        self.milestones = sorted(int(m) for m in self.milestones)
        if not self.lam > 0:
            raise ValueError("lam must be positive")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.noise_var < 0:
            raise ValueError("noise_var must be >= 0")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


# --- losses ----------------------------------------------------------------

def data_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean over nodes and channels of the squared rate error."""
    return ((pred - gt) ** 2).mean()


def degeneracy_loss(r_s: torch.Tensor, r_e: torch.Tensor) -> torch.Tensor:
    """Mean over nodes and channels of |L dS/dz|^2 + |M dE/dz|^2."""
    return (r_s ** 2 + r_e ** 2).mean()


def total_loss(data_terms, deg_terms, lam: float) -> torch.Tensor:
    """(1/N_batch) sum_n (lam * data_n + deg_n) over per-snapshot terms."""
    data_terms = torch.as_tensor(data_terms, dtype=DTYPE) if not isinstance(data_terms, torch.Tensor) else data_terms
    deg_terms = torch.as_tensor(deg_terms, dtype=DTYPE) if not isinstance(deg_terms, torch.Tensor) else deg_terms
    if data_terms.numel() == 0:
        raise ValueError("empty batch")
    return (lam * data_terms + deg_terms).mean()


def _per_graph_mean(per_node: torch.Tensor, template: GraphTemplate) -> torch.Tensor:
    sums = per_node.new_zeros(template.n_graphs).index_add(0, template.node_graph, per_node)
    counts = torch.bincount(template.node_graph, minlength=template.n_graphs).to(per_node.dtype)
    return sums / counts


def model_rate(model: GenericModel, z: torch.Tensor, template: GraphTemplate, create_graph: bool = False):
    """Predicted physical dz/dt and, for metriplectic variants, the operators."""
    return model.rate(z, template, create_graph=create_graph)


def snapshot_losses(model: GenericModel, z: torch.Tensor, target: torch.Tensor, template: GraphTemplate,
                    create_graph: bool = True):
    """Per-snapshot (data, degeneracy) losses in standardized rate units."""
    rate, ops = model_rate(model, z, template, create_graph)
    unit = model.rate_unit()
    err = ((rate - target) / unit) ** 2
    data = _per_graph_mean(err.mean(-1), template)
    if ops is None:
        deg = torch.zeros_like(data)
    else:
        r_s, r_e = degeneracy_residuals(ops)
        deg = _per_graph_mean((((r_s / unit) ** 2 + (r_e / unit) ** 2)).mean(-1), template)
    return data, deg


class SnapshotBank:
    """Labelled (z_t, dz/dt) pairs of a dataset with cached graph templates."""

    def __init__(self, ds: TrajectoryDataset):
        self.ds = ds
        self.layout = ds.layout
        self.pairs = ds.snapshot_pairs()
        self._static = {}
        for k, c in enumerate(ds.cases):
            if not (c.loads is not None and ds.layout.n_loads):
                self._static[k] = make_template(c, ds.layout, 0)

    def __len__(self):
        return len(self.pairs)

    def template(self, k: int, t: int) -> GraphTemplate:
        if k in self._static:
            return self._static[k]
        return make_template(self.ds.cases[k], self.layout, t)

    def batch(self, idx, rng=None, noise_var=0.0, noise_scale=None):
        states, targets, temps = [], [], []
        noisy_channels = self.layout.node_state_channels
        for i in idx:
            k, t = self.pairs[i]
            c = self.ds.cases[k]
            z = c.states[t]
            if rng is not None and noise_var > 0:
                z = inject_noise(z, noise_var, rng, scale=noise_scale, channels=noisy_channels)
            states.append(z)
            targets.append(c.derivative(t))
            temps.append(self.template(k, t))
        z = torch.as_tensor(np.concatenate(states), dtype=DTYPE)
        target = torch.as_tensor(np.concatenate(targets), dtype=DTYPE)
        return z, target, batch_templates(temps)


def evaluate_losses(model: GenericModel, bank: SnapshotBank, batch_size: int = 64):
    """Mean per-snapshot (data, degeneracy) losses without noise."""
    if len(bank) == 0:
        return float("nan"), float("nan")
    tot_d, tot_g = 0.0, 0.0
    for start in range(0, len(bank), batch_size):
        idx = range(start, min(start + batch_size, len(bank)))
        z, target, temp = bank.batch(idx)
        z.requires_grad_(True)
        data, deg = snapshot_losses(model, z, target, temp, create_graph=False)
        tot_d += float(data.detach().sum())
        tot_g += float(deg.detach().sum())
    return tot_d / len(bank), tot_g / len(bank)


@dataclass
class LossReport:
    rows: list = field(default_factory=list)

    COLUMNS = ("epoch", "lr", "train_data", "train_deg", "train_total", "val_data", "val_deg")

    def add(self, **row):
        self.rows.append({k: row.get(k, float("nan")) for k in self.COLUMNS})

    def column(self, name):
        return np.array([r[name] for r in self.rows], dtype=np.float64)

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([r["epoch"]] + [repr(float(r[k])) for k in self.COLUMNS[1:]])


@dataclass
class TrainState:
    model: GenericModel
    config: TrainConfig
    adam: AdamState
    rng: np.random.Generator
    epoch: int = 0  # epochs completed
    report: LossReport = field(default_factory=LossReport)
    best_params: dict | None = None
    best_val: float = math.inf
    best_epoch: int = -1
    split: dict = field(default_factory=dict)


def build_model(gnn: GnnConfig, train_ds: TrajectoryDataset, seed: int = 0) -> GenericModel:
    norm = fit_normalization(train_ds)
    n_nodes = train_ds.cases[0].n_nodes
    return GenericModel(gnn, train_ds.layout, norm, n_nodes=n_nodes, seed=seed)


def init_state(model: GenericModel, config: TrainConfig, split: dict | None = None) -> TrainState:
    params = list(model.parameters())
    adam = AdamState.for_params(params, beta1=config.beta1, beta2=config.beta2, eps=config.eps)
    return TrainState(model, config, adam, np.random.default_rng(config.seed), split=split or {})


def train_epochs(state: TrainState, train_ds: TrajectoryDataset, val_ds: TrajectoryDataset | None = None,
                 until: int | None = None, checkpoint_dir: str | None = None, progress=None) -> TrainState:
    """Run epochs state.epoch .. until-1 (default: config.epochs)."""
    cfg = state.config
    model = state.model
    until = cfg.epochs if until is None else until
    bank = SnapshotBank(train_ds)
    vbank = SnapshotBank(val_ds) if val_ds is not None and len(val_ds) else None
    params = list(model.parameters())
    noise_scale = model.norm.state.std
    last_good = [p.detach().clone() for p in params]
    while state.epoch < until:
        epoch = state.epoch
        lr = lr_at(epoch, cfg.base_lr, cfg.milestones, cfg.lr_factor)
        order = state.rng.permutation(len(bank))
        sum_d = sum_g = sum_t = 0.0
        n_seen = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            z, target, temp = bank.batch(idx, state.rng, cfg.noise_var, noise_scale)
            z.requires_grad_(True)
            data, deg = snapshot_losses(model, z, target, temp, create_graph=True)
            loss = total_loss(data, deg, cfg.lam)
            if not torch.isfinite(loss):
                _restore(params, last_good)
                raise TrainingDivergence(f"non-finite loss at epoch {epoch}", epoch=epoch)
            grads = torch.autograd.grad(loss, params, allow_unused=True)
            try:
                adam_step(params, grads, state.adam, lr)
            except TrainingError:
                _restore(params, last_good)
                raise
            b = len(idx)
            sum_d += float(data.detach().sum())
            sum_g += float(deg.detach().sum())
            sum_t += float(loss.detach()) * b
            n_seen += b
        row = {"epoch": epoch, "lr": lr, "train_data": sum_d / n_seen, "train_deg": sum_g / n_seen,
               "train_total": sum_t / n_seen}
        last_epoch = epoch == until - 1 or epoch == cfg.epochs - 1
        if vbank is not None and (epoch % cfg.val_every == 0 or last_epoch):
            vd, vg = evaluate_losses(model, vbank)
            row.update(val_data=vd, val_deg=vg)
            if vd < state.best_val:
                state.best_val, state.best_epoch = vd, epoch
                state.best_params = module_arrays(model)
        elif vbank is None and row["train_data"] < state.best_val:
            state.best_val, state.best_epoch = row["train_data"], epoch
            state.best_params = module_arrays(model)
        state.report.add(**row)
        state.epoch += 1
        last_good = [p.detach().clone() for p in params]
        if progress is not None:
            progress(row)
        if checkpoint_dir and cfg.checkpoint_every and state.epoch % cfg.checkpoint_every == 0:
            save_checkpoint(os.path.join(checkpoint_dir, "last"), state)
    return state


def _restore(params, saved):
    with torch.no_grad():
        for p, s in zip(params, saved):
            p.copy_(s)


def prepare(config: TrainConfig, dataset: TrajectoryDataset, gnn: GnnConfig | None = None,
            split: SplitSpec = SplitSpec()):
    """Split by case and build a fresh state; returns (state, train_ds, val_ds)."""
    gnn = gnn or GnnConfig(variant=config.variant)
    if gnn.variant != config.variant:
        gnn = GnnConfig(**{**gnn.to_dict(), "variant": config.variant})
    tr, va, te = split_indices(len(dataset), split)
    train_ds, val_ds = dataset.subset(tr), dataset.subset(va)
    model = build_model(gnn, train_ds, seed=config.seed)
    state = init_state(model, config, {"train": tr, "val": va, "test": te, "seed": split.seed,
                                       "ratios": list(split.ratios)})
    return state, train_ds, val_ds


def resume_datasets(state: TrainState, dataset: TrajectoryDataset):
    sp = state.split
    return dataset.subset(sp["train"]), dataset.subset(sp["val"])


def train(config: TrainConfig, dataset: TrajectoryDataset, gnn: GnnConfig | None = None,
          split: SplitSpec = SplitSpec(), checkpoint_dir: str | None = None, progress=None) -> TrainState:
    """Split by case, fit statistics on the training cases, train and keep
    the best-validation parameters in ``state.best_params``."""
    state, train_ds, val_ds = prepare(config, dataset, gnn, split)
    train_epochs(state, train_ds, val_ds, checkpoint_dir=checkpoint_dir, progress=progress)
    if checkpoint_dir:
        save_checkpoint(os.path.join(checkpoint_dir, "last"), state)
        save_checkpoint(os.path.join(checkpoint_dir, "best"), state, best=True)
    return state


def best_model(state: TrainState) -> GenericModel:
    model = copy.deepcopy(state.model)
    if state.best_params is not None:
        load_module_arrays(model, state.best_params)
    return model


# --- checkpoints -----------------------------------------------------------
#
# A checkpoint is a flat parameter file (see autodiff.save_arrays) whose
# entries are "param/<name>", plus "adam_m/<name>", "adam_v/<name>" and
# "best/<name>" for resumable training state. The manifest meta block holds
# the model config, channel layout, normalization, train config, split, epoch,
# RNG state and loss report.

def save_checkpoint(path: str, state: TrainState, best: bool = False) -> None:
    model = state.model
    names = [n for n, _ in model.named_parameters()]
    arrays = {}
    if best and state.best_params is not None:
        arrays.update({f"param/{k}": v for k, v in state.best_params.items()})
    else:
        arrays.update({f"param/{k}": v for k, v in module_arrays(model).items()})
    if not best:
        for n, m, v in zip(names, state.adam.m, state.adam.v):
            arrays[f"adam_m/{n}"] = m.detach().numpy()
            arrays[f"adam_v/{n}"] = v.detach().numpy()
        if state.best_params is not None:
            arrays.update({f"best/{k}": v for k, v in state.best_params.items()})
    meta = {
        "kind": "best" if best else "last",
        "model": model.config.to_dict(),
        "layout": model.layout.to_dict(),
        "normalization": model.norm.to_dict(),
        "n_nodes": model.n_nodes,
        "spnn_width": model.spnn_width,
        "train": state.config.to_dict(),
        "split": state.split,
        "epoch": state.epoch,
        "best_epoch": state.best_epoch,
        "best_val": state.best_val if math.isfinite(state.best_val) else None,
        "adam_step": state.adam.step,
        "rng_state": state.rng.bit_generator.state,
        "report": state.report.rows,
    }
    save_arrays(path, arrays, meta)


def load_model(path: str) -> tuple[GenericModel, dict]:
    arrays, meta = load_arrays(path)
    layout = ChannelLayout.from_dict(meta["layout"])
    model = GenericModel(GnnConfig(**meta["model"]), layout, Normalization.from_dict(meta["normalization"]),
                         n_nodes=meta["n_nodes"], spnn_width=meta["spnn_width"])
    load_module_arrays(model, {k[len("param/"):]: v for k, v in arrays.items() if k.startswith("param/")})
    return model, meta


def load_state(path: str) -> TrainState:
    """Resumable training state from a "last" checkpoint."""
    arrays, meta = load_arrays(path)
    model, _ = load_model(path)
    cfg = TrainConfig.from_dict(meta["train"])
    state = init_state(model, cfg, meta["split"])
    names = [n for n, _ in model.named_parameters()]
    if f"adam_m/{names[0]}" in arrays:
        state.adam.m = [torch.as_tensor(arrays[f"adam_m/{n}"], dtype=DTYPE) for n in names]
        state.adam.v = [torch.as_tensor(arrays[f"adam_v/{n}"], dtype=DTYPE) for n in names]
    state.adam.step = meta["adam_step"]
    state.rng.bit_generator.state = meta["rng_state"]
    state.epoch = meta["epoch"]
    state.report = LossReport([dict(r) for r in meta["report"]])
    best = {k[len("best/"):]: v for k, v in arrays.items() if k.startswith("best/")}
    state.best_params = best or None
    state.best_val = meta["best_val"] if meta["best_val"] is not None else math.inf
    state.best_epoch = meta["best_epoch"]
    return state
