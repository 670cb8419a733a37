"""Command-line entry point: generate, train, rollout, evaluate, inspect.

Exit codes: 0 success, 1 usage or config error, 2 data error, 3 numerical
divergence. Every file is written under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields

import numpy as np
import torch

from .autodiff import TrainingError
from .gnn import GnnConfig, Variant
from .graph import Case, ConfigError, DatasetError, SplitSpec, TrajectoryDataset, load_dataset, save_dataset
from .metriplectic import RolloutDivergence
from .presets import experiment_preset
from .rollout import RolloutReport, evaluate, rollout
from .simgen import ChainConfig, CouetteConfig, GeneratorError, gen_couette_oldroydb, gen_damped_chain
from .training import (TrainConfig, TrainingDivergence, load_model, load_state, prepare, resume_datasets,
                       save_checkpoint, train_epochs)

log = logging.getLogger("thermognn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_DIVERGED = 0, 1, 2, 3

GENERATORS = {"chain": (ChainConfig, gen_damped_chain), "couette": (CouetteConfig, gen_couette_oldroydb)}
SECTIONS = {"preset", "generator", "model", "train", "split"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- config ----------------------------------------------------------------

def _field_names(cls):
    return {f.name for f in fields(cls)}


def _check_keys(section: str, d: dict, allowed: set):
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")


def apply_overrides(cfg: dict, overrides) -> dict:
    """``section.key=value`` pairs; values parse as JSON, falling back to strings."""
    for item in overrides or []:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise UsageError(f"override must look like section.key=value, got {item!r}")
        path, raw = item.split("=", 1)
        section, key = path.split(".", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        cfg.setdefault(section, {})[key] = value
    return cfg


def load_config(path: str | None, preset: str | None, overrides=None) -> dict:
    if path:
        try:
            with open(path) as fh:
                cfg = json.load(fh)
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid JSON ({err})") from None
        if not isinstance(cfg, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if "preset" in cfg:
            base = experiment_preset(cfg["preset"])
            for k, v in cfg.items():
                if isinstance(v, dict):
                    base.setdefault(k, {}).update(v)
                else:
                    base[k] = v
            cfg = base
    elif preset:
        cfg = experiment_preset(preset)
    else:
        cfg = {}
    cfg = apply_overrides(cfg, overrides)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict):
    _check_keys("top level", cfg, SECTIONS)
    gen = cfg.get("generator")
    if gen is not None:
        kind = gen.get("kind")
        if kind not in GENERATORS:
            raise ConfigError(f"generator.kind must be one of {sorted(GENERATORS)}, got {kind!r}")
        _check_keys("generator", gen, _field_names(GENERATORS[kind][0]) | {"kind", "seed"})
    if "model" in cfg:
        _check_keys("model", cfg["model"], _field_names(GnnConfig))
    if "train" in cfg:
        _check_keys("train", cfg["train"], _field_names(TrainConfig))
    if "split" in cfg:
        _check_keys("split", cfg["split"], _field_names(SplitSpec))


# --- commands --------------------------------------------------------------

def dataset_summary(ds: TrajectoryDataset) -> str:
    nodes = sorted({c.n_nodes for c in ds.cases})
    steps = sorted({c.n_steps for c in ds.cases})
    lay = ds.layout
    lines = [
        f"dataset   {ds.name or '-'}",
        f"cases     {len(ds)}",
        f"nodes     {nodes[0] if len(nodes) == 1 else nodes}",
        f"N_T       {steps[0] if len(steps) == 1 else steps}",
        f"dt        {ds.cases[0].dt:g}" if ds.cases else "dt        -",
        f"channels  {', '.join(lay.state_names)} (F_z={lay.n_state})",
        f"features  F_v={lay.n_node_features} F_e={lay.n_edge_features} F_g={lay.n_globals}",
    ]
    return "\n".join(lines)


def cmd_generate(args) -> int:
    cfg = load_config(args.config, args.preset, args.set)
    gen = dict(cfg.get("generator") or {})
    if not gen:
        raise ConfigError("config has no [generator] block")
    kind = gen.pop("kind")
    seed = args.seed if args.seed is not None else gen.pop("seed", 0)
    gen.pop("seed", None)
    cls, fn = GENERATORS[kind]
    ds = fn(cls(**gen), seed=seed)
    save_dataset(ds, args.out)
    print(dataset_summary(ds))
    return EXIT_OK


def _train_config(cfg: dict, args) -> TrainConfig:
    d = dict(cfg.get("train") or {})
    if args.seed is not None:
        d["seed"] = args.seed
    if args.variant:
        d["variant"] = args.variant
    return TrainConfig.from_dict(d)


def cmd_train(args) -> int:
    ds = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    if args.resume:
        state = load_state(args.resume)
        _check_layout(state.model.layout, ds)
        if args.epochs is not None:
            state.config.epochs = args.epochs
        train_ds, val_ds = resume_datasets(state, ds)
    else:
        cfg = load_config(args.config, args.preset, args.set)
        tcfg = _train_config(cfg, args)
        if args.epochs is not None:
            tcfg.epochs = args.epochs
        gnn = GnnConfig(**{**(cfg.get("model") or {}), "variant": tcfg.variant})
        split = SplitSpec(**cfg.get("split", {}))
        state, train_ds, val_ds = prepare(tcfg, ds, gnn, split)
    progress = None
    if not args.quiet:
        def progress(row):
            if row["epoch"] % max(1, args.log_every) == 0:
                extra = f" val_data={row['val_data']:.4e}" if "val_data" in row else ""
                print(f"epoch {row['epoch']:5d} lr={row['lr']:.1e} data={row['train_data']:.4e} "
                      f"deg={row['train_deg']:.4e}{extra}", flush=True)
    code = EXIT_OK
    try:
        train_epochs(state, train_ds, val_ds, checkpoint_dir=args.out, progress=progress)
    except (TrainingDivergence, TrainingError) as err:
        print(f"training diverged: {err}", file=sys.stderr)
        code = EXIT_DIVERGED
    save_checkpoint(os.path.join(args.out, "last"), state)
    if state.best_params is not None:
        save_checkpoint(os.path.join(args.out, "best"), state, best=True)
    state.report.to_csv(os.path.join(args.out, "loss.csv"))
    print(f"{state.config.variant}: {state.epoch} epochs, best val {state.best_val:.4e} at epoch {state.best_epoch}")
    return code


def _check_layout(layout, ds: TrajectoryDataset):
    if layout.to_dict() != ds.layout.to_dict():
        raise DatasetError(f"channel layout mismatch: checkpoint has {layout.state_names}, "
                           f"dataset has {ds.layout.state_names}")


def _load_for_eval(checkpoint: str, ds: TrajectoryDataset):
    try:
        model, meta = load_model(checkpoint)
    except FileNotFoundError:
        raise DatasetError(f"checkpoint not found: {checkpoint}") from None
    _check_layout(model.layout, ds)
    return model, meta


def cmd_rollout(args) -> int:
    ds = load_dataset(args.data)
    model, _ = _load_for_eval(args.checkpoint, ds)
    if not 0 <= args.case < len(ds):
        raise DatasetError(f"case {args.case} out of range (dataset has {len(ds)})")
    case = ds.cases[args.case]
    traj = rollout(model, case, ds.layout)
    pred = Case(dt=case.dt, states=traj.states, node_type=case.node_type, edges=case.edges,
                positions=case.positions, globals=case.globals,
                loads=None if case.loads is None else case.loads[: traj.states.shape[0]])
    save_dataset(TrajectoryDataset(ds.layout, [pred], f"rollout of case {args.case}"), args.out)
    if traj.diverged_at is not None:
        print(f"rollout diverged at step {traj.diverged_at}; partial trajectory written", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"rolled out {traj.states.shape[0] - 1} steps of case {args.case}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ds = load_dataset(args.data)
    report = RolloutReport()
    for ckpt in args.checkpoint:
        model, meta = _load_for_eval(ckpt, ds)
        split = meta.get("split") or {}
        ids = {s: split.get(s, []) for s in args.splits}
        bad = [k for v in ids.values() for k in v if k >= len(ds)]
        if bad:
            raise DatasetError(f"checkpoint split refers to case {bad[0]} but dataset has {len(ds)} cases")
        method = Variant(model.config.variant).value
        evaluate(model, ds, ids, method, report)
    os.makedirs(args.out, exist_ok=True)
    report.write_csv(os.path.join(args.out, "boxplots.csv"))
    report.write_errors_csv(os.path.join(args.out, "errors.csv"))
    report.write_traces(os.path.join(args.out, "traces.json"))
    for b in report.boxes():
        print(f"{b['method']:6s} {b['split']:5s} {b['variable']:6s} median {b['med']:.4e}")
    for d in report.divergences:
        print(f"warning: {d['method']} diverged on {d['split']} case {d['case']} at step {d['step']}",
              file=sys.stderr)
    return EXIT_OK


def cmd_inspect(args) -> int:
    if args.data:
        print(dataset_summary(load_dataset(args.data)))
    if args.checkpoint:
        model, meta = load_model(args.checkpoint)
        print(f"checkpoint {args.checkpoint} ({meta.get('kind')})")
        for k, v in model.describe().items():
            print(f"  {k:10s} {v}")
        print(f"  epoch      {meta['epoch']}  best {meta['best_epoch']} ({meta['best_val']})")
    if not (args.data or args.checkpoint):
        raise UsageError("inspect needs --data and/or --checkpoint")
    return EXIT_OK


# --- parser ----------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="thermognn", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=1, help="torch intra-op threads (default 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", help="JSON experiment config")
            sp.add_argument("--preset", help="built-in experiment preset")
            sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="config override")
        sp.add_argument("--seed", type=int)

    g = sub.add_parser("generate", help="simulate a ground-truth dataset")
    common(g)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model")
    common(t)
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--variant", choices=[v.value for v in Variant])
    t.add_argument("--epochs", type=int)
    t.add_argument("--resume", metavar="CHECKPOINT", help="continue from a 'last' checkpoint")
    t.add_argument("--log-every", type=int, default=50)
    t.add_argument("--quiet", action="store_true")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("rollout", help="roll out one case")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--case", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_rollout)

    e = sub.add_parser("evaluate", help="rollout errors and traces for one or more checkpoints")
    e.add_argument("--checkpoint", action="append", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--splits", nargs="+", default=["train", "test"])
    e.set_defaults(func=cmd_evaluate)

    i = sub.add_parser("inspect", help="summarize a dataset or checkpoint")
    i.add_argument("--data")
    i.add_argument("--checkpoint")
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    torch.set_num_threads(max(1, args.threads))
    try:
        return args.func(args)
    except UsageError as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ConfigError, KeyError, TypeError) as err:
        msg = err.args[0] if isinstance(err, KeyError) and err.args else err
        print(f"config error: {msg}", file=sys.stderr)
        return EXIT_USAGE
    except (DatasetError, FileNotFoundError, GeneratorError) as err:
        print(f"data error: {err}", file=sys.stderr)
        return EXIT_DATA
    except (RolloutDivergence, TrainingDivergence, TrainingError) as err:
        print(f"diverged: {err}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
