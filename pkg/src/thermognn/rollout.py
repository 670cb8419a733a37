"""Autoregressive rollouts, relative L2 errors, box statistics and
energy/entropy traces."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .autodiff import DTYPE, ContractError
from .graph import Case, ChannelLayout, GraphTemplate, make_template
from .metriplectic import RolloutDivergence, generic_step

log = logging.getLogger(__name__)


@dataclass
class Trajectory:
    states: np.ndarray  # (steps+1, n, F_z)
    E: np.ndarray | None = None  # (steps+1, n) per-node potentials
    S: np.ndarray | None = None
    diverged_at: int | None = None


def rollout(model, case: Case, layout: ChannelLayout, n_steps: int | None = None) -> Trajectory:
    """Integrate from the case's initial state only; no later ground truth is used.

    ``model`` needs ``rate(z, template) -> (dz/dt, ops)`` and ``has_potentials``;
    ``ops`` is None for direct-rate models, which then take plain Euler steps.
    Operators may act per node or on the flattened state.
    """
    n_steps = case.n_steps if n_steps is None else n_steps
    static = case.loads is None or not layout.n_loads
    template = make_template(case, layout, 0)
    z = torch.as_tensor(case.states[0], dtype=DTYPE)
    states = [z.numpy().copy()]
    Es, Ss = [], []
    frozen = layout.frozen_channels
    diverged = None
    for t in range(n_steps):
        if not static:
            template = make_template(case, layout, t)
        zt = z.detach().requires_grad_(True)
        rate, ops = model.rate(zt, template)
        try:
            if ops is None:
                if frozen:
                    rate = rate.clone()
                    rate[:, frozen] = 0.0
                z_next = z + case.dt * rate.detach()
                if not torch.isfinite(z_next).all():
                    raise RolloutDivergence(f"non-finite state after step {t}", step=t)
            else:
                Es.append(ops.E.detach().numpy().copy())
                Ss.append(ops.S.detach().numpy().copy())
                ops.L, ops.M = ops.L.detach(), ops.M.detach()
                ops.gradE, ops.gradS = ops.gradE.detach(), ops.gradS.detach()
                if ops.gradE.shape == z.shape:
                    z_next = generic_step(z, ops, case.dt, frozen=frozen, step=t)
                elif frozen:
                    raise ContractError("frozen channels need per-node operators")
                else:  # operators acting on a flattened state
                    z_next = generic_step(z.reshape(ops.gradE.shape), ops, case.dt, step=t).reshape(z.shape)
        except RolloutDivergence as err:
            log.warning("rollout diverged at step %d", t)
            diverged = err.step
            break
        z = z_next.detach()
        states.append(z.numpy().copy())
    E = S = None
    if model.has_potentials:
        if diverged is None:
            if not static:
                template = make_template(case, layout, n_steps)
            with torch.no_grad():
                e_last, s_last = model.potentials(z, template)
            Es.append(np.asarray(e_last.detach().numpy()).copy())
            Ss.append(np.asarray(s_last.detach().numpy()).copy())
        E, S = np.stack(Es), np.stack(Ss)
    return Trajectory(np.stack(states), E, S, diverged)


def relative_l2(gt: np.ndarray, pred: np.ndarray, channels=None) -> float:
    """|gt - pred|_2 / |gt|_2 over all nodes of the chosen channels.

    Returns nan when the ground truth has zero norm (callers exclude it).
    """
    gt = np.asarray(gt, dtype=np.float64)
    pred = np.asarray(pred, dtype=np.float64)
    if channels is not None:
        gt, pred = gt[..., channels], pred[..., channels]
    denom = np.linalg.norm(gt)
    if denom == 0:
        return math.nan
    return float(np.linalg.norm(gt - pred) / denom)


BOX_KEYS = ("lw", "lq", "med", "uq", "uw")


def boxplot_stats(errors) -> dict:
    """Quartiles by linear interpolation; whiskers at the most extreme data
    inside 1.5 IQR of the quartiles, never inside the box itself."""
    x = np.asarray(errors, dtype=np.float64).ravel()
    x = x[~np.isnan(x)]
    if x.size == 0:
        raise ValueError("boxplot_stats needs a non-empty sample")
    lq, med, uq = np.percentile(x, [25, 50, 75])
    iqr = uq - lq
    # interpolated quartiles can lie beyond every in-fence datum
    lw = min(x[x >= lq - 1.5 * iqr].min(), lq)
    uw = max(x[x <= uq + 1.5 * iqr].max(), uq)
    return {"lw": float(lw), "lq": float(lq), "med": float(med), "uq": float(uq), "uw": float(uw)}


def thermo_trace(model, traj_states: np.ndarray, template: GraphTemplate):
    """Node-averaged E and S per snapshot, shifted so both start at zero."""
    if not getattr(model, "has_potentials", False):
        raise ContractError("thermo traces need a model that predicts potentials")
    Es, Ss = [], []
    with torch.no_grad():
        for z in traj_states:
            E, S = model.potentials(torch.as_tensor(z, dtype=DTYPE), template)
            Es.append(float(E.mean()))
            Ss.append(float(S.mean()))
    Es, Ss = np.asarray(Es), np.asarray(Ss)
    return Es - Es[0], Ss - Ss[0]


def traces_from(traj: Trajectory):
    """Offset node-averaged traces from potentials recorded during a rollout."""
    if traj.E is None:
        raise ContractError("trajectory carries no potentials")
    e, s = traj.E.mean(axis=1), traj.S.mean(axis=1)
    return e - e[0], s - s[0]


@dataclass
class RolloutReport:
    # rows: (method, split, case, t, variable, error)
    errors: list = field(default_factory=list)
    traces: dict = field(default_factory=dict)
    divergences: list = field(default_factory=list)
    excluded: int = 0

    def add_trajectory(self, method: str, split: str, case_id: int, gt: np.ndarray, traj: Trajectory,
                       layout: ChannelLayout):
        steps = traj.states.shape[0]
        for t in range(1, steps):
            for var, ch in layout.groups.items():
                err = relative_l2(gt[t], traj.states[t], ch)
                if math.isnan(err):
                    self.excluded += 1
                    continue
                self.errors.append((method, split, case_id, t, var, err))
        if traj.diverged_at is not None:
            self.divergences.append({"method": method, "split": split, "case": case_id, "step": traj.diverged_at})
        if traj.E is not None:
            e, s = traces_from(traj)
            self.traces.setdefault(method, {}).setdefault(split, {})[str(case_id)] = {"E": e.tolist(), "S": s.tolist()}

    def select(self, method=None, split=None, variable=None, t=None) -> np.ndarray:
        return np.array([r[5] for r in self.errors
                         if (method is None or r[0] == method) and (split is None or r[1] == split)
                         and (variable is None or r[4] == variable) and (t is None or r[3] == t)])

    def boxes(self) -> list[dict]:
        keys = []
        for m, s, _, _, v, _ in self.errors:
            if (v, s, m) not in keys:
                keys.append((v, s, m))
        out = []
        for v, s, m in keys:
            out.append({"variable": v, "split": s, "method": m, **boxplot_stats(self.select(m, s, v))})
        return out

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("variable", "split", "method") + BOX_KEYS)
            for b in self.boxes():
                w.writerow([b["variable"], b["split"], b["method"]] + [repr(b[k]) for k in BOX_KEYS])

    def write_errors_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(("method", "split", "case", "t", "variable", "error"))
            for r in self.errors:
                w.writerow(list(r[:5]) + [repr(r[5])])

    def write_traces(self, path):
        with open(path, "w") as fh:
            json.dump({"traces": self.traces, "divergences": self.divergences}, fh, indent=1, sort_keys=True)


def evaluate(model, dataset, splits: dict, method: str, report: RolloutReport | None = None) -> RolloutReport:
    """Roll out every case of the named splits ({split: [case ids]})."""
    report = report or RolloutReport()
    for split, ids in splits.items():
        for k in ids:
            case = dataset.cases[k]
            traj = rollout(model, case, dataset.layout)
            report.add_trajectory(method, split, k, case.states, traj, dataset.layout)
    return report
