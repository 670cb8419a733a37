"""Ground-truth trajectory generators.

* ``gen_damped_chain``: spring-dashpot chain with fixed end nodes whose
  dashpot heat goes into per-node internal energy, so total energy is
  conserved and every internal energy is nondecreasing.
* ``gen_couette_oldroydb``: startup Couette flow of an Oldroyd-B fluid,
  second-order central differences in y, RK4 in time.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from .graph import Case, ChannelLayout, TrajectoryDataset, chain_edges
from . import presets

log = logging.getLogger(__name__)


class GeneratorError(RuntimeError):
    pass


def rk4(rhs, y, h):
    k1 = rhs(y)
    k2 = rhs(y + 0.5 * h * k1)
    k3 = rhs(y + 0.5 * h * k2)
    k4 = rhs(y + h * k3)
    return y + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)


# --- damped chain ----------------------------------------------------------

@dataclass
class ChainConfig:
    n_nodes: int = 10
    mass: float = 1.0
    stiffness: float = 1.0
    damping: float = 1.0
    heat_capacity: float = 1.0
    spacing: float = 1.0
    temperature0: float = 0.02
    amplitude: float = 0.3
    modes: int = 3
    momentum_amplitude: float = 0.3
    dt: float = 0.05
    n_steps: int = 50
    substeps: int = 20
    n_cases: int = 50
    drift_tol: float = 1e-4

    def __post_init__(self):
        for name in ("mass", "stiffness", "heat_capacity", "spacing", "dt"):
            if not getattr(self, name) > 0:
                raise ValueError(f"chain {name} must be positive")
        if self.damping < 0 or self.n_nodes < 3 or self.n_steps < 1 or self.substeps < 1:
            raise ValueError("invalid chain configuration")

    def to_dict(self):
        return asdict(self)


def chain_rhs(cfg: ChainConfig, y: np.ndarray) -> np.ndarray:
    """y has shape (..., n, 3) with channels (q, p, e); end nodes are fixed."""
    q, p, e = y[..., 0], y[..., 1], y[..., 2]
    v = p / cfg.mass
    v = v.copy()
    v[..., 0] = 0.0
    v[..., -1] = 0.0
    out = np.zeros_like(y)
    lap_q = q[..., 2:] - 2 * q[..., 1:-1] + q[..., :-2]
    lap_v = v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]
    out[..., 1:-1, 0] = v[..., 1:-1]
    out[..., 1:-1, 1] = cfg.stiffness * lap_q + cfg.damping * lap_v
    dv2 = (v[..., 1:] - v[..., :-1]) ** 2  # one entry per dashpot
    heat = np.zeros_like(e)
    heat[..., :-1] += 0.5 * cfg.damping * dv2
    heat[..., 1:] += 0.5 * cfg.damping * dv2
    out[..., 2] = heat
    return out


def chain_energy(cfg: ChainConfig, z: np.ndarray) -> np.ndarray:
    """Total energy per snapshot: kinetic + spring + internal."""
    q, p, e = z[..., 0], z[..., 1], z[..., 2]
    kin = (p ** 2).sum(-1) / (2 * cfg.mass)
    spring = 0.5 * cfg.stiffness * ((q[..., 1:] - q[..., :-1] - cfg.spacing) ** 2).sum(-1)
    return kin + spring + e.sum(-1)


def chain_mechanical_energy(cfg: ChainConfig, z: np.ndarray) -> np.ndarray:
    q, p = z[..., 0], z[..., 1]
    return (p ** 2).sum(-1) / (2 * cfg.mass) + 0.5 * cfg.stiffness * ((q[..., 1:] - q[..., :-1] - cfg.spacing) ** 2).sum(-1)


def chain_initial(cfg: ChainConfig, rng: np.random.Generator) -> np.ndarray:
    n = cfg.n_nodes
    x = np.arange(n) / (n - 1)
    u = np.zeros(n)
    p = np.zeros(n)
    for k in range(1, cfg.modes + 1):
        u += rng.uniform(-1, 1) * cfg.amplitude / k * np.sin(k * math.pi * x)
        p += rng.uniform(-1, 1) * cfg.momentum_amplitude / k * np.sin(k * math.pi * x)
    z = np.zeros((n, 3))
    z[:, 0] = np.arange(n) * cfg.spacing + u
    z[:, 1] = p
    z[:, 2] = cfg.heat_capacity * cfg.temperature0
    z[[0, -1], 1] = 0.0
    return z


def integrate_chain(cfg: ChainConfig, z0: np.ndarray) -> np.ndarray:
    traj = np.empty((cfg.n_steps + 1,) + z0.shape)
    traj[0] = z0
    y = z0.copy()
    h = cfg.dt / cfg.substeps
    rhs = lambda s: chain_rhs(cfg, s)
    for t in range(cfg.n_steps):
        for _ in range(cfg.substeps):
            y = rk4(rhs, y, h)
        traj[t + 1] = y
    return traj


def gen_damped_chain(config: ChainConfig | None = None, seed: int = 0) -> TrajectoryDataset:
    cfg = config or ChainConfig()
    rng = np.random.default_rng(seed)
    n = cfg.n_nodes
    node_type = np.ones(n, dtype=np.int64)
    node_type[[0, -1]] = 0
    edges = chain_edges(n)
    z0 = np.stack([chain_initial(cfg, rng) for _ in range(cfg.n_cases)])
    traj = integrate_chain(cfg, z0)  # (T+1, cases, n, 3)
    cases = []
    for k in range(cfg.n_cases):
        states = np.ascontiguousarray(traj[:, k])
        check_chain_invariants(cfg, states, case=k)
        cases.append(Case(dt=cfg.dt, states=states, node_type=node_type.copy(), edges=edges.copy()))
    return TrajectoryDataset(presets.chain_layout(), cases, "chain")


def check_chain_invariants(cfg: ChainConfig, states: np.ndarray, case: int = 0) -> dict:
    energy = chain_energy(cfg, states)
    drift = float(np.max(np.abs(energy - energy[0])) / abs(energy[0]))
    de = np.diff(states[..., 2], axis=0)
    min_de = float(de.min()) if de.size else 0.0
    if drift > cfg.drift_tol:
        raise GeneratorError(f"case {case}: energy drift {drift:.3g} exceeds {cfg.drift_tol}; increase substeps")
    if min_de < -1e-12:
        raise GeneratorError(f"case {case}: internal energy decreased by {-min_de:.3g}")
    return {"energy_drift": drift, "min_internal_step": min_de}


# --- startup Couette, Oldroyd-B ---------------------------------------------

@dataclass
class CouetteConfig:
    n_nodes: int = 101
    height: float = 1.0
    lid_velocity: float = 1.0
    re_range: tuple = (0.1, 1.0)
    we_range: tuple = (1.0, 2.0)
    beta: float = 1.0 / 9.0
    dt: float = 6.7e-3
    n_steps: int = 150
    n_cases: int = 100
    substeps: int | None = None  # None: smallest count passing the stability bound
    stability_margin: float = 1.0
    # the impulsive lid start makes a dissipation spike at the wall that the
    # stability-limited substep under-resolves; refine the first few steps
    startup_steps: int = 3
    startup_refine: int = 32

    def __post_init__(self):
        self.re_range = tuple(self.re_range)
        self.we_range = tuple(self.we_range)
        if self.n_nodes < 3 or self.height <= 0 or self.dt <= 0 or self.n_steps < 1:
            raise ValueError("invalid Couette configuration")
        if not (0 < self.re_range[0] <= self.re_range[1] and 0 < self.we_range[0] <= self.we_range[1]):
            raise ValueError("Re and We ranges must be positive and ordered")
        if not 0 < self.beta <= 1:
            raise ValueError("solvent fraction beta must lie in (0, 1]")
        if self.startup_steps < 0 or self.startup_refine < 1:
            raise ValueError("startup refinement must be non-negative steps and a factor >= 1")

    def to_dict(self):
        d = asdict(self)
        d["re_range"], d["we_range"] = list(self.re_range), list(self.we_range)
        return d


def couette_spectral_radius(cfg: CouetteConfig, re, we) -> float:
    """Upper bound on |eigenvalue| of the semi-discrete operator."""
    h = cfg.height / (cfg.n_nodes - 1)
    re, we = np.asarray(re, float), np.asarray(we, float)
    diff = 4.0 * cfg.beta / (re * h * h)
    wave = 2.0 * np.sqrt((1 - cfg.beta) / (we * we * re)) / h
    return float(np.max(diff + wave + 1.0 / we))


RK4_STABLE = 2.5  # conservative real-axis stability limit of classical RK4


def couette_substeps(cfg: CouetteConfig, re, we) -> int:
    rho = couette_spectral_radius(cfg, re, we)
    limit = RK4_STABLE / cfg.stability_margin
    if cfg.substeps is not None:
        if cfg.dt / cfg.substeps * rho > RK4_STABLE:
            raise GeneratorError(
                f"CFL violation: dt/substeps * rho = {cfg.dt / cfg.substeps * rho:.3g} > {RK4_STABLE}; "
                f"need at least {math.ceil(cfg.dt * rho / RK4_STABLE)} substeps")
        return cfg.substeps
    return max(1, math.ceil(cfg.dt * rho / limit))


def couette_rhs(cfg: CouetteConfig, re, we, y):
    """y: (..., n, 3) with channels (v, e, tau); re, we broadcast over (..., 1)."""
    h = cfg.height / (cfg.n_nodes - 1)
    b = cfg.beta
    v, tau = y[..., 0], y[..., 2]
    dvdy = np.empty_like(v)
    dvdy[..., 1:-1] = (v[..., 2:] - v[..., :-2]) / (2 * h)
    dvdy[..., 0] = (-3 * v[..., 0] + 4 * v[..., 1] - v[..., 2]) / (2 * h)
    dvdy[..., -1] = (3 * v[..., -1] - 4 * v[..., -2] + v[..., -3]) / (2 * h)
    out = np.zeros_like(y)
    v_yy = (v[..., 2:] - 2 * v[..., 1:-1] + v[..., :-2]) / (h * h)
    tau_y = (tau[..., 2:] - tau[..., :-2]) / (2 * h)
    out[..., 1:-1, 0] = (b * v_yy + (1 - b) / we * tau_y) / re
    out[..., 2] = (dvdy - tau) / we
    out[..., 1] = b * dvdy ** 2 + (1 - b) / we * tau * dvdy
    return out


def integrate_couette(cfg: CouetteConfig, re, we, n_steps: int | None = None, substeps: int | None = None):
    """Integrate all (Re, We) cases at once; returns (T+1, cases, n, 3) fields (v, e, tau)."""
    re = np.atleast_1d(np.asarray(re, float))
    we = np.atleast_1d(np.asarray(we, float))
    n_steps = cfg.n_steps if n_steps is None else n_steps
    sub = couette_substeps(cfg, re, we) if substeps is None else substeps
    if cfg.dt / sub * couette_spectral_radius(cfg, re, we) > RK4_STABLE:
        raise GeneratorError(f"CFL violation with {sub} substeps")
    n = cfg.n_nodes
    y = np.zeros((len(re), n, 3))
    y[:, -1, 0] = cfg.lid_velocity
    out = np.empty((n_steps + 1,) + y.shape)
    out[0] = y
    r, w = re[:, None], we[:, None]
    rhs = lambda s: couette_rhs(cfg, r, w, s)
    for t in range(n_steps):
        k = sub * cfg.startup_refine if t < cfg.startup_steps else sub
        h = cfg.dt / k
        for _ in range(k):
            y = rk4(rhs, y, h)
        out[t + 1] = y
    return out


def couette_parameters(cfg: CouetteConfig, seed: int = 0) -> np.ndarray:
    """(n_cases, 2) Latin-hypercube samples of (Re, We)."""
    from scipy.stats import qmc

    unit = qmc.LatinHypercube(d=2, seed=seed).random(cfg.n_cases)
    lo = np.array([cfg.re_range[0], cfg.we_range[0]])
    hi = np.array([cfg.re_range[1], cfg.we_range[1]])
    return lo + unit * (hi - lo)


def gen_couette_oldroydb(config: CouetteConfig | None = None, seed: int = 0, params=None) -> TrajectoryDataset:
    cfg = config or CouetteConfig()
    params = couette_parameters(cfg, seed) if params is None else np.asarray(params, float).reshape(-1, 2)
    fields = integrate_couette(cfg, params[:, 0], params[:, 1])
    n = cfg.n_nodes
    y = np.linspace(0.0, cfg.height, n)
    node_type = np.ones(n, dtype=np.int64)
    node_type[[0, -1]] = 0
    edges = chain_edges(n)
    cases = []
    for k in range(len(params)):
        states = np.zeros((cfg.n_steps + 1, n, 5))
        states[:, :, 1] = y
        states[:, :, 2:] = fields[:, k]
        if not np.all(np.isfinite(states)):
            raise GeneratorError(f"case {k}: non-finite values")
        cases.append(Case(dt=cfg.dt, states=states, node_type=node_type.copy(), edges=edges.copy(),
                          globals=params[k].copy()))
    return TrajectoryDataset(presets.couette_layout(), cases, "couette")
