"""Graph and trajectory-dataset model: channel layouts, per-snapshot graph
construction, case-level splitting, training noise and the on-disk format.
"""

from __future__ import annotations

import configparser
import logging
import os
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from .autodiff import DTYPE

log = logging.getLogger(__name__)

DATASET_MAGIC = "thermognn-dataset"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


class ConfigError(ValueError):
    pass


@dataclass
class ChannelLayout:
    """Which state channels exist, which of them are positions, and how the
    remaining graph inputs (node types, globals, loads) are laid out."""

    state_names: list[str]
    groups: dict[str, list[int]]
    position_channels: list[int] = field(default_factory=list)
    spatial_dim: int = 0
    node_types: list[str] = field(default_factory=lambda: ["node"])
    global_names: list[str] = field(default_factory=list)
    load_names: list[str] = field(default_factory=list)
    frozen_channels: list[int] = field(default_factory=list)
    connectivity: str = "mesh"  # mesh | knn | radius
    knn: int = 4
    radius: float = 0.0

    def __post_init__(self):
        nz = len(self.state_names)
        for name, idx in self.groups.items():
            if any(i < 0 or i >= nz for i in idx):
                raise ConfigError(f"group {name!r} references channels outside 0..{nz - 1}")
        if self.position_channels and len(self.position_channels) != self.spatial_dim:
            raise ConfigError("position_channels must list exactly spatial_dim channels")
        if self.connectivity not in ("mesh", "knn", "radius"):
            raise ConfigError(f"unknown connectivity {self.connectivity!r}")

    @property
    def n_state(self) -> int:
        return len(self.state_names)

    @property
    def position_in_state(self) -> bool:
        return bool(self.position_channels)

    @property
    def node_state_channels(self) -> list[int]:
        pos = set(self.position_channels)
        return [i for i in range(self.n_state) if i not in pos]

    @property
    def n_node_features(self) -> int:
        return len(self.node_state_channels) + len(self.node_types)

    @property
    def n_edge_features(self) -> int:
        return self.spatial_dim + 1

    @property
    def n_globals(self) -> int:
        return len(self.global_names)

    @property
    def n_loads(self) -> int:
        return len(self.load_names)

    def to_dict(self):
        return {
            "state_names": list(self.state_names),
            "groups": {k: list(v) for k, v in self.groups.items()},
            "position_channels": list(self.position_channels),
            "spatial_dim": self.spatial_dim,
            "node_types": list(self.node_types),
            "global_names": list(self.global_names),
            "load_names": list(self.load_names),
            "frozen_channels": list(self.frozen_channels),
            "connectivity": self.connectivity,
            "knn": self.knn,
            "radius": self.radius,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class Case:
    """One simulation: states[t] for t = 0..N_T, shape (N_T+1, n, F_z)."""

    dt: float
    states: np.ndarray
    node_type: np.ndarray
    edges: np.ndarray | None = None  # (E, 2) directed (sender, receiver)
    positions: np.ndarray | None = None  # (n, d) fixed coordinates
    globals: np.ndarray = field(default_factory=lambda: np.zeros(0))
    loads: np.ndarray | None = None  # (N_T+1, n, F_f)

    @property
    def n_nodes(self) -> int:
        return self.states.shape[1]

    @property
    def n_steps(self) -> int:
        return self.states.shape[0] - 1

    def derivative(self, t: int) -> np.ndarray:
        return (self.states[t + 1] - self.states[t]) / self.dt


@dataclass
class TrajectoryDataset:
    layout: ChannelLayout
    cases: list[Case]
    name: str = "dataset"

    def __len__(self):
        return len(self.cases)

    def validate(self) -> None:
        lay = self.layout
        for k, c in enumerate(self.cases):
            where = f"case {k}"
            if not c.dt > 0:
                raise DatasetError(f"{where}: dt must be positive, got {c.dt}")
            if c.states.ndim != 3 or c.states.shape[2] != lay.n_state:
                raise DatasetError(f"{where}: states must be (N_T+1, n, {lay.n_state}), got {c.states.shape}")
            if c.states.shape[0] < 2:
                raise DatasetError(f"{where}: need at least two snapshots")
            n = c.n_nodes
            if c.node_type.shape != (n,):
                raise DatasetError(f"{where}: node_type must have one entry per node")
            if n and (c.node_type.min() < 0 or c.node_type.max() >= len(lay.node_types)):
                raise DatasetError(f"{where}: node type ids outside 0..{len(lay.node_types) - 1}")
            if c.edges is not None:
                if c.edges.ndim != 2 or c.edges.shape[1] != 2:
                    raise DatasetError(f"{where}: edges must be (E, 2)")
                if c.edges.size and (c.edges.min() < 0 or c.edges.max() >= n):
                    raise DatasetError(f"{where}: edge endpoint out of range")
            elif lay.connectivity == "mesh":
                raise DatasetError(f"{where}: mesh connectivity requested but no edges stored")
            if not lay.position_in_state:
                if c.positions is None or c.positions.shape != (n, lay.spatial_dim):
                    raise DatasetError(f"{where}: fixed positions of shape ({n}, {lay.spatial_dim}) required")
            if np.asarray(c.globals).shape != (lay.n_globals,):
                raise DatasetError(f"{where}: expected {lay.n_globals} global features")
            if lay.n_loads:
                if c.loads is None or c.loads.shape != (c.states.shape[0], n, lay.n_loads):
                    raise DatasetError(f"{where}: loads must be (N_T+1, n, {lay.n_loads})")
            if not np.all(np.isfinite(c.states)):
                raise DatasetError(f"{where}: non-finite state values")

    def snapshot_pairs(self) -> list[tuple[int, int]]:
        return [(k, t) for k, c in enumerate(self.cases) for t in range(c.n_steps)]

    def subset(self, indices: Sequence[int]) -> "TrajectoryDataset":
        return TrajectoryDataset(self.layout, [self.cases[i] for i in indices], self.name)


def mesh_edges_to_directed(mesh_edges) -> np.ndarray:
    """Each undirected mesh edge (a, b) becomes (a, b) and (b, a)."""
    e = np.asarray(mesh_edges, dtype=np.int64).reshape(-1, 2)
    return np.concatenate([e, e[:, ::-1]], axis=0)


def chain_edges(n: int) -> np.ndarray:
    return mesh_edges_to_directed([(i, i + 1) for i in range(n - 1)])


def distance_edges(positions: np.ndarray, mode: str = "knn", k: int = 4, radius: float = 0.0) -> np.ndarray:
    from scipy.spatial import cKDTree

    pos = np.asarray(positions, dtype=np.float64)
    tree = cKDTree(pos)
    pairs = []
    if mode == "knn":
        kk = min(k + 1, len(pos))
        _, idx = tree.query(pos, k=kk)
        for i, row in enumerate(np.atleast_2d(idx)):
            pairs.extend((int(j), i) for j in row if j != i)
    elif mode == "radius":
        if radius <= 0:
            raise ConfigError("radius connectivity needs a positive radius")
        for i, j in tree.query_pairs(radius):
            pairs.extend([(i, j), (j, i)])
    else:
        raise ConfigError(f"unknown connectivity {mode!r}")
    pairs = sorted(set(pairs))
    return np.asarray(pairs, dtype=np.int64).reshape(-1, 2)


@dataclass
class GraphTemplate:
    """Static part of a (possibly batched) graph: everything that is not a
    function of the state."""

    senders: torch.Tensor
    receivers: torch.Tensor
    node_type: torch.Tensor
    n_types: int
    node_graph: torch.Tensor  # graph id of each node
    n_graphs: int
    globals: torch.Tensor  # (n_graphs, F_g)
    loads: torch.Tensor  # (n, F_f)
    positions: torch.Tensor | None = None  # (n, d) when positions are not state

    @property
    def n_nodes(self) -> int:
        return int(self.node_type.shape[0])

    @property
    def n_edges(self) -> int:
        return int(self.senders.shape[0])

    def onehot(self) -> torch.Tensor:
        return torch.nn.functional.one_hot(self.node_type, self.n_types).to(DTYPE)


@dataclass
class Graph:
    template: GraphTemplate
    state: torch.Tensor
    positions: torch.Tensor
    node_features: torch.Tensor
    edge_features: torch.Tensor

    @property
    def n_nodes(self):
        return self.template.n_nodes

    @property
    def senders(self):
        return self.template.senders

    @property
    def receivers(self):
        return self.template.receivers

    @property
    def globals(self):
        return self.template.globals

    @property
    def loads(self):
        return self.template.loads


def case_edges(case: Case, layout: ChannelLayout, t: int = 0) -> np.ndarray:
    if case.edges is not None:
        return np.asarray(case.edges, dtype=np.int64)
    if layout.connectivity == "mesh":
        raise ConfigError("mesh connectivity requested but the case has no edges")
    if layout.position_in_state:
        pos = case.states[t][:, layout.position_channels]
    elif case.positions is not None:
        pos = case.positions
    else:
        raise ConfigError("distance-based connectivity needs node positions")
    return distance_edges(pos, layout.connectivity, layout.knn, layout.radius)


def make_template(case: Case, layout: ChannelLayout, t: int = 0) -> GraphTemplate:
    edges = case_edges(case, layout, t)
    n = case.n_nodes
    loads = case.loads[t] if (case.loads is not None and layout.n_loads) else np.zeros((n, 0))
    pos = None
    if not layout.position_in_state:
        if case.positions is None:
            raise ConfigError("positions are not part of the state and the case stores none")
        pos = torch.as_tensor(case.positions, dtype=DTYPE)
    return GraphTemplate(
        senders=torch.as_tensor(edges[:, 0], dtype=torch.long),
        receivers=torch.as_tensor(edges[:, 1], dtype=torch.long),
        node_type=torch.as_tensor(case.node_type, dtype=torch.long),
        n_types=len(layout.node_types),
        node_graph=torch.zeros(n, dtype=torch.long),
        n_graphs=1,
        globals=torch.as_tensor(np.asarray(case.globals, dtype=np.float64).reshape(1, -1), dtype=DTYPE),
        loads=torch.as_tensor(loads, dtype=DTYPE),
        positions=pos,
    )


def batch_templates(templates: Sequence[GraphTemplate]) -> GraphTemplate:
    """Disjoint union of graphs, node ids offset per member."""
    if len(templates) == 1:
        return templates[0]
    offs = np.cumsum([0] + [t.n_nodes for t in templates[:-1]])
    goffs = np.cumsum([0] + [t.n_graphs for t in templates[:-1]])
    pos = None
    if templates[0].positions is not None:
        pos = torch.cat([t.positions for t in templates])
    return GraphTemplate(
        senders=torch.cat([t.senders + int(o) for t, o in zip(templates, offs)]),
        receivers=torch.cat([t.receivers + int(o) for t, o in zip(templates, offs)]),
        node_type=torch.cat([t.node_type for t in templates]),
        n_types=templates[0].n_types,
        node_graph=torch.cat([t.node_graph + int(g) for t, g in zip(templates, goffs)]),
        n_graphs=int(sum(t.n_graphs for t in templates)),
        globals=torch.cat([t.globals for t in templates]),
        loads=torch.cat([t.loads for t in templates]),
        positions=pos,
    )


def featurize(state: torch.Tensor, template: GraphTemplate, layout: ChannelLayout) -> Graph:
    """Differentiable map from node states to graph features.

    Edge (s, r) carries (q_s - q_r, |q_s - q_r|); non-positional state plus
    the node-type one-hot form the node features.
    """
    if state.shape != (template.n_nodes, layout.n_state):
        raise DatasetError(f"state shape {tuple(state.shape)} does not match graph ({template.n_nodes}, {layout.n_state})")
    if layout.position_in_state:
        pos = state[:, layout.position_channels]
    else:
        pos = template.positions
    rel = pos[template.senders] - pos[template.receivers]
    dist = torch.sqrt((rel * rel).sum(-1, keepdim=True))
    edge_features = torch.cat([rel, dist], dim=-1)
    node_features = torch.cat([state[:, layout.node_state_channels], template.onehot()], dim=-1)
    return Graph(template, state, pos, node_features, edge_features)


def build_graph(case: Case, t: int, layout: ChannelLayout) -> Graph:
    if not 0 <= t <= case.n_steps:
        raise IndexError(f"snapshot {t} outside 0..{case.n_steps}")
    template = make_template(case, layout, t)
    return featurize(torch.as_tensor(case.states[t], dtype=DTYPE), template, layout)


@dataclass(frozen=True)
class SplitSpec:
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    seed: int = 0

    def __post_init__(self):
        if len(self.ratios) != 3 or any(r < 0 for r in self.ratios) or abs(sum(self.ratios) - 1.0) > 1e-9:
            raise ConfigError(f"split ratios must be three non-negative numbers summing to 1, got {self.ratios}")


def split_indices(n_cases: int, spec: SplitSpec = SplitSpec()) -> tuple[list[int], list[int], list[int]]:
    """Case-level (train, val, test) indices; val and test get at least one case each."""
    if n_cases < 3:
        raise DatasetError(f"need at least 3 cases to split, got {n_cases}")
    perm = np.random.default_rng(spec.seed).permutation(n_cases)
    n_val = max(1, int(round(spec.ratios[1] * n_cases)))
    n_test = max(1, int(round(spec.ratios[2] * n_cases)))
    n_train = n_cases - n_val - n_test
    if n_train < 1:
        raise DatasetError(f"{n_cases} cases leave no training data")
    train = sorted(perm[:n_train].tolist())
    val = sorted(perm[n_train:n_train + n_val].tolist())
    test = sorted(perm[n_train + n_val:].tolist())
    return train, val, test


def split_dataset(ds: TrajectoryDataset, spec: SplitSpec = SplitSpec()):
    tr, va, te = split_indices(len(ds), spec)
    return ds.subset(tr), ds.subset(va), ds.subset(te)


def inject_noise(inputs, variance: float, rng: np.random.Generator, scale=None, channels=None):
    """Add i.i.d. zero-mean Gaussian noise of the given variance.

    ``scale`` multiplies the noise per channel (standardization std, so the
    variance refers to standardized units); ``channels`` restricts it to a
    subset of the last axis.
    """
    if variance < 0:
        raise ValueError("noise variance must be non-negative")
    x = np.array(inputs, dtype=np.float64, copy=True)
    if variance == 0:
        return x
    cols = list(range(x.shape[-1])) if channels is None else list(channels)
    noise = rng.standard_normal(x.shape[:-1] + (len(cols),)) * np.sqrt(variance)
    if scale is not None:
        noise = noise * np.asarray(scale, dtype=np.float64)[cols]
    x[..., cols] += noise
    return x


# --- on-disk format --------------------------------------------------------
#
# <dir>/manifest.ini       text key/value manifest ([dataset] + one
#                          [case NNNN] section per case)
# <dir>/case_NNNN.bin      little-endian float64, concatenated in order:
#     states     (N_T+1, n, F_z)
#     node_type  (n,)
#     edges      (E, 2)            only if n_edges > 0 or has_edges = 1
#     positions  (n, d)            only if has_positions = 1
#     globals    (F_g,)
#     loads      (N_T+1, n, F_f)   only if has_loads = 1

def _join(xs):
    return ",".join(str(x) for x in xs)


def _split(s, cast=str):
    s = s.strip()
    return [cast(x.strip()) for x in s.split(",")] if s else []


def save_dataset(ds: TrajectoryDataset, path: str | os.PathLike) -> None:
    ds.validate()
    os.makedirs(path, exist_ok=True)
    lay = ds.layout
    cp = configparser.ConfigParser(interpolation=None)
    cp["dataset"] = {
        "magic": DATASET_MAGIC,
        "version": str(DATASET_VERSION),
        "name": ds.name,
        "n_cases": str(len(ds)),
        "state_names": _join(lay.state_names),
        "groups": ";".join(f"{k}:{_join(v)}" for k, v in lay.groups.items()),
        "position_channels": _join(lay.position_channels),
        "spatial_dim": str(lay.spatial_dim),
        "node_types": _join(lay.node_types),
        "global_names": _join(lay.global_names),
        "load_names": _join(lay.load_names),
        "frozen_channels": _join(lay.frozen_channels),
        "connectivity": lay.connectivity,
        "knn": str(lay.knn),
        "radius": repr(float(lay.radius)),
    }
    for k, c in enumerate(ds.cases):
        fname = f"case_{k:04d}.bin"
        parts = [c.states, c.node_type.astype(np.float64)]
        has_edges = c.edges is not None
        if has_edges:
            parts.append(np.asarray(c.edges, dtype=np.float64))
        has_pos = c.positions is not None
        if has_pos:
            parts.append(c.positions)
        parts.append(np.asarray(c.globals, dtype=np.float64))
        has_loads = c.loads is not None
        if has_loads:
            parts.append(c.loads)
        flat = np.concatenate([np.asarray(p, dtype="<f8").reshape(-1) for p in parts])
        with open(os.path.join(path, fname), "wb") as fh:
            fh.write(flat.tobytes())
        cp[f"case {k:04d}"] = {
            "file": fname,
            "dt": repr(float(c.dt)),
            "n_nodes": str(c.n_nodes),
            "n_steps": str(c.n_steps),
            "has_edges": str(int(has_edges)),
            "n_edges": str(0 if not has_edges else len(c.edges)),
            "has_positions": str(int(has_pos)),
            "has_loads": str(int(has_loads)),
            "n_values": str(flat.size),
        }
    with open(os.path.join(path, "manifest.ini"), "w") as fh:
        cp.write(fh)


def _need(section, key):
    if key not in section:
        raise DatasetError(f"manifest section [{section.name}] is missing field {key!r}")
    return section[key]


def load_dataset(path: str | os.PathLike) -> TrajectoryDataset:
    mpath = os.path.join(path, "manifest.ini")
    if not os.path.exists(mpath):
        raise DatasetError(f"{path}: no manifest.ini")
    cp = configparser.ConfigParser(interpolation=None)
    cp.read(mpath)
    if "dataset" not in cp:
        raise DatasetError(f"{mpath}: missing [dataset] section")
    d = cp["dataset"]
    if d.get("magic") != DATASET_MAGIC:
        raise DatasetError(f"{mpath}: bad magic {d.get('magic')!r}")
    if d.get("version") != str(DATASET_VERSION):
        raise DatasetError(f"{mpath}: unsupported version {d.get('version')!r}")
    groups = {}
    for item in _need(d, "groups").split(";"):
        if item.strip():
            name, idx = item.split(":")
            groups[name.strip()] = _split(idx, int)
    layout = ChannelLayout(
        state_names=_split(_need(d, "state_names")),
        groups=groups,
        position_channels=_split(d.get("position_channels", ""), int),
        spatial_dim=int(_need(d, "spatial_dim")),
        node_types=_split(_need(d, "node_types")),
        global_names=_split(d.get("global_names", "")),
        load_names=_split(d.get("load_names", "")),
        frozen_channels=_split(d.get("frozen_channels", ""), int),
        connectivity=d.get("connectivity", "mesh"),
        knn=int(d.get("knn", "4")),
        radius=float(d.get("radius", "0")),
    )
    n_cases = int(_need(d, "n_cases"))
    fz, dim = layout.n_state, layout.spatial_dim
    cases = []
    for k in range(n_cases):
        sname = f"case {k:04d}"
        if sname not in cp:
            raise DatasetError(f"{mpath}: missing section [{sname}]")
        s = cp[sname]
        dt = float(_need(s, "dt"))
        n = int(_need(s, "n_nodes"))
        nt = int(_need(s, "n_steps"))
        has_edges = _need(s, "has_edges") == "1"
        ne = int(_need(s, "n_edges"))
        has_pos = _need(s, "has_positions") == "1"
        has_loads = _need(s, "has_loads") == "1"
        sizes = [(nt + 1) * n * fz, n, 2 * ne if has_edges else 0, n * dim if has_pos else 0,
                 layout.n_globals, (nt + 1) * n * layout.n_loads if has_loads else 0]
        fpath = os.path.join(path, _need(s, "file"))
        if not os.path.exists(fpath):
            raise DatasetError(f"{fpath}: missing array file")
        flat = np.fromfile(fpath, dtype="<f8")
        if flat.size != sum(sizes):
            raise DatasetError(f"{fpath}: expected {sum(sizes)} float64 values, found {flat.size} (truncated?)")
        chunks, off = [], 0
        for sz in sizes:
            chunks.append(flat[off:off + sz].astype(np.float64))
            off += sz
        cases.append(Case(
            dt=dt,
            states=chunks[0].reshape(nt + 1, n, fz),
            node_type=chunks[1].astype(np.int64),
            edges=chunks[2].reshape(ne, 2).astype(np.int64) if has_edges else None,
            positions=chunks[3].reshape(n, dim) if has_pos else None,
            globals=chunks[4],
            loads=chunks[5].reshape(nt + 1, n, layout.n_loads) if has_loads else None,
        ))
    ds = TrajectoryDataset(layout, cases, d.get("name", "dataset"))
    ds.validate()
    return ds


def with_layout(ds: TrajectoryDataset, layout: ChannelLayout) -> TrajectoryDataset:
    """Re-check a loaded dataset against an expected preset layout."""
    if ds.layout.n_state != layout.n_state or ds.layout.spatial_dim != layout.spatial_dim:
        raise DatasetError(
            f"dataset has F_z={ds.layout.n_state}, d={ds.layout.spatial_dim}; "
            f"layout expects F_z={layout.n_state}, d={layout.spatial_dim}")
    out = replace(ds, layout=layout)
    out.validate()
    return out
