"""Encode-process-decode graph network and the two ablation networks.

Variants
--------
tignn     message-passing GNN decoding per-node (l, m, E, S)
gnn       same GNN decoding dz/dt directly (no metriplectic integrator)
spnn      one MLP over the concatenated state of all nodes decoding every
          node's (l, m, E, S); no graph computation at all
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np
import torch
from torch import nn

from .autodiff import DTYPE, Activation, DimensionError, Mlp, MlpSpec, Standardizer
from .graph import ChannelLayout, GraphTemplate, TrajectoryDataset, case_edges, featurize
from .autodiff import ContractError
from .metriplectic import node_operators, output_dim, split_output

log = logging.getLogger(__name__)


class Variant(str, Enum):
    TIGNN = "tignn"
    GNN = "gnn"
    SPNN = "spnn"


@dataclass
class GnnConfig:
    hidden: int = 10
    blocks: int = 2
    mlp_hidden_layers: int = 2
    shared_params: bool = False
    residual: bool = True
    aggregation: str = "sum"
    activation: str = "swish"
    variant: str = "tignn"

    def __post_init__(self):
        self.variant = Variant(self.variant).value
        if self.hidden < 1:
            raise ValueError("hidden width must be >= 1")
        if self.blocks < 0:
            raise ValueError("number of message-passing blocks must be >= 0")
        if self.mlp_hidden_layers < 1:
            raise ValueError("MLPs need at least one hidden layer")
        if self.aggregation != "sum":
            raise ValueError("only sum aggregation is supported")

    def to_dict(self):
        return asdict(self)


@dataclass
class Normalization:
    """Training-set statistics for every network input, plus rate scales.

    ``rate_std`` is the per-channel RMS of the training time derivatives and
    sets the loss unit of each channel. Without it, channel c falls back to
    ``rate_scale * state.std[c]``.
    """

    state: Standardizer
    edge: Standardizer
    globals: Standardizer
    loads: Standardizer
    rate_scale: float = 1.0
    rate_std: tuple | None = None

    def rate_unit(self) -> np.ndarray:
        if self.rate_std is None:
            return np.asarray(self.state.std, dtype=np.float64) * self.rate_scale
        return np.asarray(self.rate_std, dtype=np.float64)

    def to_dict(self):
        return {"state": self.state.to_dict(), "edge": self.edge.to_dict(), "globals": self.globals.to_dict(),
                "loads": self.loads.to_dict(), "rate_scale": self.rate_scale,
                "rate_std": None if self.rate_std is None else list(self.rate_std)}

    @classmethod
    def from_dict(cls, d):
        rs = d.get("rate_std")
        return cls(Standardizer.from_dict(d["state"]), Standardizer.from_dict(d["edge"]),
                   Standardizer.from_dict(d["globals"]), Standardizer.from_dict(d["loads"]), float(d["rate_scale"]),
                   None if rs is None else tuple(float(x) for x in rs))

    @classmethod
    def identity(cls, layout: ChannelLayout):
        return cls(Standardizer.identity(layout.n_state), Standardizer.identity(layout.n_edge_features),
                   Standardizer.identity(layout.n_globals), Standardizer.identity(layout.n_loads), 1.0)


def fit_normalization(train: TrajectoryDataset) -> Normalization:
    lay = train.layout
    states = np.concatenate([c.states.reshape(-1, lay.n_state) for c in train.cases])
    state = Standardizer.fit(states)
    edges = []
    for c in train.cases:
        e = case_edges(c, lay)
        if lay.position_in_state:
            pos = c.states[:, :, lay.position_channels]
        else:
            pos = np.broadcast_to(c.positions, (c.states.shape[0],) + c.positions.shape)
        rel = pos[:, e[:, 0]] - pos[:, e[:, 1]]
        edges.append(np.concatenate([rel, np.linalg.norm(rel, axis=-1, keepdims=True)], -1).reshape(-1, lay.n_edge_features))
    edge = Standardizer.fit(np.concatenate(edges)) if edges else Standardizer.identity(lay.n_edge_features)
    glob = Standardizer.fit(np.stack([np.asarray(c.globals) for c in train.cases])) if lay.n_globals else Standardizer.identity(0)
    if lay.n_loads:
        loads = Standardizer.fit(np.concatenate([c.loads.reshape(-1, lay.n_loads) for c in train.cases]))
    else:
        loads = Standardizer.identity(0)
    rates = np.concatenate([(np.diff(c.states, axis=0) / c.dt).reshape(-1, lay.n_state) for c in train.cases])
    rms = float(np.sqrt(np.mean((rates / state.std) ** 2)))
    rms = rms if rms > 0 else 1.0
    per = np.sqrt(np.mean(rates ** 2, axis=0))
    # channels that never move (fixed coordinates) keep the pooled scale
    per = np.where(per > 0, per, rms * np.asarray(state.std))
    return Normalization(state, edge, glob, loads, rms, tuple(float(x) for x in per))


def _mlp(widths, act, generator):
    return Mlp(MlpSpec(tuple(widths), Activation(act)), generator)


class EncodeProcessDecode(nn.Module):
    def __init__(self, config: GnnConfig, layout: ChannelLayout, out_dim: int, generator=None):
        super().__init__()
        self.config = config
        self.layout = layout
        h, k, act = config.hidden, config.mlp_hidden_layers, config.activation
        fg, ff = layout.n_globals, layout.n_loads
        self.node_encoder = _mlp([layout.n_node_features] + [h] * k + [h], act, generator)
        self.edge_encoder = _mlp([layout.n_edge_features] + [h] * k + [h], act, generator)
        n_proc = min(config.blocks, 1) if config.shared_params else config.blocks
        self.edge_mlps = nn.ModuleList(_mlp([3 * h + fg] + [h] * k + [h], act, generator) for _ in range(n_proc))
        self.node_mlps = nn.ModuleList(_mlp([2 * h + ff + fg] + [h] * k + [h], act, generator) for _ in range(n_proc))
        self.decoder = _mlp([h] + [h] * k + [out_dim], act, generator)

    def encode(self, node_features, edge_features):
        return self.node_encoder(node_features), self.edge_encoder(edge_features)

    def process(self, x, xe, template: GraphTemplate, u, f):
        s, r = template.senders, template.receivers
        u_edge = u[template.node_graph[r]]
        u_node = u[template.node_graph]
        for b in range(self.config.blocks):
            k = 0 if self.config.shared_params else b
            msg = self.edge_mlps[k](torch.cat([xe, x[r], x[s], u_edge], -1))
            pooled = x.new_zeros(x.shape).index_add(0, r, msg)
            upd = self.node_mlps[k](torch.cat([x, pooled, f, u_node], -1))
            if self.config.residual:
                xe, x = xe + msg, x + upd
            else:
                xe, x = msg, upd
        return x, xe

    def decode(self, x):
        return self.decoder(x)

    def forward(self, node_features, edge_features, template, u, f):
        x, xe = self.encode(node_features, edge_features)
        x, _ = self.process(x, xe, template, u, f)
        return self.decode(x)


class Spnn(nn.Module):
    """Plain MLP from the concatenated standardized state of all n nodes
    (plus globals and loads) to every node's decoder output."""

    def __init__(self, n_nodes: int, layout: ChannelLayout, out_dim: int, width: int, hidden_layers: int,
                 activation: str, generator=None):
        super().__init__()
        self.n_nodes = n_nodes
        self.out_dim = out_dim
        n_in = n_nodes * (layout.n_state + layout.n_loads) + layout.n_globals
        self.mlp = _mlp([n_in] + [width] * hidden_layers + [n_nodes * out_dim], activation, generator)

    def forward(self, zs, template: GraphTemplate, u, f):
        g = template.n_graphs
        if zs.shape[0] != g * self.n_nodes:
            raise DimensionError(f"SPNN was built for {self.n_nodes} nodes per graph")
        inp = torch.cat([zs.reshape(g, -1), f.reshape(g, -1), u], -1)
        return self.mlp(inp).reshape(g * self.n_nodes, self.out_dim)


def count_params(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def spnn_width_for(target: int, n_nodes: int, layout: ChannelLayout, out_dim: int, hidden_layers: int) -> int:
    """Hidden width whose SPNN parameter count is closest to ``target``."""
    n_in = n_nodes * (layout.n_state + layout.n_loads) + layout.n_globals
    n_out = n_nodes * out_dim

    def count(w):
        return (n_in * w + w) + (hidden_layers - 1) * (w * w + w) + (w * n_out + n_out)

    best = min(range(1, 4096), key=lambda w: abs(count(w) - target))
    return best


class GenericModel(nn.Module):
    """Network + normalization; maps physical node states to decoder outputs."""

    def __init__(self, config: GnnConfig, layout: ChannelLayout, norm: Normalization | None = None,
                 n_nodes: int | None = None, seed: int = 0, spnn_width: int | None = None):
        super().__init__()
        self.config = config
        self.layout = layout
        self.norm = norm or Normalization.identity(layout)
        self.variant = Variant(config.variant)
        self.n_state = layout.n_state
        gen = torch.Generator().manual_seed(seed)
        out = layout.n_state if self.variant == Variant.GNN else output_dim(layout.n_state)
        self.out_dim = out
        if self.variant == Variant.SPNN:
            if n_nodes is None:
                raise ValueError("SPNN needs a fixed node count")
            if spnn_width is None:
                # match the TIGNN parameter count of the same config
                ref = EncodeProcessDecode(config, layout, output_dim(layout.n_state), torch.Generator())
                spnn_width = spnn_width_for(count_params(ref), n_nodes, layout, out, config.mlp_hidden_layers)
            self.spnn_width = spnn_width
            self.net = Spnn(n_nodes, layout, out, spnn_width, config.mlp_hidden_layers, config.activation, gen)
        else:
            self.spnn_width = None
            self.net = EncodeProcessDecode(config, layout, out, gen)
        self.n_nodes = n_nodes
        self._refresh_norm()

    def _refresh_norm(self):
        n = self.norm
        self._std = torch.as_tensor(n.state.std, dtype=DTYPE)
        self._unit = torch.as_tensor(n.rate_unit(), dtype=DTYPE)
        # geometric mean of state and rate scales per channel; the outer
        # product keeps L skew and M symmetric
        a = torch.sqrt(self._std * self._unit)
        self._weight = torch.outer(a, a)

    def set_normalization(self, norm: Normalization):
        self.norm = norm
        self._refresh_norm()

    @property
    def has_potentials(self) -> bool:
        return self.variant != Variant.GNN

    def operator_weight(self) -> torch.Tensor:
        return self._weight

    def rate_unit(self) -> torch.Tensor:
        """Per-channel physical scale of one standardized rate unit."""
        return self._unit

    def decode(self, z: torch.Tensor, template: GraphTemplate) -> torch.Tensor:
        n = self.norm
        u = n.globals.apply(template.globals)
        f = n.loads.apply(template.loads)
        if self.variant == Variant.SPNN:
            return self.net(n.state.apply(z), template, u, f)
        g = featurize(z, template, self.layout)
        zs = n.state.apply(z)[:, self.layout.node_state_channels]
        node_features = torch.cat([zs, g.node_features[:, zs.shape[1]:]], -1)
        return self.net(node_features, n.edge.apply(g.edge_features), template, u, f)

    def forward(self, z, template):
        return self.decode(z, template)

    def rate(self, z: torch.Tensor, template: GraphTemplate, create_graph: bool = False):
        """Physical dz/dt and, for metriplectic variants, the node operators."""
        if self.variant == Variant.GNN:
            return self.decode(z, template) * self.rate_unit(), None
        ops = node_operators(self, z, template, create_graph=create_graph)
        return ops.rate(), ops

    def potentials(self, z: torch.Tensor, template: GraphTemplate):
        """Per-node (E, S)."""
        if not self.has_potentials:
            raise ContractError(f"variant {self.variant.value} predicts no potentials")
        _, _, E, S = split_output(self.decode(z, template), self.n_state)
        return E, S

    def describe(self) -> dict:
        return {"variant": self.variant.value, "n_params": count_params(self), "spnn_width": self.spnn_width}
