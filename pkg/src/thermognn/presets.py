"""Channel layouts and per-experiment hyperparameter blocks.

Channel order per preset (state vector z of one node):

    chain     q, p, e                               (q is the 1D position)
    couette   q_x, q_y, v, e, tau                   (q fixed nodal coordinates)
    beam      q_x, q_y, q_z, v_x, v_y, v_z, s_xx, s_yy, s_zz, s_xy, s_xz, s_yz
    cylinder  v_x, v_y, P                           (positions are not state)

Node features are the non-position state channels followed by the node-type
one-hot; edge features are (q_s - q_r, |q_s - q_r|).
"""

from __future__ import annotations

import copy

from .graph import ChannelLayout


def chain_layout() -> ChannelLayout:
    return ChannelLayout(
        state_names=["q", "p", "e"],
        groups={"q": [0], "p": [1], "e": [2]},
        position_channels=[0],
        spatial_dim=1,
        node_types=["boundary", "interior"],
    )


def couette_layout() -> ChannelLayout:
    return ChannelLayout(
        state_names=["q_x", "q_y", "v", "e", "tau"],
        groups={"q": [0, 1], "v": [2], "e": [3], "tau": [4]},
        position_channels=[0, 1],
        spatial_dim=2,
        node_types=["boundary", "fluid"],
        global_names=["Re", "We"],
    )


def beam_layout() -> ChannelLayout:
    return ChannelLayout(
        state_names=["q_x", "q_y", "q_z", "v_x", "v_y", "v_z",
                     "s_xx", "s_yy", "s_zz", "s_xy", "s_xz", "s_yz"],
        groups={"q": [0, 1, 2], "v": [3, 4, 5], "sigma": [6, 7, 8, 9, 10, 11]},
        position_channels=[0, 1, 2],
        spatial_dim=3,
        node_types=["encastre", "beam"],
        load_names=["F_x", "F_y", "F_z"],
    )


def cylinder_layout() -> ChannelLayout:
    return ChannelLayout(
        state_names=["v_x", "v_y", "P"],
        groups={"v": [0, 1], "P": [2]},
        position_channels=[],
        spatial_dim=2,
        node_types=["inlet", "outlet", "wall", "obstacle", "fluid"],
    )


LAYOUTS = {
    "chain": chain_layout,
    "couette": couette_layout,
    "beam": beam_layout,
    "cylinder": cylinder_layout,
}


def layout_for(name: str) -> ChannelLayout:
    try:
        return LAYOUTS[name]()
    except KeyError:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(LAYOUTS)}") from None


# model/train blocks; generator blocks only where a generator exists
_PRESETS = {
    "chain": {
        "generator": {"kind": "chain", "n_nodes": 10, "n_cases": 50, "dt": 0.05, "n_steps": 50},
        "model": {"hidden": 16, "blocks": 2, "mlp_hidden_layers": 2},
        "train": {"lam": 10.0, "base_lr": 3e-3, "milestones": [660, 935], "epochs": 1100,
                  "batch_size": 64, "noise_var": 1e-4, "seed": 0},
    },
    "couette": {
        "generator": {"kind": "couette", "n_nodes": 101, "n_cases": 100, "dt": 6.7e-3, "n_steps": 150},
        "model": {"hidden": 10, "blocks": 3, "mlp_hidden_layers": 2},
        "train": {"lam": 10.0, "base_lr": 1e-3, "milestones": [2000, 4000], "epochs": 6000,
                  "batch_size": 8, "noise_var": 1e-2, "seed": 0},
    },
    "beam": {
        "model": {"hidden": 50, "blocks": 3, "mlp_hidden_layers": 2},
        "train": {"lam": 10.0, "base_lr": 1e-4, "milestones": [600, 1200], "epochs": 1800,
                  "batch_size": 8, "noise_var": 1e-5, "seed": 0},
    },
    "cylinder": {
        "model": {"hidden": 128, "blocks": 3, "mlp_hidden_layers": 2},
        "train": {"lam": 10.0, "base_lr": 1e-4, "milestones": [600, 1200], "epochs": 2000,
                  "batch_size": 8, "noise_var": 4e-4, "seed": 0},
    },
}


def experiment_preset(name: str) -> dict:
    if name not in _PRESETS:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(_PRESETS)}")
    d = copy.deepcopy(_PRESETS[name])
    d["preset"] = name
    return d
