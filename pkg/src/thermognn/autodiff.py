"""Float64 tensor plumbing on top of torch: MLPs, Swish, input gradients,
Adam, the multistep schedule, channel standardization and the flat
parameter file format.
"""

from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Sequence

import numpy as np
import torch
from torch import nn

log = logging.getLogger(__name__)

DTYPE = torch.float64
torch.set_default_dtype(DTYPE)

PARAMS_MAGIC = "thermognn-params"
PARAMS_VERSION = 1


class DimensionError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class TrainingError(RuntimeError):
    def __init__(self, msg, param_index=None):
        super().__init__(msg)
        self.param_index = param_index


class Activation(str, Enum):
    SWISH = "swish"
    TANH = "tanh"
    SOFTPLUS = "softplus"


# ReLU-family units have a vanishing second derivative, which kills the
# parameter gradient of any loss built on dE/dz.
_REJECTED = {"relu", "leaky_relu", "rrelu", "linear", "identity"}


def swish(x):
    """x * sigmoid(x). Accepts python floats, numpy arrays or tensors."""
    if isinstance(x, torch.Tensor):
        return nn.functional.silu(x)
    x = np.asarray(x, dtype=np.float64)
    # stable sigmoid for large |x|
    sig = np.where(x >= 0, 1.0 / (1.0 + np.exp(-np.abs(x))),
                   np.exp(-np.abs(x)) / (1.0 + np.exp(-np.abs(x))))
    out = x * sig
    return float(out) if out.ndim == 0 else out


def swish_prime(x: float) -> float:
    s = 1.0 / (1.0 + math.exp(-x))
    return s + x * s * (1.0 - s)


def swish_second(x: float) -> float:
    s = 1.0 / (1.0 + math.exp(-x))
    ds = s * (1.0 - s)
    return 2.0 * ds + x * ds * (1.0 - 2.0 * s)


def _activation_fn(act: Activation) -> Callable[[torch.Tensor], torch.Tensor]:
    if act == Activation.SWISH:
        return swish
    if act == Activation.TANH:
        return torch.tanh
    if act == Activation.SOFTPLUS:
        return nn.functional.softplus
    raise ValueError(f"unsupported activation {act!r}")


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths including input and output, e.g. (3, 16, 16, 1)."""

    layer_widths: tuple[int, ...]
    activation: Activation = Activation.SWISH
    final_activation: str = "identity"

    def __post_init__(self):
        widths = tuple(int(w) for w in self.layer_widths)
        object.__setattr__(self, "layer_widths", widths)
        if len(widths) < 2:
            raise ValueError("an MLP needs at least input and output widths")
        if any(w <= 0 for w in widths):
            raise ValueError(f"layer widths must be positive, got {widths}")
        name = self.activation.value if isinstance(self.activation, Activation) else str(self.activation)
        if name.lower() in _REJECTED:
            raise ValueError(f"activation {name!r} has zero second derivative; use swish, tanh or softplus")
        object.__setattr__(self, "activation", Activation(name.lower()))
        if self.final_activation != "identity":
            raise ValueError("only an identity final activation is supported")

    @property
    def n_hidden(self) -> int:
        return len(self.layer_widths) - 2

    def n_params(self) -> int:
        w = self.layer_widths
        return sum(a * b + b for a, b in zip(w[:-1], w[1:]))

    def to_dict(self):
        return {"layer_widths": list(self.layer_widths), "activation": self.activation.value,
                "final_activation": self.final_activation}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["layer_widths"]), Activation(d["activation"]), d.get("final_activation", "identity"))


class Mlp(nn.Module):
    """Dense feed-forward net; Xavier-uniform weights and zero biases."""

    def __init__(self, spec: MlpSpec, generator: torch.Generator | None = None):
        super().__init__()
        self.spec = spec
        widths = spec.layer_widths
        self.layers = nn.ModuleList(nn.Linear(a, b, dtype=DTYPE) for a, b in zip(widths[:-1], widths[1:]))
        self._act = _activation_fn(spec.activation)
        for layer in self.layers:
            bound = math.sqrt(6.0 / (layer.in_features + layer.out_features))
            with torch.no_grad():
                layer.weight.uniform_(-bound, bound, generator=generator)
                layer.bias.zero_()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.spec.layer_widths[0]:
            raise DimensionError(f"MLP expects last dim {self.spec.layer_widths[0]}, got {x.shape[-1]}")
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = self._act(x)
        return x


def mlp_forward(mlp: Mlp, x) -> torch.Tensor:
    return mlp(torch.as_tensor(x, dtype=DTYPE))


def grad_input(scalar_fn, x: torch.Tensor, create_graph: bool = True) -> torch.Tensor:
    """Gradient of a scalar-valued function w.r.t. its input tensor.

    With ``create_graph=True`` the result stays on the autograd tape so a loss
    built from it can be differentiated w.r.t. the parameters of ``scalar_fn``.
    """
    if not x.requires_grad:
        x = x.detach().requires_grad_(True)
    out = scalar_fn(x)
    if not isinstance(out, torch.Tensor) or out.numel() != 1:
        raise ContractError("grad_input needs a scalar-valued function")
    if not out.requires_grad:
        return torch.zeros_like(x)
    (g,) = torch.autograd.grad(out.reshape(()), x, create_graph=create_graph, allow_unused=True)
    return torch.zeros_like(x) if g is None else g


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    @classmethod
    def for_params(cls, params: Sequence[torch.Tensor], **kw) -> "AdamState":
        st = cls(**kw)
        st.m = [torch.zeros_like(p) for p in params]
        st.v = [torch.zeros_like(p) for p in params]
        return st


@torch.no_grad()
def adam_step(params: Sequence[torch.Tensor], grads: Sequence[torch.Tensor | None], state: AdamState, lr: float):
    """Bias-corrected Adam update, applied in place. No weight decay."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise DimensionError("params, grads and Adam moments must line up")
    for i, g in enumerate(grads):
        if g is not None and not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for parameter {i}", param_index=i)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            g = torch.zeros_like(p)
        if g.shape != p.shape:
            raise DimensionError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)}")
        m.mul_(b1).add_(g, alpha=1.0 - b1)
        v.mul_(b2).addcmul_(g, g, value=1.0 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-lr / c1)
    return params, state


def lr_at(epoch: int, base_lr: float, milestones: Sequence[int], factor: float = 0.1) -> float:
    """Multistep schedule: one decay by ``factor`` for every milestone <= epoch."""
    passed = sum(1 for m in milestones if m <= epoch)
    return base_lr * factor ** passed


STD_FLOOR = 1e-8


@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, data, floor: float = STD_FLOOR) -> "Standardizer":
        """Per-channel statistics over every axis but the last."""
        arr = np.asarray(data, dtype=np.float64)
        arr = arr.reshape(-1, arr.shape[-1]) if arr.ndim > 1 else arr.reshape(-1, 1)
        if arr.shape[0] == 0:
            return cls(np.zeros(arr.shape[1]), np.ones(arr.shape[1]))
        mean = arr.mean(axis=0)
        std = arr.std(axis=0)
        low = std < floor
        if low.any():
            log.warning("standardizer: channels %s are constant, std floored at %g", np.flatnonzero(low).tolist(), floor)
            std = np.where(low, floor, std)
        return cls(mean, std)

    @classmethod
    def identity(cls, width: int) -> "Standardizer":
        return cls(np.zeros(width), np.ones(width))

    @property
    def width(self) -> int:
        return int(self.mean.shape[0])

    def _cast(self, x):
        if isinstance(x, torch.Tensor):
            return torch.as_tensor(self.mean, dtype=x.dtype), torch.as_tensor(self.std, dtype=x.dtype)
        return self.mean, self.std

    def apply(self, x):
        mean, std = self._cast(x)
        return (x - mean) / std

    def invert(self, x):
        mean, std = self._cast(x)
        return x * std + mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], dtype=np.float64), np.asarray(d["std"], dtype=np.float64))


def fit_standardizer(data, floor: float = STD_FLOOR) -> Standardizer:
    return Standardizer.fit(data, floor)


# --- flat parameter files -------------------------------------------------
#
# <dir>/manifest.json : {"magic", "version", "entries": [{"name", "shape",
#                        "offset", "count"}...], "meta": {...}}
# <dir>/<blob>.bin    : every entry's values, C order, little-endian float64,
#                       concatenated in manifest order.

def save_arrays(path: str | os.PathLike, arrays: dict[str, np.ndarray], meta: dict | None = None,
                blob: str = "params.bin") -> None:
    os.makedirs(path, exist_ok=True)
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.reshape(-1))
        offset += a.size
    flat = np.concatenate(chunks) if chunks else np.zeros(0, dtype="<f8")
    with open(os.path.join(path, blob), "wb") as fh:
        fh.write(flat.astype("<f8").tobytes())
    manifest = {"magic": PARAMS_MAGIC, "version": PARAMS_VERSION, "blob": blob,
                "entries": entries, "meta": meta or {}}
    with open(os.path.join(path, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)


def load_arrays(path: str | os.PathLike) -> tuple[dict[str, np.ndarray], dict]:
    with open(os.path.join(path, "manifest.json")) as fh:
        manifest = json.load(fh)
    if manifest.get("magic") != PARAMS_MAGIC:
        raise ValueError(f"{path}: not a parameter file (magic {manifest.get('magic')!r})")
    if manifest.get("version") != PARAMS_VERSION:
        raise ValueError(f"{path}: unsupported parameter file version {manifest.get('version')}")
    flat = np.fromfile(os.path.join(path, manifest["blob"]), dtype="<f8")
    total = sum(e["count"] for e in manifest["entries"])
    if flat.size != total:
        raise ValueError(f"{path}: expected {total} values, found {flat.size} (truncated?)")
    arrays = {e["name"]: flat[e["offset"]:e["offset"] + e["count"]].reshape(e["shape"]).astype(np.float64)
              for e in manifest["entries"]}
    return arrays, manifest["meta"]


def module_arrays(module: nn.Module) -> dict[str, np.ndarray]:
    return {k: v.detach().cpu().numpy().copy() for k, v in module.state_dict().items()}


def load_module_arrays(module: nn.Module, arrays: dict[str, np.ndarray]) -> None:
    own = module.state_dict()
    missing = set(own) - set(arrays)
    if missing:
        raise ValueError(f"checkpoint is missing parameters: {sorted(missing)}")
    for k, v in own.items():
        if tuple(v.shape) != tuple(arrays[k].shape):
            raise DimensionError(f"parameter {k}: checkpoint shape {arrays[k].shape} != model shape {tuple(v.shape)}")
    module.load_state_dict({k: torch.as_tensor(arrays[k], dtype=DTYPE) for k in own})
