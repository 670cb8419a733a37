"""GENERIC operator assembly, potential gradients, degeneracy residuals and
the forward-Euler step.

Operators are per node: node i evolves its own F_z channels with
    dz_i/dt = L_i dE/dz_i + M_i dS/dz_i,
where E and S are the summed node potentials, so neighbours still enter
through the gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import math

import torch

from .autodiff import DTYPE, ContractError, DimensionError


class RolloutDivergence(RuntimeError):
    def __init__(self, msg, step=None):
        super().__init__(msg)
        self.step = step


def n_skew(n_state: int) -> int:
    return n_state * (n_state - 1) // 2


def n_lower(n_state: int) -> int:
    return n_state * (n_state + 1) // 2


def output_dim(n_state: int) -> int:
    """Decoder width: strictly-lower L entries, lower M entries, E and S."""
    return n_lower(n_state) + n_skew(n_state) + 1 + 1


def _state_dim_from(count: int, strict: bool) -> int:
    # count = n(n-1)/2 (strict) or n(n+1)/2
    n = (1 + math.isqrt(1 + 8 * count)) // 2 if strict else (math.isqrt(1 + 8 * count) - 1) // 2
    if (n_skew(n) if strict else n_lower(n)) != count:
        kind = "strictly-lower" if strict else "lower"
        raise DimensionError(f"{count} is not a valid number of {kind}-triangular entries")
    return n


@lru_cache(maxsize=None)
def _tril(n: int, offset: int):
    return torch.tril_indices(n, n, offset=offset)


def assemble_L(l: torch.Tensor, n_state: int | None = None) -> torch.Tensor:
    """Skew-symmetric L = lower - lower^T from row-major strictly-lower entries."""
    l = torch.as_tensor(l, dtype=DTYPE)
    k = l.shape[-1]
    n = _state_dim_from(k, strict=True) if n_state is None else n_state
    if n_skew(n) != k:
        raise DimensionError(f"L needs {n_skew(n)} entries for F_z={n}, got {k}")
    rows, cols = _tril(n, -1)
    lower = l.new_zeros(l.shape[:-1] + (n, n))
    lower[..., rows, cols] = l
    return lower - lower.transpose(-1, -2)


def assemble_M(m: torch.Tensor, n_state: int | None = None) -> torch.Tensor:
    """Symmetric PSD M = m m^T from row-major lower-triangular entries of m."""
    m = torch.as_tensor(m, dtype=DTYPE)
    k = m.shape[-1]
    n = _state_dim_from(k, strict=False) if n_state is None else n_state
    if n_lower(n) != k:
        raise DimensionError(f"M needs {n_lower(n)} entries for F_z={n}, got {k}")
    rows, cols = _tril(n, 0)
    lower = m.new_zeros(m.shape[:-1] + (n, n))
    lower[..., rows, cols] = m
    prod = lower @ lower.transpose(-1, -2)
    # matmul does not promise bitwise symmetry; averaging with the transpose does
    return 0.5 * (prod + prod.transpose(-1, -2))


def split_output(y: torch.Tensor, n_state: int):
    """(l, m, E, S) views of a decoder output of width output_dim(n_state)."""
    if y.shape[-1] != output_dim(n_state):
        raise DimensionError(f"decoder output width {y.shape[-1]} != {output_dim(n_state)} for F_z={n_state}")
    a, b = n_skew(n_state), n_lower(n_state)
    return y[..., :a], y[..., a:a + b], y[..., a + b], y[..., a + b + 1]


@dataclass
class NodeOperators:
    L: torch.Tensor  # (n, F_z, F_z)
    M: torch.Tensor  # (n, F_z, F_z)
    gradE: torch.Tensor  # (n, F_z)
    gradS: torch.Tensor  # (n, F_z)
    E: torch.Tensor | None = None  # per-node potentials, (n,)
    S: torch.Tensor | None = None

    def rate(self) -> torch.Tensor:
        return generic_rate(self)


def _matvec(A, x):
    return (A @ x.unsqueeze(-1)).squeeze(-1)


def generic_rate(ops: NodeOperators) -> torch.Tensor:
    return _matvec(ops.L, ops.gradE) + _matvec(ops.M, ops.gradS)


def generic_step(z: torch.Tensor, ops: NodeOperators, dt: float, frozen=None, step: int | None = None) -> torch.Tensor:
    """z + dt (L dE/dz + M dS/dz); channels in ``frozen`` are left untouched."""
    if not dt > 0:
        raise ValueError(f"time increment must be positive, got {dt}")
    rate = generic_rate(ops)
    if frozen:
        rate = rate.clone()
        rate[..., list(frozen)] = 0.0
    z_next = z + dt * rate
    if not torch.isfinite(z_next).all():
        raise RolloutDivergence(f"non-finite state after step {step}", step=step)
    return z_next


def degeneracy_residuals(ops: NodeOperators) -> tuple[torch.Tensor, torch.Tensor]:
    """(L dS/dz, M dE/dz) per node; both vanish when the degeneracy conditions hold."""
    return _matvec(ops.L, ops.gradS), _matvec(ops.M, ops.gradE)


def energy_rate(ops: NodeOperators) -> torch.Tensor:
    """First-order change of the total energy along the GENERIC direction."""
    return (ops.gradE * generic_rate(ops)).sum()


def entropy_rate(ops: NodeOperators) -> torch.Tensor:
    return (ops.gradS * generic_rate(ops)).sum()


def potential_gradients(model, z: torch.Tensor, template, create_graph: bool = False):
    """d(sum_i E_i)/dz and d(sum_i S_i)/dz through the whole network.

    Returns (gradE, gradS, E, S, decoded). With ``create_graph`` the gradients
    remain differentiable w.r.t. the model parameters.
    """
    if not model.has_potentials:
        raise ContractError(f"variant {model.variant.value} predicts no potentials")
    z = z if z.requires_grad else z.detach().requires_grad_(True)
    y = model.decode(z, template)
    _, _, E, S = split_output(y, model.n_state)
    gE = torch.autograd.grad(E.sum(), z, create_graph=create_graph, retain_graph=True, allow_unused=True)[0]
    gS = torch.autograd.grad(S.sum(), z, create_graph=create_graph, retain_graph=create_graph, allow_unused=True)[0]
    gE = torch.zeros_like(z) if gE is None else gE
    gS = torch.zeros_like(z) if gS is None else gS
    return gE, gS, E, S, y


def node_operators(model, z: torch.Tensor, template, create_graph: bool = False) -> NodeOperators:
    """Physical-unit operators for every node.

    The decoder works in standardized coordinates; mapping L, M back uses
    the symmetric weight s * std_a * std_b, which keeps L exactly skew and
    M exactly symmetric.
    """
    gE, gS, E, S, y = potential_gradients(model, z, template, create_graph)
    l, m, _, _ = split_output(y, model.n_state)
    W = model.operator_weight()
    return NodeOperators(assemble_L(l, model.n_state) * W, assemble_M(m, model.n_state) * W, gE, gS, E, S)
