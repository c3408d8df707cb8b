"""Assembly of the mixed H2/Hinf feasibility system for a fixed gain.

For a candidate gain K the closed loop is affine in the remaining
unknowns, so the whole certificate is one semidefinite feasibility
problem in the scalarized variables

    y = [ vech(X2) | vech(Xinf) (only with an Hinf level) | vech(S) | delta ]

with X2 a Lyapunov matrix shared by every vertex's H2 blocks, Xinf its
bounded-real counterpart, S the output covariance bound and delta the
objective tr(S) is pushed against. Strict inequalities become
semidefinite ones by an explicit -eps*I shift.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import linalg
from .errors import ContractError, ShapeError
from .plant import PolytopicPlant, close_loop, validate_plant

# check_point tolerance: a block counts as satisfied when its smallest
# eigenvalue is at least -CHECK_TOL.
CHECK_TOL = 1e-8


@dataclass(frozen=True)
class LmiSpec:
    """Performance levels and the strictness shift.

    gamma: Hinf level; None drops the bounded-real blocks entirely.
    delta_cap: optional hard upper bound on delta (adds one scalar block).
    strictness_eps: the -eps*I shift standing in for strict inequality.
    """

    gamma: Optional[float] = None
    delta_cap: Optional[float] = None
    strictness_eps: float = 1e-7

    def __post_init__(self):
        if self.strictness_eps <= 0.0:
            raise ContractError("strictness_eps must be positive")
        if self.gamma is not None and self.gamma <= 0.0:
            raise ContractError("gamma must be positive when given")
        if self.delta_cap is not None and self.delta_cap <= 0.0:
            raise ContractError("delta_cap must be positive when given")


@dataclass(frozen=True)
class LmiBlock:
    """One semidefinite constraint F0 + sum_k y[var_idx[k]] * coeff[k] >= 0."""

    f0: np.ndarray       # (s, s) symmetric constant term
    var_idx: np.ndarray  # (k,) indices into the scalar variable vector
    coeff: np.ndarray    # (k, s, s) symmetric coefficient slices
    label: str = ""

    @property
    def size(self) -> int:
        return self.f0.shape[0]


@dataclass(frozen=True)
class SdpProblem:
    """min objective @ y subject to every block being PSD."""

    num_vars: int
    objective: np.ndarray
    blocks: tuple[LmiBlock, ...]
    variable_map: dict[str, slice] = field(default_factory=dict)


def sym_basis(n: int) -> np.ndarray:
    """Basis of symmetric n x n matrices, upper triangle in row-major order.

    Entry (i, j), i < j, maps to a matrix with ones at (i, j) and (j, i);
    no normalization, so coordinates read directly as matrix entries.
    """
    dim = n * (n + 1) // 2
    basis = np.zeros((dim, n, n))
    k = 0
    for i in range(n):
        for j in range(i, n):
            basis[k, i, j] = 1.0
            basis[k, j, i] = 1.0
            k += 1
    return basis


def symmetric_from_vector(v: np.ndarray, n: int) -> np.ndarray:
    """Inverse of the sym_basis coordinates: rebuild the symmetric matrix."""
    if v.size != n * (n + 1) // 2:
        raise ShapeError(f"{v.size} coordinates cannot fill a symmetric {n}x{n} matrix")
    m = np.zeros((n, n))
    k = 0
    for i in range(n):
        for j in range(i, n):
            m[i, j] = m[j, i] = v[k]
            k += 1
    return m


def evaluate_block(block: LmiBlock, y: np.ndarray) -> np.ndarray:
    """F(y) for one block."""
    if block.var_idx.size == 0:
        return block.f0.copy()
    return block.f0 + np.tensordot(y[block.var_idx], block.coeff, axes=(0, 0))


def assemble(plant: PolytopicPlant, K: np.ndarray, spec: LmiSpec) -> SdpProblem:
    """Build the vertex-wise certificate LMIs for the gain K.

    Per vertex i with closed loop (Acl, Bcl, Cinf, Dinf, C2cl):

      (a)  -[[Acl' X2 + X2 Acl, X2 Bcl], [*, -I]] - eps I  >= 0
      (b)   [[X2, C2cl'], [*, S]] - eps I                  >= 0
      (c)  -[[Acl' Xinf + Xinf Acl, Xinf Bcl, Cinf'],
             [*, -gamma I, Dinf'],
             [*, *, -gamma I]] - eps I                     >= 0   (only with gamma)

    plus shared blocks X2 - eps I >= 0, Xinf - eps I >= 0,
    delta - tr(S) - eps >= 0, and delta_cap - delta >= 0 when capped.
    The objective is min delta.
    """
    dims = validate_plant(plant)
    n, l, p1, p2 = dims.n, dims.l, dims.p1, dims.p2
    eps = spec.strictness_eps
    with_hinf = spec.gamma is not None

    nx = n * (n + 1) // 2
    ns = p2 * (p2 + 1) // 2
    x2_sl = slice(0, nx)
    off = nx
    xinf_sl = None
    if with_hinf:
        xinf_sl = slice(off, off + nx)
        off += nx
    s_sl = slice(off, off + ns)
    off += ns
    delta_idx = off
    num_vars = off + 1

    xb = sym_basis(n)
    sb = sym_basis(p2)
    x2_idx = np.arange(x2_sl.start, x2_sl.stop)
    s_idx = np.arange(s_sl.start, s_sl.stop)

    def lyapunov_coeffs(acl: np.ndarray, bcl: np.ndarray, pad: int) -> np.ndarray:
        """-[[Acl'E + E Acl, E Bcl], [*, 0]] per basis matrix E, with `pad`
        trailing zero rows/columns (the Hinf block's performance rows)."""
        s = n + l + pad
        out = np.zeros((nx, s, s))
        for k, e in enumerate(xb):
            ea = e @ acl
            eb = e @ bcl
            out[k, :n, :n] = -(ea.T + ea)
            out[k, :n, n:n + l] = -eb
            out[k, n:n + l, :n] = -eb.T
        return out

    blocks: list[LmiBlock] = []
    for vi, vtx in enumerate(plant.vertices):
        cl = close_loop(vtx, plant.C, K)

        # (a) H2 Lyapunov block, size n + l.
        f0 = np.zeros((n + l, n + l))
        f0[n:, n:] = np.eye(l)
        f0 -= eps * np.eye(n + l)
        blocks.append(LmiBlock(
            f0=f0,
            var_idx=x2_idx,
            coeff=lyapunov_coeffs(cl.Acl, cl.Bcl, pad=0),
            label=f"vertex{vi}:h2-lyapunov",
        ))

        # (b) H2 output block, size n + p2.
        f0 = np.zeros((n + p2, n + p2))
        f0[:n, n:] = cl.C2cl.T
        f0[n:, :n] = cl.C2cl
        f0 -= eps * np.eye(n + p2)
        coeff = np.zeros((nx + ns, n + p2, n + p2))
        coeff[:nx, :n, :n] = xb
        coeff[nx:, n:, n:] = sb
        blocks.append(LmiBlock(
            f0=f0,
            var_idx=np.concatenate([x2_idx, s_idx]),
            coeff=coeff,
            label=f"vertex{vi}:h2-output",
        ))

        # (c) bounded-real block, size n + l + p1.
        if with_hinf:
            g = float(spec.gamma)
            f0 = np.zeros((n + l + p1, n + l + p1))
            f0[:n, n + l:] = -cl.Cinf.T
            f0[n + l:, :n] = -cl.Cinf
            f0[n:n + l, n + l:] = -cl.Dinf.T
            f0[n + l:, n:n + l] = -cl.Dinf
            f0[n:n + l, n:n + l] = g * np.eye(l)
            f0[n + l:, n + l:] = g * np.eye(p1)
            f0 -= eps * np.eye(n + l + p1)
            blocks.append(LmiBlock(
                f0=f0,
                var_idx=np.arange(xinf_sl.start, xinf_sl.stop),
                coeff=lyapunov_coeffs(cl.Acl, cl.Bcl, pad=p1),
                label=f"vertex{vi}:bounded-real",
            ))

    # Shared positivity of the Lyapunov matrices.
    blocks.append(LmiBlock(
        f0=-eps * np.eye(n), var_idx=x2_idx, coeff=xb.copy(), label="x2-positive"))
    if with_hinf:
        blocks.append(LmiBlock(
            f0=-eps * np.eye(n),
            var_idx=np.arange(xinf_sl.start, xinf_sl.stop),
            coeff=xb.copy(),
            label="xinf-positive",
        ))

    # delta - tr(S) - eps >= 0; only diagonal S coordinates carry trace.
    diag_positions = []
    k = 0
    for i in range(p2):
        for j in range(i, p2):
            if i == j:
                diag_positions.append(k)
            k += 1
    idx = np.array([s_sl.start + k for k in diag_positions] + [delta_idx])
    coeff = np.zeros((idx.size, 1, 1))
    coeff[:-1, 0, 0] = -1.0
    coeff[-1, 0, 0] = 1.0
    blocks.append(LmiBlock(
        f0=np.array([[-eps]]), var_idx=idx, coeff=coeff, label="trace-bound"))

    if spec.delta_cap is not None:
        blocks.append(LmiBlock(
            f0=np.array([[float(spec.delta_cap)]]),
            var_idx=np.array([delta_idx]),
            coeff=np.array([[[-1.0]]]),
            label="delta-cap",
        ))

    objective = np.zeros(num_vars)
    objective[delta_idx] = 1.0
    variable_map = {"x2": x2_sl, "s": s_sl, "delta": slice(delta_idx, delta_idx + 1)}
    if with_hinf:
        variable_map["xinf"] = xinf_sl
    return SdpProblem(
        num_vars=num_vars,
        objective=objective,
        blocks=tuple(blocks),
        variable_map=variable_map,
    )


@dataclass(frozen=True)
class FeasibilityReport:
    """Per-block minimum eigenvalues of F(y) at a candidate point."""

    min_eigs: tuple[float, ...]
    labels: tuple[str, ...]
    feasible: bool

    def worst(self) -> float:
        return min(self.min_eigs)


def check_point(problem: SdpProblem, y: np.ndarray) -> FeasibilityReport:
    """Evaluate every block at y; feasible means all eigenvalues >= -CHECK_TOL."""
    y = np.asarray(y, dtype=float).reshape(-1)
    if y.size != problem.num_vars:
        raise ShapeError(f"point has {y.size} entries, problem has {problem.num_vars}")
    eigs = tuple(linalg.min_eig_sym(evaluate_block(b, y)) for b in problem.blocks)
    return FeasibilityReport(
        min_eigs=eigs,
        labels=tuple(b.label for b in problem.blocks),
        feasible=all(e >= -CHECK_TOL for e in eigs),
    )
