"""Ground-truth system norms, independent of the LMI machinery.

H2 norms come from the observability Gramian (Lyapunov equation solved
through an explicit Kronecker system), Hinf norms from the Hamiltonian
imaginary-axis eigenvalue test driven by bisection. Both paths avoid the
semidefinite solver entirely so they can cross-validate it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import linalg
from .errors import NumericError
from .plant import ClosedLoopVertex, PolytopicPlant, PolytopeWeights, blend_vertex, close_loop, is_stable

# Residual acceptance for the Lyapunov solve, relative to the forcing term.
LYAP_RESIDUAL_TOL = 1e-9
# An eigenvalue of the Hamiltonian counts as imaginary when |Re| is below
# this times the matrix scale.
_IMAG_AXIS_RTOL = 1e-8


def lyapunov_solve(a: np.ndarray, q: np.ndarray) -> np.ndarray:
    """Solve a.T x + x a + q = 0 for symmetric q and Hurwitz a.

    Vectorizes to an n^2 linear system via Kronecker products; fine for the
    state dimensions this package targets. The residual is checked against
    LYAP_RESIDUAL_TOL before returning.
    """
    n = linalg.require_square(a, "lyapunov coefficient")
    q = linalg.as_matrix(q, rows=n, cols=n)
    if not is_stable(a):
        raise NumericError("lyapunov_solve requires a Hurwitz coefficient matrix")
    eye = np.eye(n)
    # Column-major vec: vec(a.T x) = (I (x) a.T) vec(x), vec(x a) = (a.T (x) I) vec(x).
    lhs = np.kron(eye, a.T) + np.kron(a.T, eye)
    vec = linalg.solve_linear(lhs, -q.reshape(-1, order="F"))
    x = linalg.sym_part(vec.reshape((n, n), order="F"))
    residual = float(np.linalg.norm(a.T @ x + x @ a + q))
    if residual > LYAP_RESIDUAL_TOL * (1.0 + float(np.linalg.norm(q))):
        raise NumericError(f"lyapunov residual {residual:.3e} out of tolerance")
    return x


def h2_norm_squared(cl: ClosedLoopVertex) -> float:
    """Squared H2 norm of the w -> z2 channel of a stable closed loop."""
    if np.any(cl.D2cl != 0.0):
        raise NumericError("H2 norm undefined: the z2 channel has direct feedthrough")
    if not is_stable(cl.Acl):
        raise NumericError("H2 norm undefined: closed loop is not Hurwitz")
    gram = lyapunov_solve(cl.Acl, cl.C2cl.T @ cl.C2cl)
    return float(np.trace(cl.Bcl.T @ gram @ cl.Bcl))


def _hamiltonian_has_imaginary_eig(a, b, c, d, gamma: float) -> bool:
    """Imaginary-axis eigenvalue test for sigma_max(G(jw)) >= gamma.

    Builds the Hamiltonian of the gamma-scaled bounded-real condition; an
    eigenvalue on the imaginary axis means gamma does not exceed the Linf
    gain. Requires gamma > sigma_max(d).
    """
    l = b.shape[1]
    p = c.shape[0]
    r = gamma * gamma * np.eye(l) - d.T @ d
    rinv_bt = linalg.solve_linear(r, b.T)
    rinv_dt = linalg.solve_linear(r, d.T)
    m = a + b @ rinv_dt @ c
    ham = np.block([
        [m, b @ rinv_bt],
        [-c.T @ (np.eye(p) + d @ rinv_dt) @ c, -m.T],
    ])
    eigs = linalg.general_eigenvalues(ham)
    scale = max(1.0, float(np.max(np.abs(eigs)))) if eigs.size else 1.0
    return bool(np.any(np.abs(eigs.real) <= _IMAG_AXIS_RTOL * scale))


def hinf_norm(cl: ClosedLoopVertex, tol: float = 1e-6) -> float:
    """Hinf norm of the w -> zinf channel, to relative tolerance `tol`.

    Bisects on the Hamiltonian test between a lower bound at sigma_max(Dinf)
    and an upper bound found by doubling.
    """
    a, b, c, d = cl.Acl, cl.Bcl, cl.Cinf, cl.Dinf
    if not is_stable(a):
        raise NumericError("Hinf norm undefined: closed loop is not Hurwitz")
    if not (np.any(c != 0.0) and np.any(b != 0.0)):
        # No dynamic path from w to zinf: the transfer matrix is the constant Dinf.
        return float(np.linalg.svd(d, compute_uv=False)[0]) if d.size else 0.0
    d_gain = float(np.linalg.svd(d, compute_uv=False)[0]) if d.size else 0.0

    lo = d_gain
    hi = max(2.0 * d_gain, d_gain + 1.0)
    for _ in range(80):
        if not _hamiltonian_has_imaginary_eig(a, b, c, d, hi):
            break
        lo = hi
        hi *= 2.0
    else:
        raise NumericError("Hinf upper bound search failed to terminate")

    while hi - lo > tol * max(hi, 1e-12):
        mid = 0.5 * (lo + hi)
        if mid <= d_gain:
            lo = mid
            continue
        if _hamiltonian_has_imaginary_eig(a, b, c, d, mid):
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def hinf_norm_sweep(cl: ClosedLoopVertex, num: int = 2000, w_max: float = 1e4) -> float:
    """Frequency-sweep lower bound on the Hinf norm (test cross-check only)."""
    a, b, c, d = cl.Acl, cl.Bcl, cl.Cinf, cl.Dinf
    n = a.shape[0]
    freqs = np.concatenate(([0.0], np.logspace(-4, np.log10(w_max), num)))
    best = 0.0
    eye = np.eye(n)
    for w in freqs:
        g = c @ np.linalg.solve(1j * w * eye - a, b) + d
        s = float(np.linalg.svd(g, compute_uv=False)[0])
        best = max(best, s)
    return best


@dataclass(frozen=True)
class NormReport:
    """Norms of one blended closed loop; None marks an undefined norm."""

    weights: np.ndarray
    stable: bool
    h2_squared: Optional[float]
    hinf: Optional[float]


def certify(
    plant: PolytopicPlant,
    K: np.ndarray,
    weights_grid: Sequence[PolytopeWeights],
    hinf_tol: float = 1e-6,
) -> list[NormReport]:
    """Evaluate the closed loop at each blend point of the grid.

    Undefined norms (unstable blend, direct feedthrough on the H2 channel)
    are reported as None rather than raised, so a sweep over a gain that
    fails somewhere still yields a full report.
    """
    reports = []
    for w in weights_grid:
        cl = close_loop(blend_vertex(plant, w), plant.C, K)
        stable = is_stable(cl.Acl)
        h2s = hnorm = None
        if stable:
            try:
                h2s = h2_norm_squared(cl)
            except NumericError:
                h2s = None
            try:
                hnorm = hinf_norm(cl, tol=hinf_tol)
            except NumericError:
                hnorm = None
        reports.append(NormReport(weights=w.alpha, stable=stable, h2_squared=h2s, hinf=hnorm))
    return reports
