"""Polytopic plant descriptions and closed-loop assembly.

A plant is a convex polytope of state-space vertices sharing one
measurement matrix C. Vertex fields follow the usual two-channel
layout: w -> z_inf through (B1, C1, D11), w -> z_2 through (B1, C2,
D22), control through B2 with feedthroughs D12 (to z_inf) and D22
(to z_2). D21 (w -> y) must be zero for static output feedback to
stay well posed; validation only warns, synthesis ignores the field.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import linalg
from .errors import ShapeError, ValidationError


class PlantDims(NamedTuple):
    n: int    # states
    m: int    # control inputs
    l: int    # disturbance inputs
    p: int    # measured outputs
    p1: int   # Hinf performance outputs
    p2: int   # H2 performance outputs


_VERTEX_FIELDS = ("A", "B1", "B2", "C1", "C2", "D11", "D12", "D21", "D22")


@dataclass(frozen=True)
class PlantVertex:
    """One vertex of the polytope. Arrays are copied and made read-only."""

    A: np.ndarray
    B1: np.ndarray
    B2: np.ndarray
    C1: np.ndarray
    C2: np.ndarray
    D11: np.ndarray
    D12: np.ndarray
    D21: np.ndarray
    D22: np.ndarray

    def __post_init__(self):
        for name in _VERTEX_FIELDS:
            arr = linalg.as_matrix(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def dims(self) -> PlantDims:
        return PlantDims(
            n=self.A.shape[0],
            m=self.B2.shape[1],
            l=self.B1.shape[1],
            p=self.D21.shape[0],
            p1=self.C1.shape[0],
            p2=self.C2.shape[0],
        )


@dataclass(frozen=True)
class PolytopicPlant:
    """Vertex list plus the shared measurement matrix C (p x n)."""

    vertices: tuple[PlantVertex, ...]
    C: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vertices", tuple(self.vertices))
        c = linalg.as_matrix(self.C)
        c.setflags(write=False)
        object.__setattr__(self, "C", c)

    @property
    def num_vertices(self) -> int:
        return len(self.vertices)

    @property
    def dims(self) -> PlantDims:
        return self.vertices[0].dims


@dataclass(frozen=True)
class PolytopeWeights:
    """Convex combination coefficients: nonnegative, summing to one."""

    alpha: np.ndarray

    def __post_init__(self):
        a = np.array(self.alpha, dtype=float, copy=True).reshape(-1)
        if a.size == 0:
            raise ValidationError("weight vector is empty")
        if np.any(a < 0.0):
            raise ValidationError("polytope weights must be nonnegative")
        if abs(float(a.sum()) - 1.0) > 1e-12:
            raise ValidationError(f"polytope weights sum to {a.sum()!r}, expected 1")
        a.setflags(write=False)
        object.__setattr__(self, "alpha", a)


@dataclass(frozen=True)
class ClosedLoopVertex:
    """Vertex matrices after closing u = K y around one plant vertex."""

    Acl: np.ndarray    # A + B2 K C
    Bcl: np.ndarray    # B1 (D21 = 0 so the disturbance path is untouched)
    Cinf: np.ndarray   # C1 + D12 K C
    Dinf: np.ndarray   # D11
    C2cl: np.ndarray   # C2 + D22 K C
    D2cl: np.ndarray   # zero for a well-posed H2 channel

    def __post_init__(self):
        for name in ("Acl", "Bcl", "Cinf", "Dinf", "C2cl", "D2cl"):
            arr = linalg.as_matrix(getattr(self, name))
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)


def validate_plant(plant: PolytopicPlant) -> PlantDims:
    """Check cross-vertex shape consistency. Returns the common dimensions.

    Raises ValidationError naming the first offending vertex/field. A
    nonzero D21 is legal input but emits a warning since the measured
    output then depends on the disturbance, which u = K y cannot use.
    """
    if plant.num_vertices == 0:
        raise ValidationError("plant has no vertices")
    d = plant.vertices[0].dims
    expected = {
        "A": (d.n, d.n),
        "B1": (d.n, d.l),
        "B2": (d.n, d.m),
        "C1": (d.p1, d.n),
        "C2": (d.p2, d.n),
        "D11": (d.p1, d.l),
        "D12": (d.p1, d.m),
        "D21": (d.p, d.l),
        "D22": (d.p2, d.m),
    }
    for k, vtx in enumerate(plant.vertices):
        for name, shape in expected.items():
            got = getattr(vtx, name).shape
            if got != shape:
                raise ValidationError(
                    f"vertex {k} field {name} has shape {got}, expected {shape}"
                )
        if np.any(vtx.D21 != 0.0):
            warnings.warn(
                f"vertex {k} has nonzero D21; the disturbance feeds the measured "
                "output and static output feedback ignores that path",
                UserWarning,
                stacklevel=2,
            )
    if plant.C.shape != (d.p, d.n):
        raise ValidationError(f"C has shape {plant.C.shape}, expected {(d.p, d.n)}")
    return d


def blend_vertex(plant: PolytopicPlant, weights: PolytopeWeights) -> PlantVertex:
    """Convex combination of the vertices with the given weights."""
    if weights.alpha.size != plant.num_vertices:
        raise ShapeError(
            f"{weights.alpha.size} weights for {plant.num_vertices} vertices"
        )
    blended = {}
    for name in _VERTEX_FIELDS:
        acc = sum(
            w * getattr(vtx, name)
            for w, vtx in zip(weights.alpha, plant.vertices)
        )
        blended[name] = acc
    return PlantVertex(**blended)


def close_loop(vertex: PlantVertex, C: np.ndarray, K: np.ndarray) -> ClosedLoopVertex:
    """Apply u = K y to one vertex and return the closed-loop matrices."""
    d = vertex.dims
    K = linalg.as_matrix(K, rows=d.m, cols=d.p)
    C = linalg.as_matrix(C, rows=d.p, cols=d.n)
    kc = K @ C
    return ClosedLoopVertex(
        Acl=vertex.A + vertex.B2 @ kc,
        Bcl=vertex.B1,
        Cinf=vertex.C1 + vertex.D12 @ kc,
        Dinf=vertex.D11,
        C2cl=vertex.C2 + vertex.D22 @ kc,
        D2cl=np.zeros((d.p2, d.l)),
    )


def is_stable(a: np.ndarray, margin: float = 0.0) -> bool:
    """True when every eigenvalue of `a` has real part < -margin."""
    eigs = linalg.general_eigenvalues(a)
    return bool(np.max(eigs.real) < -margin)


def vertex_weights(num_vertices: int, index: int) -> PolytopeWeights:
    """Unit weight on one vertex; convenience for per-vertex sweeps."""
    a = np.zeros(num_vertices)
    a[index] = 1.0
    return PolytopeWeights(a)


def uniform_weights(num_vertices: int) -> PolytopeWeights:
    return PolytopeWeights(np.full(num_vertices, 1.0 / num_vertices))


def weight_grid(num_vertices: int, steps: int) -> list[PolytopeWeights]:
    """Coarse sweep of the polytope: vertex weights for any N, plus the
    1-D segment subdivision when there are exactly two vertices."""
    grid = [vertex_weights(num_vertices, k) for k in range(num_vertices)]
    if num_vertices == 2 and steps > 1:
        for j in range(1, steps):
            t = j / steps
            grid.insert(-1, PolytopeWeights(np.array([1.0 - t, t])))
    return grid
