"""Uniform tensor-product grids and a discrete calculus with exact
summation by parts.

The calculus is built from three pieces:

* ``gradient``: forward differences on directed interior edges,
  ``(u_head - u_tail) / h``.  There are no edges crossing the boundary,
  which realizes the homogeneous Neumann (no-flux) condition
  structurally.
* ``divergence``: the negative adjoint of ``gradient`` under diagonal
  quadrature weights (trapezoid weights per axis, tensorized).  For
  every node field u and edge field F::

      sum_i w_i div(F)_i u_i  ==  - sum_e omega_e F_e grad(u)_e

  holds to rounding error, so every integration-by-parts manipulation
  performed on the continuous model is an exact identity of the
  discrete system.  In particular ``integrate(divergence(F)) == 0`` for
  any F, which is what the discrete mass and entropy budgets rely on.
* ``integrate``: the weighted nodal sum ``sum_i w_i u_i`` (the exact
  trapezoid rule on the tensor grid).

Node ordering is row major (C order of the shaped value array); edges
are grouped by axis, each group in row-major order of the edge tail.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

FloatArray = np.ndarray


class GridError(ValueError):
    """Invalid grid construction or mismatched field/grid use."""


@dataclass(frozen=True)
class Grid:
    """Uniform tensor mesh on a box, dimension 1 or 2.

    ``cells`` counts intervals per axis; there are ``cells + 1`` nodes
    per axis.  ``h`` is the uniform spacing per axis.
    """

    dim: int
    cells: tuple[int, ...]
    lengths: tuple[float, ...]
    h: tuple[float, ...]

    @property
    def nodes_per_axis(self) -> tuple[int, ...]:
        return tuple(c + 1 for c in self.cells)

    @property
    def node_shape(self) -> tuple[int, ...]:
        return self.nodes_per_axis

    @property
    def node_count(self) -> int:
        return int(np.prod(self.nodes_per_axis))

    @property
    def volume(self) -> float:
        return float(np.prod(self.lengths))

    def edge_shape(self, axis: int) -> tuple[int, ...]:
        shape = list(self.nodes_per_axis)
        shape[axis] -= 1
        return tuple(shape)

    @property
    def edge_count(self) -> int:
        return sum(int(np.prod(self.edge_shape(a))) for a in range(self.dim))

    def axis_coordinates(self, axis: int) -> FloatArray:
        return np.linspace(0.0, self.lengths[axis], self.nodes_per_axis[axis])

    def meshgrid(self) -> list[FloatArray]:
        axes = [self.axis_coordinates(a) for a in range(self.dim)]
        return list(np.meshgrid(*axes, indexing="ij"))


def build_grid(dim: int, cells_per_axis: Sequence[int], length_per_axis: Sequence[float]) -> Grid:
    """Construct a grid; raises :class:`GridError` on degenerate input."""
    if dim not in (1, 2):
        raise GridError(f"dim must be 1 or 2, got {dim}")
    cells = tuple(int(c) for c in cells_per_axis)
    lengths = tuple(float(L) for L in length_per_axis)
    if len(cells) != dim or len(lengths) != dim:
        raise GridError(f"expected {dim} cells/lengths entries, got {len(cells)}/{len(lengths)}")
    if any(c < 1 for c in cells):
        raise GridError(f"each axis needs at least 1 cell (2 nodes), got {cells}")
    if any(not np.isfinite(L) or L <= 0.0 for L in lengths):
        raise GridError(f"axis lengths must be positive and finite, got {lengths}")
    h = tuple(L / c for L, c in zip(lengths, cells))
    return Grid(dim=dim, cells=cells, lengths=lengths, h=h)


# -- quadrature weights ------------------------------------------------------
#
# 1D trapezoid weights per axis (h/2 at the two boundary nodes, h inside);
# node weights are their tensor product.  Edge weights along axis a carry
# h_a times the transverse 1D weights, which is the diagonal norm making
# gradient/divergence exact adjoints.


@functools.lru_cache(maxsize=128)
def _axis_weights(n: int, h: float) -> FloatArray:
    w = np.full(n, h)
    w[0] = 0.5 * h
    w[-1] = 0.5 * h
    w.flags.writeable = False
    return w


@functools.lru_cache(maxsize=128)
def node_weights(grid: Grid) -> FloatArray:
    """Quadrature weight per node, shaped like the node array."""
    axes = [_axis_weights(n, h) for n, h in zip(grid.nodes_per_axis, grid.h)]
    if grid.dim == 1:
        w = axes[0].copy()
    else:
        w = np.multiply.outer(axes[0], axes[1])
    w.flags.writeable = False
    return w


@functools.lru_cache(maxsize=128)
def edge_weights(grid: Grid) -> tuple[FloatArray, ...]:
    """Quadrature weight per directed edge, one array per axis."""
    out = []
    for axis in range(grid.dim):
        shape = grid.edge_shape(axis)
        w = np.full(shape, grid.h[axis])
        for other in range(grid.dim):
            if other == axis:
                continue
            trans = _axis_weights(grid.nodes_per_axis[other], grid.h[other])
            w = w * trans.reshape([-1 if k == other else 1 for k in range(grid.dim)])
        w.flags.writeable = False
        out.append(w)
    return tuple(out)


# -- fields ------------------------------------------------------------------


@dataclass
class NodeField:
    """One real value per node (shaped array, row-major layout)."""

    grid: Grid
    values: FloatArray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.shape != self.grid.node_shape:
            raise GridError(
                f"node values shape {self.values.shape} != grid {self.grid.node_shape}"
            )

    @classmethod
    def zeros(cls, grid: Grid) -> "NodeField":
        return cls(grid, np.zeros(grid.node_shape))

    @classmethod
    def full(cls, grid: Grid, value: float) -> "NodeField":
        return cls(grid, np.full(grid.node_shape, float(value)))

    @classmethod
    def from_callable(cls, grid: Grid, fn: Callable[..., FloatArray]) -> "NodeField":
        """Sample ``fn(x)`` (1D) or ``fn(x, y)`` (2D) at the nodes."""
        coords = grid.meshgrid()
        return cls(grid, np.asarray(fn(*coords), dtype=np.float64))

    def copy(self) -> "NodeField":
        return NodeField(self.grid, self.values.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.values)))


@dataclass
class EdgeField:
    """One real value per directed interior edge, grouped by axis."""

    grid: Grid
    comps: tuple[FloatArray, ...]

    def __post_init__(self) -> None:
        comps = tuple(np.ascontiguousarray(c, dtype=np.float64) for c in self.comps)
        if len(comps) != self.grid.dim:
            raise GridError(f"expected {self.grid.dim} edge components, got {len(comps)}")
        for axis, c in enumerate(comps):
            if c.shape != self.grid.edge_shape(axis):
                raise GridError(
                    f"edge component {axis} shape {c.shape} != {self.grid.edge_shape(axis)}"
                )
        self.comps = comps

    @classmethod
    def zeros(cls, grid: Grid) -> "EdgeField":
        return cls(grid, tuple(np.zeros(grid.edge_shape(a)) for a in range(grid.dim)))


# -- calculus ----------------------------------------------------------------


def gradient_arrays(grid: Grid, u: FloatArray) -> tuple[FloatArray, ...]:
    return tuple(np.diff(u, axis=a) / grid.h[a] for a in range(grid.dim))


def divergence_arrays(grid: Grid, comps: Sequence[FloatArray]) -> FloatArray:
    out = np.zeros(grid.node_shape)
    for axis in range(grid.dim):
        F = comps[axis]
        pad = [(0, 0)] * grid.dim
        pad[axis] = (1, 1)
        Fp = np.pad(F, pad)
        # per-axis telescoping; h and the transverse weights cancel in the
        # adjoint, leaving only this axis's 1D boundary weight
        wa = _axis_weights(grid.nodes_per_axis[axis], grid.h[axis])
        shape = [-1 if k == axis else 1 for k in range(grid.dim)]
        out += np.diff(Fp, axis=axis) / wa.reshape(shape)
    return out


def gradient(u: NodeField) -> EdgeField:
    """Edge gradients ``(u_head - u_tail)/h``; constant fields map to zero."""
    return EdgeField(u.grid, gradient_arrays(u.grid, u.values))


def divergence(F: EdgeField) -> NodeField:
    """Negative adjoint of :func:`gradient` under the diagonal norms."""
    return NodeField(F.grid, divergence_arrays(F.grid, F.comps))


def laplacian_arrays(grid: Grid, u: FloatArray) -> FloatArray:
    return divergence_arrays(grid, gradient_arrays(grid, u))


def laplacian(u: NodeField) -> NodeField:
    """Plain discrete Neumann Laplacian, ``divergence(gradient(u))``."""
    return NodeField(u.grid, laplacian_arrays(u.grid, u.values))


def integrate_array(grid: Grid, values: FloatArray) -> float:
    return float(np.sum(node_weights(grid) * values))


def integrate(u: NodeField) -> float:
    """Discrete integral over the box (exact trapezoid rule)."""
    return integrate_array(u.grid, u.values)


def node_inner(grid: Grid, u: FloatArray, v: FloatArray) -> float:
    return float(np.sum(node_weights(grid) * u * v))


def edge_inner(grid: Grid, F: Sequence[FloatArray], H: Sequence[FloatArray]) -> float:
    w = edge_weights(grid)
    return float(sum(np.sum(w[a] * F[a] * H[a]) for a in range(grid.dim)))


def norm_l2(grid: Grid, values: FloatArray) -> float:
    """Discrete L2 norm, sqrt(sum_i w_i v_i^2)."""
    return float(np.sqrt(np.sum(node_weights(grid) * values * values)))


def norm_lq(grid: Grid, values: FloatArray, q: float) -> float:
    return float(np.sum(node_weights(grid) * np.abs(values) ** q) ** (1.0 / q))


def norm_linf(values: FloatArray) -> float:
    return float(np.max(np.abs(values)))


# -- snapshot text format ----------------------------------------------------
#
# Header lines "# dim", "# cells", "# h", then one node value per line in
# row-major order, 17 significant digits.


def write_snapshot(field: NodeField, path: str | Path) -> None:
    grid = field.grid
    lines = [
        f"# dim {grid.dim}",
        "# cells " + " ".join(str(c) for c in grid.cells),
        "# h " + " ".join(f"{v:.17g}" for v in grid.h),
    ]
    lines.extend(f"{v:.17g}" for v in field.values.ravel(order="C"))
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_snapshot(path: str | Path) -> NodeField:
    text = Path(path).read_text(encoding="utf-8").split()
    if text[0] != "#" or text[1] != "dim":
        raise GridError(f"{path}: not a field snapshot")
    dim = int(text[2])
    idx = 3
    if text[idx] != "#" or text[idx + 1] != "cells":
        raise GridError(f"{path}: missing cells header")
    cells = [int(text[idx + 2 + k]) for k in range(dim)]
    idx += 2 + dim
    if text[idx] != "#" or text[idx + 1] != "h":
        raise GridError(f"{path}: missing h header")
    h = [float(text[idx + 2 + k]) for k in range(dim)]
    idx += 2 + dim
    lengths = [c * hv for c, hv in zip(cells, h)]
    grid = build_grid(dim, cells, lengths)
    vals = np.array([float(t) for t in text[idx:]])
    if vals.size != grid.node_count:
        raise GridError(f"{path}: expected {grid.node_count} values, found {vals.size}")
    return NodeField(grid, vals.reshape(grid.node_shape))
