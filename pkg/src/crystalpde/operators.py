"""Discrete p-Laplacian, exponential-fitted weighted Laplacian, and the
energies they descend from.

p-Laplacian
    The operator is defined as the exact (negative) gradient of the edge
    energy::

        E_p(u) = (kappa/p) * sum_e omega_e |G_e(u)|^p,   kappa = 1/dim

    where ``G_e(u)`` is a full gradient vector reconstructed at the edge
    midpoint: the component along the edge is the edge difference, the
    transverse component (2D) is the average over the four adjacent
    perpendicular edges (absent edges count as zero, matching Neumann
    reflection).  Because the operator is the exact differential of
    ``E_p``:

    * the pairing identity  <-lap_p(u), u> = p * E_p(u)  is exact
      (Euler homogeneity), and
    * the edgewise vector inequality |x|^{p-2} x . (x - y) >=
      (|x|^p - |y|^p) / p turns the semi-implicit step estimate into an
      exact discrete theorem.

    E_p is convex for p > 1, so the associated Neumann problems have
    unique discrete solutions.  At p = 2 in 1D the operator reduces to
    the plain three-point Laplacian; in 2D it is a consistent (but not
    five-point) discretization of the Laplacian, since the transverse
    reconstruction enters the energy.

Weighted Laplacian
    ``-div(c grad psi)`` with the exponential divided-difference edge
    coefficient ``c_e = (e^{g_head} - e^{g_tail}) / (g_head - g_tail)``
    (value ``e^g`` on ties).  c_e > 0 always, and when ``psi == g`` the
    flux telescopes edgewise, ``c_e (g_head - g_tail)/h =
    (e^{g_head} - e^{g_tail})/h``, so the operator applied at its own
    coefficient field equals the plain Laplacian of ``e^g``.  That makes
    the fixed point of the two-equation iteration satisfy the plain-form
    residual exactly.

Regularization never enters residuals or energies; ``eps_reg`` is used
only inside Jacobian/Hessian applications.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .grid import (
    EdgeField,
    FloatArray,
    Grid,
    GridError,
    NodeField,
    divergence_arrays,
    edge_weights,
    gradient_arrays,
)


class ParameterError(ValueError):
    """Model parameters outside the supported regime."""


@dataclass(frozen=True)
class Params:
    """Model constants.

    p in (1, 2] (set ``allow_p_gt_2`` to experiment beyond the supported
    regime), a > 0, tau > 0.  ``eps_perturb`` switches on the perturbed
    stationary variant; ``eps_reg`` regularizes Jacobians only.
    """

    p: float
    a: float
    tau: float
    eps_perturb: float = 0.0
    eps_reg: float = 1e-8
    allow_p_gt_2: bool = False

    def __post_init__(self) -> None:
        if not np.isfinite(self.p) or self.p <= 1.0:
            raise ParameterError(f"p must be > 1, got {self.p}")
        if self.p > 2.0 and not self.allow_p_gt_2:
            raise ParameterError(
                f"p = {self.p} > 2 is outside the supported regime; "
                "set allow_p_gt_2=True to experiment"
            )
        if not np.isfinite(self.a) or self.a <= 0.0:
            raise ParameterError(f"a must be > 0, got {self.a}")
        if not np.isfinite(self.tau) or self.tau <= 0.0:
            raise ParameterError(f"tau must be > 0, got {self.tau}")
        if self.eps_perturb < 0.0 or self.eps_reg < 0.0:
            raise ParameterError("eps_perturb and eps_reg must be >= 0")


def signed_power(u: FloatArray, exponent: float) -> FloatArray:
    """sign(u) |u|^exponent, with 0 at 0 (exponent > 0)."""
    return np.sign(u) * np.abs(u) ** exponent


# -- exponential divided difference ------------------------------------------


def exp_divided_difference(a: FloatArray, b: FloatArray) -> FloatArray:
    """(e^b - e^a)/(b - a), continued by e^a on ties; always positive."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    d = b - a
    safe = np.where(d == 0.0, 1.0, d)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.exp(a) * np.expm1(d) / safe
        out = np.where(d == 0.0, np.exp(a), out)
    return out


def edge_exp_coefficients(grid: Grid, g: FloatArray) -> tuple[FloatArray, ...]:
    """Divided-difference coefficient of e^g on every edge, per axis."""
    out = []
    for axis in range(grid.dim):
        tail = np.take(g, range(0, g.shape[axis] - 1), axis=axis)
        head = np.take(g, range(1, g.shape[axis]), axis=axis)
        out.append(exp_divided_difference(tail, head))
    return tuple(out)


def weighted_laplacian_arrays(grid: Grid, g: FloatArray, psi: FloatArray) -> FloatArray:
    c = edge_exp_coefficients(grid, g)
    grads = gradient_arrays(grid, psi)
    return divergence_arrays(grid, tuple(c[a] * grads[a] for a in range(grid.dim)))


def laplacian_of_exp(grid: Grid, psi: FloatArray) -> FloatArray:
    """Plain Laplacian of e^psi; overflow propagates as inf for the
    caller's damping logic to handle."""
    with np.errstate(over="ignore", invalid="ignore"):
        rho = np.exp(psi)
        return divergence_arrays(grid, gradient_arrays(grid, rho))


def weighted_laplacian_apply(g: NodeField, psi: NodeField) -> NodeField:
    """div(c grad psi) with the divided-difference coefficient of e^g."""
    if not g.is_finite():
        raise GridError("weighted_laplacian_apply: non-finite coefficient field")
    if g.grid is not psi.grid and g.grid != psi.grid:
        raise GridError("weighted_laplacian_apply: grids differ")
    return NodeField(psi.grid, weighted_laplacian_arrays(psi.grid, g.values, psi.values))


# -- reconstructed edge gradients --------------------------------------------


def _tangential_average(grid: Grid, grads: tuple[FloatArray, ...], axis: int) -> FloatArray:
    """Transverse gradient component at axis-`axis` edge midpoints (2D)."""
    other = 1 - axis
    gp = np.pad(grads[other], [(0, 0), (1, 1)] if other == 1 else [(1, 1), (0, 0)])
    if axis == 0:
        return 0.25 * (gp[:-1, :-1] + gp[:-1, 1:] + gp[1:, :-1] + gp[1:, 1:])
    return 0.25 * (gp[:-1, :-1] + gp[1:, :-1] + gp[:-1, 1:] + gp[1:, 1:])


def _tangential_scatter(grid: Grid, values: FloatArray, axis: int) -> FloatArray:
    """Adjoint of :func:`_tangential_average`: spreads axis-`axis` edge
    values onto the perpendicular edge family (weight 1/4 each)."""
    n0, n1 = grid.nodes_per_axis
    if axis == 0:
        acc = np.zeros((n0, n1 + 1))
        q = 0.25 * values
        acc[:-1, :-1] += q
        acc[:-1, 1:] += q
        acc[1:, :-1] += q
        acc[1:, 1:] += q
        return acc[:, 1:-1]
    acc = np.zeros((n0 + 1, n1))
    q = 0.25 * values
    acc[:-1, :-1] += q
    acc[1:, :-1] += q
    acc[:-1, 1:] += q
    acc[1:, 1:] += q
    return acc[1:-1, :]


def reconstructed_gradients(
    grid: Grid, u: FloatArray
) -> tuple[tuple[FloatArray, ...], tuple[FloatArray | None, ...]]:
    """Per-axis (normal, tangential) gradient components at edge midpoints."""
    grads = gradient_arrays(grid, u)
    if grid.dim == 1:
        return grads, (None,)
    tangs = tuple(_tangential_average(grid, grads, a) for a in range(grid.dim))
    return grads, tangs


# -- p-energy and its exact gradient -----------------------------------------


def p_energy_array(grid: Grid, u: FloatArray, p: float) -> float:
    if p <= 1.0:
        raise ParameterError(f"p must be > 1, got {p}")
    grads, tangs = reconstructed_gradients(grid, u)
    w = edge_weights(grid)
    kappa = 1.0 / grid.dim
    total = 0.0
    for a in range(grid.dim):
        mag2 = grads[a] ** 2 if tangs[a] is None else grads[a] ** 2 + tangs[a] ** 2
        total += float(np.sum(w[a] * mag2 ** (0.5 * p)))
    return kappa * total / p


def p_energy(u: NodeField, p: float) -> float:
    """(1/p) integral of |grad u|^p in the edge-midpoint quadrature."""
    return p_energy_array(u.grid, u.values, p)


def _assemble_flux(
    grid: Grid,
    normal: tuple[FloatArray, ...],
    tangential: tuple[FloatArray | None, ...],
) -> tuple[FloatArray, ...]:
    """Combine per-edge vector fluxes into scalar edge fluxes.

    The tangential component of an edge's flux acts on the perpendicular
    edge family through the adjoint of the averaging stencil; weights
    omega_e are carried so the result is the exact gradient of the
    energy it came from.
    """
    w = edge_weights(grid)
    if grid.dim == 1:
        return (normal[0],)
    weighted = [w[a] * normal[a] for a in range(grid.dim)]
    for a in range(grid.dim):
        weighted[1 - a] += _tangential_scatter(grid, w[a] * tangential[a], a)
    return tuple(weighted[a] / w[a] for a in range(grid.dim))


def p_laplacian_arrays(grid: Grid, u: FloatArray, p: float) -> FloatArray:
    if p <= 1.0:
        raise ParameterError(f"p must be > 1, got {p}")
    grads, tangs = reconstructed_gradients(grid, u)
    kappa = 1.0 / grid.dim
    normal = []
    tangential = []
    for a in range(grid.dim):
        mag2 = grads[a] ** 2 if tangs[a] is None else grads[a] ** 2 + tangs[a] ** 2
        with np.errstate(divide="ignore", invalid="ignore"):
            s = np.where(mag2 > 0.0, mag2 ** (0.5 * (p - 2.0)), 0.0)
        normal.append(kappa * s * grads[a])
        tangential.append(None if tangs[a] is None else kappa * s * tangs[a])
    flux = _assemble_flux(grid, tuple(normal), tuple(tangential))
    return divergence_arrays(grid, flux)


def p_laplacian_apply(u: NodeField, p: float) -> NodeField:
    """div(|grad u|^{p-2} grad u); the exact negative gradient of
    :func:`p_energy`, so its output sums to zero in quadrature."""
    return NodeField(u.grid, p_laplacian_arrays(u.grid, u.values, p))


def p_hessian_apply(
    grid: Grid,
    u: FloatArray,
    p: float,
    eps_reg: float,
    v: FloatArray,
) -> FloatArray:
    """Apply the eps-regularized Hessian of E_p at u to v (returns the
    node array H v with <H v, w>_W = D^2 E_p,eps(u)[v, w]; SPD for p > 1)."""
    grads, tangs = reconstructed_gradients(grid, u)
    vgrads, vtangs = reconstructed_gradients(grid, v)
    kappa = 1.0 / grid.dim
    eps2 = eps_reg * eps_reg
    normal = []
    tangential = []
    for a in range(grid.dim):
        if tangs[a] is None:
            mag2 = grads[a] ** 2 + eps2
            dot = grads[a] * vgrads[a]
        else:
            mag2 = grads[a] ** 2 + tangs[a] ** 2 + eps2
            dot = grads[a] * vgrads[a] + tangs[a] * vtangs[a]
        w1 = mag2 ** (0.5 * (p - 2.0))
        w2 = (p - 2.0) * mag2 ** (0.5 * (p - 4.0)) * dot
        normal.append(kappa * (w1 * vgrads[a] + w2 * grads[a]))
        tangential.append(
            None if tangs[a] is None else kappa * (w1 * vtangs[a] + w2 * tangs[a])
        )
    flux = _assemble_flux(grid, tuple(normal), tuple(tangential))
    return -divergence_arrays(grid, flux)


def plain_laplacian_apply(u: NodeField) -> NodeField:
    """Plain Neumann Laplacian (the p = 2, no-reconstruction operator)."""
    return NodeField(u.grid, divergence_arrays(u.grid, gradient_arrays(u.grid, u.values)))
