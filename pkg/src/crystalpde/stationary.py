"""Regularized stationary system and its fixed-point solver.

The two-equation form couples a linear elliptic equation for psi with a
p-Laplace Neumann problem for u::

    -lap(e^psi) + tau psi + a u = f
    -lap_p u + tau |u|^{p-2} u  = psi,     rho = e^psi

One application of map B evaluates first u from psi (the p-Laplace
solve), then the new psi from the exponentially fitted linear problem
``-div(c(psi) grad .) + tau`` with right side ``f - a u``.  The
divided-difference coefficient makes any fixed point satisfy the
plain-Laplacian residual of the first equation exactly, which is the
form all diagnostics are computed in.

The driver is damped Picard iteration, ``psi <- (1-theta) psi +
theta B(psi)``, with theta halved on residual growth and grown 1.2x on
decay.  Plain damping alone contracts like ``1 - theta (1 + a/tau^2)``
through the constant mode, which is hopeless for small tau, so the
damped map is wrapped in windowed Anderson acceleration (a standard
fixed-point accelerator; depth ``anderson_depth``, 0 disables it and
recovers the plain iteration).  Hard instances can additionally be
driven through a load continuation in sigma, solving with ``sigma f``
for increasing sigma with warm starts; stagnation beyond that restarts
from seeded random perturbations before reporting the best iterate and
its history.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .elliptic import (
    NonConvergence,
    SolverError,
    SolverOptions,
    solve_p_laplace_neumann,
    solve_spd_neumann,
    weighted_residual_norm,
)
from .grid import (
    FloatArray,
    Grid,
    NodeField,
    edge_inner,
    edge_weights,
    gradient_arrays,
    node_weights,
    norm_linf,
    norm_lq,
)
from .operators import (
    Params,
    laplacian_of_exp,
    p_energy_array,
    signed_power,
)


@dataclass
class StationaryState:
    """Converged triple (u, psi, rho) with rho = exp(psi) nodewise."""

    u: NodeField
    psi: NodeField
    rho: NodeField
    residual_eq1: float
    residual_eq2: float

    @property
    def grid(self) -> Grid:
        return self.u.grid


@dataclass
class StationaryResult:
    state: StationaryState
    converged: bool
    iterations: int
    restarts: int
    sigma_steps: int
    history: list = field(default_factory=list)


class StationaryStagnation(SolverError):
    """Damping fell below 1e-6 without residual progress; carries the
    best iterate and the iteration history."""

    def __init__(self, message: str, result: StationaryResult):
        super().__init__(message)
        self.result = result


@dataclass
class DiagnosticsRecord:
    """All identity gaps, inequality slacks, and energy terms of one
    converged state (everything in the discrete quadrature)."""

    residual_eq1: float
    residual_eq2: float
    identity_i1: float
    identity_i2: float
    identity_i3: float
    identity_i4: float
    claim32_inf_slack: float
    claim32_l2_slack: float
    grad_sqrt_rho_sq: float
    p_energy_u: float
    tau_psi_sq: float
    tau_u_p: float
    entropy: float
    nf6_ratio: float
    min_rho: float
    singular_fraction: float
    eps_dissipation: float


@dataclass
class Claim32Bound:
    label: str
    lhs: float
    rhs: float
    slack: float
    scale: float


@dataclass
class Claim32Report:
    bounds: list[Claim32Bound]
    passed: bool
    tolerance: float = 1e-8


# -- residuals ----------------------------------------------------------------


def residual_eq1_arrays(
    grid: Grid, psi: FloatArray, u: FloatArray, f: FloatArray, params: Params
) -> FloatArray:
    """Plain-form first-equation residual
    -lap(e^psi) + tau psi [+ eps (tau |u|^{p-2}u - psi)] + a u - f."""
    with np.errstate(over="ignore", invalid="ignore"):
        r = (
            -laplacian_of_exp(grid, psi)
            + params.tau * psi
            + params.a * u
            - f
        )
        if params.eps_perturb > 0.0:
            r = r + params.eps_perturb * (
                params.tau * signed_power(u, params.p - 1.0) - psi
            )
    return r


def residual_eq2_arrays(
    grid: Grid, u: FloatArray, psi: FloatArray, params: Params
) -> FloatArray:
    from .operators import p_laplacian_arrays

    return (
        -p_laplacian_arrays(grid, u, params.p)
        + params.tau * signed_power(u, params.p - 1.0)
        - psi
    )


def _finite_norm(grid: Grid, r: FloatArray) -> float:
    if not np.all(np.isfinite(r)):
        return np.inf
    return weighted_residual_norm(grid, r)


# -- map B --------------------------------------------------------------------


def _map_b_full(
    g: NodeField,
    f: NodeField,
    params: Params,
    opts: SolverOptions,
    u_start: FloatArray | None = None,
) -> tuple[NodeField, NodeField]:
    """One application of map B; returns (psi_new, u).

    Inner solves run tighter than the outer tolerance so the composite
    map is deterministic at the level the outer residual is driven to.
    """
    inner = replace(opts, tol_residual=0.05 * opts.tol_residual, sink=opts.sink)
    u = solve_p_laplace_neumann(
        g, params.p, params.tau, inner, eps_reg=params.eps_reg,
        x0=u_start, allow_p_gt_2=params.allow_p_gt_2,
    )
    rhs = f.values - params.a * u.values
    if params.eps_perturb > 0.0:
        # eps * lap_p u expressed through the second equation at g
        rhs = rhs - params.eps_perturb * (
            params.tau * signed_power(u.values, params.p - 1.0) - g.values
        )
    psi = solve_spd_neumann(g, params.tau, NodeField(f.grid, rhs), inner, x0=g.values)
    return psi, u


def map_B(
    g: NodeField, f: NodeField, params: Params, opts: SolverOptions | None = None
) -> NodeField:
    """The fixed-point map of the two-equation system (returns psi)."""
    if not g.is_finite():
        raise SolverError("map_B: non-finite input field")
    psi, _ = _map_b_full(g, f, params, opts or SolverOptions())
    return psi


# -- Anderson acceleration -----------------------------------------------------


class _Anderson:
    """Windowed Anderson mixing on a fixed-point map x -> g(x)."""

    def __init__(self, depth: int):
        self.depth = depth
        self.xs: list[FloatArray] = []
        self.gs: list[FloatArray] = []

    def reset(self) -> None:
        self.xs.clear()
        self.gs.clear()

    def push(self, x: FloatArray, gx: FloatArray) -> FloatArray:
        if self.depth < 1:
            return gx
        self.xs.append(x.ravel().copy())
        self.gs.append(gx.ravel().copy())
        if len(self.xs) > self.depth + 1:
            self.xs.pop(0)
            self.gs.pop(0)
        m = len(self.xs)
        if m < 2:
            return gx
        F = [g - x for g, x in zip(self.gs, self.xs)]
        dF = np.stack([F[k + 1] - F[k] for k in range(m - 1)], axis=1)
        dG = np.stack([self.gs[k + 1] - self.gs[k] for k in range(m - 1)], axis=1)
        gamma, *_ = np.linalg.lstsq(dF, F[-1], rcond=None)
        cand = self.gs[-1] - dG @ gamma
        if not np.all(np.isfinite(cand)):
            return gx
        # reject wild extrapolations, keep the plain damped step instead
        if np.linalg.norm(cand - self.xs[-1]) > 1e3 * (1.0 + np.linalg.norm(self.xs[-1])):
            return gx
        return cand.reshape(x.shape)


# -- Picard driver --------------------------------------------------------------


def _picard(
    f: NodeField,
    params: Params,
    opts: SolverOptions,
    psi0: FloatArray,
    sigma: float = 1.0,
) -> StationaryResult:
    grid = f.grid
    fv = sigma * f.values
    f_sigma = NodeField(grid, fv)
    # trust region on the positive side of psi: the first equation bounds
    # rho pointwise by O(||f||) through its Laplacian, so a generous cap
    # keeps intermediate exponentials finite and never binds at a solution
    psi_cap = float(np.log(1e8 * (1.0 + norm_linf(fv))))
    psi = np.minimum(psi0, psi_cap)
    theta = opts.damping_initial
    anderson = _Anderson(opts.anderson_depth)
    history: list[dict] = []
    best_res = np.inf
    best: tuple[FloatArray, NodeField | None] = (psi.copy(), None)
    res_prev = np.inf
    u_prev: FloatArray | None = None
    no_progress = 0

    for it in range(1, opts.max_iterations + 1):
        inner_failed = False
        u = None
        try:
            psi_new, u = _map_b_full(
                NodeField(grid, psi), f_sigma, params, opts, u_start=u_prev
            )
        except (NonConvergence, SolverError) as exc:
            inner_failed = True
            u = getattr(exc, "best", None)
        if inner_failed and u is None:
            # unsolvable inner problem at this iterate: back off to best
            theta = max(0.5 * theta, 1e-7)
            anderson.reset()
            psi = np.minimum(0.5 * (psi + best[0]), psi_cap)
            history.append(dict(iteration=it, theta=theta, residual_eq1=np.inf,
                                residual_eq2=np.inf, note="inner_failure"))
            opts.emit(phase="picard", iteration=it, theta=theta, residual=np.inf)
            no_progress += 1
            if no_progress > 40:
                break
            continue
        u_prev = u.values
        res1 = _finite_norm(grid, residual_eq1_arrays(grid, psi, u.values, fv, params))
        res2 = _finite_norm(grid, residual_eq2_arrays(grid, u.values, psi, params))
        history.append(dict(iteration=it, theta=theta, residual_eq1=res1,
                            residual_eq2=res2))
        opts.emit(phase="picard", iteration=it, theta=theta, residual=res1,
                  residual2=res2)
        if res1 < best_res * (1.0 - 1e-12):
            best_res = res1
            best = (psi.copy(), u)
            no_progress = 0
        else:
            no_progress += 1

        if res1 <= opts.tol_residual and not inner_failed and np.max(psi) < psi_cap:
            rho = NodeField(grid, np.exp(psi))
            state = StationaryState(
                u=u, psi=NodeField(grid, psi), rho=rho,
                residual_eq1=res1, residual_eq2=res2,
            )
            return StationaryResult(state, True, it, 0, 0, history)
        if no_progress > 40:
            break

        # theta adaptation: halve on growth, grow 1.2x on decay; the
        # Anderson window survives adaptation and is only dropped when a
        # candidate was rejected outright
        if not np.isfinite(res1) or res1 > res_prev:
            theta = max(0.5 * theta, 1e-4)
        else:
            theta = min(1.0, 1.2 * theta)
        res_prev = res1

        if inner_failed:
            psi = np.minimum(0.5 * (psi + best[0]), psi_cap)
            anderson.reset()
            continue
        damped = (1.0 - theta) * psi + theta * psi_new.values
        cand = anderson.push(psi, damped)
        if not np.all(np.isfinite(cand)):
            cand = best[0].copy()
            anderson.reset()
        psi = np.minimum(cand, psi_cap)

    psi_best, u_best = best
    if u_best is None:
        u_best = NodeField(grid, np.zeros(grid.node_shape))
    with np.errstate(over="ignore"):
        rho = NodeField(grid, np.exp(psi_best))
    res2 = _finite_norm(grid, residual_eq2_arrays(grid, u_best.values, psi_best, params))
    state = StationaryState(
        u=u_best, psi=NodeField(grid, psi_best), rho=rho,
        residual_eq1=best_res, residual_eq2=res2,
    )
    return StationaryResult(state, False, len(history), 0, 0, history)


def solve_stationary(
    f: NodeField, params: Params, opts: SolverOptions | None = None
) -> StationaryResult:
    """Solve the coupled stationary system by damped, Anderson-accelerated
    Picard iteration of map B.

    Falls back to load continuation in sigma (when enabled) and then to
    seeded random restarts; raises :class:`StationaryStagnation` with the
    best iterate and full history if everything stagnates.
    """
    opts = opts or SolverOptions()
    if not f.is_finite():
        raise SolverError("solve_stationary: non-finite right side")
    grid = f.grid
    zero = np.zeros(grid.node_shape)

    attempts: list[StationaryResult] = []
    if opts.sigma_continuation != "always":
        result = _picard(f, params, opts, zero)
        if result.converged:
            return result
        attempts.append(result)

    sigma_steps = 0
    if opts.sigma_continuation in ("auto", "always"):
        psi = zero.copy()
        ok = True
        for sigma in (0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0):
            result = _picard(f, params, opts, psi, sigma=sigma)
            sigma_steps += 1
            if not result.converged:
                ok = False
                attempts.append(result)
                break
            psi = result.state.psi.values.copy()
        if ok:
            result.sigma_steps = sigma_steps
            return result

    rng = np.random.default_rng(np.random.SeedSequence([opts.seed, 0x5A5]))
    best_attempt = min(attempts, key=lambda r: r.state.residual_eq1)
    for restart in range(1, 3):
        scale = 1e-3 * (1.0 + norm_linf(best_attempt.state.psi.values))
        psi0 = best_attempt.state.psi.values + scale * rng.standard_normal(grid.node_shape)
        result = _picard(f, params, opts, psi0)
        if result.converged:
            result.restarts = restart
            result.sigma_steps = sigma_steps
            return result
        attempts.append(result)
        best_attempt = min(attempts, key=lambda r: r.state.residual_eq1)

    best_attempt.restarts = 2
    best_attempt.sigma_steps = sigma_steps
    raise StationaryStagnation(
        f"solve_stationary: stagnation (best residual "
        f"{best_attempt.state.residual_eq1:.3e})",
        best_attempt,
    )


def solve_perturbed(
    f: NodeField, params: Params, opts: SolverOptions | None = None
) -> StationaryResult:
    """Stationary solve of the perturbed equation with the extra
    ``eps_perturb * lap_p u`` term (eps_perturb = 0 reproduces
    :func:`solve_stationary` exactly)."""
    return solve_stationary(f, params, opts)


# -- diagnostics ----------------------------------------------------------------


def stationary_diagnostics(
    state: StationaryState,
    f: NodeField,
    params: Params,
    eps_sing: float = 1e-8,
) -> DiagnosticsRecord:
    """Evaluate every identity and inequality of the assertion suite on a
    converged state; pure computation, nothing is solved."""
    grid = state.grid
    w = node_weights(grid)
    u = state.u.values
    psi = state.psi.values
    rho = state.rho.values
    fv = f.values
    p, a, tau, eps = params.p, params.a, params.tau, params.eps_perturb

    su = signed_power(u, p - 1.0)
    grad_rho = gradient_arrays(grid, rho)
    grad_psi = gradient_arrays(grid, psi)
    pairing_rho_psi = edge_inner(grid, grad_rho, grad_psi)
    tau_psi_sq = tau * float(np.sum(w * psi * psi))
    tau_u_p = tau * float(np.sum(w * np.abs(u) ** p))
    u_psi = float(np.sum(w * u * psi))
    f_psi = float(np.sum(w * fv * psi))
    perturb = tau * su - psi  # = lap_p u at the solve tolerance
    eps_term_psi = eps * float(np.sum(w * perturb * psi)) if eps > 0 else 0.0
    eps_term_int = eps * float(np.sum(w * perturb)) if eps > 0 else 0.0

    energy = p_energy_array(grid, u, p)
    i1 = pairing_rho_psi + tau_psi_sq + eps_term_psi + a * u_psi - f_psi
    i2 = u_psi - p * energy - tau_u_p
    i3 = (
        tau * float(np.sum(w * psi))
        + eps_term_int
        + a * float(np.sum(w * u))
        - float(np.sum(w * fv))
    )
    i4 = float(np.sum(w * psi)) - tau * float(np.sum(w * su))

    sqrt_rho = np.exp(0.5 * psi)
    gsr = gradient_arrays(grid, sqrt_rho)
    grad_sqrt_rho_sq = edge_inner(grid, gsr, gsr)

    fau = fv - a * u
    claim_inf = (1.0 / tau) * norm_linf(fau) - norm_linf(psi)
    claim_l2 = (1.0 / tau) * norm_lq(grid, fv, 2.0) - norm_lq(grid, psi, 2.0)

    entropy = float(np.sum(w * psi))
    nf6_ratio = abs(entropy) / tau ** (1.0 / p)
    n_sing = int(np.count_nonzero(rho < eps_sing))
    eps_diss = eps * float(np.sum(w * perturb * perturb)) if eps > 0 else 0.0

    return DiagnosticsRecord(
        residual_eq1=state.residual_eq1,
        residual_eq2=state.residual_eq2,
        identity_i1=i1,
        identity_i2=i2,
        identity_i3=i3,
        identity_i4=i4,
        claim32_inf_slack=claim_inf,
        claim32_l2_slack=claim_l2,
        grad_sqrt_rho_sq=grad_sqrt_rho_sq,
        p_energy_u=energy,
        tau_psi_sq=tau_psi_sq,
        tau_u_p=tau_u_p,
        entropy=entropy,
        nf6_ratio=nf6_ratio,
        min_rho=float(np.min(rho)),
        singular_fraction=n_sing / grid.node_count,
        eps_dissipation=eps_diss,
    )


def claim32_assert(
    state: StationaryState,
    f: NodeField,
    params: Params,
    qs: tuple[float, ...] = (3.0, 4.0, 8.0),
    tolerance: float = 1e-8,
) -> Claim32Report:
    """Check the a-priori bounds ||psi||_q <= ||f - a u||_q / tau
    (q > 2 and q = inf) and ||psi||_2 <= ||f||_2 / tau.

    They are theorems for the discrete system (the weighted-Laplacian
    form is monotone against |psi|^{q-2} psi test vectors), so slack
    below -tolerance * scale indicates a solver or operator fault.
    """
    grid = state.grid
    psi = state.psi.values
    fau = f.values - params.a * state.u.values
    bounds = []
    for q in qs:
        lhs = norm_lq(grid, psi, q)
        rhs = (1.0 / params.tau) * norm_lq(grid, fau, q)
        scale = max(1.0, lhs, rhs)
        bounds.append(Claim32Bound(f"q={q:g}", lhs, rhs, rhs - lhs, scale))
    lhs = norm_linf(psi)
    rhs = (1.0 / params.tau) * norm_linf(fau)
    bounds.append(Claim32Bound("inf", lhs, rhs, rhs - lhs, max(1.0, lhs, rhs)))
    lhs = norm_lq(grid, psi, 2.0)
    rhs = (1.0 / params.tau) * norm_lq(grid, f.values, 2.0)
    bounds.append(Claim32Bound("l2", lhs, rhs, rhs - lhs, max(1.0, lhs, rhs)))
    passed = all(b.slack >= -tolerance * b.scale for b in bounds)
    return Claim32Report(bounds=bounds, passed=passed, tolerance=tolerance)
