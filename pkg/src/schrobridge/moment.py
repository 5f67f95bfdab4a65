"""Moment measures of convex potentials via a zero-noise fixed point.

A probability density p on B_r is a stationary point of the free-energy
objective when p(x) is proportional to exp(-eps * u1(x) - |x|^2 / 2),
with u1 the potential of the heat-kernel Schrodinger solve between p and
the target law. Damped fixed-point iteration in log space finds that
density for each eps; driving eps to zero along a decreasing schedule
produces a convex potential u = -log p whose gradient pushes exp(-u) dx
to the target.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .core import (
    Density,
    DiscreteMeasure,
    GaussianHeatKernel,
    NonConvergenceError,
    OracleTooLargeError,
    Support,
    bl_distance,
    w2_distance,
    w2_distance_1d,
)
from .control import objective_from_solution
from .solver import SchroedingerSolution, solve_schrodinger

DEFAULT_DAMPING = 0.5
DEFAULT_EPS_SCHEDULE = tuple(2.0 ** (-k) for k in range(8))


@dataclass(frozen=True)
class FixedPointTrace:
    """Iteration record of the fixed point at one noise level."""

    eps: float
    iterates: tuple
    objective_values: tuple
    damping: float
    converged: bool
    residual: float
    final_solution: SchroedingerSolution

    @property
    def final(self) -> Density:
        return self.iterates[-1]


@dataclass(frozen=True)
class MomentMeasureResult:
    """Zero-noise limit candidate with its verification numbers."""

    p0: Density
    u_bar: np.ndarray
    eps_schedule: tuple
    pushforward_error: float
    convexity_defect: float
    w2_check: float
    recenter_shift: np.ndarray
    diagnostics: tuple
    traces: tuple


# ---------------------------------------------------------------------------
# Lattice utilities (gradients and midpoint convexity on grids)
# ---------------------------------------------------------------------------

def _lattice_index(support: Support):
    """Integer multi-indices of a regular (possibly ball-clipped) lattice."""
    pts = support.points
    n, d = pts.shape
    idx = np.zeros((n, d), dtype=np.int64)
    steps = np.zeros(d)
    mins = pts.min(axis=0)
    for k in range(d):
        coords = np.unique(pts[:, k])
        h = float(np.diff(coords).min()) if len(coords) > 1 else 1.0
        j = np.round((pts[:, k] - mins[k]) / h)
        if np.max(np.abs(mins[k] + j * h - pts[:, k])) > 1e-8 * max(1.0, h):
            raise ValueError("support is not a regular lattice")
        idx[:, k] = j.astype(np.int64)
        steps[k] = h
    lookup = {tuple(row): i for i, row in enumerate(idx)}
    return idx, steps, lookup


def _neighbor_ids(idx, lookup, offset):
    shifted = idx + np.asarray(offset, dtype=np.int64)
    return np.array([lookup.get(tuple(row), -1) for row in shifted], dtype=np.int64)


def lattice_gradient(values, support: Support):
    """Central differences on the lattice, one-sided at the boundary."""
    values = np.asarray(values, dtype=float)
    idx, steps, lookup = _lattice_index(support)
    n, d = idx.shape
    grad = np.zeros((n, d))
    for k in range(d):
        e = np.zeros(d, dtype=np.int64)
        e[k] = 1
        fwd = _neighbor_ids(idx, lookup, e)
        bwd = _neighbor_ids(idx, lookup, -e)
        h = steps[k]
        both = (fwd >= 0) & (bwd >= 0)
        only_f = (fwd >= 0) & (bwd < 0)
        only_b = (fwd < 0) & (bwd >= 0)
        none = (fwd < 0) & (bwd < 0)
        if np.any(none) and n > 1:
            raise ValueError("isolated lattice point: gradient undefined")
        grad[both, k] = (values[fwd[both]] - values[bwd[both]]) / (2 * h)
        ids_f = np.nonzero(only_f)[0]
        grad[ids_f, k] = (values[fwd[ids_f]] - values[ids_f]) / h
        ids_b = np.nonzero(only_b)[0]
        grad[ids_b, k] = (values[ids_b] - values[bwd[ids_b]]) / h
    return grad


def check_convexity(u_bar, support: Support) -> float:
    """Worst midpoint-convexity violation over lattice triples.

    Scans axis-aligned and diagonal directions; for every interior triple
    (x - h, x, x + h) accumulates max(0, u(x) - (u(x-h) + u(x+h)) / 2).
    Exactly convex grid functions give 0 up to floating error.
    """
    u = np.asarray(u_bar, dtype=float)
    idx, _, lookup = _lattice_index(support)
    d = idx.shape[1]
    dirs = [np.eye(d, dtype=np.int64)[k] for k in range(d)]
    for a in range(d):
        for b in range(a + 1, d):
            e = np.zeros(d, dtype=np.int64)
            e[a], e[b] = 1, 1
            dirs.append(e.copy())
            e[b] = -1
            dirs.append(e.copy())
    defect = 0.0
    for e in dirs:
        fwd = _neighbor_ids(idx, lookup, e)
        bwd = _neighbor_ids(idx, lookup, -e)
        ok = (fwd >= 0) & (bwd >= 0)
        if not np.any(ok):
            continue
        mid = u[ok] - 0.5 * (u[fwd[ok]] + u[bwd[ok]])
        defect = max(defect, float(np.clip(mid, 0.0, None).max()))
    return defect


# ---------------------------------------------------------------------------
# Fixed-point machinery
# ---------------------------------------------------------------------------

def _restrict_to_ball(support: Support, r) -> Support:
    keep = support.radii() <= r * (1 + 1e-12)
    if np.all(keep):
        return support
    if not np.any(keep):
        raise ValueError("no support points inside B_r")
    return Support(points=support.points[keep],
                   cell_volumes=support.cell_volumes[keep],
                   bounding_radius=min(support.bounding_radius, r))


def recentered(p: Density):
    """Shift the support so the barycenter is zero; returns (density, shift)."""
    shift = p.barycenter()
    if np.linalg.norm(shift) <= 1e-9 * max(1.0, p.support.bounding_radius):
        return p, np.zeros(p.support.dim)
    pts = p.support.points - shift[None, :]
    sup = Support(points=pts, cell_volumes=p.support.cell_volumes,
                  bounding_radius=float(np.linalg.norm(pts, axis=1).max()))
    return Density(sup, p.values, is_probability=p.is_probability), shift


def uniform_density(support: Support) -> Density:
    v = np.full(support.n_points, 1.0 / support.total_volume)
    return Density(support, v, is_probability=True)


def _step(p: Density, p1: Density, eps, r, inner_tol, inner_max_iters,
          init_log_nu2=None):
    """One application of the fixed-point map, returning (density, solve)."""
    kernel = GaussianHeatKernel(source=p.support, target=p1.support, t=1.0, eps=eps)
    sol = solve_schrodinger(kernel, p.to_measure(), p1.to_measure(),
                            tol=inner_tol, max_iters=inner_max_iters,
                            init_log_nu2=init_log_nu2)
    if not sol.converged:
        raise NonConvergenceError(
            f"inner Schrodinger solve stalled at residual {sol.final_residual:.3e}")
    logits = -eps * sol.u1 - 0.5 * np.sum(p.support.points**2, axis=1)
    log_z = logsumexp(logits + np.log(p.support.cell_volumes))
    out = Density(p.support, np.exp(logits - log_z), is_probability=True)
    return out, sol


def fixed_point_step(p: Density, p1: Density, eps, r,
                     inner_tol=1e-12, inner_max_iters=20000) -> Density:
    """Apply the map p -> normalize(exp(-eps * u1 - |x|^2 / 2)) on B_r.

    u1 is the source potential of the heat-kernel Schrodinger solve with
    marginals (p, p1). A density satisfying the stationarity equation is
    reproduced within solver tolerance.
    """
    if p.support.radii().max() > r * (1 + 1e-9):
        raise ValueError("iterate support must lie inside B_r")
    if eps <= 0:
        raise ValueError("eps must be positive")
    out, _ = _step(p, p1, eps, r, inner_tol, inner_max_iters)
    return out


def solve_fixed_point(p1: Density, eps, r, damping=DEFAULT_DAMPING, tol=1e-9,
                      max_outer=200, init: Density | None = None,
                      inner_tol=1e-12, inner_max_iters=20000,
                      recenter=True) -> FixedPointTrace:
    """Damped fixed-point iteration in log space at one noise level.

    Updates log p <- (1 - damping) log p + damping log(step(p)) followed by
    renormalization; convergence is declared when the undamped map moves
    the iterate by at most ``tol`` in sup norm, and the returned final
    iterate is that undamped image. The target is recentered to barycenter
    zero unless already centered (``recenter=False`` skips the check).
    The objective value is recorded at every solved iterate.
    """
    if not 0.0 < damping <= 1.0:
        raise ValueError("damping must lie in (0, 1]")
    if max_outer < 1:
        raise ValueError("need max_outer >= 1")
    if recenter:
        p1, _ = recentered(p1)
    support = _restrict_to_ball(p1.support, r)
    if init is None:
        p = uniform_density(support)
    else:
        if init.support.radii().max() > r * (1 + 1e-9):
            raise ValueError("initial density must be supported in B_r")
        if damping < 1.0 and np.any(init.values == 0):
            raise ValueError(
                "zero-valued initialization cannot escape under damped "
                "log-space updates; floor it or use damping=1")
        p = init
    iterates = [p]
    objectives = []
    residual = math.inf
    converged = False
    sol = None
    warm = None
    for _ in range(max_outer):
        image, sol = _step(p, p1, eps, r, inner_tol, inner_max_iters, warm)
        warm = sol.log_nu2
        objectives.append(objective_from_solution(sol, p, p1, eps))
        residual = float(np.abs(image.values - p.values).max())
        if residual <= tol:
            iterates.append(image)
            converged = True
            break
        with np.errstate(divide="ignore"):
            log_mix = ((1.0 - damping) * np.log(p.values)
                       + damping * np.log(image.values))
        log_mix -= logsumexp(log_mix + np.log(support.cell_volumes))
        p = Density(support, np.exp(log_mix), is_probability=True)
        iterates.append(p)
    return FixedPointTrace(
        eps=float(eps), iterates=tuple(iterates),
        objective_values=tuple(objectives), damping=float(damping),
        converged=converged, residual=residual, final_solution=sol)


def potential_profile(trace: FixedPointTrace):
    """The convex profile eps * u1 + |x|^2 / 2 of the trace's final solve."""
    sol = trace.final_solution
    pts = sol.mu1.support.points
    return trace.eps * sol.u1 + 0.5 * np.sum(pts**2, axis=1)


def jensen_gap(trace: FixedPointTrace) -> float:
    """integral of (eps*u2 + |y|^2/2) dP1 minus its value at the barycenter.

    Nonnegative for the convex target-side profile; evaluated off-grid at
    the exact barycenter through the analytic kernel.
    """
    from .solver import potential_at

    sol = trace.final_solution
    p1w = sol.mu2.weights
    pts = sol.mu2.support.points
    profile = trace.eps * sol.u2 + 0.5 * np.sum(pts**2, axis=1)
    y0 = pts.T @ p1w / p1w.sum()
    u2_y0 = float(potential_at(sol, y0[None, :], side=2)[0])
    at_y0 = trace.eps * u2_y0 + 0.5 * float(y0 @ y0)
    return float(profile @ p1w / p1w.sum()) - at_y0


def verify_moment_measure(u_bar, support: Support, p1: Density,
                          w2_cap=400, seed=0):
    """Check that grad(u) pushes exp(-u) dx onto the target law.

    Forms the discrete pushforward with atoms at the lattice gradient of
    ``u_bar`` weighted by exp(-u_bar) * cell volume (normalized), and
    returns ``(pushforward_error, w2_check)``: the bounded-Lipschitz
    distance of the pushforward to the target, and the gap between the
    squared transport cost of the coupling (x, grad u(x)) and the exact
    squared Wasserstein distance from exp(-u) dx to the target (computed
    on a seeded subsample when the supports exceed the oracle cap). The
    gap must be nonnegative up to discretization and shrink under grid
    refinement.
    """
    u = np.asarray(u_bar, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ValueError("potential must be finite on the grid")
    du = lattice_gradient(u, support)
    if not np.all(np.isfinite(du)):
        raise ValueError("non-finite gradient at interior points")
    logw = -u + np.log(support.cell_volumes)
    rho_w = np.exp(logw - logsumexp(logw))
    atoms, inverse = np.unique(du, axis=0, return_inverse=True)
    weights = np.zeros(len(atoms))
    np.add.at(weights, inverse, rho_w)
    push_sup = Support(points=atoms, cell_volumes=np.ones(len(atoms)),
                       bounding_radius=float(np.linalg.norm(atoms, axis=1).max() + 1e-12))
    push = DiscreteMeasure(push_sup, weights, is_probability=True)
    target = p1.to_measure().normalized()
    pushforward_error = bl_distance(push, target)

    coupling_cost = float(np.sum(rho_w * np.sum((support.points - du) ** 2, axis=1)))
    rho = DiscreteMeasure(support, rho_w, is_probability=True)
    if support.dim == 1:
        w2 = w2_distance_1d(rho, target)
    else:
        rng = np.random.Generator(np.random.Philox(key=seed))
        half = w2_cap // 2

        def shrink(mu):
            if mu.support.n_points <= half:
                return mu
            take = rng.choice(mu.support.n_points, size=half,
                              p=mu.weights / mu.weights.sum())
            pts, counts = np.unique(mu.support.points[take], axis=0, return_counts=True)
            sup = Support(points=pts, cell_volumes=np.ones(len(pts)),
                          bounding_radius=mu.support.bounding_radius)
            return DiscreteMeasure(sup, counts / counts.sum(), is_probability=True)

        try:
            w2 = w2_distance(shrink(rho), shrink(target), cap=w2_cap)
        except OracleTooLargeError:  # pragma: no cover - shrink prevents this
            w2 = math.nan
    return pushforward_error, coupling_cost - w2 * w2


def zero_noise_continuation(p1: Density, r, eps_schedule=DEFAULT_EPS_SCHEDULE,
                            tol=1e-9, damping=DEFAULT_DAMPING, max_outer=200,
                            inner_tol=1e-12, inner_max_iters=20000,
                            keep_traces=True) -> MomentMeasureResult:
    """Drive the fixed point along a decreasing noise schedule.

    The target is recentered once (shift reported); each level warm-starts
    from the previous converged density. The returned potential is
    u = -log p0 gauged to min zero, with its midpoint-convexity defect and
    pushforward error; per-level diagnostics record residual, objective,
    the bounded-Lipschitz drift between consecutive densities, and the
    per-level convexity/pushforward numbers. A non-converged level aborts
    with the partial schedule attached to the error.
    """
    eps_schedule = tuple(float(e) for e in eps_schedule)
    if len(eps_schedule) == 0 or any(e <= 0 for e in eps_schedule):
        raise ValueError("schedule must be nonempty and positive")
    if any(b >= a for a, b in zip(eps_schedule, eps_schedule[1:])):
        raise ValueError("schedule must be strictly decreasing")
    p1c, shift = recentered(p1)
    traces = []
    rows = []
    prev = None
    for eps in eps_schedule:
        trace = solve_fixed_point(
            p1c, eps, r, damping=damping, tol=tol, max_outer=max_outer,
            init=prev, inner_tol=inner_tol, inner_max_iters=inner_max_iters,
            recenter=False)
        if not trace.converged:
            raise NonConvergenceError(
                f"fixed point did not converge at eps={eps:g} "
                f"(residual {trace.residual:.3e})",
                partial=tuple(traces))
        p_eps = trace.final
        u_eps = -np.log(p_eps.values)
        u_eps = u_eps - u_eps.min()
        push_err, _ = verify_moment_measure(u_eps, p_eps.support, p1c)
        drift_bl = (bl_distance(p_eps.to_measure(), prev.to_measure())
                    if prev is not None else math.nan)
        rows.append({
            "eps": eps,
            "residual": trace.residual,
            "objective": trace.objective_values[-1],
            "bl_drift": drift_bl,
            "convexity_defect": check_convexity(u_eps, p_eps.support),
            "pushforward_error": push_err,
        })
        traces.append(trace)
        prev = p_eps
    p0 = prev
    u_bar = -np.log(p0.values)
    u_bar = u_bar - u_bar.min()
    pushforward_error, w2_check = verify_moment_measure(u_bar, p0.support, p1c)
    return MomentMeasureResult(
        p0=p0, u_bar=u_bar, eps_schedule=eps_schedule,
        pushforward_error=pushforward_error,
        convexity_defect=check_convexity(u_bar, p0.support),
        w2_check=w2_check, recenter_shift=shift,
        diagnostics=tuple(rows),
        traces=tuple(traces) if keep_traces else ())
