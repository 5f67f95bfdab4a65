"""Stability of plans, product factors, and potentials under perturbations.

Generates families of perturbed instances (kernel wiggle, marginal
mollification, empirical marginals), solves each member, and reports how
fast the plan, the product factor measure, and the truncated-potential
sums approach the base solution as the family index grows. Convergence is
asserted as ladder trends on fixed seeded instances, never as asymptotic
claims.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    DenseKernel,
    DiscreteMeasure,
    GaussianHeatKernel,
    KernelSpec,
    bl_distance,
    eval_kernel,
    pairwise_sq_dists,
    product_support,
)
from .solver import (
    SchroedingerSolution,
    bridge_plan,
    solve_schrodinger,
    truncated_potentials,
)


def _smooth_wiggle(source, target):
    """Fixed smooth perturbation profile sin(sum x) * cos(sum y)."""
    sx = np.sin(source.points.sum(axis=1))
    ty = np.cos(target.points.sum(axis=1))
    return np.outer(sx, ty)


@dataclass(frozen=True)
class PerturbationFamily:
    """Materialized perturbed instances q_n, mu1_n, mu2_n indexed by n."""

    kind: str
    index_set: tuple
    params: dict
    kernels: tuple
    mu1s: tuple
    mu2s: tuple
    kernel_sup_gaps: tuple

    def member(self, position):
        return self.kernels[position], self.mu1s[position], self.mu2s[position]

    def __len__(self):
        return len(self.index_set)


def _mollified(mu: DiscreteMeasure, bandwidth) -> DiscreteMeasure:
    """Gaussian-smoothed weights, re-gridded mass-preservingly."""
    pts = mu.support.points
    vols = mu.support.cell_volumes
    d2 = pairwise_sq_dists(pts, pts)
    k = np.exp(-d2 / (2.0 * bandwidth * bandwidth)) * vols[None, :]
    k /= k.sum(axis=1, keepdims=True)
    w = mu.weights @ k
    return DiscreteMeasure(mu.support, w / w.sum(), is_probability=True)


def _empirical(mu: DiscreteMeasure, n_samples, seed_key) -> DiscreteMeasure:
    rng = np.random.default_rng(seed_key)
    idx = rng.choice(mu.support.n_points, size=n_samples,
                     p=mu.weights / mu.weights.sum())
    counts = np.bincount(idx, minlength=mu.support.n_points).astype(float)
    return DiscreteMeasure(mu.support, counts / counts.sum(), is_probability=True)


def make_family(base_q: KernelSpec, base_mu1: DiscreteMeasure,
                base_mu2: DiscreteMeasure, kind, params=None) -> PerturbationFamily:
    """Build a perturbation family around a base instance.

    kind = "kernel_perturbation": q_n = q * exp(amplitude / n * psi) with
    the fixed smooth profile psi; marginals unchanged.
    kind = "marginal_mollification": both marginals Gaussian-smoothed with
    bandwidth / n and re-gridded.
    kind = "marginal_empirical": both marginals replaced by n seeded
    samples projected to the grid (the index is the sample count).
    """
    params = dict(params or {})
    index_set = tuple(int(n) for n in params.pop("index_set", (4, 8, 16, 32, 64)))
    amplitude = float(params.pop("amplitude", 1.0))
    bandwidth = float(params.pop("bandwidth", 0.5))
    seed = int(params.pop("seed", 0))
    if params:
        raise ValueError(f"unknown family parameters: {sorted(params)}")
    if any(n <= 0 for n in index_set):
        raise ValueError("family indices must be positive")

    base_k = eval_kernel(base_q)
    kernels, mu1s, mu2s, gaps = [], [], [], []
    if kind == "kernel_perturbation":
        psi = _smooth_wiggle(base_q.source, base_q.target)
        for n in index_set:
            values = base_k * np.exp((amplitude / n) * psi)
            if not np.all(values > 0) or not np.all(np.isfinite(values)):
                raise ValueError("perturbation produced a non-positive kernel")
            kernels.append(DenseKernel(source=base_q.source, target=base_q.target,
                                       values=values))
            mu1s.append(base_mu1)
            mu2s.append(base_mu2)
            gaps.append(float(np.abs(values - base_k).max()))
    elif kind == "marginal_mollification":
        for n in index_set:
            bw = bandwidth / n
            mu1s.append(_mollified(base_mu1, bw))
            mu2s.append(_mollified(base_mu2, bw))
            kernels.append(base_q)
            gaps.append(0.0)
    elif kind == "marginal_empirical":
        for n in index_set:
            mu1s.append(_empirical(base_mu1, n, [seed, n, 1]))
            mu2s.append(_empirical(base_mu2, n, [seed, n, 2]))
            kernels.append(base_q)
            gaps.append(0.0)
    else:
        raise ValueError(f"unknown family kind {kind!r}")
    return PerturbationFamily(
        kind=kind, index_set=index_set,
        params={"amplitude": amplitude, "bandwidth": bandwidth, "seed": seed},
        kernels=tuple(kernels), mu1s=tuple(mu1s), mu2s=tuple(mu2s),
        kernel_sup_gaps=tuple(gaps))


@dataclass(frozen=True)
class ConvergenceRow:
    n: int
    plan_bl: float
    product_gap: float
    potential_gap: float
    potential_gap_individual: float
    supnorm_gap: float
    solved: bool


@dataclass(frozen=True)
class ConvergenceReport:
    rows: tuple
    probes: tuple
    m: int

    def trend(self, metric):
        """(first, last, last/first) over solved rows for one metric."""
        vals = [getattr(r, metric) for r in self.rows if r.solved]
        vals = [v for v in vals if np.isfinite(v)]
        if not vals:
            return (math.nan, math.nan, math.nan)
        first, last = vals[0], vals[-1]
        ratio = last / first if first > 0 else (0.0 if last == 0 else math.inf)
        return (first, last, ratio)

    def summary(self):
        metrics = ("plan_bl", "product_gap", "potential_gap", "supnorm_gap")
        out = {}
        for metric in metrics:
            first, last, ratio = self.trend(metric)
            out[metric] = {"first": first, "last": last, "ratio": ratio,
                           "decreasing": bool(last <= first + 1e-15)}
        return out


def _product_factor_measure(sol: SchroedingerSolution) -> DiscreteMeasure:
    w = np.outer(sol.nu1.weights, sol.nu2.weights).ravel()
    return DiscreteMeasure(product_support(sol.mu1.support, sol.mu2.support), w)


def _snap(support, point):
    return int(np.argmin(np.sum((support.points - point[None, :]) ** 2, axis=1)))


def potential_sum_gap(sol_a: SchroedingerSolution, sol_b: SchroedingerSolution,
                      m, probe_pairs, moving_shift=None):
    """Max probe gap of u_{1|m} + u_{2|m} between two solutions.

    ``probe_pairs`` are (source index, target index) pairs into the base
    supports; for the perturbed solution the probe may move by
    ``moving_shift`` (a vector) and is snapped to the nearest grid point.
    Returns (sum_gap, individual_gap). The sum is invariant under the
    factor-scaling gauge; the individual gaps additionally rely on the
    equal-mass normalization.
    """
    u1a, u2a = truncated_potentials(sol_a, m)
    u1b, u2b = truncated_potentials(sol_b, m)
    sum_gap = 0.0
    indiv_gap = 0.0
    for i1, i2 in probe_pairs:
        j1, j2 = i1, i2
        if moving_shift is not None:
            j1 = _snap(sol_b.mu1.support, sol_a.mu1.support.points[i1] + moving_shift)
            j2 = _snap(sol_b.mu2.support, sol_a.mu2.support.points[i2] + moving_shift)
        sum_gap = max(sum_gap, abs((u1b[j1] + u2b[j2]) - (u1a[i1] + u2a[i2])))
        indiv_gap = max(indiv_gap,
                        abs(u1b[j1] - u1a[i1]) + abs(u2b[j2] - u2a[i2]))
    return sum_gap, indiv_gap


def _supnorm_gap(sol_a, sol_b, r_prime):
    in_s = sol_a.mu1.support.radii() <= r_prime * (1 + 1e-12)
    in_t = sol_a.mu2.support.radii() <= r_prime * (1 + 1e-12)
    gap1 = float(np.abs(sol_b.u1 - sol_a.u1)[in_s].max()) if in_s.any() else math.nan
    gap2 = float(np.abs(sol_b.u2 - sol_a.u2)[in_t].max()) if in_t.any() else math.nan
    return gap1 + gap2


def run_convergence(base, fam: PerturbationFamily, probes, m,
                    tol=1e-12, max_iters=20000, r_prime=None,
                    probe_shift=0.25) -> ConvergenceReport:
    """Solve every family member and report its distance to the base solution.

    Per index n: bounded-Lipschitz distance of plans; dictionary gap of the
    product factor measures; worst probe gap of the truncated potential
    sums with probes moved by probe_shift / n along the first axis (snapped
    to the grid); and, when ``r_prime`` is given, the summed sup-norm
    potential gap over B_{r_prime}. Member solve failures are recorded
    per row, not fatal.
    """
    q, mu1, mu2 = base
    base_sol = solve_schrodinger(q, mu1, mu2, tol=tol, max_iters=max_iters)
    base_plan = bridge_plan(base_sol)
    base_product = _product_factor_measure(base_sol)
    d = mu1.support.dim
    shift_dir = np.zeros(d)
    shift_dir[0] = 1.0
    rows = []
    for pos, n in enumerate(fam.index_set):
        qn, m1n, m2n = fam.member(pos)
        try:
            sol = solve_schrodinger(qn, m1n, m2n, tol=tol, max_iters=max_iters)
            if not sol.converged:
                raise RuntimeError("member solve did not converge")
        except Exception:
            rows.append(ConvergenceRow(n, math.nan, math.nan, math.nan,
                                       math.nan, math.nan, False))
            continue
        plan_gap = bl_distance(bridge_plan(sol), base_plan)
        product_gap = bl_distance(_product_factor_measure(sol), base_product)
        sum_gap, indiv_gap = potential_sum_gap(
            base_sol, sol, m, probes, moving_shift=(probe_shift / n) * shift_dir)
        sup_gap = _supnorm_gap(base_sol, sol, r_prime) if r_prime is not None else math.nan
        rows.append(ConvergenceRow(n, plan_gap, product_gap, sum_gap,
                                   indiv_gap, sup_gap, True))
    return ConvergenceReport(rows=tuple(rows), probes=tuple(probes), m=m)


def semiconvexity_constant(q: KernelSpec, r) -> float:
    """Smallest C >= 0 making C|x|^2 + log q(x, y) convex in each variable.

    The analytic heat kernel gives exactly 1 / (2 eps t). Dense kernels
    are scanned with directional second differences of log q along lattice
    axes and diagonals in each variable; the estimate is
    max(0, -min_second_difference / 2).
    """
    if isinstance(q, GaussianHeatKernel):
        return 1.0 / (2.0 * q.eps * q.t)
    from .moment import _lattice_index, _neighbor_ids

    logk = np.log(q.values)
    worst = 0.0
    for axis_support, table in ((q.source, logk), (q.target, logk.T)):
        idx, steps, lookup = _lattice_index(axis_support)
        d = idx.shape[1]
        dirs = [(np.eye(d, dtype=np.int64)[k], steps[k] ** 2) for k in range(d)]
        for a in range(d):
            for b in range(a + 1, d):
                e = np.zeros(d, dtype=np.int64)
                e[a], e[b] = 1, 1
                dirs.append((e.copy(), steps[a] ** 2 + steps[b] ** 2))
                e[b] = -1
                dirs.append((e.copy(), steps[a] ** 2 + steps[b] ** 2))
        for e, h_sq in dirs:
            fwd = _neighbor_ids(idx, lookup, e)
            bwd = _neighbor_ids(idx, lookup, -e)
            ok = (fwd >= 0) & (bwd >= 0)
            if not np.any(ok):
                continue
            second = (table[fwd[ok], :] + table[bwd[ok], :] - 2 * table[ok, :]) / h_sq
            worst = min(worst, float(second.min()))
    return max(0.0, -worst / 2.0)


def run_supnorm_convergence(base, fam: PerturbationFamily, r_prime,
                            tol=1e-12, max_iters=20000):
    """Per-n summed sup-norm gaps of both potentials over B_{r_prime}.

    Valid under the equal-mass normalization (always in force here) and a
    finite semiconvexity constant of the base kernel.
    """
    q, mu1, mu2 = base
    base_sol = solve_schrodinger(q, mu1, mu2, tol=tol, max_iters=max_iters)
    out = []
    for pos, n in enumerate(fam.index_set):
        qn, m1n, m2n = fam.member(pos)
        sol = solve_schrodinger(qn, m1n, m2n, tol=tol, max_iters=max_iters)
        out.append((n, _supnorm_gap(base_sol, sol, r_prime)))
    return out
