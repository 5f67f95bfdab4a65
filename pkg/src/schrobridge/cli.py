"""Command-line front end: reproducible runs over CSV inputs.

Subcommands: solve, control, bridge, moment, stability. Parameters come
from a flat key=value config file; command-line flags override config
values. Every run writes its artifacts plus a manifest (input hashes,
parameters, tool version, wall time) into the output directory. Exit
codes: 0 success, 1 validation error, 2 non-convergence.
"""
from __future__ import annotations

import argparse
import math
import os
import sys
import time

import numpy as np

from . import __version__
from .control import control_value
from .core import (
    Density,
    GaussianHeatKernel,
    NonConvergenceError,
    make_grid,
)
from .hpath import endpoint_diagnostics, simulate
from .io import (
    load_density_csv,
    load_kernel_csv,
    load_measure_csv,
    solution_payload,
    write_csv,
    write_json,
    write_manifest,
    write_paths_binary,
    write_plan_csv,
    write_terminal_csv,
)
from .moment import zero_noise_continuation
from .solver import solve_schrodinger
from .stability import make_family, run_convergence, semiconvexity_constant

STOCHASTIC_COMMANDS = {"bridge", "stability"}


def _parse_config_file(path):
    out = {}
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, value = line.split("=", 1)
            out[key.strip()] = value.strip()
    return out


def _gaussian_density(grid, mean, var) -> Density:
    x = grid.points
    d2 = np.sum((x - np.asarray(mean)[None, :]) ** 2, axis=1)
    vals = np.exp(-d2 / (2.0 * var))
    vals = vals / (vals @ grid.cell_volumes)
    return Density(grid, vals, is_probability=True)


def _find_input(spec, base_dir):
    """Paths in configs resolve against the config file's directory too."""
    if os.path.exists(spec):
        return spec
    if base_dir:
        candidate = os.path.join(base_dir, spec)
        if os.path.exists(candidate):
            return candidate
    raise ValueError(f"input file not found: {spec}")


def _resolve_density(spec, grid, base_dir=None):
    """A density is either a CSV path or gaussian:mean,var on --grid."""
    if spec.startswith("gaussian:"):
        if grid is None:
            raise ValueError("builtin gaussian density needs --grid d,r,n")
        parts = [float(v) for v in spec[len("gaussian:"):].split(",")]
        var = parts[-1]
        mean = parts[:-1] or [0.0] * grid.dim
        if len(mean) != grid.dim:
            raise ValueError("gaussian mean dimension does not match the grid")
        return _gaussian_density(grid, mean, var), []
    path = _find_input(spec, base_dir)
    return load_density_csv(path), [path]


def _resolve_measure(spec, grid, base_dir=None):
    if spec.startswith("gaussian:"):
        dens, paths = _resolve_density(spec, grid, base_dir)
        return dens.to_measure(), paths
    path = _find_input(spec, base_dir)
    return load_measure_csv(path), [path]


def _resolve_kernel(spec, source, target, eps, base_dir=None):
    if spec.startswith("gaussian:"):
        t = float(spec[len("gaussian:"):] or 1.0)
        return GaussianHeatKernel(source=source, target=target, t=t, eps=eps), []
    path = _find_input(spec, base_dir)
    return load_kernel_csv(path, source, target), [path]


class _Run:
    """Collects parameters, inputs, and artifacts for one command."""

    def __init__(self, args):
        self.cfg = {}
        if args.config:
            if not os.path.exists(args.config):
                raise ValueError(f"config file not found: {args.config}")
            self.cfg.update(_parse_config_file(args.config))
        for key in ("out", "seed", "eps", "tol", "grid"):
            val = getattr(args, key, None)
            if val is not None:
                self.cfg[key] = str(val)
        if getattr(args, "full_paths", False):
            self.cfg["full_paths"] = "true"
        self.out_dir = self.cfg.get("out", ".")
        os.makedirs(self.out_dir, exist_ok=True)
        self.inputs = []
        self.config_dir = None
        if args.config:
            self.inputs.append(args.config)
            self.config_dir = os.path.dirname(os.path.abspath(args.config))
        self.grid = None
        if "grid" in self.cfg:
            d, r, n = self.cfg["grid"].split(",")
            self.grid = make_grid(int(d), float(r), int(n))

    def need(self, key):
        if key not in self.cfg:
            raise ValueError(f"missing required parameter: {key}")
        return self.cfg[key]

    def get_float(self, key, default=None):
        if key in self.cfg:
            return float(self.cfg[key])
        if default is None:
            raise ValueError(f"missing required parameter: {key}")
        return default

    def get_int(self, key, default=None):
        if key in self.cfg:
            return int(self.cfg[key])
        if default is None:
            raise ValueError(f"missing required parameter: {key}")
        return default

    def seed(self):
        if "seed" not in self.cfg:
            raise ValueError("a seed is mandatory for stochastic commands")
        return int(self.cfg["seed"])

    def path(self, name):
        return os.path.join(self.out_dir, name)

    def finish(self, command, start):
        params = {k: self.cfg[k] for k in sorted(self.cfg)}
        write_manifest(self.path("manifest.json"), command, __version__,
                       self.inputs, params, time.time() - start)


def _cmd_solve(run: _Run):
    mu1, in1 = _resolve_measure(run.need("mu1"), run.grid, run.config_dir)
    mu2, in2 = _resolve_measure(run.need("mu2"), run.grid, run.config_dir)
    run.inputs += in1 + in2
    eps = run.get_float("eps", 1.0)
    kernel, ink = _resolve_kernel(run.need("kernel"), mu1.support, mu2.support, eps, run.config_dir)
    run.inputs += ink
    mu1 = mu1.normalized()
    mu2 = mu2.normalized()
    sol = solve_schrodinger(kernel, mu1, mu2,
                            tol=run.get_float("tol", 1e-10),
                            max_iters=run.get_int("max_iters", 5000))
    write_json(run.path("solution.json"), solution_payload(sol))
    write_plan_csv(run.path("plan.csv"), sol)
    if not sol.converged:
        raise NonConvergenceError("solver did not reach tolerance")
    return 0


def _cmd_control(run: _Run):
    p0, in0 = _resolve_density(run.need("p0"), run.grid, run.config_dir)
    p1, in1 = _resolve_density(run.need("p1"), run.grid, run.config_dir)
    run.inputs += in0 + in1
    eps_list = [float(v) for v in run.need("eps").split(",")]
    tol = run.get_float("tol", 1e-12)
    reports = []
    for eps in eps_list:
        rep = control_value(p0, p1, eps, tol=tol,
                            max_iters=run.get_int("max_iters", 20000))
        reports.append((eps, rep))
        if not rep.converged:
            raise NonConvergenceError(f"control solve stalled at eps={eps:g}")
    write_json(run.path("control.json"),
               {"reports": [dict(eps=eps, **rep.as_dict()) for eps, rep in reports]})
    write_csv(run.path("control_sweep.csv"), ["eps", "value", "max_pairwise_gap"],
              [(eps, rep.value, rep.max_pairwise_gap) for eps, rep in reports])
    return 0


def _cmd_bridge(run: _Run):
    p0, in0 = _resolve_density(run.need("p0"), run.grid, run.config_dir)
    p1, in1 = _resolve_density(run.need("p1"), run.grid, run.config_dir)
    run.inputs += in0 + in1
    eps = run.get_float("eps")
    seed = run.seed()
    n_paths = run.get_int("n_paths", 10000)
    n_steps = run.get_int("n_steps", 200)
    keep = run.cfg.get("full_paths", "false").lower() == "true"
    rep = control_value(p0, p1, eps, tol=run.get_float("tol", 1e-12))
    if not rep.converged:
        raise NonConvergenceError("endpoint system did not converge")
    ens = simulate(p0, rep.solution, eps, n_paths, n_steps, seed,
                   keep_full_paths=keep)
    diag = endpoint_diagnostics(ens, rep.solution, p1,
                                bins=run.get_int("bins", 50))
    write_terminal_csv(run.path("terminal.csv"), ens)
    if keep:
        write_paths_binary(run.path("paths.bin"), ens)
    write_json(run.path("bridge_diagnostics.json"), {
        "bl_terminal": diag.bl_terminal,
        "w2_subsample": diag.w2_subsample,
        "w2_full_1d": diag.w2_full_1d,
        "tv_joint": diag.tv_joint,
        "kl_joint": diag.kl_joint,
        "tv_joint_err": diag.tv_joint_err,
        "w2_err": diag.w2_err,
        "n_paths": diag.n_paths,
        "bins": diag.bins,
        "seed": seed,
    })
    return 0


def _cmd_moment(run: _Run):
    p1, in1 = _resolve_density(run.need("p1"), run.grid, run.config_dir)
    run.inputs += in1
    r = run.get_float("r")
    if "schedule" in run.cfg:
        schedule = [float(v) for v in run.cfg["schedule"].split(",")]
    else:
        schedule = [2.0 ** (-k) for k in range(8)]
    result = zero_noise_continuation(
        p1, r, eps_schedule=schedule, tol=run.get_float("tol", 1e-9),
        damping=run.get_float("damping", 0.5),
        max_outer=run.get_int("max_outer", 200))
    write_json(run.path("moment.json"), {
        "p0": result.p0.values,
        "u_bar": result.u_bar,
        "eps_schedule": result.eps_schedule,
        "pushforward_error": result.pushforward_error,
        "convexity_defect": result.convexity_defect,
        "w2_check": result.w2_check,
        "recenter_shift": result.recenter_shift,
    })
    write_csv(run.path("moment_diagnostics.csv"),
              ["eps", "residual", "objective", "bl_drift",
               "convexity_defect", "pushforward_error"],
              [(row["eps"], row["residual"], row["objective"], row["bl_drift"],
                row["convexity_defect"], row["pushforward_error"])
               for row in result.diagnostics])
    return 0


def _cmd_stability(run: _Run):
    mu1, in1 = _resolve_measure(run.need("mu1"), run.grid, run.config_dir)
    mu2, in2 = _resolve_measure(run.need("mu2"), run.grid, run.config_dir)
    run.inputs += in1 + in2
    eps = run.get_float("eps", 1.0)
    kernel, ink = _resolve_kernel(run.cfg.get("kernel", "gaussian:1"),
                                  mu1.support, mu2.support, eps, run.config_dir)
    run.inputs += ink
    mu1 = mu1.normalized()
    mu2 = mu2.normalized()
    kind = run.need("family")
    params = {
        "amplitude": run.get_float("amplitude", 1.0),
        "bandwidth": run.get_float("bandwidth", 0.5),
        "seed": run.seed() if kind == "marginal_empirical" else run.get_int("seed", 0),
    }
    if "index_set" in run.cfg:
        params["index_set"] = [int(v) for v in run.cfg["index_set"].split(",")]
    fam = make_family(kernel, mu1, mu2, kind, params)
    n_probe = run.get_int("n_probes", 3)
    rng = np.random.Generator(np.random.Philox(key=params["seed"]))
    probes = [(int(rng.integers(mu1.support.n_points)),
               int(rng.integers(mu2.support.n_points))) for _ in range(n_probe)]
    m = run.get_int("m", int(math.ceil(max(mu1.support.bounding_radius,
                                           mu2.support.bounding_radius))))
    r_prime = run.get_float("r_prime", 0.0) or None
    report = run_convergence((kernel, mu1, mu2), fam, probes, m,
                             tol=run.get_float("tol", 1e-12), r_prime=r_prime)
    write_csv(run.path("stability.csv"),
              ["n", "plan_bl", "product_gap", "potential_gap", "supnorm_gap"],
              [(row.n, row.plan_bl, row.product_gap, row.potential_gap,
                row.supnorm_gap) for row in report.rows])
    summary = report.summary()
    summary["semiconvexity_constant"] = semiconvexity_constant(
        kernel, max(mu1.support.bounding_radius, mu2.support.bounding_radius))
    write_json(run.path("stability_summary.json"), summary)
    return 0


_COMMANDS = {
    "solve": _cmd_solve,
    "control": _cmd_control,
    "bridge": _cmd_bridge,
    "moment": _cmd_moment,
    "stability": _cmd_stability,
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="schrobridge",
        description="Schrodinger systems, bridges, and moment measures on grids")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="flat key = value parameter file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="RNG seed (mandatory when stochastic)")
        p.add_argument("--eps", type=float, help="diffusivity")
        p.add_argument("--tol", type=float, help="solver tolerance")
        p.add_argument("--grid", help="builtin lattice spec d,r,n")
        p.add_argument("--full-paths", action="store_true", dest="full_paths",
                       help="also write full trajectories as a binary block")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    start = time.time()
    try:
        run = _Run(args)
        status = _COMMANDS[args.command](run)
        run.finish(args.command, start)
        return status
    except NonConvergenceError as exc:
        print(f"non-convergence: {exc}", file=sys.stderr)
        try:
            run.finish(args.command, start)
        except Exception:
            pass
        return 2
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
