"""Verification suites and the experiment runner behind ``rsmfc run`` / ``rsmfc check``.

Suites run in the fixed order of ``config.SUITES`` and share one context, so
later suites reuse the Riccati solution and the ensemble of earlier ones.
Every suite returns a pass flag and a details dictionary that ends up in
``manifest.json`` next to the SHA-256 of each file written.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import subprocess
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from scipy import integrate

from . import __version__
from ._backend import BACKEND
from .adjoint import (build_lq_adjoint, first_order_residual, integrability_report,
                      quadratic_bsde_check, solve_second_order, terminal_first_order_residual,
                      terminal_mean_field_residual)
from .config import SUITES, ExperimentConfig
from .cost_smp import (argmax_check, check_variational_inequality, cost_from_samples,
                       estimate_cost)
from .errors import BlowUpError, EnsembleBlowUpError, RsmfcError
from .grid_rng import ScalarPath, TimeGrid
from .lq_model import LqParams, lq_coefficients
from .mfsde_sim import (Ensemble, Perturbed, empirical_mean_function, lq_optimal_control,
                        lq_tilt, path_costs, simulate_martingales, simulate_state)
from .plotting import emit_plot
from .riccati import (FormulaVariant, GammaChoice, closed_form_raw, ode_oracle, riccati_rhs,
                      solve_riccati)

logger = logging.getLogger(__name__)

PAPER_EXACT_DT = 1e-6
EXPANSION_THETAS = (0.1, 0.05, 0.025)
PERTURBATIONS = (0.1, -0.1, 0.5, -0.5)
MAX_RECORDED_NODES = 1000
N_SAMPLE_PATHS = 10


# -- output helpers -------------------------------------------------------


def _cell(v):
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return format(float(v), ".17g")
    return str(v)


def write_csv(path: Path, header, rows) -> Path:
    """RFC-4180 CSV (CRLF line ends) with floats at 17 significant digits."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\r\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_cell(v) for v in row])
    return path


def _json_safe(obj):
    if isinstance(obj, dict):
        return {str(k): _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        f = float(obj)
        return f if math.isfinite(f) else None
    return obj if obj is None or isinstance(obj, str) else str(obj)


def sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def version_string() -> str:
    """``git describe`` of the source tree when available, else ``v<package version>``."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"v{__version__}-g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return f"v{__version__}"


def _record_every(n_steps: int) -> int:
    r = max(1, n_steps // MAX_RECORDED_NODES)
    while n_steps % r:
        r -= 1
    return r


def _paths_rows(ens: Ensemble):
    x = ens.states
    with np.errstate(all="ignore"):
        finite = np.where(np.isfinite(x), x, np.nan)
        q = np.full((3, x.shape[1]), np.nan)
        live = np.any(np.isfinite(x), axis=0)
        if live.any():
            q[:, live] = np.nanquantile(finite[:, live], [0.05, 0.5, 0.95], axis=0)
    n = min(N_SAMPLE_PATHS, ens.n_paths)
    header = ["t", "m_hat", "q05", "q50", "q95"] + [f"path_{i}" for i in range(n)]
    t, m = ens.grid.nodes, ens.empirical_mean.values
    rows = [[t[k], m[k], q[0, k], q[1, k], q[2, k], *x[:n, k]] for k in range(t.size)]
    return header, rows


def _write_paths(ctx, name, ens: Ensemble, svg_name=None, title=""):
    header, rows = _paths_rows(ens)
    ctx.write(name, header, rows)
    if svg_name and ctx.cfg.plots:
        series = {f"path {i}": ens.path(i) for i in range(min(N_SAMPLE_PATHS, ens.n_paths))}
        series["ensemble mean"] = ens.empirical_mean
        ctx.plot(svg_name, series, title=title, xlabel="t", ylabel="x(t)")


# -- suite context --------------------------------------------------------


@dataclass
class Context:
    cfg: ExperimentConfig
    out: Path
    threads: int = 1
    files: list = field(default_factory=list)
    cache: dict = field(default_factory=dict)

    @property
    def params(self) -> LqParams:
        return self.cfg.model

    @property
    def grid(self) -> TimeGrid:
        return TimeGrid(self.params.t_end, self.cfg.n_steps)

    def ricc(self):
        if "ricc" not in self.cache:
            self.cache["ricc"] = solve_riccati(self.params, self.cfg.gamma_choice, self.cfg.variant)
        return self.cache["ricc"]

    def write(self, name, header, rows):
        self.files.append(name)
        return write_csv(self.out / name, header, rows)

    def plot(self, name, series, **kw):
        self.files.append(name)
        return emit_plot(series, self.out / name, **kw)

    def simulate(self, grid=None, n_paths=None, control=None, **kw):
        grid = grid or self.grid
        ricc = self.ricc()
        ctl = control if control is not None else lq_optimal_control(ricc, grid)
        return simulate_state(lq_coefficients(self.params), ctl, self.params.x0, grid,
                              n_paths or self.cfg.n_paths, self.cfg.seed,
                              tilt=lq_tilt(ricc, grid), threads=self.threads, **kw)

    def ensemble(self):
        if "ensemble" not in self.cache:
            self.cache["ensemble"] = self.simulate()
        return self.cache["ensemble"]


# -- suites ---------------------------------------------------------------


def suite_riccati(ctx: Context):
    p, grid = ctx.params, ctx.grid
    details, ok = {}, True
    for gc in GammaChoice:
        sol = solve_riccati(p, gc, FormulaVariant.DERIVED_ODE)
        key = f"{gc.value}_derived_ode"
        if sol.blow_up_tau is None:
            rk = ode_oracle(riccati_rhs(p, gc), 1.0, grid)
            err = float(np.max(np.abs(rk.values - closed_form_raw(p, gc, sol.variant, grid.nodes))))
            details[f"{key}_max_oracle_error"] = err
            ok &= err < 1e-8
        else:
            details[f"{key}_blow_up_tau"] = sol.blow_up_tau
    printed = solve_riccati(p, GammaChoice.ONE, FormulaVariant.PAPER_PRINTED)
    details["one_paper_printed_blow_up_tau"] = printed.blow_up_tau
    derived_0 = closed_form_raw(p, GammaChoice.ONE, FormulaVariant.DERIVED_ODE, 0.0)
    printed_0 = closed_form_raw(p, GammaChoice.ONE, FormulaVariant.PAPER_PRINTED, 0.0)
    details["one_printed_minus_derived_at_t0"] = printed_0 - derived_0

    ricc = ctx.ricc()
    details["blow_up_tau"] = ricc.blow_up_tau
    t = grid.nodes
    beta = np.asarray(ricc.beta_or_nan(t), dtype=np.float64)
    gamma = np.broadcast_to(np.asarray(ricc.gamma_or_nan(t), dtype=np.float64), t.shape)
    if np.all(np.isfinite(beta)):
        alpha = ricc.alpha_on_grid(grid)
        P_bar = solve_second_order(p, ricc, grid)[0].values
        details["P_bar_T"] = P_bar[-1]
        ok &= P_bar[-1] == -1.0
        checks = np.linspace(0, grid.n_steps, 11).astype(int)
        err = 0.0
        for k in checks:
            tk = t[k]
            integral = integrate.quad(lambda s: math.exp(2 * p.a * (tk - s)) * ricc.beta(s) ** 2,
                                      tk, p.t_end, epsabs=0.0, epsrel=1e-12, limit=200)[0]
            closed = -math.exp(2 * p.a * (tk - p.t_end)) + p.theta * p.sigma ** 2 * integral
            err = max(err, abs(P_bar[k] - closed))
        details["P_bar_max_quadrature_error"] = err
        ok &= err < 1e-8
    else:
        alpha = np.full(t.size, np.nan)
        P_bar = np.full(t.size, np.nan)
    ctx.write("beta.csv", ["t", "beta", "alpha", "gamma", "P_bar"],
              zip(t, beta, alpha, gamma, P_bar))
    if ctx.cfg.plots:
        ctx.plot("beta.svg", {"beta": ScalarPath.from_values(grid, beta)},
                 title="Riccati gain", xlabel="t", ylabel="beta(t)")
    return bool(ok), details


def suite_simulate(ctx: Context):
    p = ctx.params
    try:
        ens = ctx.ensemble()
    except BlowUpError as exc:
        return False, {"error": str(exc)}
    details = {"n_paths": ens.n_paths, "n_steps": ens.grid.n_steps,
               "blown_paths": int(np.count_nonzero(ens.blow_index >= 0))}
    same_mean = bool(np.array_equal(empirical_mean_function(ens).values,
                                    ens.empirical_mean.values))
    details["empirical_mean_recomputes"] = same_mean
    ok = same_mean and ens.blow_up is None
    panel = simulate_martingales(lq_coefficients(p), ens, lq_tilt(ctx.ricc(), ens.grid).gamma,
                                 p.theta)
    ctx.cache["panel"] = panel
    L = panel.l_theta
    z = {}
    for frac in (0.25, 0.5, 1.0):
        k = ens.grid.index_of(frac * p.t_end)
        col = L[:, k][np.isfinite(L[:, k])]
        se = float(np.std(col) / math.sqrt(col.size))
        z[str(frac)] = 0.0 if se == 0 else float((np.mean(col) - 1.0) / se)
    details["l_theta_mean_z_scores"] = z
    ok &= all(abs(v) <= 3 for v in z.values())
    live = np.all(np.isfinite(panel.log_l), axis=1)
    positive = bool(np.all(panel.l_theta[live] > 0) and np.all(panel.v_theta[live] > 0))
    details["martingales_positive"] = positive
    ok &= positive
    details["max_abs_state"] = float(np.nanmax(np.abs(ens.states)))
    _write_paths(ctx, "paths.csv", ens, "state_paths.svg", title="Closed-loop state")
    return bool(ok), details


def suite_adjoint(ctx: Context):
    p, cfg = ctx.params, ctx.cfg
    coeffs = lq_coefficients(p)
    ricc = ctx.ricc()
    m = min(cfg.residual_paths, cfg.n_paths)
    details = {"n_paths": m}
    reports = {}
    try:
        for label, n, sub in (("dt", cfg.n_steps, 2), ("dt_half", 2 * cfg.n_steps, 1)):
            grid = TimeGrid(p.t_end, n)
            ens = ctx.simulate(grid=grid, n_paths=m, substeps=sub)
            panel = simulate_martingales(coeffs, ens, lq_tilt(ricc, grid).gamma, p.theta)
            adj = build_lq_adjoint(p, ricc, ens, panel)
            reports[label] = (ens, panel, adj, first_order_residual(coeffs, adj, ens, panel, p.theta),
                              quadratic_bsde_check(ens, panel, coeffs, p.theta) if p.theta else None)
    except BlowUpError as exc:
        return False, {"error": str(exc)}
    ens, panel, adj, fo, qb = reports["dt"]
    ok = True
    details["first_order_mean_abs"] = [reports[k][3].mean_abs_residual for k in ("dt", "dt_half")]
    ratio = fo.mean_abs_residual / reports["dt_half"][3].mean_abs_residual
    details["first_order_halving_ratio"] = ratio
    ok &= 1.7 <= ratio <= 2.3
    if qb is not None:
        q_ratio = qb.mean_abs_residual / reports["dt_half"][4].mean_abs_residual
        details["quadratic_bsde_halving_ratio"] = q_ratio
        details["quadratic_bsde_terminal_max_abs"] = qb.extra["terminal_max_abs"]
        ok &= 1.7 <= q_ratio <= 2.3
    details["P_bar_T"] = adj.P_bar.values[-1]
    ok &= adj.P_bar.values[-1] == -1.0
    if p.mu == 0:
        term = terminal_first_order_residual(adj, ens)
        details["terminal_max_abs"] = term.max_abs_residual
        ok &= term.max_abs_residual == 0.0
    else:
        term = terminal_mean_field_residual(adj, ens, panel, p.mu)
        details["terminal_mean_field_max_abs"] = term.max_abs_residual
        details["terminal_first_order_max_abs"] = terminal_first_order_residual(adj, ens).max_abs_residual
        ok &= term.max_abs_residual < 1e-10
    integ = integrability_report(adj, panel)
    details["integrability"] = integ
    ok &= all(math.isfinite(v) for v in integ.values())
    return bool(ok), details


def suite_cost(ctx: Context):
    p = ctx.params
    coeffs = lq_coefficients(p)
    try:
        ens = ctx.ensemble()
    except BlowUpError as exc:
        return False, {"error": str(exc)}
    psi = path_costs(coeffs, ens)
    thetas = (p.theta,) + tuple(th for th in EXPANSION_THETAS if th != p.theta)
    rows = []
    for th in thetas:
        e = cost_from_samples(psi, th)
        rows.append([th, e.psi_theta, e.mean_psi_T, e.var_psi_T, e.std_error])
    ctx.write("cost.csv", ["theta", "psi_theta", "mean_psi_T", "var_psi_T", "std_error"], rows)
    base = cost_from_samples(psi, p.theta)
    ok = True
    prow = []
    grid = ctx.grid
    opt = lq_optimal_control(ctx.ricc(), grid)
    for eps in PERTURBATIONS:
        e = estimate_cost(coeffs, Perturbed(opt, eps), p, grid, ctx.cfg.n_paths, ctx.cfg.seed,
                          tilt=lq_tilt(ctx.ricc(), grid), threads=ctx.threads)
        tol = 3 * math.hypot(e.std_error, base.std_error)
        passed = base.psi_theta <= e.psi_theta + tol
        ok &= passed
        prow.append([eps, e.psi_theta, e.std_error, e.psi_theta - base.psi_theta, tol, passed])
    ctx.write("cost_perturbed.csv",
              ["epsilon", "psi_theta", "std_error", "difference", "tolerance", "passed"], prow)
    details = {"psi_theta": base.psi_theta, "std_error": base.std_error,
               "perturbation_differences": {str(r[0]): r[3] for r in prow}}
    return bool(ok), details


def suite_smp(ctx: Context):
    p = ctx.params
    coeffs = lq_coefficients(p)
    ricc = ctx.ricc()
    grid = ctx.grid
    m = min(ctx.cfg.n_paths, 1000)
    ug = ctx.cfg.control_grid
    out = {}
    try:
        opt = lq_optimal_control(ricc, grid)
        for label, ctl in (("optimal", opt), ("perturbed", Perturbed(opt, 0.5))):
            ens = ctx.simulate(n_paths=m, control=ctl)
            panel = simulate_martingales(coeffs, ens, lq_tilt(ricc, grid).gamma, p.theta)
            adj = build_lq_adjoint(p, ricc, ens, panel)
            out[label] = (check_variational_inequality(coeffs, adj, ens, panel, p.theta, ug),
                          argmax_check(coeffs, adj, ens, panel, p.theta, ug))
    except BlowUpError as exc:
        return False, {"error": str(exc)}
    vi_o, am_o = out["optimal"]
    vi_p, am_p = out["perturbed"]
    ctx.write("smp.csv", ["u", "lhs_max_optimal", "lhs_max_perturbed"],
              zip(ug, vi_o.lhs_values.max(axis=1), vi_p.lhs_values.max(axis=1)))
    details = {
        "optimal_max_violation": vi_o.max_violation,
        "optimal_violating_fraction": vi_o.violating_fraction,
        "perturbed_max_violation": vi_p.max_violation,
        "perturbed_violating_fraction": vi_p.violating_fraction,
        "optimal_argmax_pass": am_o.passed,
        "perturbed_argmax_pass": am_p.passed,
        "sampling": vi_o.sampling,
    }
    ok = (vi_o.max_violation <= vi_o.tolerance and vi_p.max_violation >= 0.1
          and am_o.passed and not am_p.passed)
    return bool(ok), details


def suite_paper_repro(ctx: Context):
    """Finite closed loop on the base horizon and blow-up of the printed gain on the long one."""
    cfg = ctx.cfg
    p = cfg.model
    dt = cfg.repro_dt
    details = {"dt": dt}
    ok = True

    # local solution: gain from gamma = sigma beta
    n1 = int(round(p.t_end / dt))
    g1 = TimeGrid(p.t_end, n1)
    r1 = solve_riccati(p, GammaChoice.SIGMA_BETA)
    coeffs = lq_coefficients(p)
    try:
        ens = simulate_state(coeffs, lq_optimal_control(r1, g1), p.x0, g1, cfg.n_paths, cfg.seed,
                             record_every=_record_every(n1), threads=ctx.threads)
        finite = ens.blow_up is None and bool(np.all(np.isfinite(ens.states)))
        max_abs = float(np.max(np.abs(ens.states))) if finite else math.inf
    except BlowUpError as exc:
        ens, finite, max_abs = exc.partial, False, math.inf
    details["local_solution_finite"] = finite
    details["local_solution_max_abs_state"] = max_abs
    ok &= finite and max_abs < 10
    if ens is not None:
        _write_paths(ctx, "repro_local_paths.csv", ens, "repro_local_paths.svg",
                     title="Local solution, closed-loop state")
        t = ens.grid.nodes
        beta = np.asarray(r1.beta_or_nan(t), dtype=np.float64)
        ctx.write("repro_local_beta.csv", ["t", "beta"], zip(t, beta))
        if cfg.plots:
            ctx.plot("repro_local_beta.svg", {"beta": ScalarPath.from_values(ens.grid, beta)},
                     title="Local solution, Riccati gain", xlabel="t", ylabel="beta(t)")
        if finite:
            e = cost_from_samples(path_costs(coeffs, ens), p.theta)
            ctx.write("repro_local_cost.csv",
                      ["theta", "psi_theta", "mean_psi_T", "var_psi_T", "std_error"],
                      [[p.theta, e.psi_theta, e.mean_psi_T, e.var_psi_T, e.std_error]])

    # explosion: printed gamma = 1 formula on the long horizon
    p2 = p.replace(t_end=cfg.repro_t_end)
    r2 = solve_riccati(p2, GammaChoice.ONE, FormulaVariant.PAPER_PRINTED)
    tau = r2.blow_up_tau
    details["blow_up_tau"] = tau
    details["blow_up_t"] = r2.blow_up_t
    ok &= tau is not None and abs(tau - 1.0) <= 1e-3
    n2 = int(round(p2.t_end / dt))
    g2 = TimeGrid(p2.t_end, n2)
    try:
        ens2 = simulate_state(coeffs if p2 == p else lq_coefficients(p2), lq_optimal_control(r2, g2),
                              p2.x0, g2, cfg.n_paths, cfg.seed, record_every=_record_every(n2),
                              threads=ctx.threads)
    except EnsembleBlowUpError as exc:
        ens2 = exc.partial
    flag = ens2.blow_up is not None
    details["explosion_flag"] = flag
    if flag:
        details["explosion_first_step"] = ens2.blow_up[0]
        details["explosion_paths"] = int(ens2.blow_up[1].size)
    ok &= flag
    _write_paths(ctx, "repro_explosion_paths.csv", ens2)
    n_tau = min(n2, 5000)
    tg = TimeGrid(p2.t_end, n_tau)
    beta_tau = np.asarray(r2.beta_or_nan(p2.t_end - tg.nodes), dtype=np.float64)
    ctx.write("repro_explosion_beta.csv", ["tau", "beta"], zip(tg.nodes, beta_tau))
    if cfg.plots:
        ctx.plot("repro_explosion_beta.svg", {"beta": ScalarPath.from_values(tg, beta_tau)},
                 title="Explosion of the printed gain", xlabel="tau = T - t", ylabel="beta")
    return bool(ok), details


SUITE_FUNCS = {
    "riccati": suite_riccati,
    "simulate": suite_simulate,
    "adjoint": suite_adjoint,
    "cost": suite_cost,
    "smp": suite_smp,
    "paper-repro": suite_paper_repro,
}


# -- runner ---------------------------------------------------------------


@dataclass(frozen=True)
class RunManifest:
    path: Path
    data: dict

    @property
    def passed(self) -> bool:
        return all(s["passed"] for s in self.data["suites"].values())

    @property
    def files(self) -> dict:
        return self.data["files"]


def run(config: ExperimentConfig, *, out=None, threads: int = 1, paper_exact: bool = False,
        echo=None) -> RunManifest:
    """Run the configured suites, write their outputs and ``manifest.json`` into ``out``."""
    if paper_exact:
        config = replace(config, repro_dt=PAPER_EXACT_DT)
    out = Path(out if out is not None else config.outputs)
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(config, out, threads=max(1, int(threads)))
    suites = {}
    for name in SUITES:
        if name not in config.suites:
            continue
        start = time.perf_counter()
        try:
            passed, details = SUITE_FUNCS[name](ctx)
        except RsmfcError as exc:
            logger.exception("suite %s failed", name)
            passed, details = False, {"error": f"{type(exc).__name__}: {exc}"}
        seconds = time.perf_counter() - start
        # wall time and thread count stay out of the manifest so reruns hash equal
        suites[name] = {"passed": passed, "details": details}
        if echo:
            echo(f"{'PASS' if passed else 'FAIL'} {name} ({seconds:.2f} s)")
    files = {name: sha256_file(out / name) for name in sorted(set(ctx.files))}
    data = {
        "version": version_string(),
        "config": config.echo(),
        "runtime": {"backend": BACKEND, "paper_exact": paper_exact},
        "suites": suites,
        "files": files,
    }
    path = out / "manifest.json"
    path.write_text(json.dumps(_json_safe(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return RunManifest(path, data)
