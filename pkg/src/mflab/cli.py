"""Command-line experiment runner.

Every artifact carries the tool version and the config hash: CSV and mesh
files in leading ``#`` lines, JSON files in ``mflab_version`` and
``config_hash`` keys, PNG files in their metadata.  Floats are printed with
17 significant digits.  Wall-clock timings live in ``timings.json`` so that
all other files are reproducible byte for byte.

Exit codes: 0 success, 2 config error, 3 numerical nonconvergence,
4 certificate failure.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import tempfile
import time
import traceback
import warnings
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigError, ExperimentConfig, load, override, validate
from .fem import at_points
from .geometry import GeometryError, build_mesh, write_mesh
from .meanfield import (
    NonconvergenceError,
    continue_branch,
    multistart_uniqueness,
    solve_mean_field,
    uniform_bound_check,
)
from .spectral import (
    SIGN_TOL,
    AssemblyError,
    EigenSolverError,
    assemble_linearized,
    positivity_certificate,
    solve_constrained_eigs,
    solve_dirichlet_eigs,
)
from .weights import build_weight, thresholds

EXIT_OK, EXIT_CONFIG, EXIT_NONCONVERGENCE, EXIT_CERTIFICATE = 0, 2, 3, 4


# ---------------------------------------------------------------------------
# output


def fmt(x) -> str:
    if isinstance(x, (bool, np.bool_)):
        return str(int(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return format(float(x), ".17g")


def _json(obj, indent: int | None = 2, level: int = 0) -> str:
    """JSON with floats at 17 significant digits; non-finite floats as strings."""
    pad = "" if indent is None else "\n" + " " * (indent * (level + 1))
    end = "" if indent is None else "\n" + " " * (indent * level)
    sep = ", " if indent is None else ","
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f'{pad}{_json(str(k))}: {_json(v, indent, level + 1)}' for k, v in obj.items()]
        return "{" + sep.join(items) + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        if len(obj) == 0:
            return "[]"
        items = [f"{pad}{_json(v, indent, level + 1)}" for v in obj]
        return "[" + sep.join(items) + end + "]"
    if obj is None:
        return "null"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return format(x, ".17g") if math.isfinite(x) else f'"{x}"'
    s = str(obj).replace("\\", "\\\\").replace('"', '\\"').replace("\n", "\\n")
    return f'"{s}"'


class Writer:
    """Atomic artifact writer bound to one output directory and config."""

    def __init__(self, out: Path, cfg_hash: str):
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = cfg_hash
        self.files: list[str] = []

    @property
    def stamp(self) -> dict:
        return {"mflab_version": __version__, "config_hash": self.hash}

    @property
    def description(self) -> str:
        return f"mflab {__version__} config {self.hash}"

    def path(self, name: str) -> Path:
        if name not in self.files:
            self.files.append(name)
        return self.out / name

    def _atomic(self, name: str, text: str) -> None:
        target = self.path(name)
        fd, tmp = tempfile.mkstemp(dir=self.out, prefix=f".{name}.")
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, target)

    def text(self, name: str, body: str) -> None:
        self._atomic(name, body)

    def csv(self, name: str, header: str, rows) -> None:
        lines = [f"# mflab {__version__}", f"# config_hash {self.hash}", header]
        lines += [",".join(fmt(v) for v in row) for row in rows]
        self._atomic(name, "\n".join(lines) + "\n")

    def json(self, name: str, payload: dict) -> None:
        self._atomic(name, _json({**self.stamp, **payload}) + "\n")

    def jsonl(self, name: str, records) -> None:
        lines = [_json({**self.stamp, **r}, indent=None) for r in records]
        self._atomic(name, "\n".join(lines) + ("\n" if lines else ""))

    def figure(self, name: str, draw, *args, **kw) -> None:
        target = self.path(name)
        tmp = self.out / f".{name}.tmp.png"
        draw(*args, tmp, description=self.description, **kw)
        os.replace(tmp, target)


# ---------------------------------------------------------------------------
# commands


class CertificateFailure(Exception):
    """Raised after artifacts are written when a certificate fails."""


def _setup(cfg: ExperimentConfig):
    domain = cfg.domain()
    measure = cfg.measure()
    measure.check_domain(domain)
    centers = measure.grading_centers(domain) + [((x, y), b) for x, y, b in cfg.grading]
    mesh = build_mesh(domain, cfg.h_max, centers)
    return mesh, measure, build_weight(mesh, measure)


def _solve(cfg, mesh, weight, timer):
    with timer("solve"):
        return solve_mean_field(mesh, weight, cfg.run.rho, tol=cfg.run.tol)


def _mass(sol) -> float:
    """∫ h e^w by quadrature; equals ρ up to roundoff."""
    rule = sol.weight.base_rule
    return float(rule.hw @ np.exp(at_points(sol.mesh, rule, sol.w)))


def _solution_files(w: Writer, sol, measure) -> dict:
    from .plots import plot_field

    w.csv("solution.csv", "node_index,u", ((i, v) for i, v in enumerate(sol.u)))
    w.figure("solution.png", plot_field, sol.mesh, sol.u, title=f"u, rho = {sol.rho:.6g}", atoms=measure.atoms)
    return {
        "rho": sol.rho,
        "mass": _mass(sol),
        "max_u": sol.max_u,
        "residual_norm": sol.residual_norm,
        "newton_iters": sol.newton_iters,
    }


def cmd_solve(cfg, w, timer, summary):
    mesh, measure, weight = _setup(cfg)
    write_mesh(mesh, w.path("mesh.txt"), (f"mflab {__version__}", f"config_hash {w.hash}"))
    sol = _solve(cfg, mesh, weight, timer)
    summary.update(_solution_files(w, sol, measure))
    summary["n_nodes"] = mesh.n_nodes
    summary["n_triangles"] = mesh.n_triangles


def cmd_branch(cfg, w, timer, summary):
    mesh, measure, weight = _setup(cfg)
    with timer("branch"), warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        branch = continue_branch(mesh, weight, cfg.run.rho_max, cfg.run.n_steps, cfg.run.tol, True, cfg.jobs)
    summary["warnings"] = [str(c.message) for c in caught]
    t4, t8 = thresholds(branch.alpha)
    rows, certs, npass, nfail = [], [], 0, 0
    for s in branch.samples:
        rows.append((s.rho, s.solution.max_u, _mass(s.solution), s.nu1_hat, s.nu2_hat,
                     s.newton_iters, s.constrained_nu_hat))
        checks = {}
        if s.rho < t4:
            checks["nu1_hat_positive"] = s.nu1_hat > SIGN_TOL
        if s.rho <= t8:
            checks["nu2_hat_positive"] = s.nu2_hat > SIGN_TOL
            checks["constrained_positive"] = s.constrained_nu_hat > SIGN_TOL
        ok = all(checks.values())
        npass += ok
        nfail += not ok
        certs.append({"rho": s.rho, "nu1_hat": s.nu1_hat, "nu2_hat": s.nu2_hat,
                      "constrained_nu_hat": s.constrained_nu_hat, "checks": checks, "pass": ok})
    w.csv("branch.csv", "rho,max_u,mass,nu1_hat,nu2_hat,newton_iters,nuc_hat", rows)
    w.jsonl("certificates.jsonl", certs)
    from .plots import plot_branch

    w.figure("branch.png", plot_branch, branch)
    ub = uniform_bound_check(branch, max(t8 - branch.rho_max, 1e-12))
    summary.update(
        n_samples=len(branch.samples), rho_max=branch.rho_max, truncated=branch.truncated,
        diagnostic=branch.diagnostic, passed=npass, failed=nfail,
        uniform_bound={"C": ub.C, "finite": ub.finite, "precondition_ok": ub.precondition_ok},
    )
    if branch.truncated:
        raise NonconvergenceError(branch.diagnostic)
    if nfail:
        raise CertificateFailure(f"{nfail} branch samples violate the predicted eigenvalue signs")


def cmd_spectrum(cfg, w, timer, summary):
    mesh, measure, weight = _setup(cfg)
    sol = _solve(cfg, mesh, weight, timer)
    summary.update(_solution_files(w, sol, measure))
    with timer("eigen"):
        system = assemble_linearized(mesh, weight, sol.w)
        dr = solve_dirichlet_eigs(system, max(cfg.run.k, 2))
        cr = solve_constrained_eigs(system, cfg.run.k)
        cert = positivity_certificate(sol)
    w.json("eigen_dirichlet.json", dr.to_dict())
    w.json("eigen_constrained.json", cr.to_dict())
    k = dr.vectors.shape[1]
    header = "node_index," + ",".join(f"phi_{j + 1}" for j in range(k))
    w.csv("eigenfunctions.csv", header, ([i, *dr.vectors[i]] for i in range(mesh.n_nodes)))
    kc = cr.vectors.shape[1]
    header = "node_index," + ",".join(f"phi_{j + 1}" for j in range(kc))
    w.csv("eigenfunctions_constrained.csv", header, ([i, *cr.vectors[i]] for i in range(mesh.n_nodes)))
    w.json("certificate.json", cert.to_dict())
    from .plots import plot_eigenfunctions

    w.figure("eigenfunctions.png", plot_eigenfunctions, mesh, dr.vectors, dr.nu_hat)
    summary.update(
        nu_hat=list(dr.nu_hat), constrained_nu_hat=list(cr.nu_hat),
        nodal_domains=list(dr.nodal_domains), passed=int(cert.passed), failed=int(not cert.passed),
    )
    if not cert.passed:
        raise CertificateFailure("eigenvalue sign certificate failed")


def cmd_bol_sweep(cfg, w, timer, summary):
    from .bol import harmonic_lift, level_set_sweep, monotonicity_checks, rearrangement_profile
    from .geometry import extract_level_set
    from .weights import alpha_of

    mesh, measure, weight = _setup(cfg)
    sol = _solve(cfg, mesh, weight, timer)
    summary.update(_solution_files(w, sol, measure))
    with timer("sweep"):
        sweep = level_set_sweep(sol, cfg.run.n_levels, cfg.run.bol_tol, True, cfg.jobs)
    w.jsonl("certificates.jsonl", (_cert_dict(c) for c in sweep.certificates))
    w.csv("bol_summary.csv", "level,component,mass,alpha,lhs,rhs,gap,pass", sweep.rows())
    with timer("profile"):
        wv = sol.w
        slc = extract_level_set(mesh, wv, float(wv.min()) - 1.0)[0]
        prof = rearrangement_profile(harmonic_lift(slc, wv), weight, alpha_of(slc, weight))
        mono = monotonicity_checks(prof)
    w.csv("profile.csv", "s,eta_star,F,P,J", zip(prof.mu, prof.eta_star, prof.F, prof.P, prof.J))
    from .plots import plot_profile

    w.figure("profile.png", plot_profile, prof)
    det = [c for c in sweep.certificates if not c.indeterminate]
    npass = sum(c.passed for c in det)
    summary.update(
        n_certificates=len(sweep.certificates), indeterminate=sweep.skipped,
        passed=npass, failed=len(det) - npass, min_gap=sweep.min_gap,
        huber_failed=sum(c.huber_pass is False for c in det),
        estmax_failed=sum(c.estmax_pass is False for c in det),
        monotonicity={k: getattr(mono, k) for k in mono.__dataclass_fields__},
    )
    if len(det) != npass:
        raise CertificateFailure(f"{len(det) - npass} Bol certificates failed")


def _cert_dict(c) -> dict:
    d = {k: getattr(c, k) for k in c.__dataclass_fields__}
    d["rel_gap"] = c.rel_gap
    return d


def cmd_radial(cfg, w, timer, summary):
    from .plots import plot_radial
    from .radial import critical_radius, disk_solution_exact, kstar, wronskian_residual

    r = cfg.run
    if not r.kstar and r.rho is None:
        raise ConfigError("radial needs --kstar and/or --rho")
    summary.update(alpha=r.alpha, critical_radius=critical_radius(r.alpha))
    if r.kstar:
        with timer("kstar"):
            ks = kstar(r.alpha, r.R0, r.n_grid)
            wr = wronskian_residual(ks)
        payload = {
            "alpha": ks.alpha, "R0": ks.R0, "n_grid": r.n_grid, "value": ks.kstar_value,
            "xi0": ks.xi0, "mean_constraint": ks.mean_constraint,
            "norm_constraint": ks.norm_constraint, "sign_changes": ks.sign_changes,
            "wronskian_residual": wr,
        }
        w.json("kstar.json", payload)
        w.csv("kstar_profile.csv", "r,value", zip(ks.r_grid, ks.psi))
        summary["kstar"] = ks.kstar_value
        summary["wronskian_residual"] = wr
    if r.rho is not None:
        prof = disk_solution_exact(r.rho, r.alpha)
        rr = np.linspace(0.0, 1.0, 401)
        vals = prof(rr)
        w.csv("profile.csv", "r,value", zip(rr, vals))
        w.figure("profile.png", plot_radial, rr, vals, ylabel="u")
        summary["max_u"] = float(vals.max())
    summary.update(passed=0, failed=0)


def cmd_uniqueness(cfg, w, timer, summary):
    mesh, measure, weight = _setup(cfg)
    with timer("multistart"):
        rep = multistart_uniqueness(mesh, weight, cfg.run.rho, cfg.run.n_starts, cfg.run.seed, cfg.run.tol, cfg.jobs)
    w.json("multistart.json", {
        "rho": rep.rho, "n_starts": rep.n_starts, "seed": cfg.run.seed,
        "converged": list(rep.converged), "failures": rep.failures,
        "n_clusters": rep.n_clusters, "cluster_tol": rep.cluster_tol,
        "max_distance": rep.max_distance, "distances": rep.distances.tolist(),
    })
    if rep.solutions:
        summary.update(_solution_files(w, rep.solutions[0], measure))
    ok = rep.n_clusters == 1
    summary.update(n_clusters=rep.n_clusters, failures=rep.failures, max_distance=rep.max_distance,
                   passed=int(ok), failed=int(not ok))
    if not rep.converged:
        raise NonconvergenceError("no multistart run converged")
    if not ok:
        raise CertificateFailure(f"{rep.n_clusters} distinct solution clusters")


COMMANDS = {
    "solve": cmd_solve,
    "branch": cmd_branch,
    "spectrum": cmd_spectrum,
    "bol-sweep": cmd_bol_sweep,
    "radial": cmd_radial,
    "uniqueness": cmd_uniqueness,
}


# ---------------------------------------------------------------------------
# driver


class _Timer:
    def __init__(self):
        self.times: dict[str, float] = {}

    def __call__(self, name):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.times[name] = timer.times.get(name, 0.0) + time.perf_counter() - self.t0

        return _Ctx()


def _classify(exc: BaseException) -> int:
    if isinstance(exc, CertificateFailure):
        return EXIT_CERTIFICATE
    if isinstance(exc, (NonconvergenceError, EigenSolverError, AssemblyError)):
        return EXIT_NONCONVERGENCE
    if isinstance(exc, (ConfigError, GeometryError, ValueError)):
        return EXIT_CONFIG
    return 1


def run(cfg: ExperimentConfig) -> int:
    """Execute ``cfg.command`` and write its artifacts to ``cfg.out``."""
    w = Writer(Path(cfg.out), cfg.hash())
    diag = validate(cfg)
    timer = _Timer()
    t4, t8 = thresholds(diag.alpha) if math.isfinite(diag.alpha) else (math.nan, math.nan)
    summary = {"command": cfg.command, "alpha": diag.alpha, "thresholds": {"four_pi": t4, "eight_pi": t8}}
    w.text("config.toml", f"# mflab {__version__}\n# config_hash {w.hash}\n" + cfg.dumps())
    code = EXIT_OK
    t0 = time.perf_counter()
    try:
        if not diag.ok:
            raise ConfigError("; ".join(diag.messages))
        COMMANDS[cfg.command](cfg, w, timer, summary)
    except Exception as exc:  # noqa: BLE001 - every error becomes a report
        code = _classify(exc)
        w.json("error.json", {
            "exit_code": code, "error_type": type(exc).__name__, "message": str(exc),
            "traceback": traceback.format_exc() if code == 1 else None,
        })
        summary["error"] = {"exit_code": code, "error_type": type(exc).__name__, "message": str(exc)}
    summary.setdefault("passed", 0)
    summary.setdefault("failed", 0)
    summary["exit_code"] = code
    w.json("summary.json", summary)
    timer.times["total"] = time.perf_counter() - t0
    w.json("timings.json", {"wall_clock_seconds": timer.times})
    return code


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mflab", description="Singular mean field experiments.")
    p.add_argument("--version", action="version", version=f"mflab {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    for name in (*COMMANDS, "validate"):
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="TOML experiment file")
        sp.add_argument("--out", help="output directory (overrides [output] dir)")
        sp.add_argument("--jobs", type=int)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--h-max", dest="h_max", type=float)
        sp.add_argument("--tol", type=float)
        if name in ("solve", "spectrum", "bol-sweep", "uniqueness", "radial", "validate"):
            sp.add_argument("--rho", type=float)
        if name in ("branch", "validate"):
            sp.add_argument("--rho-max", dest="rho_max", type=float)
            sp.add_argument("--n-steps", dest="n_steps", type=int)
        if name in ("bol-sweep", "validate"):
            sp.add_argument("--n-levels", dest="n_levels", type=int)
            sp.add_argument("--bol-tol", dest="bol_tol", type=float)
        if name in ("uniqueness", "validate"):
            sp.add_argument("--n-starts", dest="n_starts", type=int)
        if name in ("spectrum", "validate"):
            sp.add_argument("--k", type=int)
        if name in ("radial", "validate"):
            sp.add_argument("--kstar", action="store_const", const=True)
            sp.add_argument("--alpha", type=float)
            sp.add_argument("--R0", type=float)
            sp.add_argument("--n-grid", dest="n_grid", type=int)
    return p


def resolve(args: argparse.Namespace) -> ExperimentConfig:
    """Defaults < config file < command-line flags."""
    cfg = load(args.config) if args.config else ExperimentConfig()
    kw = {k: v for k, v in vars(args).items() if k not in ("config",)}
    if kw.get("command") == "validate":
        kw["command"] = None
    return override(cfg, **kw)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve(args)
    except ConfigError as exc:
        print(f"mflab: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    if args.command == "validate":
        d = validate(cfg, for_run=False)
        print(f"alpha(Omega) = {fmt(d.alpha)}")
        print(f"4*pi*(1-alpha) = {fmt(d.four_pi)}")
        print(f"8*pi*(1-alpha) = {fmt(d.eight_pi)}")
        for m in d.messages:
            print(f"error: {m}")
        print("config valid" if d.ok else "config invalid")
        return EXIT_OK if d.ok else EXIT_CONFIG
    code = run(cfg)
    print(f"mflab {cfg.command}: exit {code}, artifacts in {cfg.out}")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
