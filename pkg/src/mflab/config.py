"""Experiment configuration: a TOML file with typed sections.

Precedence, highest first: command-line flags, the config file, the
defaults below.  Example::

    command = "branch"

    [domain]
    kind = "simple-polygon"
    vertices = [[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]]

    [[atom]]
    x = 0.35
    y = 0.4
    alpha = -0.3

    [mesh]
    h_max = 0.04

    [run]
    rho_max = 10.0
    n_steps = 20

    [output]
    dir = "out"
"""

from __future__ import annotations

import hashlib
import json
import math
import sys
from dataclasses import asdict, dataclass, field, fields, replace

import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from .geometry import GeometryError, PlanarDomain
from .weights import Atom, AtomicMeasure, HypothesisError, thresholds

COMMANDS = ("solve", "branch", "spectrum", "bol-sweep", "radial", "uniqueness")


class ConfigError(ValueError):
    """Malformed or inconsistent experiment configuration."""


@dataclass(frozen=True)
class RunParams:
    rho: float | None = None
    rho_max: float | None = None
    n_steps: int = 20
    n_levels: int = 64
    n_starts: int = 8
    seed: int = 0
    tol: float = 1e-10
    bol_tol: float = 5e-3
    k: int = 2
    alpha: float = 0.0
    R0: float = math.inf
    n_grid: int = 2000
    kstar: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    command: str = "solve"
    domain_kind: str = "unit-disk"
    vertices: tuple = ()
    atoms: tuple = ()  # (x, y, alpha) triples
    h_max: float = 0.04
    grading: tuple = ()  # extra (x, y, beta) grading centers
    run: RunParams = field(default_factory=RunParams)
    out: str = "out"
    jobs: int = 1

    # -- derived objects --------------------------------------------------

    def domain(self) -> PlanarDomain:
        if self.domain_kind == "unit-disk":
            return PlanarDomain.unit_disk()
        return PlanarDomain.polygon(self.vertices)

    def measure(self) -> AtomicMeasure:
        return AtomicMeasure(tuple(Atom(x, y, a) for x, y, a in self.atoms))

    # -- serialization ----------------------------------------------------

    def to_dict(self) -> dict:
        run = {k: v for k, v in asdict(self.run).items() if v is not None}
        if math.isinf(run["R0"]):
            run["R0"] = "inf"
        d = {
            "command": self.command,
            "jobs": self.jobs,
            "domain": {"kind": self.domain_kind},
            "mesh": {"h_max": self.h_max},
            "run": run,
            "output": {"dir": self.out},
        }
        if self.vertices:
            d["domain"]["vertices"] = [list(v) for v in self.vertices]
        if self.atoms:
            d["atom"] = [{"x": x, "y": y, "alpha": a} for x, y, a in self.atoms]
        if self.grading:
            d["mesh"]["grading"] = [list(g) for g in self.grading]
        return d

    def dumps(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def hash(self) -> str:
        """SHA-256 of the canonical JSON form, excluding the output directory."""
        d = self.to_dict()
        d.pop("output")
        d.pop("jobs")
        text = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode()).hexdigest()[:16]


def _float(v, name):
    if isinstance(v, str) and v.lower() in ("inf", "+inf", "infinity"):
        return math.inf
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise ConfigError(f"{name} must be a number, got {v!r}")
    return float(v)


def _int(v, name):
    if isinstance(v, bool) or not isinstance(v, int):
        raise ConfigError(f"{name} must be an integer, got {v!r}")
    return int(v)


_RUN_TYPES = {f.name: f.type for f in fields(RunParams)}


def _run_params(d: dict) -> RunParams:
    kw = {}
    for key, v in d.items():
        if key not in _RUN_TYPES:
            raise ConfigError(f"unknown run parameter {key!r}")
        kind = _RUN_TYPES[key]
        if kind == "bool":
            if not isinstance(v, bool):
                raise ConfigError(f"{key} must be a boolean")
            kw[key] = v
        elif kind == "int":
            kw[key] = _int(v, key)
        else:
            kw[key] = _float(v, key)
    return RunParams(**kw)


def from_dict(d: dict) -> ExperimentConfig:
    known = {"command", "jobs", "domain", "mesh", "run", "output", "atom"}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown config keys: {sorted(extra)}")
    dom = d.get("domain", {})
    kind = dom.get("kind", "unit-disk")
    if kind not in ("unit-disk", "simple-polygon"):
        raise ConfigError(f"domain kind must be 'unit-disk' or 'simple-polygon', got {kind!r}")
    verts = tuple(tuple(_float(c, "vertex") for c in v) for v in dom.get("vertices", ()))
    if kind == "simple-polygon" and len(verts) < 3:
        raise ConfigError("a polygon needs at least three vertices")
    atoms = []
    for a in d.get("atom", ()):
        if set(a) != {"x", "y", "alpha"}:
            raise ConfigError("each [[atom]] needs exactly x, y and alpha")
        atoms.append((_float(a["x"], "x"), _float(a["y"], "y"), _float(a["alpha"], "alpha")))
    mesh = d.get("mesh", {})
    grading = tuple(tuple(_float(c, "grading") for c in g) for g in mesh.get("grading", ()))
    command = d.get("command", "solve")
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    return ExperimentConfig(
        command=command,
        domain_kind=kind,
        vertices=verts,
        atoms=tuple(atoms),
        h_max=_float(mesh.get("h_max", 0.04), "h_max"),
        grading=grading,
        run=_run_params(d.get("run", {})),
        out=str(d.get("output", {}).get("dir", "out")),
        jobs=_int(d.get("jobs", 1), "jobs"),
    )


def loads(text: str) -> ExperimentConfig:
    try:
        return from_dict(tomllib.loads(text))
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"invalid TOML: {exc}") from exc


def load(path) -> ExperimentConfig:
    try:
        with open(path, "rb") as fh:
            text = fh.read().decode()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return loads(text)


def override(cfg: ExperimentConfig, **kw) -> ExperimentConfig:
    """Apply command-line values that are not None."""
    top = {k: v for k, v in kw.items() if v is not None and k in ("command", "h_max", "out", "jobs")}
    run = {k: v for k, v in kw.items() if v is not None and k in _RUN_TYPES}
    return replace(cfg, run=replace(cfg.run, **run), **top)


@dataclass(frozen=True)
class Diagnostics:
    ok: bool
    alpha: float
    four_pi: float
    eight_pi: float
    messages: tuple


def validate(cfg: ExperimentConfig, for_run: bool = True) -> Diagnostics:
    """Dry-run checks; never raises.

    With ``for_run`` false, run parameters are checked only when present.
    """
    msgs = []
    ok = True
    alpha = math.nan
    t4 = t8 = math.nan
    try:
        domain = cfg.domain()
    except (GeometryError, ValueError) as exc:
        return Diagnostics(False, alpha, t4, t8, (f"domain: {exc}",))
    alpha = float(sum(-a for _, _, a in cfg.atoms if a < 0))
    t4, t8 = thresholds(alpha)
    try:
        cfg.measure().check_domain(domain)
    except (HypothesisError, ValueError) as exc:
        ok = False
        msgs.append(f"atoms: {exc}")
    if not (0 < cfg.h_max <= 0.5):
        ok = False
        msgs.append(f"mesh: h_max={cfg.h_max} outside (0, 0.5]")
    elif not domain.is_disk:
        v = domain.vertices
        shortest = float(min(math.dist(v[i], v[(i + 1) % len(v)]) for i in range(len(v))))
        if cfg.h_max > 0.5 * shortest:
            ok = False
            msgs.append(f"mesh: h_max={cfg.h_max} exceeds half the shortest edge {shortest:.6g}")
    r = cfg.run
    need_rho = for_run and cfg.command in ("solve", "spectrum", "bol-sweep", "uniqueness")
    if ok and (need_rho or r.rho is not None) and cfg.command != "radial":
        if r.rho is None or r.rho <= 0:
            ok = False
            msgs.append(f"run: {cfg.command} needs rho > 0")
        elif r.rho >= t8:
            ok = False
            msgs.append(f"run: rho={r.rho:.17g} must be below 8*pi*(1-alpha)={t8:.17g}")
    if ok and cfg.command == "branch" and for_run and (r.rho_max is None or r.rho_max <= 0):
        ok = False
        msgs.append("run: branch needs rho_max > 0")
    if cfg.command == "radial" and not (r.alpha > -1 and r.alpha < 1):
        ok = False
        msgs.append(f"run: radial alpha={r.alpha} must lie in (-1, 1)")
    if r.n_steps < 2 or r.n_levels < 1 or r.n_starts < 2 or r.k < 1:
        ok = False
        msgs.append("run: n_steps >= 2, n_levels >= 1, n_starts >= 2 and k >= 1 are required")
    if cfg.jobs < 1:
        ok = False
        msgs.append("jobs must be at least 1")
    return Diagnostics(ok, alpha, t4, t8, tuple(msgs))
