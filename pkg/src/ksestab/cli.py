"""Command-line front end: classify, synthesize, certify, simulate, sweep, report.

Every subcommand reads an optional TOML configuration file (``--config``)
whose keys are the :class:`RunConfig` field names (tables are flattened, so
``[plant] lam = 25`` and ``lam = 25`` are equivalent); command-line flags
override the file.  Outputs are written to ``--out``:

* ``summary.json``      pipeline report (deterministic, 17 significant digits)
* ``certificate.json``  certificate, re-verified when loaded
* ``trajectory.csv``    norms, Lyapunov value, inputs and outputs
* ``modes.csv``         modal dump of plant and observer states

Exit codes: 0 success, 2 configuration error, 3 not controllable or no
certificate, 4 simulation blow-up.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

from . import jsonio
from .certifier import (
    Certificate,
    InfeasibleReport,
    certificate_from_json,
    certificate_to_json,
    certify,
    min_feasible_N,
)
from .errors import BlowUp, ConfigError, IllConditionedPlacement, KsestabError, NotControllable
from .simulator import SimConfig, decay_rate_fit, sample_initial_condition, simulate
from .spectral import PlantParams, Scheme, SpectralPlant, mode_eval
from .synthesis import (
    LambdaKind,
    check_xi,
    classify_lambda,
    gains_from_arrays,
    select_scheme,
    select_xi,
    synthesize,
)

log = logging.getLogger("ksestab")

EXIT_OK, EXIT_CONFIG, EXIT_INFEASIBLE, EXIT_BLOWUP = 0, 2, 3, 4
SWEEP_AXES = ("N", "z0_scale", "lam", "delta")


@dataclass
class RunConfig:
    lam: float = 25.0
    mu: float = 1.0
    delta: float = 0.5
    scheme: str = "auto"
    xi: float | None = None
    targets_K: list | None = None
    targets_L: list | None = None
    K: list | None = None
    L: list | None = None
    N: int | None = None
    N_max: int = 20
    M: int | None = None
    T: float = 3.0
    dt: float = 1e-4
    z0_scale: float = 0.005
    z0_shape: str = "phi1"  # "phi1": z0 = s phi_1; "random": random modes with ||z0||_H2 = s
    fit_start: float = 0.2
    record_every: int = 10
    dealias: bool = True
    seed: int = 0
    out: str = "ksestab-out"
    simulate: bool = True
    modes_csv: bool = True

    def validate(self):
        if not (isinstance(self.lam, (int, float)) and self.lam > 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lambda must be a positive number, got {self.lam!r}")
        if not self.delta > 0:
            raise ConfigError(f"delta must be positive, got {self.delta!r}")
        if self.scheme not in ("auto", *(s.value for s in Scheme)):
            raise ConfigError(f"unknown scheme {self.scheme!r}")
        if self.xi is not None and self.scheme not in ("auto", "mimo"):
            raise ConfigError("xi is only meaningful for the mimo scheme")
        if (self.K is None) != (self.L is None):
            raise ConfigError("K and L must be given together")
        if self.N is not None and self.N < 2:
            raise ConfigError("N must be at least 2")
        if self.N_max < 2:
            raise ConfigError("N_max must be at least 2")
        if self.z0_shape not in ("phi1", "random"):
            raise ConfigError(f"unknown z0_shape {self.z0_shape!r}")
        if self.dt <= 0 or self.T < 0:
            raise ConfigError("need dt > 0 and T >= 0")
        return self


_FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_ALIASES = {"lambda": "lam", "N-max": "N_max", "n_max": "N_max", "modes": "M", "z0-scale": "z0_scale"}


def _flatten(d, out=None):
    out = {} if out is None else out
    for k, v in d.items():
        if isinstance(v, dict):
            _flatten(v, out)
        else:
            out[_ALIASES.get(k, k)] = v
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    """Build a RunConfig from an optional TOML file plus override values."""
    values = {}
    if path is not None:
        try:
            with open(path, "rb") as fh:
                values = _flatten(tomllib.load(fh))
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    unknown = sorted(set(values) - set(_FIELDS))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    try:
        cfg = RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg.validate()


# ---------------------------------------------------------------------------
# pipeline stages
# ---------------------------------------------------------------------------


def _class_dict(cls):
    return {
        "lambda": cls.lam,
        "kind": cls.kind.value,
        "zero_mode": cls.dirichlet_zero_index,
        "resonant_pairs": [list(p) for p in cls.resonant_pairs],
    }


def resolve_plant(cfg: RunConfig):
    """Classify lambda and build the plant; returns ``(class, plant)``."""
    cls = classify_lambda(cfg.lam)
    scheme = select_scheme(cls) if cfg.scheme == "auto" else Scheme(cfg.scheme)
    xi = None
    if scheme is Scheme.MIMO:
        if cfg.xi is None:
            xi = select_xi(cls)[0]
        else:
            xi = float(cfg.xi)
            if cls.kind is LambdaKind.LAMBDA2 and check_xi(cls, xi) <= 0:
                raise NotControllable(f"xi={xi} makes a resonant pair unobservable")
    try:
        params = PlantParams(cfg.lam, cfg.mu, scheme, xi)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return cls, SpectralPlant(params, cfg.delta)


def resolve_gains(cfg: RunConfig, plant: SpectralPlant):
    if cfg.K is not None:
        try:
            return gains_from_arrays(plant, cfg.K, cfg.L)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
    return synthesize(plant, cfg.targets_K, cfg.targets_L, seed=cfg.seed)


def _gains_dict(g):
    return {"K": g.K, "L": g.L,
            "poles_K": [[t.real, t.imag] for t in g.target_poles_K],
            "poles_L": [[t.real, t.imag] for t in g.target_poles_L]}


def initial_condition(cfg: RunConfig, plant: SpectralPlant, M: int):
    if cfg.z0_shape == "random":
        return sample_initial_condition(plant.params, M, cfg.z0_scale, cfg.seed)
    z0 = np.zeros(M)
    z0[0] = cfg.z0_scale
    return z0


def _write_trajectory(out: Path, traj, modes_csv):
    traj.to_csv(out / "trajectory.csv")
    if modes_csv:
        traj.modes_to_csv(out / "modes.csv")


def _fit(traj, start):
    """Decay rate of the H2 norm after ``start``, ignoring underflowed samples."""
    t, h2 = traj.times, traj.h2
    keep = (t >= start) & (h2 > 1e-250)
    if np.count_nonzero(keep) < 10:
        return None
    return decay_rate_fit(t[keep], h2[keep], t_start=start)


def run_pipeline(cfg: RunConfig, stages=("certify", "simulate"), write=True):
    """classify -> synthesize -> certify -> simulate; returns ``(exit_code, report)``."""
    out = Path(cfg.out)
    if write:
        out.mkdir(parents=True, exist_ok=True)
    report = {"config": dataclasses.asdict(cfg), "status": "ok"}

    def finish(code, status=None, reason=None):
        if status:
            report["status"] = status
        if reason:
            report["reason"] = reason
        report["exit_code"] = code
        if write:
            (out / "summary.json").write_text(jsonio.dumps(report))
        return code, report

    try:
        cls, plant = resolve_plant(cfg)
    except ConfigError as exc:
        return finish(EXIT_CONFIG, "config_error", str(exc))
    except NotControllable as exc:
        return finish(EXIT_INFEASIBLE, "not_controllable", str(exc))
    report["lambda_class"] = _class_dict(cls)
    report["scheme"] = plant.params.scheme.value
    report["theorem"] = plant.params.scheme.theorem
    report["xi"] = plant.params.xi
    report["N0"] = plant.n0

    try:
        gains = resolve_gains(cfg, plant)
    except ConfigError as exc:
        return finish(EXIT_CONFIG, "config_error", str(exc))
    except (NotControllable, IllConditionedPlacement) as exc:
        return finish(EXIT_INFEASIBLE, "not_controllable", str(exc))
    report["gains"] = _gains_dict(gains)
    if "certify" not in stages:
        return finish(EXIT_OK)

    if cfg.N is not None:
        if cfg.N <= plant.n0:
            return finish(EXIT_CONFIG, "config_error",
                          f"N={cfg.N} must exceed N0={plant.n0}")
        res = certify(plant, gains, cfg.N)
        cert = res if isinstance(res, Certificate) else None
    else:
        if cfg.N_max <= plant.n0:
            return finish(EXIT_CONFIG, "config_error",
                          f"N_max={cfg.N_max} must exceed N0={plant.n0}")
        _, cert = min_feasible_N(plant, gains, cfg.N_max)
        res = cert
    if cert is None:
        if isinstance(res, InfeasibleReport) and res.best_margins is not None:
            report["best_margins"] = res.best_margins._asdict()
            report["best_alpha"] = res.best_alpha
        where = f"N={cfg.N}" if cfg.N is not None else f"N <= {cfg.N_max}"
        return finish(EXIT_INFEASIBLE, "infeasible", f"no certificate found for {where}")
    report["N"] = cert.N
    report["certificate"] = {k: v for k, v in cert.to_dict().items() if k not in ("P", "K", "L", "plant")}
    if write:
        (out / "certificate.json").write_text(certificate_to_json(cert))

    if not (cfg.simulate and "simulate" in stages):
        return finish(EXIT_OK)
    M = cfg.M if cfg.M is not None else max(32, 2 * cert.N)
    try:
        sim = SimConfig(M=M, T=cfg.T, dt=cfg.dt, dealias=cfg.dealias, seed=cfg.seed,
                        record_every=cfg.record_every)
    except ValueError as exc:
        return finish(EXIT_CONFIG, "config_error", str(exc))
    if M < 2 * cert.N:
        return finish(EXIT_CONFIG, "config_error", f"M={M} must be at least 2N={2 * cert.N}")
    z0 = initial_condition(cfg, plant, M)
    try:
        traj = simulate(plant, gains, z0, sim, certificate=cert)
    except BlowUp as exc:
        report["blowup_time"] = exc.time
        if write and exc.trajectory is not None:
            _write_trajectory(out, exc.trajectory, cfg.modes_csv)
        return finish(EXIT_BLOWUP, "blowup", str(exc))
    if write:
        _write_trajectory(out, traj, cfg.modes_csv)
    report["simulation"] = {
        "M": M,
        "h2_initial": traj.h2[0],
        "h2_final": traj.h2[-1],
        "decay_rate_h2": _fit(traj, cfg.fit_start),
        "survived": True,
    }
    return finish(EXIT_OK)


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def _sweep_cell(args):
    cfg, axis, value, index, stages = args
    cell = dataclasses.replace(cfg, **{axis: value}, out=str(Path(cfg.out) / f"cell_{index:03d}"))
    try:
        cell.validate()
    except ConfigError as exc:
        return index, value, EXIT_CONFIG, {"reason": str(exc)}
    code, rep = run_pipeline(cell, stages)
    return index, value, code, rep


def sweep(cfg: RunConfig, axis: str, values, jobs: int = 1, stages=("certify", "simulate")):
    """One pipeline run per value; writes ``sweep.csv`` and returns its rows."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep axis must be one of {SWEEP_AXES}, got {axis!r}")
    cast = int if axis == "N" else float
    values = [cast(v) for v in values]
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    tasks = [(cfg, axis, v, i, stages) for i, v in enumerate(values)]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_cell, tasks))
    else:
        results = [_sweep_cell(t) for t in tasks]
    results.sort(key=lambda r: r[0])
    header = ["value", "exit_code", "feasible", "N", "theta1_max_eig", "theta2", "theta3",
              "decay_rate_h2", "survived"]
    rows = []
    for _, value, code, rep in results:
        m = rep.get("certificate", {}).get("margins", {})
        sim = rep.get("simulation", {})
        rows.append({
            "value": value,
            "exit_code": code,
            "feasible": "certificate" in rep,
            "N": rep.get("N"),
            "theta1_max_eig": m.get("theta1_max_eig"),
            "theta2": m.get("theta2"),
            "theta3": m.get("theta3"),
            "decay_rate_h2": sim.get("decay_rate_h2"),
            "survived": None if code in (EXIT_CONFIG, EXIT_INFEASIBLE) or "certificate" not in rep
            else code != EXIT_BLOWUP,
        })
    with open(out / "sweep.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=header)
        wr.writeheader()
        for r in rows:
            wr.writerow({k: ("" if v is None else (f"{v:.17g}" if isinstance(v, float) else v))
                         for k, v in r.items()})
    return rows


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _floats(text):
    try:
        return [float(t) for t in text.split(",") if t.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _matrix(text):
    """'a,b;c,d' -> [[a, b], [c, d]]."""
    try:
        return [[float(t) for t in row.split(",")] for row in text.split(";")]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected a matrix like '1,2;3,4', got {text!r}") from exc


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("plant and design")
    g.add_argument("--config", help="TOML configuration file")
    g.add_argument("--lambda", dest="lam", type=float)
    g.add_argument("--mu", type=float)
    g.add_argument("--delta", type=float)
    g.add_argument("--scheme", choices=["auto", "dirichlet", "secondderiv", "mimo"])
    g.add_argument("--xi", type=float)
    g.add_argument("--targets", dest="targets_K", type=_floats, help="state-feedback poles, e.g. -6")
    g.add_argument("--observer-targets", dest="targets_L", type=_floats)
    g.add_argument("--K", type=_matrix, help="explicit feedback gain, rows separated by ';'")
    g.add_argument("--L", type=_matrix, help="explicit observer gain, rows separated by ';'")
    g.add_argument("--N", type=int, help="certify at this observer order")
    g.add_argument("--N-max", dest="N_max", type=int, help="search the smallest N up to this bound")
    s = common.add_argument_group("simulation")
    s.add_argument("--modes", dest="M", type=int, help="plant truncation M")
    s.add_argument("--T", type=float)
    s.add_argument("--dt", type=float)
    s.add_argument("--z0-scale", dest="z0_scale", type=float)
    s.add_argument("--z0-shape", dest="z0_shape", choices=["phi1", "random"])
    s.add_argument("--record-every", dest="record_every", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", help="output directory")

    p = _Parser(prog="ksestab", description=__doc__.split("\n")[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("classify", parents=[common], help="classify lambda and pick a scheme")
    sub.add_parser("synthesize", parents=[common], help="compute K and L")
    sub.add_parser("certify", parents=[common], help="search a stability certificate")
    sub.add_parser("simulate", parents=[common], help="full pipeline including simulation")
    sw = sub.add_parser("sweep", parents=[common], help="run the pipeline over a parameter axis")
    sw.add_argument("--axis", required=True, choices=["N", "z0_scale", "lambda", "delta"])
    sw.add_argument("--values", default="", help="comma-separated values")
    sw.add_argument("--jobs", type=int, default=1)
    sw.add_argument("--no-simulate", action="store_true")
    rp = sub.add_parser("report", help="re-verify and summarize an output directory")
    rp.add_argument("path", help="output directory or certificate.json")
    return p


_OVERRIDE_KEYS = [f for f in _FIELDS if f not in ("simulate", "modes_csv")]


def _print(obj):
    sys.stdout.write(jsonio.dumps(obj))


def _report(path):
    p = Path(path)
    cert_path = p / "certificate.json" if p.is_dir() else p
    out = {}
    if p.is_dir() and (p / "summary.json").exists():
        import json

        summary = json.loads((p / "summary.json").read_text())
        out["status"] = summary.get("status")
        out["exit_code"] = summary.get("exit_code")
        out["simulation"] = summary.get("simulation")
    if cert_path.exists():
        try:
            cert, _, _ = certificate_from_json(cert_path.read_text())
        except (ValueError, KeyError, KsestabError) as exc:
            out["certificate"] = {"verified": False, "reason": str(exc)}
            _print(out)
            return EXIT_INFEASIBLE
        out["certificate"] = {"verified": True, "theorem": cert.theorem, "N": cert.N,
                              "alpha": cert.alpha, "margins": cert.margins._asdict()}
    elif not out:
        sys.stderr.write(f"ksestab: nothing to report at {path}\n")
        return EXIT_CONFIG
    _print(out)
    return EXIT_OK


def main(argv=None):
    level = os.environ.get("KSESTAB_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return _report(args.path)
    overrides = {k: getattr(args, k, None) for k in _OVERRIDE_KEYS}
    try:
        cfg = load_config(args.config, overrides)
    except ConfigError as exc:
        sys.stderr.write(f"ksestab: {exc}\n")
        return EXIT_CONFIG

    if args.command == "classify":
        try:
            cls, plant = resolve_plant(cfg)
        except ConfigError as exc:
            sys.stderr.write(f"ksestab: {exc}\n")
            return EXIT_CONFIG
        except NotControllable as exc:
            sys.stderr.write(f"ksestab: {exc}\n")
            return EXIT_INFEASIBLE
        _print({**_class_dict(cls), "scheme": plant.params.scheme.value,
                "theorem": plant.params.scheme.theorem, "xi": plant.params.xi, "N0": plant.n0})
        return EXIT_OK
    if args.command == "sweep":
        values = _floats(args.values) if args.values else []
        axis = "lam" if args.axis == "lambda" else args.axis
        stages = ("certify",) if args.no_simulate else ("certify", "simulate")
        try:
            rows = sweep(cfg, axis, values, jobs=args.jobs, stages=stages)
        except ConfigError as exc:
            sys.stderr.write(f"ksestab: {exc}\n")
            return EXIT_CONFIG
        _print({"axis": args.axis, "rows": rows})
        return EXIT_OK

    stages = {"synthesize": (), "certify": ("certify",), "simulate": ("certify", "simulate")}[args.command]
    code, report = run_pipeline(cfg, stages)
    _print(report)
    if code != EXIT_OK:
        sys.stderr.write(f"ksestab: {report.get('status')}: {report.get('reason', '')}\n")
    return code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
