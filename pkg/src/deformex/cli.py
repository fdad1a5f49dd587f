"""Command-line front end.

Every command reads one YAML experiment configuration (all keys optional,
defaults shown by ``--print-config``), validates it completely, then runs.
Outputs are CSV files whose first line is a ``#`` comment carrying the
configuration hash, the seed and the package version, so identical
configurations produce byte-identical files.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy
import yaml

from . import __version__
from .covariance import CovarianceError, CovarianceModel
from .deform import DeformationError, Rect, from_config
from .excursion import euler_characteristic_2d, excursion_mask
from .field_sim import GridSpec, SimulationError, save_gfd, simulate_deformed
from .identify import (
    IdentificationError,
    MeanECTable,
    analytic_partition_table,
    analytic_table,
    chi_isotropy_test,
    identify_linear,
    identify_tensorial,
    montecarlo_table,
    partition_domains,
    recover_abc_field,
)
from .quadrature import QuadratureError
from .spiral_est import SpiralEstimationError, regress_detjac, regress_norm, run_estimator

log = logging.getLogger("deformex")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_IO = 0, 2, 3, 4
COMMANDS = ("simulate", "table", "identify", "estimate-spiral", "verify-isotropy")

DEFAULTS: dict = {
    "model": {"kind": "gaussian_exp"},
    "deformation": {"kind": "identity"},
    "grid": {"lower": [0.0, 0.0], "upper": [10.0, 10.0], "spacing": 0.2, "source_spacing": 0.25},
    "levels": [1.0],
    "domains": [["rect", 1.0, 1.0]],
    "partition": None,
    "reps": 0,
    "seed": 0,
    "out": "out",
    "threads": 1,
    "table": {"mode": "analytic", "spacing": 0.1, "path": None},
    "identify": {"method": "linear", "u": 1.0, "s": 1.0, "t": 1.0, "signs": None},
    "spiral": {"point": [2.0, 0.0], "schedule": [8, 12, 16, 24, 32], "reps": 200, "u": 1.0,
               "estimator": "Z"},
    "isotropy": {"rect": {"s": 1.0, "t": 1.0, "translation": [0.5, 0.5]},
                 "angles": [0.5, 1.0, 1.5, 2.0, 2.5, 3.0], "u": 1.0, "mode": "both"},
}


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


# ---------------------------------------------------------------------------
# configuration


def _merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for key, value in override.items():
        if key not in out:
            raise ConfigError(f"unknown configuration key {key!r}")
        if isinstance(out[key], dict) and isinstance(value, dict) and key != "deformation" and key != "model":
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides: dict | None = None) -> dict:
    """Defaults, then the YAML file at ``path``, then ``overrides`` (non-``None`` values)."""
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        try:
            data = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: invalid YAML: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be a mapping")
        cfg = _merge(cfg, data)
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        node = cfg
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node[p]
        node[leaf] = value
    return cfg


# settings that do not change any computed number
_UNHASHED = ("out", "threads")


def config_hash(cfg: dict) -> str:
    """Short digest of the settings that determine the results."""
    canon = json.dumps({k: v for k, v in cfg.items() if k not in _UNHASHED}, sort_keys=True, separators=(",", ":"), default=str)
    return hashlib.sha256(canon.encode()).hexdigest()[:16]


def _partition(cfg: dict):
    part = cfg["partition"]
    if part is None:
        return None
    if isinstance(part, dict):
        try:
            start, stop, step = float(part["start"]), float(part["stop"]), float(part["step"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError("partition mapping needs numeric start, stop and step") from exc
        if not step > 0 or stop <= start:
            raise ConfigError(f"partition needs step > 0 and stop > start, got {part}")
        n = int(round((stop - start) / step))
        return start + step * np.arange(n + 1)
    return np.asarray(part, dtype=float)


@dataclass
class Experiment:
    """A validated configuration with its built objects."""

    cfg: dict
    model: CovarianceModel
    theta: object
    levels: list[float]
    domains: list[tuple[str, float, float]]
    sigma: np.ndarray | None
    out: Path
    hash: str

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    def comment(self) -> str:
        return f"config_hash={self.hash} seed={self.seed} deformex={__version__}"


def validate(cfg: dict, command: str) -> Experiment:
    """Check every precondition of ``command`` before any computation."""
    try:
        model_cfg = dict(cfg["model"])
        model = CovarianceModel.from_name(str(model_cfg.pop("kind")), **model_cfg)
        theta = from_config(cfg["deformation"])
    except (CovarianceError, DeformationError, KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid model or deformation: {exc}") from exc
    try:
        levels = [float(u) for u in cfg["levels"]]
        domains = [(str(k), float(s), float(t)) for k, s, t in cfg["domains"] or []]
        seed = int(cfg["seed"])
        reps = int(cfg["reps"])
        threads = int(cfg["threads"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"malformed levels, domains, seed, reps or threads: {exc}") from exc
    if seed < 0 or seed >= 2**64:
        raise ConfigError(f"seed must be an unsigned 64-bit integer, got {seed}")
    if reps < 0:
        raise ConfigError(f"reps must be non-negative, got {reps}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    for kind, s, t in domains:
        if kind not in ("hseg", "vseg", "rect"):
            raise ConfigError(f"unknown domain kind {kind!r}")
        if kind == "rect" and (s == 0 or t == 0):
            raise ConfigError(f"degenerate rectangle ({s}, {t})")
    sigma = _partition(cfg)
    if sigma is not None:
        try:
            partition_domains(sigma)
        except IdentificationError as exc:
            raise ConfigError(f"partition: {exc}") from exc

    if command == "simulate":
        g = cfg["grid"]
        if not float(g["spacing"]) > 0 or any(hi <= lo for lo, hi in zip(g["lower"], g["upper"])):
            raise ConfigError(f"grid needs positive spacing and upper > lower, got {g}")
    if command == "table" and cfg["table"]["mode"] not in ("analytic", "montecarlo"):
        raise ConfigError(f"table mode must be analytic or montecarlo, got {cfg['table']['mode']!r}")
    if command == "table" and cfg["table"]["mode"] == "montecarlo" and reps < 2:
        raise ConfigError("montecarlo tables need reps >= 2")
    if command == "identify":
        ident = cfg["identify"]
        method = ident["method"]
        if method not in ("linear", "general", "tensorial"):
            raise ConfigError(f"identify method must be linear, general or tensorial, got {method!r}")
        if float(ident["u"]) == 0 and method == "general":
            raise ConfigError("the general method needs u != 0")
        if method in ("general", "tensorial") and sigma is None:
            raise ConfigError(f"method {method!r} needs a partition")
        if ident["signs"] is not None and method == "tensorial":
            signs = str(ident["signs"]).replace(",", "").strip()
            if len(signs) != 2 or any(ch not in "+-" for ch in signs):
                raise ConfigError(f"signs must look like '+-', got {ident['signs']!r}")
    if command == "estimate-spiral":
        sp = cfg["spiral"]
        if float(sp["u"]) == 0 and sp["estimator"] == "Z":
            raise ConfigError("the Z estimator needs u != 0 (the 2-D density vanishes at 0)")
        if int(sp["reps"]) < 2:
            raise ConfigError("spiral estimation needs reps >= 2")
        if sp["estimator"] not in ("Z", "Y"):
            raise ConfigError(f"spiral estimator must be Z or Y, got {sp['estimator']!r}")
        if len(set(int(n) for n in sp["schedule"])) < 4:
            raise ConfigError("the regression needs at least 4 distinct N values")
    if command == "verify-isotropy" and not cfg["isotropy"]["angles"]:
        raise ConfigError("verify-isotropy needs at least one angle")

    out = Path(cfg["out"])
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ConfigError(f"output directory {out} is not writable: {exc}") from exc
    if not os.access(out, os.W_OK):
        raise ConfigError(f"output directory {out} is not writable")
    return Experiment(cfg, model, theta, levels, domains, sigma, out, config_hash(cfg))


# ---------------------------------------------------------------------------
# output helpers


def _write_csv(path: Path, comment: str, header, rows) -> None:
    buf = io.StringIO()
    buf.write(f"# {comment}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    path.write_text(buf.getvalue())


def _report(exp: Experiment, name: str, lines: list[str]) -> str:
    head = [
        f"deformex {__version__} (numpy {np.__version__}, scipy {scipy.__version__})",
        f"config_hash: {exp.hash}",
        f"seed: {exp.seed}",
    ]
    text = "\n".join(head + [""] + lines) + "\n"
    (exp.out / name).write_text(text)
    return text


def _fmt_complex(z: complex) -> str:
    return f"{z.real:.10g} {'+' if z.imag >= 0 else '-'} {abs(z.imag):.10g}i"


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(exp: Experiment) -> str:
    """Simulate ``X o theta`` on the configured grid, one ``.gfd`` per replication."""
    g = exp.cfg["grid"]
    spec = GridSpec.spanning(g["lower"], g["upper"], float(g["spacing"]))
    reps = int(exp.cfg["reps"])
    rows = []
    for i in range(reps):
        seed = exp.seed ^ i
        field = simulate_deformed(spec, exp.theta, exp.model, seed, float(g["source_spacing"]))
        save_gfd(field, exp.out / f"field_{i:04d}.gfd", version=__version__)
        v = field.values
        chis = [euler_characteristic_2d(excursion_mask(v, u)).chi for u in exp.levels]
        rows.append([i, seed, float(v.mean()), float(v.var()), float(v.min()), float(v.max()), *chis])
    header = ["rep", "seed", "mean", "var", "min", "max", *[f"chi_u={u!r}" for u in exp.levels]]
    _write_csv(exp.out / "simulate_summary.csv", exp.comment(), header, rows)
    return f"simulated {reps} field(s) on a {spec.shape[0]}x{spec.shape[1]} grid into {exp.out}\n"


def cmd_table(exp: Experiment) -> str:
    """Build a mean modified Euler characteristic table (analytic or Monte Carlo)."""
    mode = exp.cfg["table"]["mode"]
    if mode == "analytic":
        if exp.sigma is not None:
            table = analytic_partition_table(exp.theta, exp.sigma, exp.levels)
        else:
            table = analytic_table(exp.theta, exp.domains, exp.levels)
    else:
        domains = partition_domains(exp.sigma) if exp.sigma is not None else exp.domains
        table = montecarlo_table(exp.theta, domains, exp.levels, int(exp.cfg["reps"]), exp.seed,
                                 model=exp.model, spacing=float(exp.cfg["table"]["spacing"]),
                                 source_spacing=float(exp.cfg["grid"]["source_spacing"]))
    path = exp.out / "table.csv"
    table.to_csv(path, comment=exp.comment())
    return f"wrote {len(table)} {mode} entries to {path}\n"


def _load_table(exp: Experiment) -> MeanECTable:
    path = exp.cfg["table"]["path"] or exp.out / "table.csv"
    try:
        return MeanECTable.from_csv(path)
    except FileNotFoundError as exc:
        raise OSError(f"table file {path} not found") from exc


def cmd_identify(exp: Experiment) -> str:
    """Run one identification method on a table and write a report."""
    ident = exp.cfg["identify"]
    u = float(ident["u"])
    table = _load_table(exp)
    method = ident["method"]
    lines = [f"method: {method}", f"level u: {u!r}"]
    if method == "linear":
        res = identify_linear(table, u, float(ident["s"]), float(ident["t"]))
        m1, m2 = res.matrices.representatives
        mu = res.dilatation
        lines += [
            f"a = {res.a:.12g} +- {res.errors[0]:.3g}",
            f"b = {res.b:.12g} +- {res.errors[1]:.3g}",
            f"c = {res.c:.12g} +- {res.errors[2]:.3g}",
            f"representative 1: {np.array2string(m1, precision=10)}",
            f"representative 2: {np.array2string(m2, precision=10)}",
            f"dilatation mu+ = {_fmt_complex(mu.plus)}",
            f"dilatation mu- = {_fmt_complex(mu.minus)}",
            f"|mu| = {mu.modulus:.12g}",
            f"column angles: {res.angles[0]:.12g}, {res.angles[1]:.12g}",
        ]
        _write_csv(exp.out / "identify_linear.csv", exp.comment(),
                   ["a", "b", "c", "err_a", "err_b", "err_c", "mu_re", "mu_im_plus", "mu_abs"],
                   [[res.a, res.b, res.c, *res.errors, mu.plus.real, mu.plus.imag, mu.modulus]])
    elif method == "general":
        field = recover_abc_field(table, u, exp.sigma)
        field.to_csv(exp.out / "abc_field.csv", comment=exp.comment())
        lines.append(f"recovered a, b, c on {field.s.size}x{field.t.size} nodes -> abc_field.csv")
        if np.any(field.flagged):
            lines.append(f"warning: {int(np.sum(field.flagged))} node(s) flagged as unreliable")
    else:
        signs = ident["signs"]
        if signs is not None:
            signs = str(signs).replace(",", "").strip()
        res = identify_tensorial(table, u, exp.sigma, signs)
        rows = []
        for i, s in enumerate(res.s):
            t1 = res.theta1[i] if res.theta1 is not None else float("nan")
            t2 = res.theta2[i] if res.theta2 is not None else float("nan")
            rows.append([s, res.d1[i], res.d2[i], res.err1[i], res.err2[i], t1, t2])
        _write_csv(exp.out / "tensorial.csv", exp.comment(),
                   ["s", "d_theta1", "d_theta2", "err1", "err2", "theta1", "theta2"], rows)
        lines.append(f"recovered tensorial components on {res.s.size} nodes -> tensorial.csv")
        if res.warning:
            lines.append(f"warning: {res.warning}")
    return _report(exp, "identify_report.txt", lines)


def cmd_estimate_spiral(exp: Experiment) -> str:
    """Replicated ``Z_N`` or ``Y_N`` runs and the regression at the configured point."""
    sp = exp.cfg["spiral"]
    r0, phi0 = (float(v) for v in sp["point"])
    kind = sp["estimator"]
    run = run_estimator(exp.theta, r0, phi0, schedule=[int(n) for n in sp["schedule"]],
                        reps=int(sp["reps"]), u=float(sp["u"]), seed=exp.seed, kind=kind,
                        model=exp.model, source_spacing=float(exp.cfg["grid"]["source_spacing"]))
    run.to_csv(exp.out / "spiral_estimate.csv", comment=exp.comment())
    fit = regress_detjac(run) if kind == "Z" else regress_norm(run)
    se = np.sqrt(run.var / run.reps)
    _write_csv(exp.out / "spiral_plot.csv", exp.comment(), ["x", "y", "yerr"],
               [[m, y, e] for m, y, e in zip(run.measure, run.mean, se)])
    target = "|det J|" if kind == "Z" else "|J^1|"
    lines = [
        f"estimator: {kind}_N at (r0, phi0) = ({r0!r}, {phi0!r}), u = {float(sp['u'])!r}",
        f"schedule: {list(run.schedule)}, replications: {run.reps}",
        f"{target} estimate: {fit.estimate:.6g} +- {fit.stderr:.3g}",
        f"normalized variance: {np.array2string(fit.normalized_var, precision=4)}",
        f"normalized variance max/min: {fit.variance_ratio:.4g}",
    ]
    return _report(exp, "spiral_report.txt", lines)


def cmd_verify_isotropy(exp: Experiment) -> str:
    """Check rotation invariance of the mean Euler characteristic."""
    iso = exp.cfg["isotropy"]
    rc = iso["rect"]
    rect = Rect(float(rc["s"]), float(rc["t"]), 0.0, tuple(float(v) for v in rc["translation"]))
    angles = [float(a) for a in iso["angles"]]
    rep = chi_isotropy_test(exp.theta, rect, angles, float(iso["u"]), mode=iso["mode"])
    if rep.expected:
        _write_csv(exp.out / "isotropy.csv", exp.comment(), ["angle", "expected_chi"],
                   [[a, v] for a, v in zip(angles, rep.expected)])
    lines = [
        f"verdict: {'PASS' if rep.passed else 'FAIL'}",
        f"analytic deviation: {rep.analytic_deviation:.3e} (passed: {rep.analytic_passed})",
        f"jacobian deviation: {rep.jacobian_deviation:.3e} (passed: {rep.jacobian_passed})",
        f"worst angle: {rep.worst_angle!r}",
    ]
    return _report(exp, "isotropy_report.txt", lines)


HANDLERS = {
    "simulate": cmd_simulate,
    "table": cmd_table,
    "identify": cmd_identify,
    "estimate-spiral": cmd_estimate_spiral,
    "verify-isotropy": cmd_verify_isotropy,
}


# ---------------------------------------------------------------------------
# argument parsing


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML experiment configuration")
    common.add_argument("--seed", type=int, help="64-bit master seed")
    common.add_argument("--out", help="output directory")
    common.add_argument("--threads", type=int, help="worker cap (all stages currently run on one thread)")
    common.add_argument("--print-config", action="store_true",
                        help="print the resolved configuration with every default and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="deformex", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("simulate", parents=[common], help="simulate deformed fields")
    p.add_argument("--reps", type=int)
    p = sub.add_parser("table", parents=[common], help="build a mean modified EC table")
    p.add_argument("--mode", choices=("analytic", "montecarlo"))
    p.add_argument("--reps", type=int)
    p = sub.add_parser("identify", parents=[common], help="identify the deformation from a table")
    p.add_argument("--table", help="table CSV (default: <out>/table.csv)")
    p.add_argument("--method", choices=("linear", "general", "tensorial"))
    p.add_argument("--u", type=float)
    p.add_argument("--signs", help="component signs for the tensorial method, e.g. '+-'")
    p = sub.add_parser("estimate-spiral", parents=[common], help="single-realization spiral estimation")
    p.add_argument("--point", type=_floats, help="polar base point r0,phi0")
    p.add_argument("--schedule", type=_floats, help="comma-separated N values")
    p.add_argument("--reps", type=int)
    p.add_argument("--u", type=float)
    p.add_argument("--estimator", choices=("Z", "Y"))
    p = sub.add_parser("verify-isotropy", parents=[common], help="check chi-isotropy of the deformation")
    p.add_argument("--u", type=float)
    p.add_argument("--mode", choices=("analytic", "jacobian", "both"))
    return parser


def _overrides(args: argparse.Namespace) -> dict:
    o = {"seed": args.seed, "out": args.out, "threads": args.threads}
    cmd = args.command
    if cmd in ("simulate", "table"):
        o["reps"] = args.reps
    if cmd == "table":
        o["table.mode"] = args.mode
    if cmd == "identify":
        o.update({"table.path": args.table, "identify.method": args.method, "identify.u": args.u,
                  "identify.signs": args.signs})
    if cmd == "estimate-spiral":
        o.update({"spiral.point": args.point, "spiral.reps": args.reps, "spiral.u": args.u,
                  "spiral.estimator": args.estimator,
                  "spiral.schedule": None if args.schedule is None else [int(n) for n in args.schedule]})
    if cmd == "verify-isotropy":
        o.update({"isotropy.u": args.u, "isotropy.mode": args.mode})
    return o


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, _overrides(args))
        if args.print_config:
            sys.stdout.write(yaml.safe_dump(cfg, sort_keys=True))
            return EXIT_OK
        exp = validate(cfg, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        text = HANDLERS[args.command](exp)
    except OSError as exc:
        print(f"I/O error in {args.command}: {exc}", file=sys.stderr)
        return EXIT_IO
    except (SimulationError, DeformationError, IdentificationError, SpiralEstimationError,
            QuadratureError, CovarianceError, ArithmeticError, np.linalg.LinAlgError) as exc:
        module = type(exc).__module__.rsplit(".", 1)[-1]
        print(f"numeric failure in {args.command} ({module}): {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    sys.stdout.write(text)
    return EXIT_OK


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
