"""Command-line front end.

Usage: ``qbatt <command> [--config FILE] [--key value ...] [--out PATH]``

Commands: hamiltonian, evolve, steady, traj, sweep, scan, critical-j.
A config file holds flat ``key = value`` lines with ``#`` comments; flags
on the command line override it. Each run writes one CSV (header row,
12 significant digits) plus ``<out>.manifest.json``.

Exit codes: 0 success, 1 invalid input, 2 numerical failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import csv
import json
import math
import sys
import time
from dataclasses import dataclass
from importlib import metadata
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from . import metrics
from .dynamics import NumericalError, evolve, steady_state
from .operators import (
    ChainSpec,
    ControlSpec,
    ValidationError,
    all_down,
    all_up,
    build_battery_hamiltonian,
    ground_state,
    spectrum,
)
from .sweeps import METRICS, SCAN_PARAMETERS, Axis, find_critical_J, grid_sweep, scan_1d
from .trajectories import SCHEMES, run_ensemble

COMMANDS = ("hamiltonian", "evolve", "steady", "traj", "sweep", "scan", "critical-j")
EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL, EXIT_IO = 0, 1, 2, 3


def _angle(text: str) -> float:
    t = text.strip().lower()
    if t in ("pi", "+pi"):
        return math.pi
    if t == "-pi":
        return -math.pi
    return float(t)


def _int(text: str) -> int:
    value = float(text)
    if not value.is_integer():
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"{text!r} is not a boolean")


def _choice(options):
    def parse(text: str) -> str:
        t = text.strip()
        if t not in options:
            raise ValueError(f"{t!r} not in {list(options)}")
        return t
    return parse


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], object]
    default: object = None
    help: str = ""


# every key the config file or the flags may set
KEYS = {
    "n_sites": Key(_int, None, "number of spins"),
    "h": Key(float, 1.0, "field strength h (the energy unit)"),
    "j": Key(float, None, "coupling J"),
    "gamma": Key(float, 0.0, "anisotropy gamma"),
    "delta": Key(float, 1.0, "zz anisotropy Delta"),
    "chi": Key(float, 0.0, "feedback strength f / Gamma"),
    "alpha": Key(_angle, math.pi, "feedback direction (radians; 'pi' and '-pi' accepted)"),
    "decay": Key(float, 1.0, "decay rate Gamma"),
    "eta": Key(float, 1.0, "total measurement efficiency"),
    "eta_c": Key(float, 1.0, "collection efficiency"),
    "n_t": Key(float, 0.0, "thermal occupation"),
    "initial": Key(_choice(("ground", "all_down", "all_up")), "ground", "initial state"),
    "t_final": Key(float, 20.0, "final time in units of 1/Gamma"),
    "dt": Key(float, None, "time step in units of 1/Gamma"),
    "n_records": Key(_int, 201, "number of output times"),
    "num": Key(_int, 200, "number of trajectories"),
    "seed": Key(_int, 0, "base seed"),
    "scheme": Key(_choice(SCHEMES), SCHEMES[0], "stochastic integrator"),
    "save_trajectories": Key(_bool, False, "also write every trajectory"),
    "metric": Key(_choice(METRICS), "stored_energy", "figure of merit"),
    "alpha_min": Key(_angle, -math.pi, "sweep: first alpha"),
    "alpha_max": Key(_angle, math.pi, "sweep: last alpha"),
    "alpha_count": Key(_int, 101, "sweep: alpha points"),
    "chi_min": Key(float, -2.0, "sweep: first chi"),
    "chi_max": Key(float, 2.0, "sweep: last chi"),
    "chi_count": Key(_int, 101, "sweep: chi points"),
    "parameter": Key(_choice(SCAN_PARAMETERS), "J", "scan: varied parameter"),
    "start": Key(float, None, "scan: first value"),
    "stop": Key(float, None, "scan: last value"),
    "count": Key(_int, 11, "scan: number of values"),
    "optimize": Key(_bool, False, "scan: re-optimize chi at every point"),
    "j_min": Key(float, 0.5, "critical-j: bracket start"),
    "j_max": Key(float, 5.0, "critical-j: bracket end"),
    "out": Key(str, None, "output CSV path"),
}
REQUIRED = ("n_sites", "j")
# short flag spellings
ALIASES = {"n": "n_sites"}


class ConfigError(ValidationError):
    pass


def parse_config(text: str) -> dict:
    """Parse flat ``key = value`` text into a dict of raw strings.

    Unknown keys, malformed lines and duplicates are rejected with the line
    number. Values are type-checked later by :func:`resolve`.
    """
    raw = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (part.strip() for part in body.split("=", 1))
        key = ALIASES.get(key, key)
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in raw:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        if not value:
            raise ConfigError(f"line {lineno}: empty value for {key!r}")
        raw[key] = (value, lineno)
    return raw


def resolve(file_values: dict, flag_values: dict) -> dict:
    """Merge config-file and flag values (flags win), parse and fill defaults."""
    merged = {k: v for k, v in file_values.items()}
    for key, value in flag_values.items():
        merged[key] = (value, None)
    config = {}
    for key, spec in KEYS.items():
        if key not in merged:
            config[key] = spec.default
            continue
        text, lineno = merged[key]
        where = f"line {lineno}: " if lineno else "flag: "
        try:
            config[key] = spec.parse(str(text))
        except ValueError as exc:
            raise ConfigError(f"{where}cannot parse {key!r}: {exc}") from None
    missing = [k for k in REQUIRED if config[k] is None]
    if missing:
        raise ConfigError(f"missing required key(s): {', '.join(missing)}")
    return config


def _specs(config: dict):
    eta, eta_c = config["eta"], config["eta_c"]
    if not 0 < eta <= 1:
        raise ValidationError(f"eta must lie in (0, 1], got {eta}")
    if not 0 < eta_c <= 1:
        raise ValidationError(f"eta_c must lie in (0, 1], got {eta_c}")
    if eta > eta_c:
        raise ValidationError(f"eta={eta} cannot exceed eta_c={eta_c}")
    chain = ChainSpec(n_sites=config["n_sites"], field_strength=config["h"],
                      coupling=config["j"], gamma=config["gamma"], delta=config["delta"])
    ctrl = ControlSpec.from_chi(config["chi"], direction=config["alpha"],
                                decay_rate=config["decay"], eta=eta,
                                collection_efficiency=eta_c,
                                thermal_occupation=config["n_t"])
    return chain, ctrl


def _initial_state(chain: ChainSpec, name: str) -> np.ndarray:
    if name == "ground":
        return ground_state(build_battery_hamiltonian(chain))
    if name == "all_down":
        return all_down(chain.n_sites)
    return all_up(chain.n_sites)


def _fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, str):
        return x
    return "%.12g" % float(x)


def write_csv(path: Path, header, rows):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


@dataclass
class Outcome:
    header: list
    rows: list
    extra: Optional[dict] = None  # manifest additions
    extra_files: Optional[list] = None  # (path, header, rows)
    flagged: Optional[list] = None  # points that failed numerically


def _pops(rho):
    return list(np.real(np.diag(rho)))


def run_hamiltonian(config):
    chain, _ = _specs(config)
    evals, _ = spectrum(build_battery_hamiltonian(chain))
    return Outcome(["level", "energy"], [[i, e] for i, e in enumerate(evals)],
                   extra={"capacity": float(evals[-1] - evals[0])})


def run_evolve(config):
    chain, ctrl = _specs(config)
    rho0 = _initial_state(chain, config["initial"])
    dt = config["dt"] if config["dt"] is not None else 1e-2
    res = evolve(rho0, chain, ctrl, config["t_final"], dt=dt, n_records=config["n_records"])
    pops = res.populations
    header = ["gamma_t", "delta_e", "ergotropy", "utilization"] + \
        [f"pop_{k + 1}" for k in range(chain.dim)]
    rows = [[t, de, erg, u, *p] for t, de, erg, u, p in
            zip(res.times, res.stored_energy, res.ergotropy, res.utilization, pops)]
    return Outcome(header, rows, extra={"trace_drift": res.trace_drift,
                                        "min_eigenvalue": res.min_eigenvalue})


def run_steady(config):
    chain, ctrl = _specs(config)
    rho, info = steady_state(chain, ctrl, return_info=True)
    H = build_battery_hamiltonian(chain)
    rec = metrics.evaluate(rho, _initial_state(chain, config["initial"]), H)
    header = [f"pop_{k + 1}" for k in range(chain.dim)] + \
        ["delta_e", "ergotropy", "utilization", "ratio"]
    row = _pops(rho) + [rec.stored_energy, rec.ergotropy, rec.utilization,
                        metrics.ratio_or_nan(rec)]
    return Outcome(header, [row], extra={"steady_state_method": info.method,
                                         "residual": info.residual})


def run_traj(config, out: Path):
    chain, ctrl = _specs(config)
    rho0 = _initial_state(chain, config["initial"])
    dt = config["dt"] if config["dt"] is not None else 1e-3
    ens = run_ensemble(rho0, chain, ctrl, config["t_final"], dt=dt, n_traj=config["num"],
                       base_seed=config["seed"], n_records=config["n_records"],
                       scheme=config["scheme"])
    if ens.n_used == 0:
        raise NumericalError("every trajectory failed the positivity check")
    rows = [[t, m, s, e] for t, m, s, e in zip(ens.times, ens.mean, ens.std, ens.stderr)]
    extra_files = []
    if config["save_trajectories"]:
        path = out.with_name(out.stem + "_trajectories.csv")
        header = ["gamma_t"] + [f"seed_{tr.seed}" for tr in ens.trajectories]
        energies = np.array([tr.stored_energy for tr in ens.trajectories]).T
        extra_files.append((path, header, [[t, *e] for t, e in zip(ens.times, energies)]))
    failed = [tr.seed for tr in ens.trajectories if tr.failed]
    return Outcome(["gamma_t", "mean_delta_e", "std_delta_e", "stderr_delta_e"], rows,
                   extra={"n_failed": ens.n_failed, "failed_seeds": failed},
                   extra_files=extra_files)


def run_sweep(config):
    chain, ctrl = _specs(config)
    surf = grid_sweep(chain, ctrl,
                      Axis("alpha", config["alpha_min"], config["alpha_max"], config["alpha_count"]),
                      Axis("chi", config["chi_min"], config["chi_max"], config["chi_count"]),
                      metric=config["metric"], initial=config["initial"])
    best = set(surf.argmax)
    rows = []
    for i, a in enumerate(surf.axes[0].values):
        for k, c in enumerate(surf.axes[1].values):
            rows.append([a, c, surf.values[i, k], int((float(a), float(c)) in best)])
    return Outcome(["alpha", "chi", config["metric"], "is_argmax"], rows,
                   extra={"max_value": surf.max_value, "argmax": surf.argmax},
                   flagged=surf.failed)


def run_scan(config):
    chain, ctrl = _specs(config)
    if config["start"] is None or config["stop"] is None:
        raise ConfigError("scan needs 'start' and 'stop'")
    values = np.linspace(config["start"], config["stop"], config["count"])
    table = scan_1d(chain, ctrl, config["parameter"], values,
                    optimize=config["optimize"], optimize_metric=config["metric"],
                    initial=config["initial"])
    return Outcome(table.columns, table.rows, flagged=table.failed)


def run_critical_j(config):
    chain, ctrl = _specs(config)
    jc = find_critical_J(chain, ctrl, config["metric"], (config["j_min"], config["j_max"]),
                         initial=config["initial"])
    return Outcome(["n_sites", "eta", "metric", "j_c"],
                   [[chain.n_sites, ctrl.eta, config["metric"], jc]])


def config_text(config: dict) -> str:
    """Flat ``key = value`` text that reproduces ``config``."""
    lines = []
    for key, value in config.items():
        if value is None or key == "out":
            continue
        if isinstance(value, bool):
            text = "true" if value else "false"
        elif isinstance(value, float):
            text = repr(value)
        else:
            text = str(value)
        lines.append(f"{key} = {text}")
    return "\n".join(lines) + "\n"


def _version() -> str:
    try:
        return metadata.version("qbatt")
    except metadata.PackageNotFoundError:
        return "unknown"


def dispatch(command: str, config: dict) -> int:
    """Run ``command`` and write its CSV and manifest; returns the exit code."""
    if command not in COMMANDS:
        raise ValidationError(f"unknown command {command!r}")
    out = Path(config["out"] or f"qbatt_{command.replace('-', '_')}.csv")
    start = time.perf_counter()
    runners = {
        "hamiltonian": run_hamiltonian, "evolve": run_evolve, "steady": run_steady,
        "sweep": run_sweep, "scan": run_scan, "critical-j": run_critical_j,
    }
    outcome = run_traj(config, out) if command == "traj" else runners[command](config)
    elapsed = time.perf_counter() - start

    written = [out]
    write_csv(out, outcome.header, outcome.rows)
    for path, header, rows in outcome.extra_files or []:
        write_csv(path, header, rows)
        written.append(path)
    manifest = {
        "command": command,
        "config": {k: v for k, v in config.items()},
        "config_text": config_text(config),
        "version": _version(),
        "seed": config["seed"],
        "wall_clock_seconds": elapsed,
        "outputs": [str(p) for p in written],
    }
    if outcome.extra:
        manifest.update(outcome.extra)
    if outcome.flagged:
        manifest["flagged_points"] = outcome.flagged
    manifest_path = out.with_name(out.name + ".manifest.json")
    with open(manifest_path, "w") as fh:
        json.dump(manifest, fh, indent=2, default=float)
        fh.write("\n")
    if outcome.flagged:
        print(f"numerical failure at {len(outcome.flagged)} point(s): {outcome.flagged}",
              file=sys.stderr)
        return EXIT_NUMERICAL
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # bad flags are invalid input (exit 1), not argparse's usual exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        sys.exit(EXIT_VALIDATION)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qbatt", description="Spin-chain quantum battery "
                                     "charging under homodyne feedback.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None, help="flat key = value file")
        for key, spec in KEYS.items():
            flags = ["--" + key.replace("_", "-")]
            if key == "n_sites":
                flags.append("--n")
            # raw strings: parsing and validation happen in resolve()
            p.add_argument(*flags, dest=key, default=None, help=spec.help)
    return parser


def _join_negative_values(argv):
    # argparse reads "--alpha -pi" as two flags; glue such values to their option
    out = []
    i = 0
    while i < len(argv):
        tok = argv[i]
        if (tok.startswith("--") and "=" not in tok and i + 1 < len(argv)
                and argv[i + 1].startswith("-") and not argv[i + 1].startswith("--")):
            out.append(f"{tok}={argv[i + 1]}")
            i += 2
            continue
        out.append(tok)
        i += 1
    return out


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_join_negative_values(argv))
    try:
        file_values = {}
        if args.config:
            try:
                text = Path(args.config).read_text()
            except OSError as exc:
                print(f"error: cannot read config: {exc}", file=sys.stderr)
                return EXIT_IO
            file_values = parse_config(text)
        flags = {k: v for k, v in vars(args).items()
                 if k in KEYS and v is not None}
        config = resolve(file_values, flags)
        return dispatch(args.command, config)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
