"""Command-line front end: ``bregmangrid {equilibrium,certify,simulate,sweep}``.

Exit codes: 0 success, 1 malformed input, 2 solver or numerical failure,
3 voltage floor crossed during simulation.
"""
from __future__ import annotations

import argparse
import concurrent.futures
import io
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from .config import ControllerConfig, ControllerKind, GridState, laplacian_from_edges
from .errors import BregmanGridError, ConfigError, IntegrationError, SolverError, TopologyError
from .power_flow import equilibrium_from_operating_point, solve_equilibrium
from .simulator import (
    conservation_monitor,
    conserved_quantity,
    dissipation_monitor,
    equilibrium_state,
    integrate,
    perturbed_state,
    sharing_monitor,
)
from .stability import certify
from .topology import NetworkTopology

log = logging.getLogger("bregmangrid")

EXIT_OK, EXIT_INPUT, EXIT_SOLVER, EXIT_VOLTAGE = 0, 1, 2, 3


class InputError(BregmanGridError):
    pass


# -- deterministic output -------------------------------------------------------

def _fmt(x):
    x = float(x)
    if not math.isfinite(x):
        return "null"
    return "%.17e" % x


def dumps(obj, indent=0):
    """JSON with every float in full-precision scientific notation."""
    pad = "  " * (indent + 1)
    end = "  " * indent
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        obj = list(obj)
        if not obj:
            return "[]"
        if all(isinstance(v, (int, float, np.floating, np.integer)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        return "[\n" + ",\n".join(pad + dumps(v, indent + 1) for v in obj) + "\n" + end + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if obj is None:
        return "null"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return _fmt(obj)
    if isinstance(obj, ControllerKind):
        return json.dumps(obj.value)
    return json.dumps(str(obj))


def write_csv(trace, fh):
    cols = trace.columns()
    fh.write(",".join(name for name, _ in cols) + "\n")
    data = np.column_stack([c for _, c in cols])
    for row in data:
        fh.write(",".join("%.12e" % v for v in row) + "\n")


# -- scenario parsing -------------------------------------------------------------

def _load_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError as exc:
        raise InputError(f"file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON in {path}: {exc.msg} (line {exc.lineno})") from exc


def _laplacian(spec, n, topology, name):
    if spec is None or spec == "network":
        return topology.laplacian()
    if isinstance(spec, list) and spec and isinstance(spec[0], list) and len(spec) == n \
            and all(len(r) == n for r in spec):
        return np.array(spec, dtype=float)
    try:
        edges = [(int(e[0]) - 1, int(e[1]) - 1, float(e[2]) if len(e) > 2 else 1.0) for e in spec]
    except (TypeError, ValueError, IndexError) as exc:
        raise InputError(f"{name} must be 'network', an n×n matrix or a list of [i, j, w] edges") from exc
    return laplacian_from_edges(n, edges)


CONTROLLER_KEYS = {"kind", "T_P", "T_Q", "K_P", "K_Q", "K_lambda", "P_star", "u_Q_bar", "L_P", "L_Q",
                   "omega_star", "phi_loss", "use_secondary", "use_dynamic_uq", "voltage_disturbance"}


def build_config(block, topology):
    if not isinstance(block, dict) or "kind" not in block:
        raise InputError("scenario needs a 'controller' object with a 'kind'")
    unknown = set(block) - CONTROLLER_KEYS
    if unknown:
        raise InputError(f"unknown controller keys: {sorted(unknown)}")
    n = topology.n
    kw = {k: v for k, v in block.items() if k not in ("L_P", "L_Q")}
    kw["L_P"] = _laplacian(block.get("L_P"), n, topology, "L_P")
    kw["L_Q"] = _laplacian(block.get("L_Q"), n, topology, "L_Q")
    return ControllerConfig.for_network(topology, block["kind"], **{k: v for k, v in kw.items() if k != "kind"})


class Scenario:
    """Parsed scenario file plus the network it references."""

    def __init__(self, data, base_dir, network_path=None, seed=None):
        if not isinstance(data, dict):
            raise InputError("scenario must be a JSON object")
        self.data = data
        net = network_path or data.get("network")
        if net is None:
            raise InputError("no network given (use --network or a 'network' key)")
        net_path = Path(net)
        if not net_path.is_absolute() and network_path is None:
            net_path = Path(base_dir) / net_path
        self.topology = NetworkTopology.from_dict(_load_json(net_path))
        self.config = build_config(data.get("controller"), self.topology)
        self.seed = seed
        self.t_end = float(data.get("t_end", 10.0))
        self.dt = float(data.get("dt", 1e-3))
        self.sample_every = int(data.get("sample_every", 10))
        if not self.dt > 0:
            raise InputError("dt must be positive")
        if self.t_end < 0:
            raise InputError("t_end must be >= 0")
        self.initial = data.get("initial", {"type": "equilibrium"})
        solver = data.get("solver", {})
        self.solver_kwargs = {
            "restarts": int(solver.get("restarts", 10)),
            "seed": int(solver.get("seed", 0) if seed is None else seed),
            "tol": float(solver.get("tol", 1e-10)),
        }
        self.operating_point = data.get("operating_point")

    def equilibrium(self, config=None, **extra):
        """(config, equilibrium): from an explicit operating point or the solver."""
        config = config or self.config
        if self.operating_point is not None:
            op = self.operating_point
            theta = np.asarray(op["theta"], dtype=float)
            V = np.asarray(op.get("V", np.ones(self.topology.n)), dtype=float)
            if theta.shape != (self.topology.n,) or V.shape != (self.topology.n,):
                raise InputError("operating_point theta and V need one entry per node")
            return equilibrium_from_operating_point(self.topology, config, theta, V)
        kwargs = dict(self.solver_kwargs)
        kwargs.update(extra)
        return config, solve_equilibrium(self.topology, config, **kwargs)

    def initial_state(self, config, eq):
        spec = self.initial
        kind = spec.get("type", "equilibrium")
        if kind == "equilibrium":
            return equilibrium_state(config, eq)
        if kind == "perturbed":
            radius = float(spec.get("radius", 0.0))
            if radius < 0:
                raise InputError("perturbation radius must be >= 0")
            seed = self.seed if self.seed is not None else int(spec.get("seed", 0))
            return perturbed_state(config, eq, radius, seed)
        if kind == "explicit":
            base = equilibrium_state(config, eq)
            vals = {}
            for name in ("theta", "omega", "V", "xi", "lam"):
                v = np.asarray(spec.get(name, getattr(base, name)), dtype=float)
                if v.shape != (self.topology.n,):
                    raise InputError(f"explicit initial '{name}' needs {self.topology.n} entries")
                vals[name] = v
            return GridState(**vals)
        raise InputError(f"unknown initial condition type {kind!r}")


def _align_earp(scenario, config, eq, state):
    """EArp equilibria form a family indexed by 𝟙ᵀK_Q⁻¹ln V̄; pick the member
    on the level set fixed by the initial voltages."""
    if config.kind is not ControllerKind.EARP or scenario.operating_point is not None:
        return eq
    level = conserved_quantity(config, state.V)
    return solve_equilibrium(scenario.topology, config, initial=(eq.theta0, eq.V_bar),
                             earp_level=level, restarts=scenario.solver_kwargs["restarts"],
                             seed=scenario.solver_kwargs["seed"])


# -- commands ------------------------------------------------------------------------

def _emit(text, out_dir, name):
    if out_dir is None:
        sys.stdout.write(text + "\n")
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / name).write_text(text + "\n", encoding="utf-8")


def cmd_equilibrium(scenario, out_dir):
    config, eq = scenario.equilibrium()
    report = eq.to_dict()
    report["kind"] = config.kind.value
    _emit(dumps(report), out_dir, "equilibrium.json")
    return EXIT_OK


def cmd_certify(scenario, out_dir):
    config, eq = scenario.equilibrium()
    cert = certify(scenario.topology, config, eq)
    report = cert.to_dict()
    report["equilibrium"] = eq.to_dict()
    _emit(dumps(report), out_dir, "certificate.json")
    return EXIT_OK


def cmd_simulate(scenario, out_dir):
    config, eq = scenario.equilibrium()
    state = scenario.initial_state(config, eq)
    eq = _align_earp(scenario, config, eq, state)
    if scenario.initial.get("type", "equilibrium") == "equilibrium":
        state = equilibrium_state(config, eq)
    try:
        trace = integrate(scenario.topology, config, eq, state, scenario.t_end, scenario.dt,
                          sample_every=scenario.sample_every)
    except IntegrationError as exc:
        trace = exc.trace
        code, status = EXIT_SOLVER, str(exc)
    else:
        code = EXIT_VOLTAGE if trace.status == "assumption_violation" else EXIT_OK
        status = trace.status
    report = {
        "status": status,
        "message": trace.message,
        "samples": len(trace),
        "dissipation": dissipation_monitor(trace).to_dict() if len(trace) else None,
        "conservation": conservation_monitor(trace, config).to_dict() if len(trace) else None,
        "sharing": sharing_monitor(trace, config).to_dict() if len(trace) else None,
    }
    buf = io.StringIO()
    write_csv(trace, buf)
    if out_dir is None:
        sys.stdout.write(buf.getvalue())
        sys.stderr.write(dumps(report) + "\n")
    else:
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "trace.csv").write_text(buf.getvalue(), encoding="utf-8")
        (out_dir / "monitors.json").write_text(dumps(report) + "\n", encoding="utf-8")
    if code == EXIT_VOLTAGE:
        sys.stderr.write(f"error: assumption violation: {trace.message}\n")
    elif code == EXIT_SOLVER:
        sys.stderr.write(f"error: integration failed: {status}\n")
    return code


SWEEP_PARAMS = ("P_star", "u_Q_bar", "K_P", "K_Q", "omega_star")


def _sweep_values(spec):
    if "values" in spec:
        return [float(v) for v in spec["values"]]
    try:
        return np.linspace(float(spec["start"]), float(spec["stop"]), int(spec["num"])).tolist()
    except KeyError as exc:
        raise InputError("sweep needs 'values' or 'start'/'stop'/'num'") from exc


def _sweep_point(scenario, param, index, value):
    try:
        if param == "omega_star":
            config = scenario.config.replace(omega_star=value)
        else:
            vec = np.array(getattr(scenario.config, param), dtype=float)
            vec[index] = value
            config = scenario.config.replace(**{param: vec})
        config, eq = scenario.equilibrium(config)
        cert = certify(scenario.topology, config, eq)
        return {
            "value": value,
            "verdict": cert.verdict.value,
            "hessian_min_eig": cert.hessian_min_eig,
            "gershgorin_passed": cert.gershgorin.passed,
            "jacobian_max_real": cert.spectrum.max_real,
            "max_abs_edge_angle": float(np.max(np.abs(eq.edge_angles), initial=0.0)),
        }
    except (SolverError, ConfigError) as exc:
        return {"value": value, "verdict": None, "error": str(exc)}


def cmd_sweep(scenario, out_dir, workers=None):
    spec = scenario.data.get("sweep")
    if not isinstance(spec, dict):
        raise InputError("scenario needs a 'sweep' object for the sweep command")
    param = spec.get("parameter", "P_star")
    if param not in SWEEP_PARAMS:
        raise InputError(f"sweep parameter must be one of {SWEEP_PARAMS}")
    index = int(spec.get("index", 1)) - 1
    if param != "omega_star" and not 0 <= index < scenario.topology.n:
        raise InputError("sweep index out of range")
    values = _sweep_values(spec)
    with concurrent.futures.ThreadPoolExecutor(max_workers=workers) as pool:
        rows = list(pool.map(lambda v: _sweep_point(scenario, param, index, v), values))
    report = {"parameter": param, "index": index + 1, "points": rows}
    _emit(dumps(report), out_dir, "sweep.json")
    return EXIT_OK


COMMANDS = {"equilibrium": cmd_equilibrium, "certify": cmd_certify,
            "simulate": cmd_simulate, "sweep": cmd_sweep}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _error(message)
        sys.exit(EXIT_INPUT)


def build_parser():
    parser = _Parser(prog="bregmangrid", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--scenario", required=True, help="scenario JSON file")
        p.add_argument("--network", help="network JSON file (overrides the scenario's)")
        p.add_argument("--out", help="output directory (default: standard output)")
        p.add_argument("--seed", type=int, help="overrides perturbation and solver seeds")
    return parser


def _configure_logging():
    level = os.environ.get("BREGMANGRID_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def _error(msg):
    sys.stderr.write("error: " + " ".join(str(msg).split()) + "\n")


def main(argv=None):
    _configure_logging()
    args = build_parser().parse_args(argv)
    if args.seed is not None and args.seed < 0:
        _error("seed must be a non-negative integer")
        return EXIT_INPUT
    try:
        scenario_path = Path(args.scenario)
        scenario = Scenario(_load_json(scenario_path), scenario_path.parent, args.network, args.seed)
        out_dir = Path(args.out) if args.out else None
        return COMMANDS[args.command](scenario, out_dir)
    except SolverError as exc:
        _error(f"solver failure: {exc}")
        return EXIT_SOLVER
    except (InputError, TopologyError, ConfigError, ValueError, KeyError, TypeError) as exc:
        _error(exc)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
