"""Command-line entry point: ``adcinv <command> --config run.json --out DIR``."""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import platform
import sys
import time
from pathlib import Path

import jsonschema
import numpy as np
import scipy

from . import __version__
from .concentration import MprageError, MprageParams, build_lookup, concentration_from_ratio
from .dti import region_summary
from .fem import SolverError, assemble
from .forward import ControlState, forward_solve
from .inverse import ObservationSeries, OptimizerOptions, RegParams, optimize
from .mesh import MeshError, Subdomain, Variant, export_vtk, generate_phantom, read_mesh, write_field, write_mesh
from .synthetic import (NoiseSpec, make_synthetic_observations, manufactured_control, read_observations,
                        write_observations)
from .sweep import _system, case_from_dict, grid_cells, run_sweep, write_csv
from .voxel import VoxelGrid, preprocess_boundary, read_voxels, write_voxels

log = logging.getLogger("adcinv")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3


class ConfigError(Exception):
    pass


class NumericalFailure(RuntimeError):
    pass


def _obj(properties, required=()):
    return {"type": "object", "properties": properties, "required": list(required), "additionalProperties": False}


NUM = {"type": "number"}
POS = {"type": "number", "exclusiveMinimum": 0}
NONNEG = {"type": "number", "minimum": 0}
INT = {"type": "integer"}
STR = {"type": "string"}
NUMS = {"type": "array", "items": NUM, "minItems": 1}

PHANTOM = _obj({
    "resolution": {"type": "integer", "minimum": 4},
    "box_length": POS,
    "variant": {"enum": [v.value for v in Variant]},
    "shell_fractions": NUMS,
    "cavity_cells": {"type": ["integer", "null"]},
}, ["resolution", "variant"])

MESH_SOURCE = {"oneOf": [_obj({"path": STR}, ["path"]), _obj({"phantom": PHANTOM}, ["phantom"])]}
D_MAP = _obj({"csf": POS, "grey": POS, "white": POS})
REG = _obj({"alpha": NONNEG, "beta": NONNEG, "gamma": NONNEG}, ["alpha", "beta", "gamma"])
OPTIMIZER = _obj({"memory": INT, "rtol": POS, "max_iter": INT, "max_halvings": INT, "max_log_step": POS,
                  "precondition": {"enum": ["none", "mass", "probe"]}})
MPRAGE = _obj({"theta_deg": NUM, "T_a": NUM, "T_b": NUM, "TR": NUM, "m": INT, "r1": POS, "TE": NUM, "T2star": NUM},
              ["theta_deg", "T_a", "T_b", "TR", "m", "r1"])

SCHEMAS = {
    "mesh-gen": _obj({"phantom": PHANTOM}, ["phantom"]),
    "forward": _obj({
        "mesh": MESH_SOURCE, "D": D_MAP, "dt": POS, "k": {"type": "integer", "minimum": 1},
        "boundary": {"oneOf": [{"const": "manufactured"}, NUM]}, "u0": NUM, "lumped": {"type": "boolean"},
    }, ["mesh", "D", "dt", "k", "boundary"]),
    "synth": _obj({
        "mesh": MESH_SOURCE, "D_true": D_MAP, "dt_gen": POS, "n_obs": {"type": "integer", "minimum": 2},
        "T": POS, "noise_amp": NONNEG, "seed": INT,
    }, ["mesh", "dt_gen", "n_obs"]),
    "invert": _obj({
        "observations": STR, "k": {"type": "integer", "minimum": 1}, "T": POS, "reg": REG, "optimizer": OPTIMIZER,
        "truth": _obj({"D": D_MAP}), "lumped": {"type": "boolean"},
    }, ["observations", "k", "reg"]),
    "sweep": _obj({
        "case": {"type": "object"},
        "grid": _obj({"alpha": NUMS, "beta": NUMS, "gamma": NUMS, "k": {"type": "array", "items": INT, "minItems": 1},
                      "noise_amp": NUMS}, ["alpha", "beta", "gamma", "k"]),
    }, ["case", "grid"]),
    "concentration": _obj({
        "baseline": STR, "timepoint": STR, "t1_map": STR, "params": MPRAGE, "csf_mask": STR,
    }, ["baseline", "timepoint", "t1_map", "params"]),
    "dti": _obj({
        "eigenvalues": {"type": "array", "items": STR, "minItems": 3, "maxItems": 3},
        "masks": {"type": "object", "additionalProperties": STR, "minProperties": 1},
        "D_free_water": POS, "D_free_agent": POS,
    }, ["eigenvalues", "masks"]),
    "preprocess": _obj({
        "signal": STR, "mesh": MESH_SOURCE, "mode": {"enum": ["RAW", "CP", "GS"]}, "csf_mask": STR, "sigma": NONNEG,
    }, ["signal", "mesh", "mode"]),
}

_LABELS = {"csf": Subdomain.CSF, "grey": Subdomain.GREY, "white": Subdomain.WHITE}


def validate_config(command: str, config: dict) -> None:
    validator = jsonschema.Draft202012Validator(SCHEMAS[command])
    errors = sorted(validator.iter_errors(config), key=lambda e: list(e.absolute_path))
    if errors:
        err = errors[0]
        # descend into oneOf branches for a more precise message
        if err.context:
            err = sorted(err.context, key=lambda e: -len(e.absolute_path))[0]
        path = "$" + "".join(f"[{p}]" if isinstance(p, int) else f".{p}" for p in err.absolute_path)
        raise ConfigError(f"config error at {path}: {err.message}")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode()).hexdigest()


def write_manifest(out: Path, command: str, config: dict, seed, extra=None) -> None:
    manifest = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": {"adcinv": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "scipy": scipy.__version__},
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    manifest.update(extra or {})
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default))


def _resolve(base: Path, p: str) -> Path:
    q = Path(p)
    return q if q.is_absolute() else base / q


def _load_mesh(source: dict, base: Path):
    if "path" in source:
        return read_mesh(_resolve(base, source["path"]))
    ph = source["phantom"]
    return generate_phantom(ph["resolution"], ph.get("box_length", 40.0), Variant(ph["variant"]),
                            ph.get("shell_fractions"), ph.get("cavity_cells"))


def _D_vector(mapping: dict | None, system) -> np.ndarray:
    from .synthetic import D_TRUE

    values = {Subdomain(s): v for s, v in D_TRUE.items()}
    for name, v in (mapping or {}).items():
        values[_LABELS[name]] = v
    return np.array([values[Subdomain(s)] for s in system.subdomains])


def cmd_mesh_gen(cfg, out, base, args):
    mesh = _load_mesh({"phantom": cfg["phantom"]}, base)
    write_mesh(mesh, out / "mesh.txt")
    export_vtk(mesh, {}, out / "fields" / "mesh.vtk")
    return {"num_vertices": mesh.num_vertices, "num_tets": mesh.num_tets}


def cmd_forward(cfg, out, base, args):
    mesh = _load_mesh(cfg["mesh"], base)
    system = assemble(mesh, lumped=cfg.get("lumped", False))
    dt, k = cfg["dt"], cfg["k"]
    if cfg["boundary"] == "manufactured":
        control = manufactured_control(system, dt, k, _D_vector(cfg["D"], system))
    else:
        control = ControlState(_D_vector(cfg["D"], system), np.full((k + 1, len(system.dirichlet_index)),
                                                                     float(cfg["boundary"])))
    series = forward_solve(system, control, np.full(system.n, float(cfg.get("u0", 0.0))), dt, k)
    write_mesh(mesh, out / "mesh.txt")
    series.export(out / "fields")
    export_vtk(mesh, {"u": series.u[-1]}, out / "fields" / "u_final.vtk")
    return {"k": k, "dt": dt}


def cmd_synth(cfg, out, base, args):
    mesh = _load_mesh(cfg["mesh"], base)
    system = assemble(mesh)
    seed = args.seed if args.seed is not None else cfg.get("seed", 0)
    noise = NoiseSpec(cfg.get("noise_amp", 0.0), seed)
    obs, clean = make_synthetic_observations(system, _D_vector(cfg.get("D_true"), system), cfg["dt_gen"],
                                             cfg["n_obs"], cfg.get("T", 24.0), noise)
    write_mesh(mesh, out / "mesh.txt")
    write_observations(obs, out, "mesh.txt", cfg["dt_gen"], noise)
    export_vtk(mesh, {f"obs_{i}": v for i, v in enumerate(obs.values)}, out / "fields" / "observations.vtk")
    return {"seed": seed}


def cmd_invert(cfg, out, base, args):
    obs_path = _resolve(base, cfg["observations"])
    obs, manifest = read_observations(obs_path)
    mesh = read_mesh(_resolve(obs_path.parent, manifest["mesh"]))
    system = assemble(mesh, lumped=cfg.get("lumped", False))
    k = cfg["k"]
    T = cfg.get("T", 24.0)
    dt = T / k
    truth = None
    if "truth" in cfg:
        truth = manufactured_control(system, dt, k, _D_vector(cfg["truth"].get("D"), system))
    reg = RegParams(**cfg["reg"])
    result = optimize(system, obs, reg, dt, k, opts=OptimizerOptions(**cfg.get("optimizer", {})), truth=truth)
    row = {"alpha": reg.alpha, "beta": reg.beta, "gamma": reg.gamma, "k": k, "noise_amp": manifest.get("noise_amp"),
           "iterations": result.iterations, "converged": result.converged,
           "D_rel": result.errors["D_rel"] if result.errors else {},
           "g_rel": result.errors["g_rel"] if result.errors else None, "J": result.J}
    write_csv([row], out / "results.csv")
    D = {Subdomain(s).name.lower(): float(d) for s, d in zip(system.subdomains, result.control.D)}
    (out / "control.json").write_text(json.dumps({"D_mm2_per_h": D, "dt": dt, "k": k,
                                                  "dirichlet_index": system.dirichlet_index.tolist(),
                                                  "g": result.control.g.tolist()}, indent=1))
    series = forward_solve(system, result.control, np.zeros(system.n), dt, k)
    export_vtk(mesh, {"u_final": series.u[-1]}, out / "fields" / "state_final.vtk")
    return {"converged": result.converged, "iterations": result.iterations, "message": result.message}


def cmd_sweep(cfg, out, base, args):
    try:
        case = case_from_dict(cfg["case"])
        _system(case)
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"config error at $.case: {exc}") from None
    if args.seed is not None:
        case = dataclasses.replace(case, seed=args.seed)
    g = cfg["grid"]
    cells = grid_cells(g["alpha"], g["beta"], g["gamma"], g["k"], g.get("noise_amp", [0.0]), case)
    rows = []

    def flush(row):
        rows.append(row)
        write_csv(rows, out / "results.csv")

    run_sweep(cells, workers=args.workers, on_row=flush)
    failed = sum(1 for r in rows if r.get("error"))
    if rows and failed == len(rows):
        raise NumericalFailure(f"all {failed} sweep cells failed: {rows[0]['error']}")
    return {"cells": len(rows), "failed": failed}


def _mprage(params: dict) -> MprageParams:
    p = dict(params)
    theta = np.deg2rad(p.pop("theta_deg"))
    try:
        return MprageParams(theta=theta, **p)
    except MprageError as exc:
        raise ConfigError(f"config error at $.params: {exc}") from None


def cmd_concentration(cfg, out, base, args):
    S0 = read_voxels(_resolve(base, cfg["baseline"]))
    St = read_voxels(_resolve(base, cfg["timepoint"]))
    T1 = read_voxels(_resolve(base, cfg["t1_map"]))
    if not (S0.dims == St.dims == T1.dims):
        raise ConfigError("voxel grids have different dimensions")
    p = _mprage(cfg["params"])
    lut = build_lookup(p)
    T1_0 = np.clip(T1.values, lut.T1[0], lut.T1[-1])
    if "csf_mask" in cfg:
        mask = read_voxels(_resolve(base, cfg["csf_mask"])).values > 0.5
        T1_0 = np.where(mask, 3000.0, T1_0)
    conv = concentration_from_ratio(St.values / S0.values, T1_0, p, lut)
    write_voxels(VoxelGrid(conv.c, S0.affine), out / "concentration.vox")
    return {"clamp_events": conv.clamp_events}


def cmd_dti(cfg, out, base, args):
    lam = np.stack([read_voxels(_resolve(base, f)).values for f in cfg["eigenvalues"]], axis=-1)
    lam = -np.sort(-lam, axis=-1)
    lines = ["region,md_median,md_mad,fa_median,fa_mad,tortuosity,agent_adc"]
    for name, path in cfg["masks"].items():
        mask = read_voxels(_resolve(base, path)).values > 0.5
        s = region_summary(lam, mask, cfg.get("D_free_water", 3.0e-3), cfg.get("D_free_agent", 3.8e-4))
        lines.append(",".join([name] + [repr(s[c]) for c in
                                        ("md_median", "md_mad", "fa_median", "fa_mad", "tortuosity", "agent_adc")]))
    (out / "results.csv").write_text("\n".join(lines) + "\n")
    return {}


def cmd_preprocess(cfg, out, base, args):
    signal = read_voxels(_resolve(base, cfg["signal"]))
    mesh = _load_mesh(cfg["mesh"], base)
    mask = read_voxels(_resolve(base, cfg["csf_mask"])).values > 0.5 if "csf_mask" in cfg else None
    bv = preprocess_boundary(cfg["mode"], signal, mesh, mask, cfg.get("sigma", 1.5))
    field = bv.to_field(mesh.num_vertices)
    write_field(field, out / "boundary.txt")
    export_vtk(mesh, {"boundary": field}, out / "fields" / "boundary.vtk")
    return {"fallback_vertices": int(bv.fallback.sum())}


COMMANDS = {
    "mesh-gen": cmd_mesh_gen, "forward": cmd_forward, "synth": cmd_synth, "invert": cmd_invert,
    "sweep": cmd_sweep, "concentration": cmd_concentration, "dti": cmd_dti, "preprocess": cmd_preprocess,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="adcinv", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, type=Path)
        p.add_argument("--out", required=True, type=Path)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--workers", type=int, default=1)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(levelname)s %(message)s")
    try:
        config = json.loads(args.config.read_text())
        validate_config(args.command, config)
        out = args.out
        (out / "fields").mkdir(parents=True, exist_ok=True)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"adcinv: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        extra = COMMANDS[args.command](config, out, args.config.parent, args)
    except (ConfigError, MeshError, OSError) as exc:
        code, extra = EXIT_CONFIG, {"error": str(exc)}
    except (SolverError, MprageError, NumericalFailure, FloatingPointError, np.linalg.LinAlgError) as exc:
        code, extra = EXIT_NUMERICAL, {"error": f"numerical failure: {exc}"}
    except ValueError as exc:  # bad input data (shapes, ranges)
        code, extra = EXIT_CONFIG, {"error": str(exc)}
    else:
        code = EXIT_OK
    write_manifest(out, args.command, config, args.seed, {"result": extra, "exit_code": code})
    if code != EXIT_OK:
        print(f"adcinv: {extra['error']}", file=sys.stderr)
    return code

if __name__ == "__main__":
    sys.exit(main())
