"""Declarative run configuration: INI sections, presets, overrides and builders."""

from __future__ import annotations

import ast
import configparser
import copy
import hashlib
import json
from dataclasses import dataclass

from .mesh import build_uniform_mesh
from .models import (
    BumpTestFunction,
    ConstantVelocity,
    EntropyPair,
    LinearEntropy,
    LinearShear,
    OscillatingVelocity,
    RigidRotation,
    SmoothedAbs,
    TruncatedQuadratic,
    burgers_flux,
    cubic_flux,
    linear_flux,
    polynomial_flux,
)
from .noise import ClampNoise, StableLikeNoise, TanhNoise, ZeroNoise
from .solver import (
    BoxInitial,
    ConstantInitial,
    GaussianInitial,
    Problem,
    SchemeConfig,
    SineInitial,
)


class ConfigError(ValueError):
    pass


DEFAULTS: dict[str, dict] = {
    "mesh": {"dimension": 1, "extents": [[0.0, 1.0]], "cells": [128], "periodic": True},
    "flux": {"name": "burgers", "speed": 1.0, "coefficients": None, "bound_M": 3.0, "quadrature": 16},
    "velocity": {
        "name": "constant",
        "vector": [1.0],
        "omega": 1.0,
        "center": None,
        "rate": 1.0,
        "y0": 0.0,
        "frequency": 1.0,
        "V": None,
    },
    "noise": {
        "name": "tanh",
        "rate": 4.0,
        "lambda_star": 0.5,
        "C_star": None,
        "truncation": 0.05,
        "intensity": 1.0,
        "stability_index": 0.8,
        "dump_events": False,
    },
    "initial": {
        "name": "sine",
        "amplitude": 1.0,
        "offset": 0.0,
        "wavenumber": 1,
        "center": None,
        "width": 0.1,
        "lo": None,
        "hi": None,
        "value": 1.0,
    },
    "scheme": {
        "T": 0.5,
        "xi": 0.0,
        "dt_rule": "cfl",
        "N": None,
        "dt_coeff": 1.0,
        "dt_exponent": 1.5,
        "scheme": "split",
        "record_level": "events",
        "path_index": 0,
    },
    "ensemble": {"n_paths": 100, "seed": 0, "workers": 1, "chunk_size": 32, "max_blowup_fraction": 0.001},
    "diagnostics": {
        "functionals": ["moment"],
        "study": "cauchy",
        "resolutions": [64, 128, 256, 512],
        "reference_cells": 4096,
        "p": 1.0,
        "interior_fraction": 0.5,
        "sample_times": 4,
        "bv_radius": 0.25,
        "bv_center": None,
        "entropy": "smoothed_abs",
        "theta": 0.1,
        "shift": 0.2,
        "inner": 1.0,
        "outer": 2.0,
        "psi_center": [0.4],
        "psi_radius": 0.25,
        "psi_t_support": None,
        "isometry_u": 1.0,
        "isometry_dt": 0.01,
        "isometry_samples": 100000,
        "max_bv_ratio": 2.0,
        "max_bv_slope": 0.6,
        "continuity_ratio": [1.5, 3.0],
        "order_range": [0.4, 1.1],
        "min_cauchy_ratio": 1.2,
    },
    "output": {"dir": "stochfv-out", "prefix": "", "stride": 1},
}

# one preset per acceptance scenario; values override DEFAULTS
PRESETS: dict[str, dict] = {
    "moment": {
        "scheme": {"T": 0.5, "xi": 0.0, "dt_rule": "cfl"},
        "ensemble": {"n_paths": 1000, "seed": 1},
        "diagnostics": {"functionals": ["moment"]},
    },
    "weak-bv": {
        "scheme": {"T": 0.5, "xi": 0.0, "dt_rule": "cfl"},
        "ensemble": {"n_paths": 200, "seed": 11},
        "diagnostics": {"study": "weak_bv", "resolutions": [64, 128, 256, 512], "bv_radius": 0.25},
    },
    "continuity": {
        "noise": {"rate": 400.0, "lambda_star": 0.08},
        "scheme": {"T": 0.25, "dt_rule": "coupling", "dt_coeff": 0.3, "dt_exponent": 1.5},
        "ensemble": {"n_paths": 200, "seed": 3},
        "diagnostics": {"study": "continuity", "resolutions": [64, 128, 256, 512]},
    },
    "entropy": {
        "scheme": {"T": 0.25, "dt_rule": "coupling", "dt_coeff": 0.5, "dt_exponent": 1.5},
        "ensemble": {"n_paths": 200, "seed": 5},
        "diagnostics": {
            "study": "entropy",
            "resolutions": [64, 128, 256, 512],
            "entropy": "smoothed_abs",
            "theta": 0.1,
            "shift": 0.2,
            "psi_center": [0.4],
            "psi_radius": 0.25,
        },
    },
    "det-burgers": {
        "noise": {"name": "none"},
        "scheme": {"T": 0.1, "xi": 0.5, "dt_rule": "cfl"},
        "ensemble": {"n_paths": 1},
        "diagnostics": {"study": "reference", "resolutions": [64, 128, 256, 512], "reference_cells": 4096},
    },
    "cauchy": {
        "scheme": {"T": 0.25, "dt_rule": "coupling", "dt_coeff": 0.3, "dt_exponent": 1.5},
        "ensemble": {"n_paths": 200, "seed": 9},
        "diagnostics": {"study": "cauchy", "resolutions": [64, 128, 256, 512], "p": 1.0},
    },
    "isometry": {
        "diagnostics": {"isometry_u": 1.0, "isometry_dt": 0.01, "isometry_samples": 100000},
        "ensemble": {"seed": 2024},
    },
    "rotation-2d": {
        "mesh": {"dimension": 2, "extents": [[-1.0, 1.0], [-1.0, 1.0]], "cells": [32, 32], "periodic": False},
        "velocity": {"name": "rotation", "omega": 1.0, "center": [0.0, 0.0]},
        "initial": {"name": "gaussian", "amplitude": 1.0, "center": [0.3, 0.0], "width": 0.15},
        "scheme": {"T": 0.25, "xi": 0.5},
        "ensemble": {"n_paths": 16},
        "diagnostics": {"psi_center": [0.0, 0.0], "psi_radius": 0.5},
    },
}


def parse_value(text: str):
    """JSON first, then a Python literal, else the raw string."""
    text = text.strip()
    for parser in (json.loads, ast.literal_eval):
        try:
            return parser(text)
        except (ValueError, SyntaxError, TypeError):
            pass
    return text


def _merge(base: dict, over: dict, origin: str) -> dict:
    out = copy.deepcopy(base)
    for sec, items in over.items():
        if sec not in out:
            raise ConfigError(f"{origin}: unknown section [{sec}]")
        for key, val in items.items():
            if key not in out[sec]:
                raise ConfigError(f"{origin}: unknown key {sec}.{key}")
            out[sec][key] = val
    return out


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @classmethod
    def default(cls) -> "RunConfig":
        return cls(copy.deepcopy(DEFAULTS))

    @classmethod
    def from_preset(cls, name: str) -> "RunConfig":
        if name not in PRESETS:
            raise ConfigError(f"unknown preset {name!r}; available: {', '.join(sorted(PRESETS))}")
        return cls(_merge(DEFAULTS, PRESETS[name], f"preset {name}"))

    @classmethod
    def from_ini(cls, text: str, base: "RunConfig | None" = None, origin: str = "config") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read_string(text)
        except configparser.Error as err:
            raise ConfigError(f"{origin}: {err}") from err
        over = {sec: {k: parse_value(v) for k, v in cp.items(sec)} for sec in cp.sections()}
        return cls(_merge((base or cls.default()).data, over, origin))

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        return cls(_merge(DEFAULTS, json.loads(text), "json"))

    @property
    def workers(self) -> int:
        return int(self.data["ensemble"]["workers"])

    def with_overrides(self, assignments) -> "RunConfig":
        over: dict = {}
        for item in assignments or ():
            if "=" not in item or "." not in item.split("=", 1)[0]:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            lhs, rhs = item.split("=", 1)
            sec, key = lhs.strip().split(".", 1)
            over.setdefault(sec, {})[key] = parse_value(rhs)
        return RunConfig(_merge(self.data, over, "--set"))

    def canonical(self) -> str:
        """Sorted JSON without the worker count, which never changes results."""
        data = copy.deepcopy(self.data)
        data["ensemble"].pop("workers", None)
        return json.dumps(data, sort_keys=True, separators=(",", ":"))

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()

    def to_ini(self) -> str:
        lines = []
        for sec in DEFAULTS:
            lines.append(f"[{sec}]")
            for k, v in self.data[sec].items():
                lines.append(f"{k} = {json.dumps(v)}")
            lines.append("")
        return "\n".join(lines)

    def __getitem__(self, sec) -> dict:
        return self.data[sec]


def load_config(path=None, preset=None, overrides=()) -> RunConfig:
    cfg = RunConfig.from_preset(preset) if preset else RunConfig.default()
    if path:
        with open(path, encoding="utf-8") as fh:
            cfg = RunConfig.from_ini(fh.read(), cfg, origin=str(path))
    return cfg.with_overrides(overrides)


# --------------------------------------------------------------------------
# builders


def _as_list(v, n: int, what: str):
    if isinstance(v, (int, float, bool)):
        return [v] * n
    if not isinstance(v, (list, tuple)) or len(v) != n:
        raise ConfigError(f"{what} must have {n} entries, got {v!r}")
    return list(v)


def build_mesh(cfg: RunConfig, cells=None):
    m = cfg["mesh"]
    d = int(m["dimension"])
    extents = m["extents"]
    if d == 1 and extents and not isinstance(extents[0], (list, tuple)):
        extents = [extents]
    counts = _as_list(cells if cells is not None else m["cells"], d, "mesh.cells")
    periodic = _as_list(m["periodic"], d, "mesh.periodic")
    return build_uniform_mesh(d, extents, tuple(int(c) for c in counts), [bool(p) for p in periodic])


def build_flux(cfg: RunConfig):
    f = cfg["flux"]
    M = float(f["bound_M"])
    name = f["name"]
    if name == "burgers":
        return burgers_flux(M)
    if name == "linear":
        return linear_flux(float(f["speed"]), M)
    if name == "cubic":
        return cubic_flux(M)
    if name == "polynomial":
        if not f["coefficients"]:
            raise ConfigError("flux.coefficients required for a polynomial flux")
        return polynomial_flux(f["coefficients"], M, quadrature=int(f["quadrature"]))
    raise ConfigError(f"unknown flux {name!r}")


def build_velocity(cfg: RunConfig, mesh):
    v = cfg["velocity"]
    name = v["name"]
    V = None if v["V"] is None else float(v["V"])
    center = v["center"] if v["center"] is not None else [0.5 * (a + b) for a, b in mesh.bounds]
    if name == "constant":
        vec = _as_list(v["vector"], mesh.dimension, "velocity.vector")
        return ConstantVelocity(vec, V)
    if name == "oscillating":
        vec = _as_list(v["vector"], mesh.dimension, "velocity.vector")
        return OscillatingVelocity(vec, float(v["frequency"]), V)
    if mesh.dimension != 2:
        raise ConfigError(f"velocity {name!r} needs a 2D mesh")
    if name == "rotation":
        return RigidRotation(float(v["omega"]), center, mesh.bounds, V)
    if name == "shear":
        return LinearShear(float(v["rate"]), float(v["y0"]), mesh.bounds, V)
    raise ConfigError(f"unknown velocity {name!r}")


def build_noise(cfg: RunConfig):
    n = cfg["noise"]
    name = n["name"]
    if name in ("none", "zero"):
        return ZeroNoise()
    if name in ("tanh", "tanh_symmetric"):
        return TanhNoise(float(n["rate"]), float(n["lambda_star"]), n["C_star"], symmetric=name == "tanh_symmetric")
    if name == "clamp":
        cs = n["C_star"] if n["C_star"] is not None else n["lambda_star"]
        return ClampNoise(float(n["rate"]), float(n["lambda_star"]), float(cs))
    if name == "stable":
        return StableLikeNoise(float(n["intensity"]), float(n["stability_index"]), float(n["truncation"]), float(n["lambda_star"]))
    raise ConfigError(f"unknown noise {name!r}")


def build_initial(cfg: RunConfig, mesh):
    i = cfg["initial"]
    name = i["name"]
    d = mesh.dimension
    mid = [0.5 * (a + b) for a, b in mesh.bounds]
    if name == "sine":
        return SineInitial(float(i["amplitude"]), mesh.bounds, int(i["wavenumber"]), float(i["offset"]))
    if name == "gaussian":
        c = _as_list(i["center"] if i["center"] is not None else mid, d, "initial.center")
        return GaussianInitial(float(i["amplitude"]), c, float(i["width"]))
    if name == "box":
        lo = _as_list(i["lo"] if i["lo"] is not None else [b[0] for b in mesh.bounds], d, "initial.lo")
        hi = _as_list(i["hi"] if i["hi"] is not None else mid, d, "initial.hi")
        return BoxInitial(lo, hi, float(i["value"]))
    if name == "constant":
        return ConstantInitial(float(i["value"]))
    raise ConfigError(f"unknown initial data {name!r}")


def build_scheme(cfg: RunConfig) -> SchemeConfig:
    s = cfg["scheme"]
    return SchemeConfig(
        T=float(s["T"]),
        xi=float(s["xi"]),
        dt_rule=s["dt_rule"],
        N=None if s["N"] is None else int(s["N"]),
        dt_coeff=float(s["dt_coeff"]),
        dt_exponent=float(s["dt_exponent"]),
        scheme=s["scheme"],
        record_level=s["record_level"],
    )


def build_problem(cfg: RunConfig, cells=None):
    """(problem, initial-data function) for the configured or overridden resolution."""
    mesh = build_mesh(cfg, cells)
    flux = build_flux(cfg)
    vfield = build_velocity(cfg, mesh)
    return Problem.build(mesh, flux, vfield, build_noise(cfg), build_scheme(cfg)), build_initial(cfg, mesh)


def build_entropy(cfg: RunConfig, flux, kind: str | None = None) -> EntropyPair:
    d = cfg["diagnostics"]
    kind = kind or d["entropy"]
    if kind == "smoothed_abs":
        ent = SmoothedAbs(float(d["theta"]), float(d["shift"]))
    elif kind == "linear":
        ent = LinearEntropy()
    elif kind == "truncated_quadratic":
        ent = TruncatedQuadratic(float(d["inner"]), float(d["outer"]))
    else:
        raise ConfigError(f"unknown entropy {kind!r}")
    return EntropyPair(ent, flux)


def build_test_function(cfg: RunConfig) -> BumpTestFunction:
    d = cfg["diagnostics"]
    T = float(cfg["scheme"]["T"])
    ts = T if d["psi_t_support"] is None else float(d["psi_t_support"])
    return BumpTestFunction(tuple(d["psi_center"]), float(d["psi_radius"]), ts)


def resolutions(cfg: RunConfig):
    """Per-axis cell counts for each study resolution (same count on every axis)."""
    dim = int(cfg["mesh"]["dimension"])
    out = []
    for r in cfg["diagnostics"]["resolutions"]:
        out.append([int(r)] * dim if isinstance(r, (int, float)) else [int(x) for x in r])
    return out


def sample_times(cfg: RunConfig):
    J = int(cfg["diagnostics"]["sample_times"])
    T = float(cfg["scheme"]["T"])
    return [(j + 0.5) * T / J for j in range(J)]

