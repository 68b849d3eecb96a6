"""Command-line front end: ``stochfv {check,run,ensemble,converge,noise-test}``.

Exit codes: 0 success, 2 invalid input or failed validation, 3 runtime
failure (blow-up, ensemble census), 4 statistical verdict failed under
``--strict``.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, RunConfig, load_config
from .diagnostics import (
    MomentObserver,
    ContinuityObserver,
    WeakBVObserver,
    EntropyObserver,
    DiagnosticsReport,
    continuity_study,
    convergence_study,
    entropy_study,
    interior_box,
    moment_bound_check,
    reference_convergence,
    weak_bv_study,
)
from .ensemble import EnsembleConfig, EnsembleError, run_ensemble
from .mesh import MeshError, check_mesh_invariants, verify_admissibility
from .models import ModelError, discrete_zero_flux_defect, normal_velocity_bound_check
from .noise import isometry_selftest, validate_noise
from .solver import BlowUpError, SchemeError, l2_norm_squared, project_initial, run

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_STAT = 0, 2, 3, 4

log = logging.getLogger("stochfv")


# --------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "true" if v else "false"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_csv(path: Path, cfg: RunConfig, seed: int, columns, rows) -> Path:
    """CSV with a deterministic comment header: format tag, config hash, seed and config echo."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("# stochfv-csv v1\n")
        fh.write(f"# config_hash {cfg.hash}\n")
        fh.write(f"# seed {seed}\n")
        fh.write(f"# config {cfg.canonical()}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            vals = [r.get(c) for c in columns] if isinstance(r, dict) else r
            w.writerow([_fmt(v) for v in vals])
    return path


def _out_dir(args, cfg: RunConfig) -> Path:
    return Path(args.out or os.environ.get("STOCHFV_OUT_DIR") or cfg["output"]["dir"])


def _name(cfg: RunConfig, stem: str) -> str:
    return f"{cfg['output']['prefix']}{stem}.csv"


def _progress(args):
    return None if args.quiet else sys.stderr


def _econfig(cfg: RunConfig, args) -> EnsembleConfig:
    e = cfg["ensemble"]
    return EnsembleConfig(
        n_paths=int(e["n_paths"]),
        seed=int(e["seed"]),
        workers=int(args.workers if args.workers is not None else e["workers"]),
        chunk_size=int(e["chunk_size"]),
        max_blowup_fraction=float(e["max_blowup_fraction"]),
    )


# --------------------------------------------------------------------------
# check


def _validators(cfg: RunConfig):
    """Yield (name, callable returning a detail string or raising)."""
    state: dict = {}

    def mesh():
        m = cfgmod.build_mesh(cfg)
        check_mesh_invariants(m)
        state["mesh"] = m
        rep = verify_admissibility(m)
        return f"{m.n_cells} cells, h={m.h:.4g}, alpha={rep.alpha:.4g}"

    def flux():
        f = cfgmod.build_flux(cfg)
        f.check()
        state["flux"] = f
        return f"{f.name}, c_f={f.c_f:.4g}, M={f.bound_M:g}"

    def velocity():
        m = state["mesh"]
        v = cfgmod.build_velocity(cfg, m)
        v.check(m.bounds, float(cfg["scheme"]["T"]))
        state["vfield"] = v
        # wall and wrap faces are excluded from the discrete identity
        interior = np.setdiff1d(np.arange(m.n_cells), m.outer_ring())
        defect = float(np.max(np.abs(discrete_zero_flux_defect(m, v, 0.0, 1e-3)[interior]), initial=0.0))
        scale = v.V * m.h ** (m.dimension - 1)
        if defect > 1e-10 * max(scale, 1e-300):
            raise ModelError(f"discrete zero-flux identity violated: defect {defect:.3e}")
        return f"V={v.V:.4g}, zero-flux defect {defect:.2e}"

    def noise():
        nz = cfgmod.build_noise(cfg)
        validate_noise(nz, bound=max(4.0, 2.0 * float(cfg["flux"]["bound_M"])))
        state["noise"] = nz
        return f"{type(nz).__name__}, c_eta={nz.c_eta:.4g}"

    def time_grid():
        from .solver import Problem

        p = Problem.build(state["mesh"], state["flux"], state["vfield"], state["noise"], cfgmod.build_scheme(cfg))
        state["problem"] = p
        return f"N={p.N}, dt={p.dt:.6g}"

    def normal_bound():
        p = state["problem"]
        rep = normal_velocity_bound_check(p.mesh, p.vfield, p.edges if p.N else np.array([0.0, p.dt or 1e-3]))
        if not rep.ok:
            raise ModelError(
                f"inflow bound violated: ratio {rep.worst_ratio:.4g} at cell {rep.worst_cell}, step {rep.worst_step}"
            )
        return f"worst ratio {rep.worst_ratio:.4g}"

    def initial():
        m = state["mesh"]
        u0 = cfgmod.build_initial(cfg, m)
        n2 = l2_norm_squared(u0, m)
        if not math.isfinite(n2):
            raise ModelError("initial data is not square integrable")
        return f"||u0||^2={n2:.6g}"

    def entropy():
        pair = cfgmod.build_entropy(cfg, state["flux"])
        pair.check()
        psi = cfgmod.build_test_function(cfg)
        psi.check_derivatives()
        R = psi.validate(state["mesh"], float(cfg["scheme"]["T"]))
        return f"{type(pair.entropy).__name__}, psi support radius {R:.4g}"

    return [
        ("mesh", mesh),
        ("flux", flux),
        ("velocity", velocity),
        ("noise", noise),
        ("time-grid", time_grid),
        ("normal-bound", normal_bound),
        ("initial", initial),
        ("entropy", entropy),
    ]


def _run_checks(cfg: RunConfig, verbose: bool) -> bool:
    for name, fn in _validators(cfg):
        try:
            detail = fn()
        except (ConfigError, ModelError, SchemeError, MeshError, ValueError) as err:
            print(f"FAIL {name}: {err}")
            return False
        if verbose:
            print(f"ok   {name}: {detail}")
    return True


def cmd_check(cfg: RunConfig, args) -> int:
    if not _run_checks(cfg, verbose=True):
        return EXIT_INVALID
    print(f"all checks passed (config {cfg.hash[:12]})")
    return EXIT_OK


# --------------------------------------------------------------------------
# run


def cmd_run(cfg: RunConfig, args) -> int:
    problem, u0fn = cfgmod.build_problem(cfg)
    seed = int(cfg["ensemble"]["seed"])
    path = int(cfg["scheme"]["path_index"])
    u0 = project_initial(u0fn, problem.mesh)
    traj = run(problem, u0, seed, path)
    stride = max(1, int(cfg["output"]["stride"]))
    keep = sorted(set(range(0, problem.N + 1, stride)) | {problem.N})
    rows = ((n, traj.times[n], k, traj.states[n, k]) for n in keep for k in range(problem.mesh.n_cells))
    out = _out_dir(args, cfg)
    f = write_csv(out / _name(cfg, "trajectory"), cfg, seed, ["step", "time", "cell_index", "u"], rows)
    if cfg["noise"]["dump_events"]:
        ev = zip(traj.stream.times, traj.stream.marks)
        write_csv(out / _name(cfg, "events"), cfg, seed, ["time", "mark"], ev)
    mass = traj.mass()
    print(f"N={problem.N} dt={problem.dt:.6g} cells={problem.mesh.n_cells} events={traj.stream.times.size}")
    print(f"mass drift {float(np.max(np.abs(mass - mass[0])) if mass.size else 0.0):.3e}")
    print(f"wrote {f}")
    return EXIT_OK


# --------------------------------------------------------------------------
# ensemble


def _ensemble_observers(cfg: RunConfig, problem):
    names = cfg["diagnostics"]["functionals"]
    names = [names] if isinstance(names, str) else list(names)
    d = cfg["diagnostics"]
    obs = []
    for name in names:
        if name == "moment":
            obs.append(MomentObserver())
        elif name == "weak_bv":
            obs.append(WeakBVObserver(d["bv_center"], float(d["bv_radius"])))
        elif name == "continuity":
            obs.append(ContinuityObserver())
        elif name == "entropy":
            obs.append(EntropyObserver(cfgmod.build_entropy(cfg, problem.flux), cfgmod.build_test_function(cfg)))
        else:
            raise ConfigError(f"unknown functional {name!r}")
    return obs


def cmd_ensemble(cfg: RunConfig, args) -> int:
    problem, u0fn = cfgmod.build_problem(cfg)
    ec = _econfig(cfg, args)
    u0 = project_initial(u0fn, problem.mesh)
    res = run_ensemble(ec, problem, u0, _ensemble_observers(cfg, problem), progress=_progress(args))
    reports: list[DiagnosticsReport] = []
    for name, values in res.per_path.items():
        for key, arr in values.items():
            if np.ndim(arr) == 1:
                reports.append(DiagnosticsReport.from_values(f"{name}.{key}", arr))
    ok = True
    if "moment" in res.series:
        mom = res.series["moment"]["moment"]
        rep = moment_bound_check(mom, res.per_path["moment"]["sup"], problem.dt, problem.noise.c_eta,
                                 l2_norm_squared(u0fn, problem.mesh))
        reports.append(rep)
        ok = bool(rep.verdict and rep.detail["per_step_ok"])
        step_bound = (1.0 + problem.dt * problem.noise.c_eta) ** np.arange(problem.N + 1) * rep.detail["u0_norm2"]
        series_rows = (
            (n, problem.edges[n], mom.mean[n], mom.stderr[n], step_bound[n]) for n in range(problem.N + 1)
        )
        write_csv(_out_dir(args, cfg) / _name(cfg, "moment_series"), cfg, ec.seed,
                  ["step", "time", "mean", "stderr", "step_bound"], series_rows)
    rows = [
        {"functional": r.name, "h": problem.mesh.h, "dt": problem.dt, "n_paths": res.n_ok, "mean": r.mean,
         "stderr": r.stderr, "bound": r.bound, "verdict": r.verdict}
        for r in reports
    ]
    cols = ["functional", "h", "dt", "n_paths", "mean", "stderr", "bound", "verdict"]
    f = write_csv(_out_dir(args, cfg) / _name(cfg, "ensemble_report"), cfg, ec.seed, cols, rows)
    for r in reports:
        print(r.summary())
    if res.blown:
        print(f"{len(res.blown)} paths discarded after blow-up")
    print(f"wrote {f}")
    return EXIT_STAT if (args.strict and not ok) else EXIT_OK


# --------------------------------------------------------------------------
# converge


def run_study(cfg: RunConfig, workers: int | None = None, progress=None):
    """Build the configured refinement study and run it; returns (kind, rows, verdict, detail)."""
    d = cfg["diagnostics"]
    study = d["study"]
    built = [cfgmod.build_problem(cfg, cells) for cells in cfgmod.resolutions(cfg)]
    problems = [b[0] for b in built]
    u0 = built[0][1]
    e = cfg["ensemble"]
    ec = EnsembleConfig(int(e["n_paths"]), int(e["seed"]), int(workers or e["workers"]), int(e["chunk_size"]),
                        float(e["max_blowup_fraction"]))
    if study == "cauchy":
        box = interior_box(problems[0].mesh, float(d["interior_fraction"]))
        tab = convergence_study(problems, u0, ec, float(d["p"]), box, cfgmod.sample_times(cfg), progress)
        ok = tab.monotone and all(r >= float(d["min_cauchy_ratio"]) for r in tab.ratios)
        return study, tab.rows(), ok, {"ratios": tab.ratios}
    if study == "reference":
        ref, _ = cfgmod.build_problem(cfg, [int(d["reference_cells"])] * problems[0].mesh.dimension)
        tab = reference_convergence(problems, ref, u0, float(d["p"]))
        lo, hi = d["order_range"]
        return study, tab.rows(), bool(lo <= tab.order <= hi), {"order": tab.order}
    if study == "weak_bv":
        t = weak_bv_study(problems, u0, ec, float(d["bv_radius"]), d["bv_center"], float(d["max_bv_ratio"]),
                          float(d["max_bv_slope"]), progress)
    elif study == "continuity":
        t = continuity_study(problems, u0, ec, tuple(d["continuity_ratio"]), progress)
    elif study == "entropy":
        flux = problems[0].flux
        t = entropy_study(problems, u0, ec, cfgmod.build_entropy(cfg, flux), cfgmod.build_entropy(cfg, flux, "linear"),
                          cfgmod.build_test_function(cfg), progress)
    else:
        raise ConfigError(f"unknown study {study!r}")
    return t.kind, t.rows, t.verdict, t.detail


def cmd_converge(cfg: RunConfig, args) -> int:
    kind, rows, ok, detail = run_study(cfg, args.workers, _progress(args))
    cols = list(dict.fromkeys(k for r in rows for k in r))
    f = write_csv(_out_dir(args, cfg) / _name(cfg, f"converge_{kind}"), cfg, int(cfg["ensemble"]["seed"]), cols, rows)
    for r in rows:
        print("  ".join(f"{k}={_fmt(v) if not isinstance(v, float) else format(v, '.5g')}" for k, v in r.items()))
    print(f"{kind}: {json.dumps(detail, default=float)} -> {'pass' if ok else 'FAIL'}")
    print(f"wrote {f}")
    return EXIT_STAT if (args.strict and not ok) else EXIT_OK


# --------------------------------------------------------------------------
# noise-test


def cmd_noise_test(cfg: RunConfig, args) -> int:
    d = cfg["diagnostics"]
    model = cfgmod.build_noise(cfg)
    seed = int(cfg["ensemble"]["seed"])
    rep = isometry_selftest(model, float(d["isometry_u"]), float(d["isometry_dt"]), int(d["isometry_samples"]), seed)
    cols = ["n_samples", "mean", "stderr", "variance", "variance_stderr", "expected_variance", "z_mean",
            "z_variance", "ok"]
    f = write_csv(_out_dir(args, cfg) / _name(cfg, "isometry"), cfg, seed, cols, [{c: getattr(rep, c) for c in cols}])
    print(rep.summary())
    print(f"wrote {f}")
    return EXIT_STAT if (args.strict and not rep.ok) else EXIT_OK


# --------------------------------------------------------------------------


COMMANDS = {
    "check": (cmd_check, "validate a configuration against every standing assumption"),
    "run": (cmd_run, "integrate one path and write its trajectory"),
    "ensemble": (cmd_ensemble, "Monte Carlo estimates of the configured functionals"),
    "converge": (cmd_converge, "refinement study (cauchy, reference, weak_bv, continuity, entropy)"),
    "noise-test": (cmd_noise_test, "isometry self-test of the noise sampler"),
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="INI file layered over the preset or defaults")
    common.add_argument("--preset", choices=sorted(cfgmod.PRESETS), help="start from a named preset")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config value (repeatable)")
    common.add_argument("--seed", type=int, help="master seed (same as --set ensemble.seed=...)")
    common.add_argument("--workers", type=int, help="worker processes; never changes results")
    common.add_argument("--strict", action="store_true", help="exit 4 when a statistical verdict fails")
    common.add_argument("--out", help="output directory (beats STOCHFV_OUT_DIR and output.dir)")
    common.add_argument("-q", "--quiet", action="store_true", help="no progress lines on stderr")
    p = argparse.ArgumentParser(prog="stochfv", description="Finite volume solver for stochastic conservation laws.")
    sub = p.add_subparsers(dest="command", required=True)
    for name, (_, help_) in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=help_)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING, format="[stochfv] %(levelname)s: %(message)s", stream=sys.stderr)
    try:
        overrides = list(args.overrides)
        if args.seed is not None:
            overrides.append(f"ensemble.seed={args.seed}")
        cfg = load_config(args.config, args.preset, overrides)
        if args.command != "check" and not _run_checks(cfg, verbose=False):
            return EXIT_INVALID
        return COMMANDS[args.command][0](cfg, args)
    except (ConfigError, ModelError, SchemeError, MeshError, OSError) as err:
        print(f"stochfv: error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (BlowUpError, EnsembleError) as err:
        print(f"stochfv: runtime failure: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
