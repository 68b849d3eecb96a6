"""Explicit finite volume time stepping with frozen-state noise increments.

The engine advances a batch of paths at once (array shape ``(paths, cells)``)
and hands every step to a list of observers.  A single trajectory is the
special case of one path plus a recording observer.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .mesh import Mesh
from .models import FluxModel, VelocityField, cell_integrals, interface_velocity_averages
from .noise import EventStream, NoiseModel, ZeroNoise, noise_increment, stream_for

log = logging.getLogger(__name__)

DT_RULES = ("cfl", "explicit", "coupling")
SCHEMES = ("split", "upwind")
RECORD_LEVELS = ("states", "events")


class SchemeError(ValueError):
    """Invalid time-stepping configuration or scheme precondition."""


class BlowUpError(RuntimeError):
    def __init__(self, rows, step: int, cell: int, path_ids=None):
        self.rows = np.asarray(rows, dtype=int)
        self.step = int(step)
        self.cell = int(cell)
        self.path_ids = None if path_ids is None else np.asarray(path_ids)[self.rows]
        who = f"path {self.path_ids.tolist()}" if self.path_ids is not None else f"rows {self.rows.tolist()}"
        super().__init__(f"non-finite state at step {step}, cell {cell} ({who})")


@dataclass(frozen=True)
class SchemeConfig:
    T: float
    xi: float = 0.5
    dt_rule: str = "cfl"
    N: int | None = None
    dt_coeff: float = 1.0
    dt_exponent: float = 1.5
    scheme: str = "split"
    record_level: str = "events"
    quad_time: int = 4
    quad_space: int = 4

    def __post_init__(self):
        if not self.T > 0:
            raise SchemeError(f"T must be positive, got {self.T}")
        if not 0 <= self.xi < 1:
            raise SchemeError(f"xi must lie in [0, 1), got {self.xi}")
        if self.dt_rule not in DT_RULES:
            raise SchemeError(f"dt_rule must be one of {DT_RULES}")
        if self.scheme not in SCHEMES:
            raise SchemeError(f"scheme must be one of {SCHEMES}")
        if self.record_level not in RECORD_LEVELS:
            raise SchemeError(f"record_level must be one of {RECORD_LEVELS}")
        if self.dt_rule == "explicit" and self.N is None:
            raise SchemeError("dt_rule 'explicit' needs N")
        if self.N is not None and self.N < 0:
            raise SchemeError("N must be nonnegative")
        if self.dt_rule == "coupling":
            if not self.dt_exponent > 1:
                raise SchemeError(f"coupling exponent p must exceed 1, got {self.dt_exponent}")
            if not self.dt_coeff > 0:
                raise SchemeError("coupling coefficient must be positive")


def cfl_bound(mesh: Mesh, flux: FluxModel, vfield: VelocityField, xi: float) -> float:
    """(1 - xi) alpha^2 h / (c_f V); infinite when c_f V = 0."""
    cv = flux.c_f * vfield.V
    if cv == 0:
        return math.inf
    return (1.0 - xi) * mesh.alpha**2 * mesh.h / cv


def steps_for(T: float, dt_max: float) -> int:
    """Smallest N with T / N <= dt_max."""
    N = max(1, math.ceil(T / dt_max))
    while T / N > dt_max:
        N += 1
    return N


def cfl_dt(mesh: Mesh, flux: FluxModel, vfield: VelocityField, xi: float, T: float, n_min: int = 16) -> float:
    """Largest T/N not exceeding the CFL bound; T/n_min when c_f V = 0."""
    bound = cfl_bound(mesh, flux, vfield, xi)
    if math.isinf(bound):
        return T / n_min
    return T / steps_for(T, bound)


def time_grid(config: SchemeConfig, mesh: Mesh, flux: FluxModel, vfield: VelocityField) -> tuple[int, float]:
    """Resolve (N, dt) for the configured rule, enforcing the CFL inequality where required."""
    T = config.T
    bound = cfl_bound(mesh, flux, vfield, config.xi)
    if config.dt_rule == "explicit":
        N = int(config.N)
        return N, (T / N if N > 0 else T)
    if config.dt_rule == "cfl":
        if config.N is not None:
            N = int(config.N)
            dt = T / N if N > 0 else T
            if N > 0 and dt > bound:
                raise SchemeError(
                    f"dt = {dt:.6g} exceeds the CFL bound (1-xi) alpha^2 h/(c_f V) = {bound:.6g}"
                )
            return N, dt
        N = steps_for(T, bound) if not math.isinf(bound) else 16
        return N, T / N
    target = config.dt_coeff * mesh.h**config.dt_exponent
    N = steps_for(T, target)
    dt = T / N
    if dt > bound:
        raise SchemeError(
            f"coupling rule dt = {dt:.6g} exceeds the CFL bound {bound:.6g}; lower dt_coeff or refine"
        )
    return N, dt


# --------------------------------------------------------------------------
# initial data


class ConstantInitial:
    def __init__(self, value: float = 0.0):
        self.value = float(value)

    def __call__(self, x):
        return np.full(np.shape(x)[:-1], self.value)


class SineInitial:
    """offset + amplitude * prod_k sin(2 pi wavenumber (x_k - lo_k) / L_k)."""

    def __init__(self, amplitude: float, bounds, wavenumber: int = 1, offset: float = 0.0):
        self.amplitude = float(amplitude)
        self.offset = float(offset)
        self.wavenumber = int(wavenumber)
        self.lo = np.array([b[0] for b in bounds], dtype=float)
        self.L = np.array([b[1] - b[0] for b in bounds], dtype=float)

    def __call__(self, x):
        s = np.sin(2 * np.pi * self.wavenumber * (np.asarray(x) - self.lo) / self.L)
        return self.offset + self.amplitude * np.prod(s, axis=-1)


class GaussianInitial:
    def __init__(self, amplitude: float, center, width: float):
        self.amplitude = float(amplitude)
        self.center = np.atleast_1d(np.asarray(center, dtype=float))
        self.width = float(width)

    def __call__(self, x):
        r2 = ((np.asarray(x) - self.center) ** 2).sum(axis=-1)
        return self.amplitude * np.exp(-r2 / (2 * self.width**2))


class BoxInitial:
    """value on the box [lo, hi) (per axis), 0 elsewhere."""

    def __init__(self, lo, hi, value: float = 1.0):
        self.lo = np.atleast_1d(np.asarray(lo, dtype=float))
        self.hi = np.atleast_1d(np.asarray(hi, dtype=float))
        self.value = float(value)

    def __call__(self, x):
        x = np.asarray(x)
        inside = np.all((x >= self.lo) & (x < self.hi), axis=-1)
        return np.where(inside, self.value, 0.0)


def project_initial(u0, mesh: Mesh, order: int = 4) -> np.ndarray:
    """Cell averages of ``u0`` by tensor Gauss quadrature."""
    return cell_integrals(mesh, u0, order) / mesh.cell_volume


def l2_norm_squared(u0, mesh: Mesh, order: int = 16) -> float:
    """||u0||^2 over the domain, integrated cell by cell at high order."""
    return float(cell_integrals(mesh, lambda x: np.asarray(u0(x)) ** 2, order).sum())


# --------------------------------------------------------------------------
# core update


def _cell_divergence(mesh: Mesh, G: np.ndarray) -> np.ndarray:
    """Net outward flux per cell from per-face fluxes G (positive from first to second cell)."""
    pad = np.concatenate([G, np.zeros(G.shape[:-1] + (1,))], axis=-1)
    terms = pad[..., mesh.cell_faces] * mesh.cell_face_sign
    # fixed left-to-right order keeps results independent of batch shape
    acc = terms[..., 0]
    for j in range(1, terms.shape[-1]):
        acc = acc + terms[..., j]
    return acc


def face_fluxes(mesh: Mesh, flux: FluxModel, scheme: str, u, vplus, vminus):
    """Numerical fluxes through every face, oriented along the face normal, plus f(u) per cell."""
    first, second = mesh.face_cells[:, 0], mesh.face_cells[:, 1]
    fu = flux.f(u)
    if scheme == "split":
        f1, f2 = flux.f1(u), flux.f2(u)
        G = mesh.face_measure * (
            vplus * (f1[..., first] + f2[..., second]) - vminus * (f1[..., second] + f2[..., first])
        )
    else:
        w = vplus - vminus
        G = mesh.face_measure * w * np.where(w >= 0, fu[..., first], fu[..., second])
    return G, fu


def flux_rate(mesh: Mesh, flux: FluxModel, scheme: str, u, vplus, vminus):
    """Deterministic rate -(1/|K|) sum_s (numerical flux out of K); returns (rate, f(u))."""
    G, fu = face_fluxes(mesh, flux, scheme, u, vplus, vminus)
    return -_cell_divergence(mesh, G) / mesh.cell_volume, fu


def _check_upwind(flux: FluxModel, u) -> None:
    f2 = np.abs(flux.f2(u))
    tol = 1e-12 * (1.0 + flux.c_f * flux.bound_M)
    if np.any(f2 > tol):
        i = np.unravel_index(int(np.argmax(f2)), f2.shape)
        raise SchemeError(
            f"upwind scheme needs f2 = 0 on the states, but |f2({float(np.asarray(u)[i]):g})| = {float(f2[i]):.3e}"
        )


@dataclass
class StateField:
    values: np.ndarray
    n: int = 0
    t: float = 0.0


def _single_step(scheme, state, mesh, flux, vfield, noise, stream, dt, order):
    u = np.asarray(state.values, dtype=float)
    if scheme == "upwind":
        _check_upwind(flux, u)
    vp, vm = interface_velocity_averages(vfield, mesh, state.t, dt, order=order)
    rate, _ = flux_rate(mesh, flux, scheme, u, vp, vm)
    incr = noise_increment(noise, u, (state.t, state.t + dt), stream)
    out = u + dt * rate + incr
    if not np.all(np.isfinite(out)):
        raise BlowUpError([0], state.n, int(np.argmax(~np.isfinite(out))))
    return StateField(out, state.n + 1, state.t + dt)


def step_flux_splitting(state, mesh, flux, vfield, noise, stream, dt, order=(4, 4)) -> StateField:
    return _single_step("split", state, mesh, flux, vfield, noise, stream, dt, order)


def step_upwind(state, mesh, flux, vfield, noise, stream, dt, order=(4, 4)) -> StateField:
    return _single_step("upwind", state, mesh, flux, vfield, noise, stream, dt, order)


# --------------------------------------------------------------------------
# batched engine


@dataclass(frozen=True, eq=False)
class Problem:
    """Immutable bundle of everything a path needs except its initial state and noise stream."""

    mesh: Mesh
    flux: FluxModel
    vfield: VelocityField
    noise: NoiseModel
    config: SchemeConfig
    N: int
    dt: float
    edges: np.ndarray
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def build(cls, mesh, flux, vfield, noise, config: SchemeConfig) -> "Problem":
        if vfield.dimension != mesh.dimension:
            raise SchemeError("velocity dimension does not match the mesh")
        N, dt = time_grid(config, mesh, flux, vfield)
        edges = np.arange(N + 1) * dt
        if N > 0:
            edges[-1] = config.T
        return cls(mesh, flux, vfield, noise or ZeroNoise(), config, N, dt, edges)

    @property
    def order(self):
        return (self.config.quad_time, self.config.quad_space)

    def face_averages(self, n: int):
        key = 0 if not self.vfield.time_dependent else n
        hit = self._cache.get(("v", key))
        if hit is None:
            hit = interface_velocity_averages(self.vfield, self.mesh, n * self.dt, self.dt, order=self.order)
            if not self.vfield.time_dependent:
                self._cache[("v", key)] = hit
        return hit

    def streams(self, seed: int, path_ids) -> list:
        return [stream_for(self.noise, seed, self.config.T, int(p)) for p in path_ids]


@dataclass
class StepData:
    """Everything observers may need about one step of a batch."""

    problem: Problem
    n: int
    t0: float
    dt: float
    u: np.ndarray
    u_next: np.ndarray
    rate: np.ndarray
    comp: np.ndarray
    incr: np.ndarray
    fu: np.ndarray
    vplus: np.ndarray
    vminus: np.ndarray
    ev_row: np.ndarray
    ev_tau: np.ndarray
    ev_mark: np.ndarray
    ev_eta: np.ndarray

    @property
    def face_df(self) -> np.ndarray:
        """f(u_second) - f(u_first) per face."""
        fc = self.problem.mesh.face_cells
        return self.fu[..., fc[:, 1]] - self.fu[..., fc[:, 0]]


class Observer:
    def start(self, problem: Problem, u0: np.ndarray, path_ids: np.ndarray) -> None:
        pass

    def step(self, data: StepData) -> None:
        pass

    def finish(self, u: np.ndarray) -> None:
        pass


def _batch_events(problem: Problem, streams):
    lens = np.array([len(s) for s in streams], dtype=int)
    if lens.sum() == 0 or problem.N == 0:
        z = np.empty(0)
        return np.empty(0, dtype=int), z, z, np.zeros(problem.N + 1, dtype=int)
    rows = np.repeat(np.arange(len(streams)), lens)
    tau = np.concatenate([s.times for s in streams])
    mark = np.concatenate([s.marks for s in streams])
    step = np.clip(np.searchsorted(problem.edges, tau, side="left") - 1, 0, problem.N - 1)
    order = np.lexsort((tau, rows, step))
    rows, tau, mark, step = rows[order], tau[order], mark[order], step[order]
    bounds = np.searchsorted(step, np.arange(problem.N + 1), side="left")
    return rows, tau, mark, bounds


def integrate(problem: Problem, u0, streams, observers=(), path_ids=None, stats: dict | None = None) -> np.ndarray:
    """Advance a batch of paths from the initial states ``u0`` (paths, cells) to T.

    Returns the final states.  When ``stats`` is given it receives the largest
    |u| seen instead of a logged warning about states outside [-M, M].
    """
    u = np.array(u0, dtype=float, ndmin=2)
    P = u.shape[0]
    if len(streams) != P:
        raise ValueError("one event stream per path is required")
    path_ids = np.arange(P) if path_ids is None else np.asarray(path_ids)
    for ob in observers:
        ob.start(problem, u, path_ids)
    mesh, flux, noise, dt = problem.mesh, problem.flux, problem.noise, problem.dt
    scheme = problem.config.scheme
    rows, tau, mark, bounds = _batch_events(problem, streams)
    noiseless = isinstance(noise, ZeroNoise)
    warned = stats is not None
    max_abs = float(np.max(np.abs(u), initial=0.0))
    for n in range(problem.N):
        t0 = problem.edges[n]
        if scheme == "upwind":
            _check_upwind(flux, u)
        if not warned and np.max(np.abs(u)) > flux.bound_M:
            log.warning("state magnitude %.4g exceeds the flux bound M = %g at step %d", np.max(np.abs(u)), flux.bound_M, n)
            warned = True
        vp, vm = problem.face_averages(n)
        rate, fu = flux_rate(mesh, flux, scheme, u, vp, vm)
        sl = slice(bounds[n], bounds[n + 1])
        ev_row, ev_mark = rows[sl], mark[sl]
        jumps = np.zeros_like(u)
        if ev_row.size:
            ev_eta = noise.eta(u[ev_row], ev_mark[:, None])
            np.add.at(jumps, ev_row, ev_eta)
        else:
            ev_eta = np.empty((0, u.shape[1]))
        comp = np.zeros_like(u) if noiseless else noise.compensator(u)
        incr = jumps - dt * comp
        u_next = u + dt * rate + incr
        finite = np.isfinite(u_next)
        if not finite.all():
            bad = np.flatnonzero(~finite.all(axis=1))
            cell = int(np.argmax(~finite[bad[0]]))
            raise BlowUpError(bad, n, cell, path_ids)
        if observers:
            data = StepData(problem, n, t0, dt, u, u_next, rate, comp, incr, fu, vp, vm,
                            ev_row, tau[sl] - t0, ev_mark, ev_eta)
            for ob in observers:
                ob.step(data)
        u = u_next
        if stats is not None:
            max_abs = max(max_abs, float(np.max(np.abs(u), initial=0.0)))
    if stats is not None:
        stats["max_abs"] = max_abs
    for ob in observers:
        ob.finish(u)
    return u


# --------------------------------------------------------------------------
# single trajectories


class _Recorder(Observer):
    def __init__(self, level: str):
        self.level = level

    def start(self, problem, u0, path_ids):
        self.states = [u0[0].copy()]
        self.rates, self.increments, self.flux_diff = [], [], []

    def step(self, d: StepData):
        self.states.append(d.u_next[0].copy())
        if self.level == "events":
            self.rates.append(d.rate[0].copy())
            self.increments.append(d.incr[0].copy())
            self.flux_diff.append(d.face_df[0].copy())


@dataclass(eq=False)
class Trajectory:
    problem: Problem
    states: np.ndarray
    stream: EventStream
    rates: np.ndarray | None = None
    increments: np.ndarray | None = None
    flux_diff: np.ndarray | None = None
    ring_max: np.ndarray | None = None

    @property
    def times(self) -> np.ndarray:
        return self.problem.edges

    @property
    def N(self) -> int:
        return self.problem.N

    @property
    def dt(self) -> float:
        return self.problem.dt

    def _need_events(self):
        if self.rates is None:
            raise SchemeError("trajectory was recorded without events; use record_level 'events'")

    def _offset_value(self, n: int, offset: float, cells=slice(None)):
        """v_K^n(t_n + offset) from the stored rate and the realized events."""
        self._need_events()
        noise = self.problem.noise
        u = self.states[n][cells]
        t0 = self.times[n]
        jumps = np.zeros_like(u)
        sl = self.stream.window(t0, self.times[n + 1])
        for tau, z in zip(self.stream.times[sl], self.stream.marks[sl]):
            if tau - t0 <= offset:
                jumps = jumps + noise.eta(u, z)
        comp = noise.compensator(u)
        return (u + offset * self.rates[n][cells]) + (jumps - offset * comp)

    def reconstruct(self, s: float, cell=slice(None)):
        """Time-continuous approximation v(s) in the given cell(s)."""
        T = self.problem.config.T
        if not 0 <= s <= T:
            raise ValueError(f"s = {s} outside [0, {T}]")
        exact = np.flatnonzero(self.times == s)
        if exact.size:
            return self.states[int(exact[0])][cell]
        n = int(np.searchsorted(self.times, s, side="right") - 1)
        return self._offset_value(n, s - self.times[n], cell)

    def endpoint_defect(self) -> float:
        """max |v_K^n(t_n + dt) - u_K^{n+1}| over all steps and cells."""
        worst = 0.0
        for n in range(self.N):
            v = self._offset_value(n, self.dt)
            worst = max(worst, float(np.max(np.abs(v - self.states[n + 1]), initial=0.0)))
        return worst

    def replay_defect(self) -> float:
        """Max relative mismatch of consecutive states against the scheme identity."""
        self._need_events()
        p = self.problem
        worst = 0.0
        for n in range(self.N):
            vp, vm = p.face_averages(n)
            rate, _ = flux_rate(p.mesh, p.flux, p.config.scheme, self.states[n], vp, vm)
            incr = noise_increment(p.noise, self.states[n], (self.times[n], self.times[n + 1]), self.stream)
            pred = self.states[n] + p.dt * rate + incr
            scale = 1.0 + np.max(np.abs(self.states[n + 1]))
            worst = max(worst, float(np.max(np.abs(pred - self.states[n + 1]))) / scale)
        return worst

    def mass(self) -> np.ndarray:
        return self.states @ self.problem.mesh.cell_volume


def run(problem: Problem, u0_cells, seed: int = 0, path_index: int = 0, stream: EventStream | None = None) -> Trajectory:
    """Single path from projected initial cell values."""
    stream = stream if stream is not None else stream_for(problem.noise, seed, problem.config.T, path_index)
    rec = _Recorder(problem.config.record_level)
    u0 = np.asarray(u0_cells, dtype=float)
    integrate(problem, u0[None, :], [stream], [rec], np.array([path_index]))
    ring = problem.mesh.outer_ring()
    states = np.array(rec.states)
    ring_max = np.max(np.abs(states[:, ring]), axis=1) if ring.size else np.zeros(states.shape[0])
    traj = Trajectory(problem, states, stream, ring_max=ring_max)
    if rec.level == "events":
        C, F = problem.mesh.n_cells, problem.mesh.n_faces
        traj.rates = np.array(rec.rates).reshape(-1, C)
        traj.increments = np.array(rec.increments).reshape(-1, C)
        traj.flux_diff = np.array(rec.flux_diff).reshape(-1, F)
    _boundary_contact(traj)
    return traj


def _boundary_contact(traj: Trajectory) -> None:
    # only meaningful when the data start away from the box boundary
    mesh = traj.problem.mesh
    norm = math.sqrt(float(traj.states[0] ** 2 @ mesh.cell_volume))
    thr = 1e-8 * norm
    if traj.ring_max[0] <= thr and np.any(traj.ring_max > thr):
        n = int(np.argmax(traj.ring_max > thr))
        log.warning("solution reaches the outer cell ring at step %d (max |u| = %.3e)", n, traj.ring_max[n])
