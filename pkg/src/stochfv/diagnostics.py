"""Estimate functionals, entropy residuals and refinement studies.

Each functional is an observer that accumulates per-path values while the
engine runs, so ensembles never need to keep full trajectories.  The
trajectory-level functions replay a recorded :class:`Trajectory` through the
same observers.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from ._quadrature import gauss_unit, tensor_rule
from .mesh import Mesh, prolong, restrict
from .models import BumpTestFunction, EntropyPair
from .solver import Observer, Problem, StepData, Trajectory, flux_rate

# --------------------------------------------------------------------------
# statistics


@dataclass
class SeriesStats:
    """Streaming per-index mean and M2 (Chan et al. pairwise merge)."""

    count: int
    mean: np.ndarray
    m2: np.ndarray

    @classmethod
    def from_batch(cls, values) -> "SeriesStats":
        v = np.asarray(values, dtype=float)
        if v.shape[0] == 0:
            return cls(0, np.zeros(v.shape[1:]), np.zeros(v.shape[1:]))
        mean = v.mean(axis=0)
        return cls(v.shape[0], mean, ((v - mean) ** 2).sum(axis=0))

    def merge(self, other: "SeriesStats") -> "SeriesStats":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        n = self.count + other.count
        delta = other.mean - self.mean
        mean = self.mean + delta * (other.count / n)
        m2 = self.m2 + other.m2 + delta**2 * (self.count * other.count / n)
        return SeriesStats(n, mean, m2)

    @property
    def variance(self):
        return self.m2 / (self.count - 1) if self.count > 1 else np.zeros_like(self.m2)

    @property
    def stderr(self):
        return np.sqrt(self.variance / max(self.count, 1))


def mean_stderr(values) -> tuple[float, float]:
    v = np.asarray(values, dtype=float)
    if v.size == 0:
        return math.nan, math.nan
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else 0.0
    return float(v.mean()), se


@dataclass
class DiagnosticsReport:
    name: str
    values: np.ndarray
    mean: float
    stderr: float
    bound: float | None = None
    verdict: bool | None = None
    margin: float | None = None
    detail: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, name, values, **kw) -> "DiagnosticsReport":
        m, se = mean_stderr(values)
        return cls(name, np.asarray(values, dtype=float), m, se, **kw)

    def summary(self) -> str:
        s = f"{self.name}: mean={self.mean:.6g} stderr={self.stderr:.3g}"
        if self.bound is not None:
            s += f" bound={self.bound:.6g}"
        if self.verdict is not None:
            s += f" -> {'pass' if self.verdict else 'FAIL'}"
        return s


# --------------------------------------------------------------------------
# simple functionals


def l2_moment(values, mesh: Mesh):
    """sum_K |K| u_K^2 (along the last axis)."""
    u = np.asarray(values, dtype=float)
    return (u * u) @ mesh.cell_volume


class Collector(Observer):
    """Base class: per-path results in ``per_path`` and per-step series in ``series``."""

    name = "collector"

    def fresh(self) -> "Collector":
        raise NotImplementedError

    def results(self) -> tuple[dict, dict]:
        return {}, {}


class MomentObserver(Collector):
    name = "moment"

    def fresh(self):
        return MomentObserver()

    def start(self, problem, u0, path_ids):
        self.mesh = problem.mesh
        self.rows = [l2_moment(u0, self.mesh)]

    def step(self, d: StepData):
        self.rows.append(l2_moment(d.u_next, self.mesh))

    def results(self):
        m = np.stack(self.rows, axis=1)
        return {"sup": m.max(axis=1), "final": m[:, -1]}, {"moment": SeriesStats.from_batch(m)}


class WeakBVObserver(Collector):
    """Time-integrated face terms |s| |v.n| (f(u_s) - f(u_K))^2 and their absolute-value local analogue."""

    name = "weak_bv"

    def __init__(self, center=None, radius=None):
        self.center = center
        self.radius = radius

    def fresh(self):
        return WeakBVObserver(self.center, self.radius)

    def start(self, problem, u0, path_ids):
        mesh = problem.mesh
        P = u0.shape[0]
        self.sq = np.zeros(P)
        self.abs_global = np.zeros(P)
        self.abs_local = np.zeros(P)
        self.h = mesh.h
        if self.radius is None:
            self.local_faces = np.arange(mesh.n_faces)
        else:
            if not self.radius > mesh.h:
                raise ValueError(f"local radius R = {self.radius} must exceed h = {mesh.h}")
            center = self.center if self.center is not None else [0.5 * (a + b) for a, b in mesh.bounds]
            cells = np.zeros(mesh.n_cells, dtype=bool)
            cells[mesh.cells_in_ball(center, self.radius)] = True
            fc = mesh.face_cells
            self.local_faces = np.flatnonzero(cells[fc[:, 0]] | cells[fc[:, 1]])

    def step(self, d: StepData):
        w = d.problem.mesh.face_measure * (d.vplus + d.vminus)
        df = d.face_df
        adf = np.abs(df)
        self.sq += d.dt * ((df * df) @ w)
        self.abs_global += d.dt * (adf @ w)
        lf = self.local_faces
        self.abs_local += d.dt * (adf[:, lf] @ w[lf])

    def results(self):
        return {
            "squared": self.sq,
            "abs_global": self.abs_global,
            "abs_local": self.abs_local,
            "abs_local_scaled": self.abs_local * math.sqrt(self.h),
        }, {}


class ContinuityObserver(Collector):
    """Exact int over each step of (v_K^n(s) - u_K^n)^2, weighted by |K| and summed."""

    name = "continuity"

    def fresh(self):
        return ContinuityObserver()

    def start(self, problem, u0, path_ids):
        self.vol = problem.mesh.cell_volume
        self.total = np.zeros(u0.shape[0])

    def step(self, d: StepData):
        dt = d.dt
        a = d.rate - d.comp
        self.total += (a * a) @ self.vol * (dt**3 / 3.0)
        if d.ev_row.size == 0:
            return
        running = {}
        for row, tau, eta in zip(d.ev_row, d.ev_tau, d.ev_eta):
            prev = running.get(row)
            contrib = eta * a[row] * (dt * dt - tau * tau) + eta * eta * (dt - tau)
            if prev is not None:
                contrib = contrib + 2.0 * eta * prev * (dt - tau)
                running[row] = prev + eta
            else:
                running[row] = eta.copy()
            self.total[row] += contrib @ self.vol

    def results(self):
        return {"l2_squared": self.total}, {}


class EntropyObserver(Collector):
    """Four-term discrete entropy functional for a pair (beta, F^beta) and a bump test function.

    The mark-averaged terms int I1 dm, int I2 dm and F^beta are smooth in u and
    are tabulated once per problem on a fine grid (cubic splines); states
    outside the table fall back to direct quadrature.  Only cells where the
    test function is nonzero are touched.
    """

    name = "entropy"

    def __init__(self, pair: EntropyPair, psi: BumpTestFunction, label: str = "entropy", lam_order: int = 16,
                 table_points: int = 8001, table_span: float | None = None):
        self.pair = pair
        self.psi = psi
        self.name = label
        self.lam_order = lam_order
        self.table_points = table_points
        self.table_span = table_span
        self._tables = None

    def fresh(self):
        ob = EntropyObserver(self.pair, self.psi, self.name, self.lam_order, self.table_points, self.table_span)
        ob._tables = self._tables
        return ob

    # lambda-integrals over [0, 1]
    def _I1(self, u, eta):
        lam, w = gauss_unit(self.lam_order)
        return eta * (self.pair.dbeta(u[..., None] + lam * eta[..., None]) @ w)

    def _I2(self, u, eta):
        lam, w = gauss_unit(self.lam_order)
        return eta * eta * ((self.pair.d2beta(u[..., None] + lam * eta[..., None]) * (1 - lam)) @ w)

    def mark_terms_direct(self, noise, u):
        """(int I1 dm, int I2 dm) at states ``u`` by mark quadrature."""
        u = np.asarray(u, dtype=float)
        if noise.rate == 0:
            return np.zeros_like(u), np.zeros_like(u)
        z, w = noise.mark_quadrature()
        eta = noise.eta(u[..., None], z)
        uu = np.broadcast_to(u[..., None], eta.shape)
        return self._I1(uu, eta) @ w, self._I2(uu, eta) @ w

    def _build_tables(self, problem: Problem):
        span = self.table_span or max(4.0, 2 * problem.flux.bound_M)
        grid = np.linspace(-span, span, self.table_points)
        c, d = self.mark_terms_direct(problem.noise, grid)
        F = self.pair.F_beta(grid)
        self._tables = (span, CubicSpline(grid, c), CubicSpline(grid, d), CubicSpline(grid, F))

    def _lookup(self, u, noise):
        span, cs, ds, fs = self._tables
        c, d, F = cs(u), ds(u), fs(u)
        out = np.abs(u) > span
        if np.any(out):
            c[out], d[out] = self.mark_terms_direct(noise, u[out])
            F[out] = self.pair.F_beta(u[out])
        return c, d, F

    def start(self, problem, u0, path_ids):
        self.psi.validate(problem.mesh, problem.config.T)
        if self._tables is None:
            self._build_tables(problem)
        self.terms = np.zeros((4, u0.shape[0]))
        mesh = problem.mesh
        pts, w = tensor_rule(problem.config.quad_space, mesh.dimension)
        lower = mesh.cell_centroid - np.asarray(mesh.spacing) / 2
        self._x = lower[:, None, :] + pts[None, :, :] * np.asarray(mesh.spacing)
        self._w = w
        phi = mesh.cell_volume * (self.psi.space(self._x) @ w)
        grad = self.psi.grad_space(self._x)
        self.active = np.flatnonzero(phi != 0)
        self._phi = phi[self.active]
        self._grad = grad[self.active]
        self._xa = self._x[self.active]
        self._vol = mesh.cell_volume[self.active]
        if not problem.vfield.time_dependent:
            self._gamma = self._vol * ((problem.vfield(0.0, self._xa) * self._grad).sum(axis=-1) @ w)

    def _gamma_at(self, problem: Problem, t0: float, dt: float):
        if not problem.vfield.time_dependent:
            return self._gamma
        tn, tw = gauss_unit(problem.config.quad_time)
        vg = sum(wt * (problem.vfield(t0 + s * dt, self._xa) * self._grad).sum(axis=-1) for s, wt in zip(tn, tw))
        return self._vol * (vg @ self._w)

    def step(self, d: StepData):
        tau = float(self.psi.time_factor(d.t0))
        if tau == 0.0 or self.active.size == 0:
            return
        Psi = tau * self._phi
        W = (d.dt * tau) * self._gamma_at(d.problem, d.t0, d.dt)
        act = self.active
        u = d.u[:, act]
        pair = self.pair
        self.terms[0] -= (pair.beta(d.u_next[:, act]) - pair.beta(u)) @ Psi
        c, dd, F = self._lookup(u, d.problem.noise)
        self.terms[1] += F @ W
        self.terms[2] -= d.dt * (c @ Psi)
        self.terms[3] += d.dt * (dd @ Psi)
        if d.ev_row.size:
            i1 = self._I1(u[d.ev_row], d.ev_eta[:, act]) @ Psi
            np.add.at(self.terms[2], d.ev_row, i1)

    def results(self):
        t = self.terms
        return {
            "lhs": t.sum(axis=0),
            "time_term": t[0],
            "transport_term": t[1],
            "martingale_term": t[2],
            "compensator_term": t[3],
        }, {}


class SnapshotObserver(Collector):
    """Piecewise-constant-in-time states u^h(s) at fixed sample times."""

    name = "snapshots"

    def __init__(self, times):
        self.times = np.asarray(times, dtype=float)

    def fresh(self):
        return SnapshotObserver(self.times)

    def start(self, problem, u0, path_ids):
        P, C = u0.shape
        self.data = np.full((P, self.times.size, C), np.nan)
        idx = np.searchsorted(problem.edges, self.times, side="right") - 1
        self.idx = np.clip(idx, 0, problem.N)
        for j in np.flatnonzero(self.idx == 0):
            self.data[:, j] = u0

    def step(self, d: StepData):
        for j in np.flatnonzero(self.idx == d.n + 1):
            self.data[:, j] = d.u_next

    def results(self):
        return {"states": self.data}, {}


# --------------------------------------------------------------------------
# trajectory-level functionals


def trajectory_steps(traj: Trajectory):
    """Yield StepData for every step of a recorded trajectory."""
    traj._need_events()
    p = traj.problem
    noise = p.noise
    for n in range(traj.N):
        u = traj.states[n][None, :]
        vp, vm = p.face_averages(n)
        rate, fu = flux_rate(p.mesh, p.flux, p.config.scheme, u, vp, vm)
        t0 = traj.times[n]
        sl = traj.stream.window(t0, traj.times[n + 1])
        marks = traj.stream.marks[sl]
        rows = np.zeros(marks.size, dtype=int)
        eta = noise.eta(u[rows], marks[:, None]) if marks.size else np.empty((0, u.shape[1]))
        yield StepData(
            p, n, t0, p.dt, u, traj.states[n + 1][None, :], traj.rates[n][None, :],
            np.asarray(noise.compensator(u)), traj.increments[n][None, :], fu, vp, vm,
            rows, traj.stream.times[sl] - t0, marks, eta,
        )


def _replay(traj: Trajectory, obs: Collector) -> dict:
    obs.start(traj.problem, traj.states[:1], np.array([traj.stream.path_index]))
    for d in trajectory_steps(traj):
        obs.step(d)
    obs.finish(traj.states[-1:])
    return obs.results()[0]


def weak_bv_squared(traj: Trajectory) -> float:
    return float(_replay(traj, WeakBVObserver())["squared"][0])


def weak_bv_local(traj: Trajectory, radius: float, center=None) -> float:
    return float(_replay(traj, WeakBVObserver(center, radius))["abs_local"][0])


def continuity_error(traj: Trajectory, samples_per_step: int | None = None) -> float:
    """||v^h - u^h||^2 over space-time for one path.

    Exact per-step integral by default; with ``samples_per_step`` a midpoint
    rule through the time-continuous reconstruction instead.
    """
    if samples_per_step is None:
        return float(_replay(traj, ContinuityObserver())["l2_squared"][0])
    vol = traj.problem.mesh.cell_volume
    dt = traj.dt
    total = 0.0
    for n in range(traj.N):
        for k in range(samples_per_step):
            off = (k + 0.5) * dt / samples_per_step
            diff = traj._offset_value(n, off) - traj.states[n]
            total += (diff * diff) @ vol * (dt / samples_per_step)
    return total


def entropy_residual_path(traj: Trajectory, pair: EntropyPair, psi: BumpTestFunction) -> dict:
    return {k: float(v[0]) for k, v in _replay(traj, EntropyObserver(pair, psi)).items()}


# --------------------------------------------------------------------------
# report builders


def moment_bound_check(moment: SeriesStats, sup_per_path, dt: float, c_eta: float, u0_norm2: float) -> DiagnosticsReport:
    """sup_n (mean + 3 se) against e^{c_eta T}||u0||^2, and the per-step (1 + dt c_eta)^n bound."""
    N = moment.mean.size - 1
    T = N * dt
    bound = math.exp(c_eta * T) * u0_norm2
    upper = moment.mean + 3 * moment.stderr
    sup_upper = float(upper.max())
    step_bound = (1.0 + dt * c_eta) ** np.arange(N + 1) * u0_norm2
    step_ok = moment.mean <= step_bound + 3 * moment.stderr
    bad = np.flatnonzero(~step_ok)
    rep = DiagnosticsReport.from_values(
        "moment_bound",
        sup_per_path,
        bound=bound,
        verdict=bool(sup_upper <= bound),
        margin=bound - sup_upper,
    )
    rep.detail.update(
        sup_mean_plus_3se=sup_upper,
        argmax_step=int(upper.argmax()),
        per_step_ok=bool(step_ok.all()),
        first_violating_step=int(bad[0]) if bad.size else None,
        step_margin=float(np.min(step_bound + 3 * moment.stderr - moment.mean)),
        u0_norm2=u0_norm2,
        c_eta=c_eta,
    )
    return rep


def loglog_slope(x, y) -> float:
    return float(np.polyfit(np.log(np.asarray(x, float)), np.log(np.asarray(y, float)), 1)[0])


# --------------------------------------------------------------------------
# convergence


def _box_mask(mesh: Mesh, box) -> np.ndarray:
    c = mesh.cell_centroid
    m = np.ones(mesh.n_cells, dtype=bool)
    for k, (lo, hi) in enumerate(box):
        m &= (c[:, k] > lo) & (c[:, k] < hi)
    return m


def interior_box(mesh: Mesh, fraction: float = 0.5):
    """Centered sub-box covering ``fraction`` of each axis."""
    out = []
    for lo, hi in mesh.bounds:
        pad = 0.5 * (1 - fraction) * (hi - lo)
        out.append((lo + pad, hi - pad))
    return out


def lp_difference(coarse_states, coarse: Mesh, fine_states, fine: Mesh, box, p: float, weights) -> np.ndarray:
    """Per-path (sum_j w_j sum_K |K| |prolong(u_c) - u_f|^p over the box)^(1/p)."""
    diff = prolong(coarse_states, coarse, fine) - fine_states
    mask = _box_mask(fine, box)
    vol = fine.cell_volume * mask
    per_time = (np.abs(diff) ** p) @ vol
    return (per_time @ np.asarray(weights)) ** (1.0 / p)


@dataclass
class ConvergenceTable:
    h: list
    dt: list
    differences: list
    stderr: list
    ratios: list
    order: float | None = None
    mode: str = "cauchy"

    def rows(self):
        out = []
        for i, d in enumerate(self.differences):
            out.append({
                "h_coarse": self.h[i],
                "dt_coarse": self.dt[i],
                "mean": d,
                "stderr": self.stderr[i],
                "ratio": self.ratios[i - 1] if i > 0 and self.mode == "cauchy" else None,
            })
        return out

    @property
    def monotone(self) -> bool:
        return all(b < a for a, b in zip(self.differences, self.differences[1:]))


def convergence_study(problems, u0, econfig, p: float = 1.0, box=None, sample_times=None, progress=None) -> ConvergenceTable:
    """Coupled-noise Cauchy study over nested meshes.

    Every resolution uses the same master seed, so path i sees the same event
    stream on every grid.  Successive differences are taken in L^p over an
    interior box and over the sample times (equal weights).
    """
    from .ensemble import run_ensemble
    from .solver import project_initial

    _check_nested(problems)
    T = problems[0].config.T
    if sample_times is None:
        sample_times = (np.arange(4) + 0.5) * T / 4
    sample_times = np.asarray(sample_times, dtype=float)
    weights = np.full(sample_times.size, T / sample_times.size)
    box = box or interior_box(problems[0].mesh)
    snaps = []
    for pr in problems:
        res = run_ensemble(econfig, pr, project_initial(u0, pr.mesh), [SnapshotObserver(sample_times)], progress=progress)
        snaps.append((pr, res.per_path["snapshots"]["states"], res.path_ids))
    diffs, ses = [], []
    for (pc, sc, ic), (pf, sf, if_) in zip(snaps, snaps[1:]):
        common, a, b = np.intersect1d(ic, if_, return_indices=True)
        d = lp_difference(sc[a], pc.mesh, sf[b], pf.mesh, box, p, weights)
        m, se = mean_stderr(d)
        diffs.append(m)
        ses.append(se)
    ratios = [a / b if b > 0 else math.inf for a, b in zip(diffs, diffs[1:])]
    return ConvergenceTable([pr.mesh.h for pr in problems[:-1]], [pr.dt for pr in problems[:-1]], diffs, ses, ratios)


def reference_convergence(problems, reference: Problem, u0, p: float = 1.0) -> ConvergenceTable:
    """Noise-free runs against a fine reference: final-time L^p error and fitted order in h."""
    from .solver import integrate, project_initial
    from .noise import empty_stream

    ref = integrate(reference, project_initial(u0, reference.mesh)[None], [empty_stream(reference.config.T)])[0]
    errs, hs, dts = [], [], []
    for pr in problems:
        u = integrate(pr, project_initial(u0, pr.mesh)[None], [empty_stream(pr.config.T)])[0]
        r = ref
        mesh = reference.mesh
        while mesh.n_cells > pr.mesh.n_cells:
            coarse = _coarsen(mesh)
            r = restrict(r, mesh, coarse)
            mesh = coarse
        if mesh.counts != pr.mesh.counts:
            raise ValueError("reference mesh is not a dyadic refinement of every study mesh")
        errs.append(float(((np.abs(u - r) ** p) @ pr.mesh.cell_volume) ** (1.0 / p)))
        hs.append(pr.mesh.h)
        dts.append(pr.dt)
    order = loglog_slope(hs, errs)
    ratios = [a / b for a, b in zip(errs, errs[1:])]
    return ConvergenceTable(hs, dts, errs, [0.0] * len(errs), ratios, order=order, mode="reference")


def _coarsen(mesh: Mesh) -> Mesh:
    from .mesh import build_uniform_mesh

    if any(n % 2 for n in mesh.counts):
        raise ValueError("mesh cannot be coarsened by 2")
    return build_uniform_mesh(mesh.dimension, mesh.bounds, tuple(n // 2 for n in mesh.counts), mesh.periodic)


def _check_nested(problems) -> None:
    from .mesh import is_nested

    for a, b in zip(problems, problems[1:]):
        if not is_nested(a.mesh, b.mesh):
            raise ValueError(f"meshes {a.mesh.counts} and {b.mesh.counts} are not nested by a factor 2")


# --------------------------------------------------------------------------
# refinement studies over a list of problems sharing the master seed


@dataclass
class StudyTable:
    kind: str
    rows: list
    verdict: bool
    detail: dict = field(default_factory=dict)


def _ensemble_over(problems, u0, econfig, make_observers, progress=None):
    from .ensemble import run_ensemble
    from .solver import project_initial

    for pr in problems:
        yield pr, run_ensemble(econfig, pr, project_initial(u0, pr.mesh), make_observers(pr), progress=progress)


def weak_bv_study(problems, u0, econfig, radius: float, center=None, max_ratio: float = 2.0, max_slope: float = 0.6,
                  progress=None) -> StudyTable:
    """Squared weak-BV sums must stay within ``max_ratio`` of each other; the local absolute sum
    must grow no faster than h^(-max_slope)."""
    rows = []
    for pr, res in _ensemble_over(problems, u0, econfig, lambda pr: [WeakBVObserver(center, radius)], progress):
        pp = res.per_path["weak_bv"]
        sq, sq_se = mean_stderr(pp["squared"])
        ab, ab_se = mean_stderr(pp["abs_local"])
        rows.append({"h": pr.mesh.h, "dt": pr.dt, "squared_mean": sq, "squared_stderr": sq_se,
                     "abs_local_mean": ab, "abs_local_stderr": ab_se,
                     "abs_local_scaled": ab * math.sqrt(pr.mesh.h)})
    sq = [r["squared_mean"] for r in rows]
    ratio = max(sq) / min(sq)
    slope = loglog_slope([1 / r["h"] for r in rows], [r["abs_local_mean"] for r in rows])
    return StudyTable("weak_bv", rows, ratio <= max_ratio and slope <= max_slope,
                      {"squared_ratio": ratio, "abs_slope": slope})


def continuity_study(problems, u0, econfig, ratio_range=(1.5, 3.0), progress=None) -> StudyTable:
    """Successive decrease factors of E||v^h - u^h||^2 must lie in ``ratio_range``."""
    rows = []
    for pr, res in _ensemble_over(problems, u0, econfig, lambda pr: [ContinuityObserver()], progress):
        m, se = mean_stderr(res.per_path["continuity"]["l2_squared"])
        rows.append({"h": pr.mesh.h, "dt": pr.dt, "mean": m, "stderr": se})
    ratios = [a["mean"] / b["mean"] for a, b in zip(rows, rows[1:])]
    for r, q in zip(rows[1:], ratios):
        r["ratio"] = q
    lo, hi = ratio_range
    return StudyTable("continuity", rows, all(lo <= q <= hi for q in ratios), {"ratios": ratios})


def entropy_study(problems, u0, econfig, pair: EntropyPair, linear_pair: EntropyPair, psi: BumpTestFunction,
                  progress=None) -> StudyTable:
    """Entropy functional for ``pair`` and for linear beta across resolutions.

    eps(h) = max(0, -mean) + 3 stderr.  Verdict: E[LHS] >= -eps at every
    resolution, eps(finest) < eps(coarsest), and |mean| <= 3 stderr for the
    linear functional at every resolution.
    """
    def make(pr):
        return [EntropyObserver(pair, psi, "entropy"), EntropyObserver(linear_pair, psi, "linear")]

    rows = []
    for pr, res in _ensemble_over(problems, u0, econfig, make, progress):
        e = res.per_path["entropy"]
        lin = res.per_path["linear"]
        m, se = mean_stderr(e["lhs"])
        lm, lse = mean_stderr(lin["lhs"])
        rows.append({
            "h": pr.mesh.h, "dt": pr.dt, "mean": m, "stderr": se, "eps": max(0.0, -m) + 3 * se,
            "time_term": float(np.mean(e["time_term"])), "transport_term": float(np.mean(e["transport_term"])),
            "martingale_term": float(np.mean(e["martingale_term"])),
            "compensator_term": float(np.mean(e["compensator_term"])),
            "linear_mean": lm, "linear_stderr": lse, "linear_ok": abs(lm) <= 3 * lse,
        })
    lower_ok = all(r["mean"] >= -r["eps"] for r in rows)
    eps_ok = rows[-1]["eps"] < rows[0]["eps"]
    linear_ok = all(r["linear_ok"] for r in rows)
    return StudyTable("entropy", rows, lower_ok and eps_ok and linear_ok,
                      {"lower_ok": lower_ok, "eps_decreasing": eps_ok, "linear_ok": linear_ok})
