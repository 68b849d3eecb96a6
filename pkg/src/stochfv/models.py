"""Flux, velocity, entropy and test-function models.

All built-in callables are small classes rather than closures so that models
pickle cleanly into worker processes.
"""

from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as P
from scipy.optimize import brentq

from ._quadrature import gauss_unit, tensor_rule
from .mesh import Mesh

log = logging.getLogger(__name__)


class ModelError(ValueError):
    """A model violates one of its structural assumptions."""


# --------------------------------------------------------------------------
# flux


class PolynomialFunction:
    """Vectorised polynomial with coefficients in increasing degree."""

    def __init__(self, coefs):
        c = np.trim_zeros(np.asarray(coefs, dtype=float), "b")
        self.coefs = c if c.size else np.zeros(1)

    def __call__(self, u):
        return P.polyval(u, self.coefs)

    def deriv(self) -> "PolynomialFunction":
        return PolynomialFunction(P.polyder(self.coefs) if self.coefs.size > 1 else [0.0])

    def real_roots(self) -> np.ndarray:
        if self.coefs.size <= 1:
            return np.empty(0)
        r = P.polyroots(self.coefs)
        real = np.sort(r[np.abs(r.imag) <= 1e-12 * (1 + np.abs(r.real))].real)
        return np.unique(real)

    def __repr__(self):
        return f"PolynomialFunction({self.coefs.tolist()})"


class _QuadratureAntiderivative:
    """u -> integral of ``g`` from 0 to u by a fixed Gauss rule (no closed form available)."""

    def __init__(self, g, order):
        self.g = g
        self.order = order

    def __call__(self, u):
        nodes, weights = gauss_unit(self.order)
        u = np.asarray(u, dtype=float)
        s = u[..., None] * nodes
        return u * (weights * self.g(s)).sum(axis=-1)


class EngquistOsherSplit:
    """f1 = int_0^u max(f', 0), f2 = int_0^u min(f', 0), evaluated segment by segment.

    Between consecutive sign changes of f' the contribution of a segment
    [a, b] to int_0^u f' is f(clip(u, a, b)) - f(clip(0, a, b)), which keeps
    f1(0) = f2(0) = 0 exactly and makes f1 + f2 telescope to f.
    """

    def __init__(self, f, breakpoints, signs):
        self.f = f
        edges = np.concatenate([[-np.inf], np.asarray(breakpoints, dtype=float), [np.inf]])
        self.lo = edges[:-1]
        self.hi = edges[1:]
        self.signs = np.asarray(signs, dtype=int)
        self.offsets = np.array([f(np.clip(0.0, a, b)) for a, b in zip(self.lo, self.hi)], dtype=float)

    def _part(self, u, positive: bool):
        u = np.asarray(u, dtype=float)
        out = np.zeros_like(u)
        for a, b, s, off in zip(self.lo, self.hi, self.signs, self.offsets):
            if (s > 0) == positive and s != 0:
                out = out + (self.f(np.clip(u, a, b)) - off)
        return out

    def f1(self, u):
        return self._part(u, True)

    def f2(self, u):
        return self._part(u, False)


def split_flux_engquist_osher(f_prime, quadrature: int = 16, *, f=None, span=(-8.0, 8.0), roots=None):
    """Engquist-Osher splitting of a flux given its derivative.

    ``quadrature`` sets both the sign-change sampling resolution on ``span``
    and the Gauss order used for int_0^u f' when ``f`` is not supplied.
    Known roots of f' (e.g. for polynomial fluxes) bypass the sampling.
    Returns ``(f1, f2)``.
    """
    split = engquist_osher(f_prime, quadrature, f=f, span=span, roots=roots)
    return split.f1, split.f2


def engquist_osher(f_prime, quadrature: int = 16, *, f=None, span=(-8.0, 8.0), roots=None) -> EngquistOsherSplit:
    if quadrature < 8:
        raise ModelError(f"splitting needs at least 8 quadrature nodes, got {quadrature}")
    if f is None:
        f = _QuadratureAntiderivative(f_prime, quadrature)
    if roots is None:
        roots = _sign_changes(f_prime, quadrature, span)
    roots = np.unique(np.asarray(roots, dtype=float))
    edges = np.concatenate([[-np.inf], roots, [np.inf]])
    signs = []
    for a, b in zip(edges[:-1], edges[1:]):
        if np.isinf(a) and np.isinf(b):
            probe = 0.0
        elif np.isinf(a):
            probe = b - max(1.0, abs(b))
        elif np.isinf(b):
            probe = a + max(1.0, abs(a))
        else:
            probe = 0.5 * (a + b)
        signs.append(int(np.sign(f_prime(probe))))
    return EngquistOsherSplit(f, roots, signs)


def _sign_changes(f_prime, nodes: int, span) -> np.ndarray:
    lo, hi = span
    grid = np.linspace(lo, hi, 4 * nodes + 1)
    vals = np.asarray(f_prime(grid), dtype=float)
    mids = np.asarray(f_prime(0.5 * (grid[1:] + grid[:-1])), dtype=float)
    roots = []
    sg = np.sign(vals)
    for i in range(grid.size - 1):
        a, b = grid[i], grid[i + 1]
        if sg[i] == 0:
            roots.append(a)
        elif sg[i] * sg[i + 1] < 0:
            roots.append(brentq(f_prime, a, b, xtol=1e-15, rtol=4 * np.finfo(float).eps))
        elif sg[i] == sg[i + 1] and np.sign(mids[i]) == -sg[i]:
            warnings.warn(
                f"f' changes sign twice inside [{a:g}, {b:g}]; increase the splitting node count",
                RuntimeWarning,
                stacklevel=3,
            )
    if sg[-1] == 0:
        roots.append(grid[-1])
    return np.asarray(roots)


@dataclass(frozen=True, eq=False)
class FluxModel:
    name: str
    f: object
    f_prime: object
    c_f: float
    bound_M: float
    split: EngquistOsherSplit

    def f1(self, u):
        return self.split.f1(u)

    def f2(self, u):
        return self.split.f2(u)

    @property
    def nondecreasing(self) -> bool:
        return bool(np.all(self.split.signs >= 0))

    def check(self, n: int = 401) -> None:
        """Validate f(0)=0, the splitting and the Lipschitz bound on [-M, M]."""
        f0 = float(self.f(0.0))
        if f0 != 0.0:
            raise ModelError(f"flux {self.name}: f(0) = {f0} != 0")
        u = np.linspace(-self.bound_M, self.bound_M, n)
        defect = np.max(np.abs(self.f1(u) + self.f2(u) - self.f(u)))
        if defect > 1e-10 * (1 + self.c_f):
            raise ModelError(f"flux {self.name}: |f1+f2-f| = {defect:.3e}")
        slack = 1e-12 * (1 + self.c_f * self.bound_M)
        d1 = np.diff(self.f1(u))
        d2 = np.diff(self.f2(u))
        if d1.min() < -slack:
            i = int(d1.argmin())
            raise ModelError(f"flux {self.name}: f1 decreases on [{u[i]:g}, {u[i+1]:g}]")
        if d2.max() > slack:
            i = int(d2.argmax())
            raise ModelError(f"flux {self.name}: f2 increases on [{u[i]:g}, {u[i+1]:g}]")
        a, b = np.meshgrid(u[::8], u[::8])
        lhs = np.abs(self.f(a) - self.f(b))
        rhs = self.c_f * np.abs(a - b) + slack
        if np.any(lhs > rhs):
            i = np.unravel_index(np.argmax(lhs - rhs), lhs.shape)
            raise ModelError(
                f"flux {self.name}: |f(a)-f(b)| > c_f|a-b| at a={a[i]:g}, b={b[i]:g} (c_f={self.c_f})"
            )


def polynomial_flux(coefs, bound_M: float, name: str = "polynomial", quadrature: int = 16) -> FluxModel:
    """Flux f(u) = sum_k coefs[k] u^k with c_f = max |f'| on [-M, M]."""
    coefs = np.asarray(coefs, dtype=float)
    if coefs.size == 0 or coefs[0] != 0.0:
        raise ModelError(f"flux {name}: constant coefficient must be exactly 0 so that f(0) = 0")
    if not bound_M > 0:
        raise ModelError(f"flux {name}: bound_M must be positive")
    f = PolynomialFunction(coefs)
    fp = f.deriv()
    cand = [-bound_M, bound_M] + [r for r in fp.deriv().real_roots() if abs(r) <= bound_M]
    c_f = float(max(abs(fp(c)) for c in cand))
    # roots far outside [-M, M] come from negligible leading coefficients and would overflow f
    roots = [r for r in fp.real_roots() if abs(r) <= 1e8 * max(1.0, bound_M)]
    split = engquist_osher(fp, quadrature, f=f, roots=roots)
    return FluxModel(name, f, fp, c_f, float(bound_M), split)


def linear_flux(a: float = 1.0, bound_M: float = 1.0) -> FluxModel:
    return polynomial_flux([0.0, a], bound_M, name="linear")


def burgers_flux(bound_M: float = 1.0) -> FluxModel:
    return polynomial_flux([0.0, 0.0, 0.5], bound_M, name="burgers")


def cubic_flux(bound_M: float = 2.0) -> FluxModel:
    """Nonconvex f(u) = u^3/3 - u; f' changes sign at +-1."""
    return polynomial_flux([0.0, -1.0, 0.0, 1.0 / 3.0], bound_M, name="cubic")


# --------------------------------------------------------------------------
# velocity


class VelocityField:
    """Divergence-free, bounded transport field v(t, x); ``x`` has shape (..., d)."""

    dimension = 1
    V = 0.0
    divergence_free = True
    time_dependent = False

    def __call__(self, t, x):
        raise NotImplementedError

    def analytic_bound(self) -> float:
        return self.V

    def check(self, bounds, T: float = 1.0, n: int = 512, seed: int = 0, h_probe: float = 1e-4) -> None:
        rng = np.random.default_rng(seed)
        lo = np.array([b[0] for b in bounds])
        hi = np.array([b[1] for b in bounds])
        x = lo + (hi - lo) * rng.random((n, self.dimension))
        t = T * rng.random(n)
        v = np.stack([self(ti, xi) for ti, xi in zip(t, x)])
        speed = np.linalg.norm(v, axis=-1)
        if np.any(speed > self.V * (1 + 1e-12) + 1e-300):
            i = int(np.argmax(speed))
            raise ModelError(
                f"velocity: |v(t={t[i]:.4g}, x={x[i].tolist()})| = {speed[i]:.6g} exceeds declared V = {self.V:.6g}"
            )
        div = np.zeros(n)
        for k in range(self.dimension):
            e = np.zeros(self.dimension)
            e[k] = h_probe
            vp = np.stack([self(ti, xi + e) for ti, xi in zip(t, x)])
            vm = np.stack([self(ti, xi - e) for ti, xi in zip(t, x)])
            div += (vp[:, k] - vm[:, k]) / (2 * h_probe)
        if np.max(np.abs(div)) > 1e-6 * max(self.V, 1e-300) / h_probe:
            raise ModelError(f"velocity: central-difference divergence {np.max(np.abs(div)):.3e} is not ~0")


class ConstantVelocity(VelocityField):
    def __init__(self, vector, V=None):
        self.vector = np.atleast_1d(np.asarray(vector, dtype=float))
        self.dimension = self.vector.size
        self.V = float(np.linalg.norm(self.vector)) if V is None else float(V)

    def analytic_bound(self):
        return float(np.linalg.norm(self.vector))

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.vector, x.shape).copy()


class OscillatingVelocity(VelocityField):
    """Spatially uniform v(t) = vector * cos(2 pi frequency t); exercises sign changes in time."""

    time_dependent = True

    def __init__(self, vector, frequency: float = 1.0, V=None):
        self.vector = np.atleast_1d(np.asarray(vector, dtype=float))
        self.dimension = self.vector.size
        self.frequency = float(frequency)
        self.V = self.analytic_bound() if V is None else float(V)

    def analytic_bound(self):
        return float(np.linalg.norm(self.vector))

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(self.vector * math.cos(2 * math.pi * self.frequency * t), x.shape).copy()


class RigidRotation(VelocityField):
    """v(x, y) = omega * (-(y - cy), x - cx)."""

    dimension = 2

    def __init__(self, omega: float, center, bounds=None, V=None):
        self.omega = float(omega)
        self.center = np.asarray(center, dtype=float)
        self.bounds = bounds
        self.V = self.analytic_bound() if V is None else float(V)

    def analytic_bound(self):
        if self.bounds is None:
            raise ModelError("rotation needs domain bounds or an explicit V")
        corners = np.array([[a, c] for a in self.bounds[0] for c in self.bounds[1]], dtype=float)
        return abs(self.omega) * float(np.max(np.linalg.norm(corners - self.center, axis=1)))

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        r = x - self.center
        return self.omega * np.stack([-r[..., 1], r[..., 0]], axis=-1)


class LinearShear(VelocityField):
    """v(x, y) = (rate * (y - y0), 0)."""

    dimension = 2

    def __init__(self, rate: float, y0: float = 0.0, bounds=None, V=None):
        self.rate = float(rate)
        self.y0 = float(y0)
        self.bounds = bounds
        self.V = self.analytic_bound() if V is None else float(V)

    def analytic_bound(self):
        if self.bounds is None:
            raise ModelError("shear needs domain bounds or an explicit V")
        lo, hi = self.bounds[1]
        return abs(self.rate) * max(abs(lo - self.y0), abs(hi - self.y0))

    def __call__(self, t, x):
        x = np.asarray(x, dtype=float)
        return np.stack([self.rate * (x[..., 1] - self.y0), np.zeros(x.shape[:-1])], axis=-1)


def interface_velocity_averages(vfield: VelocityField, mesh: Mesh, t_n: float, dt: float, faces=None, order=(4, 4)):
    """Space-time averages (v.n)^+ and (v.n)^- over [t_n, t_n + dt] x face.

    ``faces`` selects face ids (default: all).  Returns two arrays, or two
    floats when a single face id is given.
    """
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    scalar = faces is not None and np.ndim(faces) == 0
    sel = slice(None) if faces is None else np.atleast_1d(faces)
    mid = mesh.face_midpoint[sel]
    nrm = mesh.face_normal[sel]
    qt, qs = order
    tn, tw = gauss_unit(qt)
    if mesh.dimension == 1:
        pts = mid[:, None, :]
        sw = np.ones(1)
    else:
        sn, sw = gauss_unit(qs)
        half = (mesh.face_measure[sel] * 0.5)[:, None, None]
        pts = mid[:, None, :] + half * (2 * sn - 1)[None, :, None] * mesh.face_tangent[sel][:, None, :]
    if not vfield.time_dependent:
        tn, tw = np.array([0.5]), np.ones(1)
    vplus = np.zeros(mid.shape[0])
    vminus = np.zeros(mid.shape[0])
    for tau, wt in zip(tn, tw):
        vn = np.einsum("fsd,fd->fs", vfield(t_n + tau * dt, pts), nrm)
        vplus += wt * (np.maximum(vn, 0.0) @ sw)
        vminus += wt * (np.maximum(-vn, 0.0) @ sw)
    if scalar:
        return float(vplus[0]), float(vminus[0])
    return vplus, vminus


def _cell_sum(mesh: Mesh, per_face_first, per_face_second):
    """Sum face quantities into cells, choosing the value seen from each side."""
    out = np.zeros(mesh.n_cells)
    np.add.at(out, mesh.face_cells[:, 0], per_face_first)
    np.add.at(out, mesh.face_cells[:, 1], per_face_second)
    return out


def discrete_zero_flux_defect(mesh: Mesh, vfield: VelocityField, t_n: float, dt: float, order=(4, 4)):
    """Per cell: sum over faces of |s| ((v.n_K)^+ - (v.n_K)^-); zero for divergence-free v."""
    vp, vm = interface_velocity_averages(vfield, mesh, t_n, dt, order=order)
    w = mesh.face_measure * (vp - vm)
    return _cell_sum(mesh, w, -w)


@dataclass(frozen=True)
class NormalBoundReport:
    ok: bool
    worst_ratio: float
    worst_cell: int
    worst_step: int


def normal_velocity_bound_check(mesh: Mesh, vfield: VelocityField, times, order=(4, 4)) -> NormalBoundReport:
    """Check sum_s |s| (v.n_K)^- <= V |K| / (alpha^2 h) on every cell and step."""
    times = np.asarray(times, dtype=float)
    bound = vfield.V * mesh.cell_volume / (mesh.alpha**2 * mesh.h)
    worst, wcell, wstep = 0.0, -1, -1
    steps = range(len(times) - 1) if vfield.time_dependent else range(min(1, len(times) - 1))
    for n in steps:
        vp, vm = interface_velocity_averages(vfield, mesh, times[n], times[n + 1] - times[n], order=order)
        inflow = _cell_sum(mesh, mesh.face_measure * vm, mesh.face_measure * vp)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(bound > 0, inflow / bound, np.where(inflow > 0, np.inf, 0.0))
        i = int(np.argmax(ratio))
        if ratio[i] > worst or wcell < 0:
            worst, wcell, wstep = float(ratio[i]), i, n
    return NormalBoundReport(worst <= 1.0, worst, wcell, wstep)


# --------------------------------------------------------------------------
# entropies


class SmoothedAbs:
    """theta * b((u - shift) / theta) with b'' = (15/8)(1 - r^2)^2 on |r| < 1.

    b is even, b(0) = 0, b' = sign(r) for |r| >= 1, and b(r) = |r| - 5/16 there.
    """

    def __init__(self, theta: float, shift: float = 0.0):
        if not theta > 0:
            raise ModelError("theta must be positive")
        self.theta = float(theta)
        self.shift = float(shift)

    @property
    def support(self):
        return (self.shift - self.theta, self.shift + self.theta)

    @property
    def breakpoints(self):
        return list(self.support)

    dbeta_sup = 1.0

    def _r(self, u):
        return np.clip((np.asarray(u, dtype=float) - self.shift) / self.theta, -1.0, 1.0)

    def beta(self, u):
        u = np.asarray(u, dtype=float)
        r = self._r(u)
        inner = (15.0 / 8.0) * (r**2 / 2 - r**4 / 6 + r**6 / 30)
        x = (u - self.shift) / self.theta
        return self.theta * np.where(np.abs(x) < 1.0, inner, np.abs(x) - 5.0 / 16.0)

    def dbeta(self, u):
        r = self._r(u)
        return np.clip((15.0 / 8.0) * (r - 2 * r**3 / 3 + r**5 / 5), -1.0, 1.0)

    def d2beta(self, u):
        r = self._r(u)
        return (15.0 / 8.0) * (1 - r**2) ** 2 / self.theta


class LinearEntropy:
    """beta(u) = slope * u; beta'' vanishes identically (empty support)."""

    support = None
    breakpoints: list = []

    def __init__(self, slope: float = 1.0):
        self.slope = float(slope)
        self.dbeta_sup = abs(self.slope)

    def beta(self, u):
        return self.slope * np.asarray(u, dtype=float)

    def dbeta(self, u):
        return np.full(np.shape(u), self.slope)

    def d2beta(self, u):
        return np.zeros(np.shape(u))


class TruncatedQuadratic:
    """u^2 for |u| <= inner, with beta'' decaying to 0 by a C^1 smoothstep on [inner, outer]."""

    def __init__(self, inner: float, outer: float):
        if not 0 < inner < outer:
            raise ModelError("need 0 < inner < outer")
        self.inner = float(inner)
        self.outer = float(outer)
        self.w = self.outer - self.inner
        self.dbeta_sup = 2 * (self.inner + self.w / 2)

    @property
    def support(self):
        return (-self.outer, self.outer)

    @property
    def breakpoints(self):
        return [-self.outer, -self.inner, self.inner, self.outer]

    def _t(self, u):
        return np.clip((np.abs(np.asarray(u, dtype=float)) - self.inner) / self.w, 0.0, 1.0)

    def d2beta(self, u):
        t = self._t(u)
        return 2.0 * (1 - 3 * t**2 + 2 * t**3)

    def dbeta(self, u):
        u = np.asarray(u, dtype=float)
        t = self._t(u)
        a = np.minimum(np.abs(u), self.inner)
        G = t - t**3 + t**4 / 2
        return np.sign(u) * 2 * (a + self.w * G)

    def beta(self, u):
        u = np.asarray(u, dtype=float)
        au = np.abs(u)
        t = self._t(u)
        H = t**2 / 2 - t**4 / 4 + t**5 / 10
        mid = self.inner**2 + 2 * (self.inner * (np.minimum(au, self.outer) - self.inner) + self.w**2 * H)
        out_slope = 2 * (self.inner + self.w / 2)
        return np.where(au <= self.inner, u**2, mid + out_slope * np.maximum(au - self.outer, 0.0))


class EntropyPair:
    """(beta, F^beta) with F^beta(a) = int_0^a beta'(s) f'(s) ds by composite Gauss quadrature."""

    def __init__(self, entropy, flux: FluxModel, quadrature: int = 16):
        self.entropy = entropy
        self.flux = flux
        self.quadrature = int(quadrature)
        bps = sorted(set(float(b) for b in entropy.breakpoints))
        edges = np.concatenate([[-np.inf], bps, [np.inf]])
        self._lo = edges[:-1]
        self._hi = edges[1:]

    def beta(self, u):
        return self.entropy.beta(u)

    def dbeta(self, u):
        return self.entropy.dbeta(u)

    def d2beta(self, u):
        return self.entropy.d2beta(u)

    @property
    def support(self):
        return self.entropy.support

    @property
    def support_radius(self) -> float:
        s = self.entropy.support
        return 0.0 if s is None else 0.5 * (s[1] - s[0])

    def F_beta(self, a):
        a = np.asarray(a, dtype=float)
        nodes, weights = gauss_unit(self.quadrature)
        fp = self.flux.f_prime
        db = self.entropy.dbeta
        out = np.zeros_like(a)
        for lo, hi in zip(self._lo, self._hi):
            s0 = float(np.clip(0.0, lo, hi))
            s1 = np.clip(a, lo, hi)
            span = s1 - s0
            s = s0 + span[..., None] * nodes
            out = out + span * ((db(s) * fp(s)) * weights).sum(axis=-1)
        return out

    def check(self, bound: float = 4.0, n: int = 801) -> None:
        u = np.linspace(-bound, bound, n)
        b2 = self.d2beta(u)
        if b2.min() < -1e-12:
            raise ModelError(f"entropy: beta'' < 0 at u = {u[int(b2.argmin())]:g}")
        s = self.support
        outside = np.ones_like(u, dtype=bool) if s is None else (u < s[0]) | (u > s[1])
        if np.any(np.abs(b2[outside]) > 1e-12):
            raise ModelError("entropy: beta'' does not vanish outside its support")
        lip = self.flux.c_f * self.entropy.dbeta_sup
        uu = np.linspace(-self.flux.bound_M, self.flux.bound_M, 101)
        a, b = np.meshgrid(uu, uu)
        lhs = np.abs(self.F_beta(a) - self.F_beta(b))
        if np.any(lhs > lip * np.abs(a - b) + 1e-10):
            raise ModelError("entropy: F^beta is not c_f sup|beta'|-Lipschitz")


# --------------------------------------------------------------------------
# test functions


def _bump(s):
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = np.abs(s) < 1.0
    out[m] = np.exp(1.0 - 1.0 / (1.0 - s[m] ** 2))
    return out


def _bump_factor(s):
    """b'(s) / b(s) * (1/s) = -2 / (1 - s^2)^2 inside the support."""
    s = np.asarray(s, dtype=float)
    out = np.zeros_like(s)
    m = np.abs(s) < 1.0
    out[m] = -2.0 / (1.0 - s[m] ** 2) ** 2
    return out


@dataclass(frozen=True)
class BumpTestFunction:
    """psi(t, x) = b(t / t_support) * b(|x - center| / radius) with b(s) = exp(1 - 1/(1 - s^2)).

    Nonnegative, C-infinity, supported in [0, t_support) x B(center, radius).
    """

    center: tuple
    radius: float
    t_support: float
    dimension: int = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "center", tuple(float(c) for c in np.atleast_1d(self.center)))
        object.__setattr__(self, "dimension", len(self.center))

    def _rho(self, x):
        x = np.asarray(x, dtype=float)
        r = x - np.asarray(self.center)
        return r, np.sqrt((r**2).sum(axis=-1)) / self.radius

    def time_factor(self, t):
        return _bump(np.asarray(t, dtype=float) / self.t_support)

    def space(self, x):
        return _bump(self._rho(x)[1])

    def grad_space(self, x):
        r, rho = self._rho(x)
        return (_bump(rho) * _bump_factor(rho) / self.radius**2)[..., None] * r

    def psi(self, t, x):
        return self.time_factor(t) * self.space(x)

    def dt_psi(self, t, x):
        s = np.asarray(t, dtype=float) / self.t_support
        return _bump(s) * _bump_factor(s) * s / self.t_support * self.space(x)

    def grad_psi(self, t, x):
        return np.asarray(self.time_factor(t))[..., None] * self.grad_space(x)

    def support_box(self):
        c = np.asarray(self.center)
        return np.stack([c - self.radius, c + self.radius], axis=-1)

    def validate(self, mesh: Mesh, T: float) -> float:
        """Reject supports that leave the domain or the time window; return R = radius + h."""
        if self.dimension != mesh.dimension:
            raise ModelError("test function dimension does not match the mesh")
        if not 0 < self.t_support <= T:
            raise ModelError(f"test function time support {self.t_support} not inside (0, T={T}]")
        R = self.radius + mesh.h
        for (lo, hi), c in zip(mesh.bounds, self.center):
            if c - R <= lo or c + R >= hi:
                raise ModelError(
                    f"test function support B({self.center}, {self.radius}) + h leaves the domain {mesh.bounds}"
                )
        return R

    def check_derivatives(self, n: int = 64, seed: int = 0, step: float = 1e-5, rtol: float = 1e-6) -> None:
        """Central differences against the analytic derivatives; ``step`` is relative to each support length."""
        rng = np.random.default_rng(seed)
        c = np.asarray(self.center)
        x = c + self.radius * (2 * rng.random((n, self.dimension)) - 1) * 0.9
        t = self.t_support * 0.9 * rng.random(n)
        ht, step = step * self.t_support, step * self.radius
        dt_fd = (self.psi(t + ht, x) - self.psi(t - ht, x)) / (2 * ht)
        dt_ex = self.dt_psi(t, x)
        scale = max(np.abs(dt_ex).max(), 1e-300)
        if np.max(np.abs(dt_fd - dt_ex)) > rtol * scale:
            raise ModelError("test function: time derivative disagrees with finite differences")
        gex = self.grad_psi(t, x)
        scale = max(np.abs(gex).max(), 1e-300)
        for k in range(self.dimension):
            e = np.zeros(self.dimension)
            e[k] = step
            fd = (self.psi(t, x + e) - self.psi(t, x - e)) / (2 * step)
            if np.max(np.abs(fd - gex[:, k])) > rtol * scale:
                raise ModelError("test function: gradient disagrees with finite differences")
        if np.any(self.psi(t, x) < 0):
            raise ModelError("test function: negative value")


def cell_integrals(mesh: Mesh, g, order: int = 4) -> np.ndarray:
    """int_K g(x) dx on every cell by tensor Gauss quadrature; ``g`` maps (..., d) -> (...)."""
    pts, w = tensor_rule(order, mesh.dimension)
    spacing = np.asarray(mesh.spacing)
    lower = mesh.cell_centroid - spacing / 2
    x = lower[:, None, :] + pts[None, :, :] * spacing
    return mesh.cell_volume * (np.asarray(g(x)) @ w)
