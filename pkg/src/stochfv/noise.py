"""Finite-activity compensated Poisson noise: models, event streams, increments."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._quadrature import gauss_unit
from .models import ModelError


class NoiselessModel(Exception):
    """Raised when a stream is requested from a model with zero total mass."""


def path_rng(master_seed: int, path_index: int) -> np.random.Generator:
    """Counter-based generator for one path; independent of scheduling."""
    ss = np.random.SeedSequence(int(master_seed), spawn_key=(int(path_index),))
    return np.random.Generator(np.random.Philox(ss))


class NoiseModel:
    """eta(u; z) with marks z drawn from m / Lambda.

    Subclasses provide ``eta``, ``h1``, ``sample_marks`` and a mark
    quadrature; closed-form moments are overridden where known.
    """

    name = "base"
    rate = 0.0
    lambda_star = 0.0
    C_star = 0.0
    symmetric = False

    def eta(self, u, z):
        raise NotImplementedError

    def h1(self, z):
        raise NotImplementedError

    def sample_marks(self, rng: np.random.Generator, n: int) -> np.ndarray:
        raise NotImplementedError

    def mark_quadrature(self):
        """(nodes, weights) with sum w g(z) ~ int g dm; weights sum to Lambda."""
        raise NotImplementedError

    @property
    def c_eta(self) -> float:
        z, w = self.mark_quadrature()
        return float(w @ self.h1(z) ** 2)

    def _mark_integral(self, g, u):
        z, w = self.mark_quadrature()
        u = np.asarray(u, dtype=float)
        return g(u[..., None], z) @ w

    def compensator(self, u):
        """int_E eta(u; z) m(dz)."""
        return self._mark_integral(self.eta, u)

    def second_moment(self, u):
        """int_E eta(u; z)^2 m(dz)."""
        return self._mark_integral(lambda uu, z: self.eta(uu, z) ** 2, u)

    def describe(self) -> dict:
        return {"name": self.name, "rate": self.rate, "lambda_star": self.lambda_star, "C_star": self.C_star}


class _UniformMarks:
    """Marks uniform on [-1, 1] with total mass ``rate``; h1(z) = |z|."""

    def h1(self, z):
        return np.abs(z)

    def sample_marks(self, rng, n):
        return 2.0 * rng.random(n) - 1.0

    def mark_quadrature(self, order: int = 16):
        # split at 0 so |z| integrates exactly
        x, w = gauss_unit(order)
        z = np.concatenate([x - 1.0, x])
        return z, np.concatenate([w, w]) * (self.rate / 2.0)


class TanhNoise(_UniformMarks, NoiseModel):
    """eta = lambda* tanh(u) |z| (or lambda* tanh(u) z when symmetric)."""

    name = "tanh"

    def __init__(self, rate: float, lambda_star: float, C_star: float | None = None, symmetric: bool = False):
        self.rate = float(rate)
        self.lambda_star = float(lambda_star)
        self.C_star = self.lambda_star if C_star is None else float(C_star)
        self.symmetric = bool(symmetric)

    def eta(self, u, z):
        m = z if self.symmetric else np.abs(z)
        return self.lambda_star * np.tanh(u) * m

    @property
    def c_eta(self):
        return self.rate / 3.0

    def compensator(self, u):
        if self.symmetric:
            return np.zeros(np.shape(u))
        return self.lambda_star * np.tanh(u) * (self.rate / 2.0)

    def second_moment(self, u):
        return (self.lambda_star * np.tanh(u)) ** 2 * (self.rate / 3.0)

    def describe(self):
        return {**super().describe(), "symmetric": self.symmetric}


class ClampNoise(_UniformMarks, NoiseModel):
    """eta = lambda* clamp(u, -C*/lambda*, C*/lambda*) |z|."""

    name = "clamp"

    def __init__(self, rate: float, lambda_star: float, C_star: float):
        self.rate = float(rate)
        self.lambda_star = float(lambda_star)
        self.C_star = float(C_star)

    def _g(self, u):
        cap = self.C_star / self.lambda_star
        return self.lambda_star * np.clip(u, -cap, cap)

    def eta(self, u, z):
        return self._g(u) * np.abs(z)

    @property
    def c_eta(self):
        return self.rate / 3.0

    def compensator(self, u):
        return self._g(u) * (self.rate / 2.0)

    def second_moment(self, u):
        return self._g(u) ** 2 * (self.rate / 3.0)


class StableLikeNoise(NoiseModel):
    """Truncated stable-type Levy measure m(dz) = c |z|^(-1-a) dz on eps <= |z| <= 1.

    eta = lambda* tanh(u) z, so the compensator vanishes by symmetry.
    """

    name = "stable"
    symmetric = True

    def __init__(self, intensity: float, stability_index: float, truncation: float, lambda_star: float):
        if not 0 < truncation < 1:
            raise ModelError("stable noise truncation must lie in (0, 1)")
        if not 0 < stability_index < 2:
            raise ModelError("stability index must lie in (0, 2)")
        self.intensity = float(intensity)
        self.a = float(stability_index)
        self.eps = float(truncation)
        self.lambda_star = float(lambda_star)
        self.C_star = self.lambda_star
        self.rate = 2 * self.intensity * (self.eps ** (-self.a) - 1.0) / self.a

    def eta(self, u, z):
        return self.lambda_star * np.tanh(u) * z

    def h1(self, z):
        return np.abs(z)

    def sample_marks(self, rng, n):
        top = self.eps ** (-self.a)
        r = (top - rng.random(n) * (top - 1.0)) ** (-1.0 / self.a)
        return np.where(rng.random(n) < 0.5, -r, r)

    def mark_quadrature(self, order: int = 32):
        # substitute s = log r to tame the singular density
        x, w = gauss_unit(order)
        lo, hi = math.log(self.eps), 0.0
        r = np.exp(lo + (hi - lo) * x)
        wr = self.intensity * r ** (-self.a) * (hi - lo) * w
        return np.concatenate([-r[::-1], r]), np.concatenate([wr[::-1], wr])

    @property
    def c_eta(self):
        return 2 * self.intensity * (1.0 - self.eps ** (2 - self.a)) / (2 - self.a)

    def compensator(self, u):
        return np.zeros(np.shape(u))

    def second_moment(self, u):
        return (self.lambda_star * np.tanh(u)) ** 2 * self.c_eta

    def describe(self):
        return {
            "name": self.name,
            "intensity": self.intensity,
            "stability_index": self.a,
            "truncation": self.eps,
            "lambda_star": self.lambda_star,
        }


class ZeroNoise(NoiseModel):
    name = "none"

    def eta(self, u, z):
        return np.zeros(np.broadcast_shapes(np.shape(u), np.shape(z)))

    def h1(self, z):
        return np.zeros(np.shape(z))

    def sample_marks(self, rng, n):
        return np.zeros(n)

    def mark_quadrature(self):
        return np.zeros(1), np.zeros(1)

    @property
    def c_eta(self):
        return 0.0

    def compensator(self, u):
        return np.zeros(np.shape(u))

    def second_moment(self, u):
        return np.zeros(np.shape(u))


def validate_noise(model: NoiseModel, n: int = 2000, seed: int = 12345, bound: float = 10.0) -> None:
    """Check the structural assumptions on sampled (u, v, z) triples; raise on the first violation."""
    if isinstance(model, ZeroNoise):
        return
    if not 0 < model.lambda_star < 1:
        raise ModelError(f"noise: lambda* = {model.lambda_star} must lie in (0, 1)")
    if not (np.isfinite(model.rate) and model.rate > 0):
        raise ModelError(f"noise: total mass Lambda = {model.rate} must be finite and positive")
    if not np.isfinite(model.c_eta):
        raise ModelError("noise: c_eta is not finite")
    rng = np.random.default_rng(seed)
    z = model.sample_marks(rng, n)
    u = bound * (2 * rng.random(n) - 1)
    v = bound * (2 * rng.random(n) - 1)
    h = model.h1(z)
    if np.any((h < 0) | (h > 1)):
        i = int(np.argmax((h < 0) | (h > 1)))
        raise ModelError(f"noise: h1(z={z[i]:g}) = {h[i]:g} outside [0, 1]")
    e0 = model.eta(np.zeros(n), z)
    if np.any(e0 != 0):
        i = int(np.argmax(e0 != 0))
        raise ModelError(f"noise: eta(0; z={z[i]:g}) = {e0[i]:g} != 0")
    eu, ev = model.eta(u, z), model.eta(v, z)
    slack = 1e-12
    lip = np.abs(eu - ev) - model.lambda_star * np.abs(u - v) * h
    if np.any(lip > slack):
        i = int(np.argmax(lip))
        raise ModelError(
            f"noise: |eta(u;z)-eta(v;z)| > lambda* |u-v| h1(z) at u={u[i]:g}, v={v[i]:g}, z={z[i]:g}"
        )
    amp = np.abs(eu) - model.C_star * h
    if np.any(amp > slack):
        i = int(np.argmax(amp))
        raise ModelError(f"noise: |eta(u;z)| > C* h1(z) at u={u[i]:g}, z={z[i]:g} (C* = {model.C_star})")


@dataclass(frozen=True, eq=False)
class EventStream:
    """Sorted jump times in (0, T] with their marks for one path."""

    times: np.ndarray
    marks: np.ndarray
    T: float
    seed: int
    path_index: int

    def __len__(self):
        return self.times.size

    def window(self, t0: float, t1: float) -> slice:
        """Events with t0 < tau <= t1."""
        lo = int(np.searchsorted(self.times, t0, side="right"))
        hi = int(np.searchsorted(self.times, t1, side="right"))
        return slice(lo, hi)

    def same_as(self, other: "EventStream") -> bool:
        return (
            self.T == other.T
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.marks, other.marks)
        )


def empty_stream(T: float, seed: int = 0, path_index: int = 0) -> EventStream:
    return EventStream(np.empty(0), np.empty(0), float(T), int(seed), int(path_index))


def sample_event_stream(seed: int, T: float, model: NoiseModel, path_index: int = 0) -> EventStream:
    if not T > 0:
        raise ValueError(f"horizon must be positive, got {T}")
    if not model.rate > 0:
        raise NoiselessModel(f"noise model {model.name!r} has zero total mass")
    if not np.isfinite(model.rate):
        raise ModelError("infinite-activity noise must be truncated")
    rng = path_rng(seed, path_index)
    count = int(rng.poisson(model.rate * T))
    # T - U*T maps [0, 1) onto (0, T]
    times = T - T * rng.random(count)
    order = np.argsort(times, kind="stable")
    marks = model.sample_marks(rng, count)
    return EventStream(times[order], marks[order], float(T), int(seed), int(path_index))


def stream_for(model: NoiseModel, seed: int, T: float, path_index: int) -> EventStream:
    """Like ``sample_event_stream`` but maps a noiseless model to an empty stream."""
    try:
        return sample_event_stream(seed, T, model, path_index)
    except NoiselessModel:
        return empty_stream(T, seed, path_index)


def compensator_integral(model: NoiseModel, u):
    return model.compensator(u)


def noise_increment(model: NoiseModel, u_frozen, window, stream: EventStream):
    """sum over events in (t0, t1] of eta(u_frozen; z_i) minus (t1 - t0) times the compensator."""
    t0, t1 = window
    u = np.asarray(u_frozen, dtype=float)
    sl = stream.window(t0, t1)
    jumps = np.zeros_like(u)
    for z in stream.marks[sl]:
        jumps = jumps + model.eta(u, z)
    return jumps - (t1 - t0) * model.compensator(u)


@dataclass(frozen=True)
class IsometryReport:
    n_samples: int
    mean: float
    stderr: float
    variance: float
    variance_stderr: float
    expected_variance: float
    z_mean: float
    z_variance: float
    ok: bool

    def summary(self) -> str:
        return (
            f"mean={self.mean:.4e} (z={self.z_mean:+.2f}), var={self.variance:.6e} "
            f"expected={self.expected_variance:.6e} (z={self.z_variance:+.2f}) -> {'pass' if self.ok else 'FAIL'}"
        )


def isometry_selftest(model: NoiseModel, u: float, dt: float, n_samples: int, seed: int = 0) -> IsometryReport:
    """Sample increments over consecutive disjoint windows of one long stream and compare moments.

    Mean must lie within 4 standard errors of 0; variance within 5% plus
    4 standard errors of dt * int eta^2 dm.
    """
    if n_samples < 10_000:
        raise ValueError("isometry self-test needs at least 1e4 samples")
    expected = float(dt * model.second_moment(u))
    T = n_samples * dt
    try:
        stream = sample_event_stream(seed, T, model, 0)
    except NoiselessModel:
        return IsometryReport(n_samples, 0.0, 0.0, 0.0, 0.0, expected, 0.0, 0.0, expected == 0.0)
    edges = dt * np.arange(n_samples + 1)
    win = np.clip(np.searchsorted(edges, stream.times, side="left") - 1, 0, n_samples - 1)
    jumps = np.bincount(win, weights=model.eta(float(u), stream.marks), minlength=n_samples)
    x = jumps - dt * float(model.compensator(u))
    mean = float(x.mean())
    c = x - mean
    var = float(c @ c / (n_samples - 1))
    se = math.sqrt(var / n_samples)
    m4 = float(np.mean(c**4))
    var_se = math.sqrt(max(m4 - var**2, 0.0) / n_samples)
    z_mean = mean / se if se > 0 else (0.0 if mean == 0 else math.inf)
    z_var = (var - expected) / var_se if var_se > 0 else (0.0 if var == expected else math.inf)
    ok = abs(mean) <= 4 * se and abs(var - expected) <= 0.05 * expected + 4 * var_se
    return IsometryReport(n_samples, mean, se, var, var_se, expected, z_mean, z_var, ok)
