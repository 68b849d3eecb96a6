import math

import numpy as np
import pytest
from scipy.integrate import quad

from stochfv.diagnostics import (
    EntropyObserver,
    MomentObserver,
    SeriesStats,
    WeakBVObserver,
    continuity_error,
    convergence_study,
    entropy_residual_path,
    interior_box,
    l2_moment,
    loglog_slope,
    lp_difference,
    mean_stderr,
    moment_bound_check,
    weak_bv_local,
    weak_bv_squared,
)
from stochfv.ensemble import EnsembleConfig, run_ensemble
from stochfv.mesh import build_uniform_mesh, prolong
from stochfv.models import (
    BumpTestFunction,
    ConstantVelocity,
    EntropyPair,
    LinearEntropy,
    SmoothedAbs,
    burgers_flux,
    linear_flux,
)
from stochfv.noise import TanhNoise, ZeroNoise
from stochfv.solver import Problem, SchemeConfig, SineInitial, l2_norm_squared, project_initial, run


def problem(n=32, T=0.2, noise=None, flux=None, xi=0.5, N=None, extent=(0.0, 1.0), v=1.0):
    m = build_uniform_mesh(1, [extent], (n,), [True])
    return Problem.build(m, flux or burgers_flux(3.0), ConstantVelocity([v]), noise or ZeroNoise(),
                         SchemeConfig(T=T, xi=xi, N=N))


def sine(p):
    return project_initial(SineInitial(1.0, p.mesh.bounds), p.mesh)


# --------------------------------------------------------------------------
# statistics


def test_series_stats_merge_matches_batch():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(37, 5))
    whole = SeriesStats.from_batch(x)
    merged = SeriesStats.from_batch(x[:10]).merge(SeriesStats.from_batch(x[10:]))
    np.testing.assert_allclose(merged.mean, x.mean(axis=0), rtol=1e-14)
    np.testing.assert_allclose(merged.stderr, whole.stderr, rtol=1e-12)
    np.testing.assert_allclose(whole.stderr, x.std(axis=0, ddof=1) / math.sqrt(37), rtol=1e-12)


def test_mean_stderr():
    m, se = mean_stderr([1.0, 2.0, 3.0])
    assert m == 2.0 and se == pytest.approx(1 / math.sqrt(3))


# --------------------------------------------------------------------------
# moments


def test_l2_moment_examples():
    m = build_uniform_mesh(1, [(0.0, 2.0)], (4,), [True])
    assert l2_moment(np.full(4, 3.0), m) == pytest.approx(18.0)
    assert l2_moment(np.zeros(4), m) == 0.0
    assert l2_moment(np.array([1.0, 3.0, 0.0, 0.0]), m) == pytest.approx(5.0)


def _moment_report(p, u0fn, n_paths=64):
    u0 = project_initial(u0fn, p.mesh)
    res = run_ensemble(EnsembleConfig(n_paths, seed=4), p, u0, [MomentObserver()])
    rep = moment_bound_check(res.series["moment"]["moment"], res.per_path["moment"]["sup"], p.dt, p.noise.c_eta,
                             l2_norm_squared(u0fn, p.mesh))
    return res, rep


def test_moment_bound_without_noise_is_deterministic_decrease():
    p = problem(64, T=0.5)
    u0fn = SineInitial(1.0, p.mesh.bounds)
    res, rep = _moment_report(p, u0fn, n_paths=4)
    assert np.all(res.per_path["moment"]["sup"] <= l2_norm_squared(u0fn, p.mesh))
    assert rep.verdict and rep.detail["per_step_ok"] and rep.stderr == 0.0


def test_moment_bound_zero_data_stays_zero():
    p = problem(32, noise=TanhNoise(4.0, 0.5))
    res, rep = _moment_report(p, lambda x: np.zeros(x.shape[:-1]))
    assert np.all(res.per_path["moment"]["sup"] == 0.0)
    assert rep.verdict


def test_per_step_bound_tightens_with_smaller_dt():
    c, T = 4.0 / 3.0, 0.5
    a = (1 + T / 100 * c) ** 100
    b = (1 + T / 200 * c) ** 200
    assert a < b < math.exp(c * T)


def test_moment_bound_reports_violation():
    stats = SeriesStats.from_batch(np.array([[1.0, 1.5, 3.0], [1.0, 1.5, 3.0]]))
    rep = moment_bound_check(stats, np.array([3.0, 3.0]), 0.1, 1.0, 1.0)
    assert not rep.verdict and rep.detail["first_violating_step"] == 1


# --------------------------------------------------------------------------
# weak BV


def test_weak_bv_constant_state_is_zero():
    p = problem(16)
    traj = run(p, np.full(16, 0.4))
    assert weak_bv_squared(traj) == 0.0
    assert weak_bv_local(traj, 0.3) == 0.0


def test_weak_bv_hand_trace_linear_flux():
    n, steps = 4, 3
    p = problem(n, T=0.15, flux=linear_flux(1.0, 2.0), N=steps, xi=0.0)
    u = np.array([1.0, 0.0, 2.0, -1.0])
    traj = run(p, u)
    # with v = 1 and f(u) = u the upstream of face (i-1 | i) is cell i-1
    dt, lam = 0.05, 0.05 / 0.25
    total, cur = 0.0, u.copy()
    for _ in range(steps):
        diff = cur - np.roll(cur, 1)
        total += dt * float(diff @ diff)
        cur = cur - lam * diff
    assert weak_bv_squared(traj) == pytest.approx(total, rel=1e-14)


def test_weak_bv_local_covering_ball_equals_global():
    p = problem(32, noise=TanhNoise(4.0, 0.5))
    traj = run(p, sine(p), seed=1)
    obs = WeakBVObserver([0.5], 10.0)
    obs.start(p, traj.states[:1], np.array([0]))
    from stochfv.diagnostics import trajectory_steps

    for d in trajectory_steps(traj):
        obs.step(d)
    r = obs.results()[0]
    assert r["abs_local"][0] == r["abs_global"][0] > 0


def test_weak_bv_local_rejects_small_radius():
    p = problem(32)
    traj = run(p, sine(p))
    with pytest.raises(ValueError):
        weak_bv_local(traj, p.mesh.h)


# --------------------------------------------------------------------------
# continuity


def test_continuity_constant_state_zero():
    p = problem(16)
    assert continuity_error(run(p, np.full(16, -0.3))) == 0.0


def test_continuity_one_step_closed_form():
    p = problem(16, N=1, T=0.002)
    traj = run(p, sine(p))
    r = (traj.states[1] - traj.states[0]) / p.dt
    expect = float((r * r) @ p.mesh.cell_volume) * p.dt**3 / 3
    assert continuity_error(traj) == pytest.approx(expect, rel=1e-12)


def test_continuity_exact_matches_fine_sampling_with_events():
    p = problem(16, T=0.1, noise=TanhNoise(200.0, 0.5))
    traj = run(p, sine(p), seed=3)
    assert len(traj.stream) > 5
    exact = continuity_error(traj)
    sampled = continuity_error(traj, samples_per_step=2000)
    assert sampled == pytest.approx(exact, rel=2e-3)


# --------------------------------------------------------------------------
# entropy functional


def _entropy_oracle(traj, pair, psi, gauss=4):
    """Direct evaluation from the recorded states: no tables, no separable shortcuts."""
    p = traj.problem
    mesh, noise, dt = p.mesh, p.noise, p.dt
    xg, wg = np.polynomial.legendre.leggauss(gauss)
    lo = mesh.cell_centroid[:, 0] - mesh.spacing[0] / 2
    hx = mesh.spacing[0]
    pts = lo[:, None] + (xg + 1) / 2 * hx
    wts = wg / 2 * hx
    v = p.vfield.vector[0]
    z, wz = noise.mark_quadrature() if noise.rate > 0 else (np.zeros(1), np.zeros(1))

    def mark_int(g, u):
        return sum(w * g(u, noise.eta(u, zz)) for zz, w in zip(z, wz))

    # the prescribed fixed 16-point Gauss rule in lambda
    lg, lw = np.polynomial.legendre.leggauss(16)
    lam, lw = (lg + 1) / 2, lw / 2

    def I1(u, eta):
        return eta * float(pair.dbeta(u + lam * eta) @ lw)

    def I2(u, eta):
        return eta**2 * float((pair.d2beta(u + lam * eta) * (1 - lam)) @ lw)

    terms = np.zeros(4)
    for n in range(traj.N):
        t0 = traj.times[n]
        Psi = (psi.psi(t0, pts[..., None]) * wts).sum(axis=1)
        W = dt * ((v * psi.grad_psi(t0, pts[..., None])[..., 0]) * wts).sum(axis=1)
        u, un = traj.states[n], traj.states[n + 1]
        terms[0] -= (pair.beta(un) - pair.beta(u)) @ Psi
        terms[1] += pair.F_beta(u) @ W
        sl = traj.stream.window(t0, traj.times[n + 1])
        for k in np.flatnonzero(Psi):
            uk = float(u[k])
            for zz in traj.stream.marks[sl]:
                terms[2] += I1(uk, float(noise.eta(uk, zz))) * Psi[k]
            terms[2] -= dt * mark_int(lambda a, e: I1(a, e), uk) * Psi[k]
            terms[3] += dt * mark_int(lambda a, e: I2(a, e), uk) * Psi[k]
    return terms


def test_entropy_terms_match_brute_force_oracle():
    p = problem(16, T=0.05, noise=TanhNoise(60.0, 0.5))
    traj = run(p, 0.3 + 0.2 * sine(p), seed=2)
    assert len(traj.stream) > 0
    pair = EntropyPair(SmoothedAbs(0.1, 0.2), p.flux)
    psi = BumpTestFunction((0.45,), 0.25, p.config.T)
    got = entropy_residual_path(traj, pair, psi)
    ref = _entropy_oracle(traj, pair, psi)
    names = ["time_term", "transport_term", "martingale_term", "compensator_term"]
    scale = np.max(np.abs(ref))
    for name, r in zip(names, ref):
        assert got[name] == pytest.approx(r, abs=1e-7 * scale), name
    assert got["lhs"] == pytest.approx(ref.sum(), abs=1e-7 * scale)


def test_lambda_rule_accuracy():
    # fixed 16-point rule against the exact increment and adaptive quadrature
    pair = EntropyPair(SmoothedAbs(0.1, 0.2), burgers_flux(3.0))
    obs = EntropyObserver(pair, BumpTestFunction((0.4,), 0.25, 0.2))
    sup2 = 15 / 8 / 0.1
    rng = np.random.default_rng(0)
    for u, eta in rng.uniform([-0.3, -0.5], [0.7, 0.5], size=(200, 2)):
        ref1 = float(pair.beta(u + eta) - pair.beta(u))
        ref2 = eta**2 * quad(lambda l: float(pair.d2beta(u + l * eta)) * (1 - l), 0, 1, epsabs=1e-15, limit=400)[0]
        assert abs(float(obs._I1(np.array(u), np.array(eta))) - ref1) <= 5e-4 * abs(eta)
        assert abs(float(obs._I2(np.array(u), np.array(eta))) - ref2) <= 2e-3 * sup2 * eta**2


def test_entropy_constant_state_deterministic_is_zero():
    p = problem(32)
    traj = run(p, np.full(32, 0.25))
    pair = EntropyPair(SmoothedAbs(0.1, 0.2), p.flux)
    psi = BumpTestFunction((0.4,), 0.25, p.config.T)
    got = entropy_residual_path(traj, pair, psi)
    assert got["time_term"] == got["martingale_term"] == got["compensator_term"] == 0.0
    # what remains is F(c) times the cellwise-quadrature defect of int v . grad psi = 0
    obs = EntropyObserver(pair, psi)
    obs.start(p, traj.states[:1], np.array([0]))
    defect = sum(p.dt * float(psi.time_factor(t)) * obs._gamma.sum() for t in traj.times[:-1])
    assert abs(defect) <= 1e-4
    assert got["lhs"] == pytest.approx(float(pair.F_beta(0.25)) * defect, rel=1e-6)


def test_entropy_far_shift_reduces_to_linear_case():
    p = problem(32, noise=TanhNoise(20.0, 0.5))
    traj = run(p, sine(p), seed=1)
    assert np.abs(traj.states).max() < 4.0
    psi = BumpTestFunction((0.4,), 0.25, p.config.T)
    shifted = entropy_residual_path(traj, EntropyPair(SmoothedAbs(0.1, 5.0), p.flux), psi)
    linear = entropy_residual_path(traj, EntropyPair(LinearEntropy(), p.flux), psi)
    # beta(u) = -(u - 5) - const on the state range
    assert shifted["lhs"] == pytest.approx(-linear["lhs"], abs=1e-12)
    assert shifted["compensator_term"] == 0.0


def test_entropy_table_lookup_matches_direct_quadrature():
    p = problem(32, noise=TanhNoise(4.0, 0.5))
    obs = EntropyObserver(EntropyPair(SmoothedAbs(0.1, 0.2), p.flux), BumpTestFunction((0.4,), 0.25, 0.2))
    obs._build_tables(p)
    u = np.linspace(-3.0, 3.0, 997)
    c, d, F = obs._lookup(u, p.noise)
    c0, d0 = obs.mark_terms_direct(p.noise, u)
    np.testing.assert_allclose(c, c0, atol=1e-6)
    np.testing.assert_allclose(d, d0, atol=1e-6)
    np.testing.assert_allclose(F, obs.pair.F_beta(u), atol=1e-12)


def test_entropy_rejects_support_outside_domain():
    p = problem(32)
    traj = run(p, sine(p))
    with pytest.raises(Exception, match="leaves the domain"):
        entropy_residual_path(traj, EntropyPair(LinearEntropy(), p.flux), BumpTestFunction((0.1,), 0.25, 0.2))


# --------------------------------------------------------------------------
# convergence helpers


def test_loglog_slope():
    x = np.array([1.0, 2.0, 4.0, 8.0])
    assert loglog_slope(x, 3 * x**0.5) == pytest.approx(0.5)


def test_identical_fields_have_zero_difference():
    c = build_uniform_mesh(1, [(0.0, 1.0)], (8,), [True])
    f = c.refine()
    u = np.random.default_rng(0).random((3, 2, 8))
    d = lp_difference(u, c, prolong(u, c, f), f, interior_box(c), 1.0, [0.5, 0.5])
    np.testing.assert_array_equal(d, 0.0)


def test_convergence_study_rejects_non_nested():
    a, b = problem(16), problem(48)
    with pytest.raises(ValueError, match="nested"):
        convergence_study([a, b], SineInitial(1.0, [(0.0, 1.0)]), EnsembleConfig(2))


def test_snapshot_cauchy_small_study_decreases():
    ps = [problem(n, T=0.1, noise=TanhNoise(4.0, 0.5)) for n in (16, 32, 64)]
    tab = convergence_study(ps, SineInitial(1.0, [(0.0, 1.0)]), EnsembleConfig(8, seed=1))
    assert len(tab.differences) == 2 and tab.monotone


def test_linear_entropy_residual_is_first_order_consistency_defect():
    # noiseless: the linear-entropy functional reduces to the upwind numerical
    # viscosity tested against psi, which halves with h
    from stochfv import config as cfgmod

    cfg = cfgmod.load_config(preset="entropy", overrides=["noise.name=none"])
    vals = []
    for n in (64, 128, 256):
        p, u0 = cfgmod.build_problem(cfg, [n])
        tr = run(p, project_initial(u0, p.mesh))
        pair = cfgmod.build_entropy(cfg, p.flux, "linear")
        vals.append(entropy_residual_path(tr, pair, cfgmod.build_test_function(cfg))["lhs"])
    assert vals[0] > 0
    for a, b in zip(vals, vals[1:]):
        assert 1.9 <= a / b <= 2.1
