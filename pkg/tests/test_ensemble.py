import numpy as np
import pytest

from stochfv.diagnostics import ContinuityObserver, MomentObserver
from stochfv.ensemble import EnsembleConfig, EnsembleError, lag1_correlation, run_ensemble
from stochfv.mesh import build_uniform_mesh
from stochfv.models import ConstantVelocity, burgers_flux
from stochfv.noise import TanhNoise, ZeroNoise
from stochfv.solver import Problem, SchemeConfig, SineInitial, l2_norm_squared, project_initial, run


def _problem(noise, n=32, T=0.1):
    mesh = build_uniform_mesh(1, [(0.0, 1.0)], (n,), [True])
    p = Problem.build(mesh, burgers_flux(3.0), ConstantVelocity([1.0]), noise, SchemeConfig(T=T))
    return p, project_initial(SineInitial(1.0, mesh.bounds), mesh)


def test_config_validation():
    with pytest.raises(ValueError):
        EnsembleConfig(n_paths=0)
    with pytest.raises(ValueError):
        EnsembleConfig(n_paths=4, workers=0)


def test_single_path_matches_run():
    p, u0 = _problem(TanhNoise(4.0, 0.5))
    res = run_ensemble(EnsembleConfig(n_paths=1, seed=7), p, u0, [MomentObserver()])
    tr = run(p, u0, seed=7, path_index=0)
    final = float((tr.states[-1] ** 2) @ p.mesh.cell_volume)
    assert res.per_path["moment"]["final"][0] == final


def test_path_k_matches_run_with_index_k():
    p, u0 = _problem(TanhNoise(4.0, 0.5))
    res = run_ensemble(EnsembleConfig(n_paths=40, seed=3, chunk_size=16), p, u0, [MomentObserver()])
    for k in (0, 17, 39):
        tr = run(p, u0, seed=3, path_index=k)
        assert res.per_path["moment"]["final"][k] == float((tr.states[-1] ** 2) @ p.mesh.cell_volume)


def test_worker_count_does_not_change_results():
    p, u0 = _problem(TanhNoise(4.0, 0.5))
    obs = [MomentObserver(), ContinuityObserver()]
    a = run_ensemble(EnsembleConfig(n_paths=70, seed=5, workers=1), p, u0, obs)
    b = run_ensemble(EnsembleConfig(n_paths=70, seed=5, workers=2), p, u0, obs)
    for name in ("moment", "continuity"):
        for key, v in a.per_path[name].items():
            np.testing.assert_array_equal(v, b.per_path[name][key])
    sa, sb = a.series["moment"]["moment"], b.series["moment"]["moment"]
    np.testing.assert_array_equal(sa.mean, sb.mean)
    np.testing.assert_array_equal(sa.stderr, sb.stderr)


def test_zero_noise_gives_zero_variance():
    p, u0 = _problem(ZeroNoise())
    res = run_ensemble(EnsembleConfig(n_paths=10), p, u0, [MomentObserver()])
    final = res.per_path["moment"]["final"]
    assert np.all(final == final[0])
    s = res.series["moment"]["moment"]
    assert np.all(s.stderr <= 1e-15 * s.mean)
    assert s.mean[0] == pytest.approx((u0 * u0) @ p.mesh.cell_volume, rel=1e-15)
    # cell averages lose (pi h)^2 / 3 of the continuous norm
    cont = l2_norm_squared(SineInitial(1.0, p.mesh.bounds), p.mesh)
    assert s.mean[0] / cont == pytest.approx((np.sin(np.pi / 32) / (np.pi / 32)) ** 2, rel=1e-12)


def test_paths_are_uncorrelated_across_indices():
    p, u0 = _problem(TanhNoise(4.0, 0.5), n=16, T=0.05)
    res = run_ensemble(EnsembleConfig(n_paths=600, seed=11), p, u0, [MomentObserver()])
    r, se = lag1_correlation(res.per_path["moment"]["final"])
    assert abs(r) <= 4 * se


def test_lag1_correlation_detects_structure():
    r, se = lag1_correlation(np.repeat(np.arange(200.0), 2))
    assert r > 10 * se
    assert lag1_correlation([1.0, 1.0, 1.0]) == (0.0, 0.0)


def test_blow_up_census_raises():
    p, u0 = _problem(ZeroNoise(), n=8)
    u0 = u0.copy()
    u0[3] = 1e200
    with pytest.raises(EnsembleError, match="blew up"), np.errstate(over="ignore", invalid="ignore"):
        run_ensemble(EnsembleConfig(n_paths=4), p, u0, [MomentObserver()])


def test_blow_up_tolerated_below_threshold():
    p, u0 = _problem(ZeroNoise(), n=8)
    u0 = u0.copy()
    u0[3] = 1e200
    with np.errstate(over="ignore", invalid="ignore"):
        res = run_ensemble(EnsembleConfig(n_paths=2, max_blowup_fraction=1.0), p, u0, [MomentObserver()])
    assert res.n_ok == 0 and len(res.blown) == 2
