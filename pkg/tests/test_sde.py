import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from fbmlab.errors import DivergenceError, DomainError, EllipticityError, GridMismatchError, RegimeError
from fbmlab.fbm_core import SamplePath, TimeGrid, sample_fbm_cholesky
from fbmlab.rng import RandomStream
from fbmlab.sde import (FlowMap, SdeProblem, VectorFieldSet, arctan_fields, const_fields,
                        doss_sussmann_flow, flow_inverse, make_fields, malliavin_deriv_additive,
                        malliavin_profile_additive, sin_shift_fields, solve_additive_ode,
                        solve_piecewise_linear, solve_young_euler, tanh_net_fields)


def fbm(h, n_steps, n_paths, seed, t=1.0, d=1):
    return sample_fbm_cholesky(h, TimeGrid.uniform(n_steps, t), d, n_paths, RandomStream(seed))


def linear_fields():
    return VectorFieldSet(1, 1, None, lambda x: x[..., None], lam=1e-6, Lam=1e6)


def test_young_euler_exact_for_constant_fields():
    b = fbm(0.7, 50, 4, 1, d=2)
    fields = const_fields(0.0, np.array([[1.0, 0.5], [0.0, 2.0]]), m=2)
    x = solve_young_euler(SdeProblem([1.0, -1.0], fields, 0.7, "young-multid"), b)
    expected = np.array([1.0, -1.0]) + np.einsum("md,pkd->pkm", np.array([[1.0, 0.5], [0.0, 2.0]]), b.values)
    assert np.allclose(x.values, expected, atol=1e-13)


def test_young_euler_linear_field_converges_to_exponential():
    errors = []
    for n in (64, 256, 1024):
        b = fbm(0.75, 1024, 20, 2)
        coarse = b.at(TimeGrid.uniform(n))
        x = solve_young_euler(SdeProblem(1.0, linear_fields(), 0.75, "multiplicative-1d"), coarse)
        errors.append(np.max(np.abs(x.values[:, -1, 0] - np.exp(b.values[:, -1, 0]))))
    assert errors[0] > errors[1] > errors[2]


def test_young_euler_zero_driver_follows_drift():
    grid = TimeGrid.uniform(1000)
    b = SamplePath(grid, np.zeros((1, 1001, 1)))
    fields = const_fields(2.0, 1.0)
    x = solve_young_euler(SdeProblem(0.5, fields, 0.7, "young-multid"), b)
    assert np.allclose(x.values[0, :, 0], 0.5 + 2.0 * grid.times, atol=1e-12)


def test_young_euler_guards():
    b = fbm(0.7, 10, 1, 3)
    with pytest.raises(RegimeError):
        SdeProblem(0.0, linear_fields(), 0.4, "multiplicative-1d")
    with pytest.raises(DivergenceError):
        solve_young_euler(SdeProblem(1.0, linear_fields(), 0.7, "multiplicative-1d"),
                          SamplePath(b.grid, 100.0 * b.values), cap=10.0)
    with pytest.raises(GridMismatchError):
        solve_young_euler(SdeProblem(1.0, linear_fields(), 0.7, "multiplicative-1d"), fbm(0.7, 10, 1, 3, d=2))


def test_problem_mode_checks():
    with pytest.raises(DomainError):
        SdeProblem([0.0, 0.0], const_fields(0.0, 1.0), 0.7, "young-multid")
    with pytest.raises(DomainError):
        SdeProblem(0.0, sin_shift_fields(), 0.7, "additive-1d")
    with pytest.raises(DomainError):
        SdeProblem(0.0, const_fields(0.0, 1.0), 0.7, "no-such-mode")


def test_additive_solver_examples():
    b = fbm(0.3, 100, 3, 4)
    x = solve_additive_ode(0.7, lambda z: np.zeros_like(z), 1.5, b)
    assert np.array_equal(x.values, 0.7 + 1.5 * b.values)
    x = solve_additive_ode(0.7, lambda z: np.full_like(z, 2.0), 1.5, b)
    assert np.allclose(x.values[..., 0], 0.7 + 2.0 * b.times + 1.5 * b.values[..., 0], atol=1e-13)


def test_additive_solver_matches_young_euler():
    gaps = []
    for n in (64, 256, 1024):
        b = fbm(0.75, 1024, 10, 5).at(TimeGrid.uniform(n))
        ode = solve_additive_ode(0.0, np.sin, 1.0, b)
        fields = VectorFieldSet(1, 1, np.sin, lambda x: np.ones(x.shape + (1,)), additive=True)
        euler = solve_young_euler(SdeProblem(0.0, fields, 0.75, "additive-1d"), b)
        gaps.append(np.max(np.abs(ode.values - euler.values)))
    order = np.log2(gaps[0] / gaps[2]) / 4
    assert gaps[2] < 1e-2 and order >= 0.5


def test_additive_solver_rejects_nonfinite():
    with pytest.raises(DivergenceError):
        solve_additive_ode(0.0, lambda z: np.full_like(z, np.nan), 1.0, fbm(0.3, 4, 1, 0))


def test_flow_constant_field():
    assert doss_sussmann_flow(lambda z: np.full_like(z, 3.0), 0.4, 1.0) == pytest.approx(2.2, abs=1e-12)


def test_flow_residual_and_group_property():
    v1 = lambda z: 2 + np.sin(z)
    flow = FlowMap(v1, y0=0.3)
    xs = np.linspace(-3, 3, 61)
    assert np.max(np.abs(flow.derivative(xs) - v1(flow(xs)))) <= 1e-8
    assert flow(0.0) == 0.3
    for x1, x2 in [(0.5, 1.2), (-1.0, 0.3), (2.0, -2.5)]:
        assert flow(x1 + x2) == pytest.approx(doss_sussmann_flow(v1, x2, flow(x1)), abs=1e-8)


def test_flow_residual_against_step_halving():
    v1 = lambda z: 2 + np.sin(z)
    coarse, fine = FlowMap(v1, step=2e-3), FlowMap(v1, step=1e-3)
    xs = np.linspace(-2, 2, 41)
    assert np.max(np.abs(coarse(xs) - fine(xs))) <= 1e-8


def test_flow_linear_growth():
    v1 = lambda z: 2 + np.sin(z)
    for x, y in [(5.0, 1.0), (-4.0, -2.0)]:
        assert abs(doss_sussmann_flow(v1, x, y)) <= 3 * (1 + abs(x) + abs(y))


def test_flow_inverse_examples():
    assert flow_inverse(lambda z: np.full_like(z, 2.0), 1.5, 0.5) == pytest.approx(0.5)
    assert flow_inverse(np.sin, 1.0, 1.0) == 0.0
    v1 = lambda z: 2 + np.sin(z)
    for x, a in [(1.0, 0.0), (-2.0, 0.5), (3.0, -1.0)]:
        assert doss_sussmann_flow(v1, flow_inverse(v1, x, a), a) == pytest.approx(x, abs=1e-8)
    with pytest.raises(EllipticityError):
        flow_inverse(np.sin, 4.0, 1.0)


@settings(max_examples=100, deadline=None)
@given(st.floats(-3, 3), st.floats(0.01, 3), st.floats(1.2, 4), st.floats(0, 1))
def test_flow_inverse_sandwich(a, dx, level, amp):
    v1 = lambda z: level + amp * np.sin(z)
    lam, Lam = level - amp, level + amp
    inv = flow_inverse(v1, a + dx, a)
    assert dx / Lam - 1e-12 <= abs(inv) <= dx / lam + 1e-12


def test_malliavin_trivial_cases():
    times = np.linspace(0, 1, 11)
    x = (times, np.sin(times))
    assert malliavin_deriv_additive(0.3, 0.8, x, lambda z: np.zeros_like(z), 1.7) == 1.7
    assert malliavin_deriv_additive(0.6, 0.6, x, np.cos, 1.7) == pytest.approx(1.7)
    with pytest.raises(DomainError):
        malliavin_deriv_additive(0.9, 0.6, x, np.cos, 1.0)


def test_malliavin_matches_variational_ode():
    fields = arctan_fields(1.0, 1.0)
    b = fbm(0.75, 400, 1, 6)
    x = solve_additive_ode(0.0, lambda z: np.arctan(z), 1.0, b)
    times, xv = x.times, x.values[0, :, 0]
    deriv = lambda z: 1 / (1 + z ** 2)
    coef = lambda s: np.interp(s, times, deriv(xv))
    for r, t in [(0.1, 0.9), (0.0, 1.0), (0.35, 0.6)]:
        sol = solve_ivp(lambda s, y: coef(s) * y, (r, t), [1.0], rtol=1e-11, atol=1e-13,
                        t_eval=[t], max_step=times[1])
        closed = malliavin_deriv_additive(r, t, x, deriv, 1.0)
        assert closed == pytest.approx(sol.y[0, -1], rel=1e-4)
        assert np.exp(-(t - r)) <= closed <= np.exp(t - r)
    assert fields.v0_deriv_bound == 1.0


def test_malliavin_profile_matches_pointwise():
    times = np.linspace(0, 1, 21)
    xv = np.cos(3 * times)
    prof = malliavin_profile_additive(times, xv[None], np.cos, 2.0)
    mids = 0.5 * (times[1:] + times[:-1])
    point = [malliavin_deriv_additive(r, 1.0, (times, xv), np.cos, 2.0) for r in mids]
    assert np.allclose(prof[0], point, rtol=1e-12)


def test_doss_sussmann_matches_young_euler():
    v1 = lambda z: 2 + np.sin(z)
    fields = sin_shift_fields(drift=0.0)
    b = fbm(0.7, 2048, 50, 7)
    euler = solve_young_euler(SdeProblem(0.0, fields, 0.7, "multiplicative-1d"), b)
    flow = FlowMap(v1)
    exact = flow(b.values[:, -1, 0])
    assert np.max(np.abs(euler.values[:, -1, 0] - exact)) < 0.1
    rk = solve_piecewise_linear(SdeProblem(0.0, fields, 0.7, "multiplicative-1d"), b.at(TimeGrid.uniform(64)))
    assert np.max(np.abs(rk.values[:, -1, 0] - exact)) < 1e-4


def test_field_registry_and_ellipticity(rng):
    fields = make_fields("tanh_net", m=2)
    lo, hi = fields.check_ellipticity(rng.normal(size=(100, 2)) * 3)
    assert fields.lam <= lo <= hi <= fields.Lam
    with pytest.raises(EllipticityError):
        tanh_net_fields(m=2, amp=0.6)
    with pytest.raises(EllipticityError):
        sin_shift_fields(level=1.0, amp=1.0)
    with pytest.raises(DomainError):
        make_fields("nope")
