import math
import threading
import warnings

import numpy as np
import pytest

import oracles
from pathwise import (TransformedDrift, assemble_solution, build_flow, custom,
                      doss_sussmann_experiment, euler_solve, generate_brownian, ito_integral,
                      lamperti_solve, limit_equation, piecewise_linear_bv_approximation, preset,
                      solve_Y, stieltjes_integral, wiener_calibration)
from pathwise.doss_sussmann import doss_sussmann_solve

TOL = 1e-6


def probe(flow, n=500, seed=0):
    rng = np.random.default_rng(seed)
    (xa, xb), (ya, yb) = flow.x_range, flow.y_range
    return rng.uniform(xa, xb, n), rng.uniform(ya, yb, n)


@pytest.fixture(scope="module")
def gbm_flow():
    return build_flow(preset("gbm"), TOL, x_range=(-3, 3), y_range=(0.5, 1.5), y_center=1.0)


@pytest.fixture(scope="module")
def tanh_flow():
    return build_flow(preset("tanh"), TOL, x_range=(-3, 3), y_range=(0.0, 2.0), y_center=1.0)


class TestFlow:
    def test_constant_sigma(self):
        f = build_flow(custom("0", "2", sigma_prime="0", sigma_second="0"), TOL)
        x, y = probe(f)
        assert np.allclose(f.g(x, y), y + 2.0 * x, rtol=0, atol=1e-12)
        assert np.allclose(f.rho(x, y), 1.0, rtol=0, atol=1e-12)

    def test_exponential_flow(self, gbm_flow):
        x, y = probe(gbm_flow)
        assert np.allclose(gbm_flow.g(x, y), y * np.exp(x), rtol=TOL, atol=TOL)
        assert np.allclose(gbm_flow.rho(x, y), np.exp(-x), rtol=TOL, atol=TOL)

    def test_sqrt_flow(self):
        c = custom("0", "sqrt(pos(x))", sigma_prime="0.5/sqrt(x)", sigma_second="-0.25/x**1.5")
        f = build_flow(c, TOL, x_range=(0.0, 1.0), y_range=(0.75, 1.25), y_center=1.0)
        ref = oracles.rk4_flow(c.sigma, 0.5, 1.0)
        assert ref == pytest.approx(1.5625, abs=1e-12)
        assert f.g(0.5, 1.0) == pytest.approx(1.5625, abs=TOL)

    def test_tanh_flow_against_closed_form(self, tanh_flow):
        assert oracles.rk4_flow(math.tanh, 1.5, 0.3) == pytest.approx(1.1173302098274782, abs=1e-13)
        assert tanh_flow.g(1.5, 0.3) == pytest.approx(1.117330209827476, abs=TOL)
        x, y = probe(tanh_flow, seed=1)
        assert np.allclose(tanh_flow.g(x, y), np.arcsinh(np.sinh(y) * np.exp(x)), rtol=0, atol=TOL)

    @pytest.mark.parametrize("name", ["gbm_flow", "tanh_flow"])
    def test_invariants(self, request, name):
        f = request.getfixturevalue(name)
        x, y = probe(f, seed=2)
        assert np.all(f.g(np.zeros_like(y), y) == y)
        assert np.all(f.g_y(x, y) > 0)
        assert np.max(f.residual(x, y)) <= TOL
        assert f.max_residual() <= TOL
        assert np.allclose(f.g_y(x, y) * f.rho(x, y), 1.0)

    def test_g_y_matches_differences(self, tanh_flow):
        x, y = probe(tanh_flow, n=50, seed=3)
        y = np.clip(y, 0.01, 1.99)
        e = 1e-5
        fd = (tanh_flow.g(x, y + e) - tanh_flow.g(x, y - e)) / (2 * e)
        assert np.allclose(tanh_flow.g_y(x, y), fd, rtol=1e-4, atol=1e-5)

    def test_without_second_derivative(self):
        c = preset("tanh", sigma_second=None)
        f = build_flow(c, TOL, x_range=(-2, 2), y_range=(0.5, 1.5), y_center=1.0)
        x, y = probe(f, seed=4)
        assert np.allclose(f.g(x, y), np.arcsinh(np.sinh(y) * np.exp(x)), rtol=0, atol=TOL)

    def test_without_first_derivative_warns(self):
        c = preset("tanh", sigma_prime=None, sigma_second=None)
        with pytest.warns(UserWarning):
            f = build_flow(c, 1e-5, x_range=(-1, 1), y_range=(0.5, 1.5), y_center=1.0)
        assert not f.sigma_prime_used
        g = math.asinh(math.sinh(1.0) * math.exp(0.7))
        assert f.rho(0.7, 1.0) == pytest.approx(math.cosh(g) / (math.cosh(1.0) * math.exp(0.7)),
                                                rel=1e-5)

    def test_lazy_extension_keeps_nodes(self, gbm_flow):
        f = build_flow(preset("gbm"), TOL, x_range=(-1, 1), y_range=(0.9, 1.1), y_center=1.0)
        before = f.g(0.3, 1.0)
        f.g(2.5, 1.4)
        assert f.extensions >= 1 and f.g(0.3, 1.0) == before

    def test_concurrent_extension(self):
        f = build_flow(preset("tanh"), 1e-5, x_range=(-0.5, 0.5), y_range=(0.9, 1.1), y_center=1.0)
        pts = [(np.linspace(-k, k, 101), np.full(101, 1.0 + 0.1 * k)) for k in range(1, 9)]
        serial_flow = build_flow(preset("tanh"), 1e-5, x_range=(-0.5, 0.5), y_range=(0.9, 1.1),
                                 y_center=1.0)
        serial_flow.ensure((-9, 9), (0.0, 2.0))
        out = [None] * len(pts)

        def work(i):
            out[i] = f.g(*pts[i])
        ts = [threading.Thread(target=work, args=(i,)) for i in range(len(pts))]
        for t in ts:
            t.start()
        for t in ts:
            t.join()
        for (x, y), got in zip(pts, out):
            assert np.array_equal(got, serial_flow.g(x, y))

    def test_blow_up_is_reported(self):
        with pytest.raises(ArithmeticError):
            build_flow(custom("0", "x**2", sigma_prime="2*x"), TOL, x_range=(-4, 4),
                       y_range=(0.5, 1.5), y_center=1.0)

    def test_unreachable_tolerance(self):
        with pytest.raises(RuntimeError):
            build_flow(preset("tanh"), 1e-15, max_nodes=1 << 12)

    def test_transformed_drift(self, tanh_flow):
        c = preset("tanh-drift")
        f = build_flow(c, TOL, x_range=(-2, 2), y_range=(0.5, 1.5), y_center=1.0)
        fd = TransformedDrift(f, c.b, {"sigma_prime_used": True})
        x, y = probe(f, 40)
        g = np.arcsinh(np.sinh(y) * np.exp(x))
        rho = np.cosh(g) / (np.cosh(y) * np.exp(x))
        assert np.allclose(fd(x, y), rho * -0.5 * np.tanh(g), atol=10 * TOL)


class TestSolve:
    def test_zero_drift(self, brownian, tanh_flow):
        S = brownian(0, 4096)
        Y = solve_Y(tanh_flow, preset("tanh"), 1.0, S, wiener_calibration(S))
        assert np.all(Y.values == 1.0)

    def test_constant_drift(self, brownian):
        c = custom("0.7", "1.5", sigma_prime="0", sigma_second="0")
        f = build_flow(c, TOL)
        S = brownian(1, 4096)
        from pathwise import discrete_qv
        qv = discrete_qv(S, 8)
        Y = solve_Y(f, c, 0.2, S, qv)
        assert np.allclose(Y.values, 0.2 + 0.7 * qv.values, rtol=0, atol=1e-9)
        X = assemble_solution(f, Y, S)
        assert np.allclose(X.values, 0.2 + 0.7 * qv.values + 1.5 * S.values, atol=1e-9)

    def test_gbm_any_driver(self, brownian, gbm_flow):
        S = brownian(2, 4096)
        for drv in (S, piecewise_linear_bv_approximation(S, 3)):
            Y = solve_Y(gbm_flow, preset("gbm"), 1.0, drv, wiener_calibration(S),
                        mode="against_qv_bv_driver")
            assert np.all(Y.values == 1.0)
            X = assemble_solution(gbm_flow, Y, drv)
            assert np.allclose(X.values, np.exp(drv.values), rtol=TOL, atol=0)

    def test_additive_case(self, brownian):
        c = preset("const")
        f = build_flow(c, TOL, y_center=0.3)
        S = brownian(3, 2048)
        X = doss_sussmann_solve(f, c, 0.3, S, wiener_calibration(S))
        assert np.allclose(X.values, 0.3 + S.values, rtol=0, atol=1e-12)

    def test_gbm_against_limit_euler(self):
        S = generate_brownian(60, 1.0, 1 << 22, 1).path(0)
        c = preset("gbm")
        qv = wiener_calibration(S)
        f = build_flow(c, TOL, x_range=(-5, 5), y_range=(0.5, 1.5), y_center=1.0)
        X = doss_sussmann_solve(f, c, 1.0, S, qv)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            Xe = euler_solve(limit_equation(c), 1.0, S, qv, 12).solution
        assert np.max(np.abs(X.values - Xe.values)) <= 0.02

    def test_flat_flow(self, brownian):
        c = custom("0", "0", sigma_prime="0", sigma_second="0")
        f = build_flow(c, TOL, y_center=0.4)
        S = brownian(4, 512)
        X = assemble_solution(f, S.with_values(np.full(len(S), 0.4)), S)
        assert np.allclose(X.values, 0.4, rtol=0, atol=1e-15)

    def test_limit_equation_residual(self):
        # X = g(S, Y) solves dX = (b + s s'/2)(X) dt + s(X) dS
        S = generate_brownian(61, 1.0, 1 << 20, 1).path(0)
        c = preset("tanh-drift")
        qv = wiener_calibration(S)
        f = build_flow(c, TOL, x_range=(-5, 5), y_range=(0.0, 2.0), y_center=1.0)
        X = doss_sussmann_solve(f, c, 1.0, S, qv)
        drift = limit_equation(c).vec("b")(X.values)
        mart = ito_integral(c.vec("sigma")(X.values), S, 8).values
        lebesgue = stieltjes_integral(X.with_values(drift), S.with_values(S.times)).values
        assert np.max(np.abs(X.values - 1.0 - lebesgue - mart)) <= 0.25

    def test_errors(self, brownian, gbm_flow):
        S = brownian(5, 64)
        with pytest.raises(ValueError):
            solve_Y(gbm_flow, preset("gbm"), 1.0, S, wiener_calibration(S), mode="bogus")
        with pytest.raises(ValueError):
            assemble_solution(gbm_flow, brownian(5, 32), S)
        with pytest.raises(TypeError):
            solve_Y(gbm_flow, preset("gbm"), 1.0, S, np.zeros(len(S)))


class TestLamperti:
    def test_zero_factor(self, brownian, tanh_flow):
        S = brownian(6, 2048)
        X = lamperti_solve(preset("tanh"), 1.0, S, wiener_calibration(S), flow=tanh_flow)
        assert np.allclose(X.values, tanh_flow.g(S.values, np.ones(len(S))), rtol=0, atol=0)

    def test_exponential_closed_form(self, brownian):
        S = brownian(7, 4096)
        c = custom("0.3*x", "x", sigma_prime="1", sigma_second="0", b_tilde="0.3")
        X = lamperti_solve(c, 1.0, S, wiener_calibration(S))
        assert np.allclose(X.values, np.exp(0.3 * S.times + S.values), rtol=1e-6, atol=0)

    def test_agrees_with_doss_sussmann_for_unit_sigma(self, brownian):
        S = brownian(8, 4096)
        c = custom("-0.5*x", "1", sigma_prime="0", sigma_second="0", b_tilde="-0.5*x")
        qv = wiener_calibration(S)
        f = build_flow(c, TOL, x_range=(-4, 4), y_center=0.5)
        Xl = lamperti_solve(c, 0.5, S, qv)
        Xd = doss_sussmann_solve(f, c, 0.5, S, qv)
        assert np.max(np.abs(Xl.values - Xd.values)) <= 1e-5

    def test_missing_factor(self, brownian):
        S = brownian(8, 64)
        with pytest.raises(ValueError):
            lamperti_solve(preset("tanh-drift"), 1.0, S, wiener_calibration(S))

    def test_unbounded_pair_warns(self, brownian):
        S = brownian(8, 256)
        c = custom("x*x", "x", sigma_prime="1", sigma_second="0", b_tilde="x")
        with pytest.warns(UserWarning):
            lamperti_solve(c, 0.1, S, wiener_calibration(S))


class TestExperiment:
    def test_additive_error_is_bv_distance(self):
        rep = doss_sussmann_experiment(preset("const"), 0.0, 3, 6, 1 << 12, 1.0, [2, 3, 4, 5])
        e = rep.extras["per_path_errors"]
        d = rep.extras["per_path_bv_dist"]
        assert np.allclose(e, d, rtol=0, atol=1e-12)
        assert np.all(d <= 2.0 * 2.0 ** -np.array([2, 3, 4, 5]))

    def test_gbm_small_batch_decreases(self):
        rep = doss_sussmann_experiment(preset("gbm"), 1.0, 4, 8, 1 << 14, 1.0, range(3, 8),
                                       euler_level=10)
        assert rep.strictly_decreasing()
        assert rep.extras["euler_gap_max"] <= 0.05
        assert "bv_sup_dist" in rep.to_csv().splitlines()[0]

    def test_thread_count_does_not_change_report(self):
        args = (preset("tanh"), 1.0, 5, 4, 1 << 12, 1.0, [2, 3, 4])
        assert (doss_sussmann_experiment(*args, threads=1).to_csv()
                == doss_sussmann_experiment(*args, threads=3).to_csv())

    def test_errors(self):
        with pytest.raises(ValueError):
            doss_sussmann_experiment(preset("gbm"), 1.0, 0, 2, 256, 1.0, [4, 3])
        with pytest.raises(ValueError):
            doss_sussmann_experiment(preset("cir-trunc"), 1.0, 0, 2, 256, 1.0, [3])
