"""Acceptance criteria, each judged at its stated tolerance.

Every check calls ``verdict`` which records a PASS/FAIL line; the lines are
printed together at the end of the pytest run.
"""

import math
import time

import numpy as np
import pytest

from conftest import verdict
from pathwise import (TestFunctionParams, TimeChange, convergence_experiment, discrete_qv,
                      doss_sussmann_experiment, estimate_qv, generate_brownian,
                      gronwall_bound_replay, integral_time_change_check, ito_formula_residual,
                      preset, qv_time_change_check, reference_solution, wiener_calibration)
from pathwise.partition import interpolation_slack
from pathwise.yamada import check_properties, psi_mass

pytestmark = [pytest.mark.slow, pytest.mark.filterwarnings("ignore:drift of")]

STEPS22 = 1 << 22


# --- 1: quadratic variation of Brownian motion -------------------------------

@pytest.fixture(scope="module")
def qv_batch():
    start = time.perf_counter()
    terminal, decreasing = [], []
    for S in generate_brownian(101, 1.0, STEPS22, 256):
        res, gaps = estimate_qv(S, 6, 10)  # gaps[k] = |V^(7+k) - V^(6+k)|_sup
        terminal.append(res.terminal)
        decreasing.append(bool(np.all(np.diff(gaps) < 0)))
    return np.array(terminal), np.array(decreasing), time.perf_counter() - start


def test_c1_terminal_qv(qv_batch):
    terminal, _, _ = qv_batch
    err = float(np.mean(np.abs(terminal - 1.0)))
    verdict("1 (mean |V^10_1 - 1|)", err <= 0.05, f"{err:.4f} <= 0.05 over 256 paths")


def test_c1_cauchy_gaps(qv_batch):
    _, decreasing, _ = qv_batch
    share = float(np.mean(decreasing))
    verdict("1 (Cauchy gaps decreasing, n = 6..9)", share >= 0.9,
            f"{share:.3f} of 256 paths (need 0.90)")


def test_c1_runtime(qv_batch):
    elapsed = qv_batch[2]
    verdict("1 (runtime)", elapsed <= 120.0, f"{elapsed:.1f} s <= 120 s")


# --- 2: exact time-change identities ------------------------------------------

def test_c2_time_change_identities():
    S = generate_brownian(102, 1.0, 1 << 12, 1).path(0)
    S2 = generate_brownian(102, 2.0, 1 << 12, 1).path(0)
    X, X2 = S.with_values(np.cos(S.values)), S2.with_values(np.cos(S2.values))
    # warm the compiled kernels so the timing covers the checks only
    qv_time_change_check(S, TimeChange.from_table(S.times, S.times), 2, S.times)
    start = time.perf_counter()
    ident = TimeChange.from_table(S.times, S.times)
    double = TimeChange(lambda t: 2.0 * t, strictly_increasing=True)
    half = S2.times / 2.0
    root = np.sqrt(S.times)
    square = TimeChange.from_table(root, S.times, strictly_increasing=True)
    exact = {
        "identity qv": qv_time_change_check(S, ident, 6, S.times),
        "identity integral": integral_time_change_check(X, S, ident, 6),
        "2t qv": qv_time_change_check(S2, double, 6, half, new_times=half),
        "2t integral": integral_time_change_check(X2, S2, double, 6, new_times=half),
        "t^2 qv": qv_time_change_check(S, square, 6, root),
    }
    eps = interpolation_slack(S, 6)
    slack = {"t^2 integral": integral_time_change_check(X, S, square, 6)}
    elapsed = time.perf_counter() - start
    ok = (all(d == 0.0 for d in exact.values()) and all(d <= eps for d in slack.values())
          and elapsed < 1.0)
    verdict("2", ok, f"{ {k: float(v) for k, v in exact.items()} } == 0; "
            f"{ {k: f'{v:.2e}' for k, v in slack.items()} } <= {eps:.2e}; "
            f"{elapsed:.3f} s < 1 s")


# --- 3: Ito formula ------------------------------------------------------------

def test_c3_ito_formula():
    sups = []
    for S in generate_brownian(103, 1.0, STEPS22, 128):
        r = ito_formula_residual(lambda y: y * y, lambda y: 2.0 * y, lambda y: 2.0, 1.0, 0.0,
                                 S, discrete_qv(S, 10), 8)
        sups.append(float(np.max(np.abs(r.values))))
    share = float(np.mean(np.array(sups) <= 0.05))
    verdict("3", share >= 0.95, f"{share:.3f} of 128 paths with |r| <= 0.05 (need 0.95); "
            f"worst {max(sups):.4f}")


# --- 4: Euler strong rate --------------------------------------------------------

def test_c4_cir_rate():
    start = time.perf_counter()
    rep = convergence_experiment(preset("cir"), 1.0, 104, 128, STEPS22, 1.0, range(4, 10), 12)
    elapsed = time.perf_counter() - start
    ok = rep.strictly_decreasing() and rep.fit_slope <= -0.4 and elapsed <= 600
    verdict("4 (CIR rate)", ok,
            f"errors {np.round(rep.errors, 5).tolist()} strictly decreasing: "
            f"{rep.strictly_decreasing()}; slope {rep.fit_slope:.3f} <= -0.4; {elapsed:.0f} s")


def test_c4_gbm_control():
    worst = 0.0
    for S in generate_brownian(105, 1.0, STEPS22, 16):
        r = reference_solution(preset("gbm"), 1.0, S, wiener_calibration(S), 12, [9])
        worst = max(worst, float(np.max(np.abs(r.solution.values
                                                - np.exp(S.values - 0.5 * S.times)))))
    verdict("4 (GBM control)", worst <= 0.02, f"max sup gap {worst:.4f} <= 0.02 on 16 paths")


# --- 5: test-function property suite --------------------------------------------

def test_c5_psi_phi_suite():
    sets = [(1.0, math.e), (0.1, 4.0)] + [(1.0 / n, 2.0 ** (n / 2)) for n in (4, 9)]
    start = time.perf_counter()
    failures = []
    for eps, delta in sets:
        p = TestFunctionParams(eps, delta)
        if abs(psi_mass(p) - 1.0) > 1e-12:
            failures.append((eps, delta, "mass"))
        props = check_properties(p, points=100_000)
        failures += [(eps, delta, k) for k, (ok, _) in props.items() if not ok]
    elapsed = time.perf_counter() - start
    verdict("5", not failures and elapsed < 1.0,
            f"failures {failures}; {len(sets)} parameter sets on 1e5 points in {elapsed:.3f} s")


# --- 6: Gronwall replay -----------------------------------------------------------

@pytest.mark.parametrize("name", ["tanh", "cir-trunc"])
def test_c6_gronwall_replay(name):
    c = preset(name)
    violated = flagged = 0
    worst = -math.inf
    for S in generate_brownian(106, 1.0, 1 << 16, 64):
        qv = wiener_calibration(S)
        r = gronwall_bound_replay(c, 6, S, qv, 1.0)
        violated += r.violated
        worst = max(worst, r.max_excess - r.slack)
        flagged += gronwall_bound_replay(c, 6, S, qv, 1.0, corrupt=-1.0).violated
    verdict(f"6 ({name})", violated == 0 and flagged == 64,
            f"{violated}/64 violations (worst excess over slack {worst:.3g}); "
            f"corrupted martingale flagged on {flagged}/64")


# --- 7: ODE-transform convergence --------------------------------------------------

@pytest.mark.parametrize("name", ["gbm", "tanh"])
def test_c7_transform_convergence(name):
    rep = doss_sussmann_experiment(preset(name), 1.0, 107, 64, 1 << 16, 1.0, range(3, 9),
                                   euler_level=12)
    gap = rep.extras["euler_gap_max"]
    ok = rep.strictly_decreasing() and gap <= 0.05
    verdict(f"7 ({name})", ok,
            f"errors {np.round(rep.errors, 5).tolist()} strictly decreasing: "
            f"{rep.strictly_decreasing()}; max sup gap to Euler level 12 {gap:.4f} <= 0.05")


def test_c7_constant_sigma_degeneration():
    rep = doss_sussmann_experiment(preset("const"), 0.0, 107, 64, 1 << 16, 1.0, range(3, 9))
    diff = float(np.max(np.abs(rep.extras["per_path_errors"] - rep.extras["per_path_bv_dist"])))
    verdict("7 (constant sigma)", diff <= 1e-12,
            f"max |error - |S^(n) - S|| = {diff:.2e} <= 1e-12")


# --- 8: determinism -------------------------------------------------------------------

def test_c8_determinism(tmp_path):
    from pathwise.cli import run
    from test_cli import SMALL
    differing = []
    for command, args in SMALL.items():
        outs = []
        for threads in ("1", "2", "4"):
            d = tmp_path / f"{command}-{threads}"
            d.mkdir()
            out = d / "data.csv"
            assert run([command, *args, "--threads", threads, "--out", str(out)]) == 0
            outs.append(sorted((p.name, p.read_bytes()) for p in d.iterdir()
                               if not p.name.endswith(".meta.json")))
        if not (outs[0] == outs[1] == outs[2]):
            differing.append(command)
    verdict("8", not differing, f"{len(SMALL)} commands x threads 1/2/4; differing: {differing}")
