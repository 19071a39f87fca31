"""Test functions for the L1 Gronwall argument, uniqueness gaps and a pathwise replay."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .integrate import ito_integral, stieltjes_integral
from .models import CoefficientPair
from .partition import QVResult, grid_step, interpolation_slack
from .paths import SampledPath
from .sde_euler import _qv_array, euler_solve, move_bound


@dataclass(frozen=True)
class TestFunctionParams:
    """Support ``[epsilon / delta, epsilon]`` of the test density."""

    __test__ = False  # not a pytest class

    epsilon: float
    delta: float

    def __post_init__(self):
        if not (self.epsilon > 0 and math.isfinite(self.epsilon)):
            raise ValueError("epsilon must be positive and finite")
        if not (self.delta > 1 and math.isfinite(self.delta)):
            raise ValueError("delta must exceed 1")

    @classmethod
    def for_level(cls, n: int) -> "TestFunctionParams":
        """``epsilon = 1/n``, ``delta = 2**(n/2)``: the choice balancing the two error terms."""
        if n < 1:
            raise ValueError("level must be >= 1")
        return cls(1.0 / n, 2.0 ** (n / 2.0))

    @property
    def lower(self) -> float:
        return self.epsilon / self.delta

    @property
    def log_delta(self) -> float:
        return math.log(self.delta)

    @property
    def second_derivative_bound(self) -> float:
        return 2.0 * self.delta / (self.epsilon * self.log_delta)


def _out(x, y):
    return float(y) if np.ndim(x) == 0 else y


def psi(x, p: TestFunctionParams):
    """Density ``1 / (x log delta)`` on ``[epsilon/delta, epsilon]``, zero elsewhere."""
    xa = np.asarray(x, dtype=np.float64)
    on = (xa >= p.lower) & (xa <= p.epsilon)
    safe = np.where(on, xa, 1.0)
    return _out(x, np.where(on, 1.0 / (safe * p.log_delta), 0.0))


def _ramp(y, p):
    # integral of psi over [0, y] for y >= 0
    inside = np.log(np.clip(y, p.lower, p.epsilon) / p.lower) / p.log_delta
    return np.where(y < p.lower, 0.0, np.where(y > p.epsilon, 1.0, inside))


def phi_prime(x, p: TestFunctionParams):
    xa = np.asarray(x, dtype=np.float64)
    return _out(x, np.sign(xa) * _ramp(np.abs(xa), p))


def phi(x, p: TestFunctionParams):
    """``int_0^|x| int_0^y psi(z) dz dy`` in closed form."""
    y = np.abs(np.asarray(x, dtype=np.float64))
    a, e, L = p.lower, p.epsilon, p.log_delta
    yc = np.clip(y, a, e)
    inside = (yc * np.log(yc / a) - yc + a) / L
    top = (e * math.log(e / a) - e + a) / L
    return _out(x, np.where(y < a, 0.0, np.where(y > e, top + (y - e), inside)))


def phi_second(x, p: TestFunctionParams):
    return psi(np.abs(np.asarray(x, dtype=np.float64)) if np.ndim(x) else abs(float(x)), p)


def psi_mass(p: TestFunctionParams) -> float:
    """Closed-form total mass of ``psi``."""
    return (math.log(p.epsilon) - math.log(p.lower)) / p.log_delta


def property_grid(p: TestFunctionParams, points: int = 100_000) -> np.ndarray:
    """Symmetric probe grid, dense around the support and out to ``4 epsilon``."""
    half = points // 2
    lin = np.linspace(0.0, 4.0 * p.epsilon, half - half // 2)
    geo = np.geomspace(p.lower / 4.0, p.epsilon * 4.0, half // 2)
    pos = np.union1d(lin, geo)
    return np.concatenate([-pos[::-1], pos])


def check_properties(p: TestFunctionParams, points: int = 100_000) -> dict:
    """Evaluate the test-function contracts on a probe grid.

    Returns a mapping from property name to ``(ok, worst_margin)``; a margin
    is how far the tightest point is from violating the inequality
    (nonnegative when it holds).
    """
    x = property_grid(p, points)
    ax = np.abs(x)
    ph, d1, d2, ps = phi(x, p), phi_prime(x, p), phi_second(x, p), psi(ax, p)
    tol = 1e-12
    res = {}
    m = float(np.min(p.epsilon + ph - ax))
    res["abs_le_eps_plus_phi"] = (m >= -tol, m)
    m = float(np.min(1.0 - np.abs(d1)))
    res["phi_prime_le_1"] = (m >= -tol, m)
    m = float(np.min(p.second_derivative_bound - d2))
    res["phi_second_bound"] = (m >= -tol, m)
    pos = ax > 0
    m = float(np.min(2.0 / (ax[pos] * p.log_delta) - ps[pos]))
    res["psi_le_2_over_x_log_delta"] = (m >= -tol, m)
    m = float(np.min(ps))
    res["psi_nonnegative"] = (m >= 0.0, m)
    m = 0.0 - float(np.max(np.abs(ph - phi(-x, p))))
    res["phi_even"] = (m >= 0.0, m)
    order = np.argsort(ax, kind="stable")
    m = float(np.min(np.diff(ph[order]))) if x.size > 1 else 0.0
    res["phi_nondecreasing_in_abs"] = (m >= -tol, m)
    m = 0.0 - abs(psi_mass(p) - 1.0)
    res["psi_unit_mass"] = (m >= -1e-12, m)
    return res


# --- uniqueness diagnostics -------------------------------------------------

def uniqueness_gap(X1: SampledPath, X2: SampledPath, horizon: float | None = None) -> float:
    """``sup_{t <= horizon} |X1_t - X2_t|`` on a shared grid."""
    if not X1.same_grid(X2):
        raise ValueError("paths must share one time grid")
    t = X1.times
    keep = slice(None) if horizon is None else t <= horizon
    d = np.abs(X1.values[keep] - X2.values[keep])
    return float(np.max(d)) if d.size else 0.0


@dataclass(frozen=True)
class GronwallReplay:
    """Pathwise replay of the L1 Gronwall estimate.

    ``rhs_path`` uses the assembled constant ``constant``; ``violated`` is
    judged against the relaxed right-hand side (``relax * constant``) plus
    ``slack``; ``violated_tight`` against the unrelaxed one.
    """

    lhs_path: SampledPath
    rhs_path: SampledPath
    rhs_relaxed_path: SampledPath
    violated: bool
    violated_tight: bool
    max_excess: float
    constant: float
    c_move: float
    slack: float
    params: TestFunctionParams
    ref_level: int


def assembled_constant(C_b: float, C_sigma: float, c_move: float) -> float:
    """Constant ``C`` with ``q [C_b c 2^-n + 4 C_s^2 / (n log 2) + 4 C_s^2 c 2^-n/2 / log 2]
    <= C q (2^-n/2 + 1/n)`` where ``c = C_{b,sigma} >= 1`` is the move constant."""
    return C_b * c_move + 4.0 * C_sigma ** 2 * c_move / math.log(2.0)


def gronwall_bound_replay(c: CoefficientPair, level: int, S: SampledPath, qv: QVResult,
                          x0: float, p: TestFunctionParams | None = None,
                          ref_level: int | None = None, corrupt: float = 0.0,
                          relax: float = 4.0, monitoring: str = "sampled") -> GronwallReplay:
    """Check the pathwise Gronwall estimate for the level-``n`` Euler error.

    With ``Y = X^ref - X^(n)`` (the reference Euler solve stands in for the
    strong solution) the estimate reads

    ``|Y_t| <= eps + C_b int |Y| d<S> + k <S>_t + M_t``,
    ``k = C_b c 2^-n + 2 C_s^2 / log(delta) + 2 C_s^2 c delta 2^-n / (eps log(delta))``

    where ``c`` is the move constant and
    ``M = int phi'(Y) (sigma(X^ref) - sigma(X^(n)_kappa)) dS`` is computed at
    the reference level.  For ``eps = 1/n``, ``delta = 2**(n/2)`` one has
    ``k <= C (2^-n/2 + 1/n)`` with ``C`` from :func:`assembled_constant`.
    ``relax`` scales ``k`` for the verdict in ``violated``.  ``corrupt`` is
    added to ``M`` on ``(0, T]`` to exercise the detector.
    """
    if not c.bounded or c.C_b is None or c.C_sigma is None:
        raise ValueError("replay needs declared bounds and regularity constants")
    if level < 1:
        raise ValueError("level must be >= 1")
    p = TestFunctionParams.for_level(level) if p is None else p
    if ref_level is None:
        ref_level = level + 6
        if qv.level is not None:
            ref_level = min(ref_level, qv.level)
    if ref_level <= level:
        raise ValueError("reference level must exceed the scheme level")
    xn = euler_solve(c, x0, S, qv, level, monitoring=monitoring, warn=False)
    xr = euler_solve(c, x0, S, qv, ref_level, monitoring=monitoring, warn=False)
    q = _qv_array(S, qv)
    h = grid_step(level)
    c_move = max(1.0, move_bound(c, level, S, q, monitoring) / h)
    Cs2 = c.C_sigma ** 2
    k = (c.C_b * c_move * h + 2.0 * Cs2 / p.log_delta
         + 2.0 * Cs2 * c_move * p.delta * h / (p.epsilon * p.log_delta))
    Y = xr.solution.values - xn.solution.values
    lo, hi = c.domain
    sig = c.vec("sigma")
    integrand = phi_prime(Y, p) * (sig(np.clip(xr.solution.values, lo, hi))
                                   - sig(np.clip(xn.anchor, lo, hi)))
    M = ito_integral(integrand, S, ref_level, monitoring=monitoring).values.copy()
    M[1:] += corrupt
    drift = c.C_b * stieltjes_integral(S.with_values(np.abs(Y)), S.with_values(q)).values
    lhs = np.abs(Y)
    rhs = p.epsilon + drift + k * q + M
    rhs_relaxed = p.epsilon + drift + relax * k * q + M
    slack = 10.0 * interpolation_slack(S, level)
    excess = lhs - rhs_relaxed
    return GronwallReplay(
        lhs_path=S.with_values(lhs), rhs_path=S.with_values(rhs),
        rhs_relaxed_path=S.with_values(rhs_relaxed),
        violated=bool(np.max(excess) > slack), violated_tight=bool(np.max(lhs - rhs) > slack),
        max_excess=float(np.max(excess)),
        constant=assembled_constant(c.C_b, c.C_sigma, c_move), c_move=c_move, slack=slack,
        params=p, ref_level=int(ref_level))
