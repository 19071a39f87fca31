"""Step-function integrals, the stopping-time Itô integral and the pathwise Itô formula."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import _kernels as K
from .partition import (QVResult, check_level, grid_step, monitoring_code)
from .paths import SampledPath, TimeChange, compose_time_change, evaluate


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function ``F_t = levels[k]`` on ``[jump_times[k], jump_times[k+1])``.

    Repeated jump times are allowed; the last level given for an instant wins.
    """

    jump_times: np.ndarray
    levels: np.ndarray

    def __post_init__(self):
        jt = np.asarray(self.jump_times, dtype=np.float64)
        lv = np.asarray(self.levels, dtype=np.float64)
        if jt.ndim != 1 or jt.shape != lv.shape or jt.size == 0:
            raise ValueError("jump_times and levels must be equal-length 1-D sequences")
        if jt[0] != 0.0:
            raise ValueError("jump_times must start at 0")
        if np.any(np.diff(jt) < 0):
            raise ValueError("jump_times must be nondecreasing")
        if not (np.all(np.isfinite(jt)) and np.all(np.isfinite(lv))):
            raise ValueError("jump_times and levels must be finite")
        object.__setattr__(self, "jump_times", jt)
        object.__setattr__(self, "levels", lv)

    def __call__(self, t):
        k = np.searchsorted(self.jump_times, np.asarray(t, dtype=np.float64), side="right") - 1
        return self.levels[k]

    def sample(self, times) -> np.ndarray:
        return np.asarray(self(times), dtype=np.float64)


@dataclass(frozen=True)
class IntegralResult:
    """An integral as a path ``t -> int_0^t``.

    ``est_error`` is the sup gap to the next-coarser approximation level
    (0 for exact sums, NaN when no coarser level exists).
    """

    value_path: SampledPath
    approximation_level: int | None
    est_error: float

    @property
    def values(self):
        return self.value_path.values

    @property
    def times(self):
        return self.value_path.times

    @property
    def terminal(self) -> float:
        return float(self.value_path.values[-1])


def _eval_grid(default_times, eval_times):
    if eval_times is None:
        return np.asarray(default_times)
    et = np.atleast_1d(np.asarray(eval_times, dtype=np.float64))
    if et[0] != 0.0:
        raise ValueError("eval_times must start at 0")
    return et


def _on_times(grid_path: SampledPath, values, eval_times) -> SampledPath:
    if eval_times is None:
        return grid_path.with_values(values)
    et = _eval_grid(None, eval_times)
    if et[-1] > grid_path.horizon:
        raise ValueError("eval_times outside the integrator domain")
    return SampledPath(et, np.interp(et, grid_path.times, values))


def step_integral(F: StepFunction, S: SampledPath, eval_times=None) -> IntegralResult:
    """Exact left-point sum ``sum_n F_n (S(t_{n+1} ^ t) - S(t_n ^ t))``.

    Examples
    --------
    >>> S = SampledPath([0.0, 1.0], [0.0, 1.0])
    >>> F = StepFunction([0.0, 0.5], [1.0, -1.0])
    >>> step_integral(F, S).terminal
    0.0
    """
    jt = F.jump_times
    if jt[-1] > S.horizon:
        raise ValueError("jump_times extend beyond the integrator domain")
    et = _eval_grid(S.times, eval_times)
    if et[-1] > S.horizon:
        raise ValueError("eval_times outside the integrator domain")
    s_jump = evaluate(S, jt)
    s_jump = np.atleast_1d(s_jump)
    # complete increments between consecutive jumps, then the partial one
    full = np.concatenate([[0.0], np.cumsum(F.levels[:-1] * np.diff(s_jump))])
    k = np.searchsorted(jt, et, side="right") - 1
    vals = full[k] + F.levels[k] * (np.interp(et, S.times, S.values) - s_jump[k])
    return IntegralResult(SampledPath(et, vals), None, 0.0)


def _integrand_rows(X, S: SampledPath) -> np.ndarray:
    if callable(X) and not isinstance(X, SampledPath):
        X = X(S)
    if isinstance(X, SampledPath):
        if not X.same_grid(S):
            raise ValueError("integrand and integrator must share one time grid")
        rows = X.values[None, :]
    else:
        rows = np.atleast_2d(np.asarray(X, dtype=np.float64))
        if np.ndim(X) == 0:
            rows = np.full((1, len(S)), float(X))
        if rows.shape[1] != len(S):
            raise ValueError("integrand length does not match the integrator grid")
    if not np.all(np.isfinite(rows)):
        raise ValueError("integrand must be finite")
    return np.ascontiguousarray(rows, dtype=np.float64)


def ito_sums(X, S: SampledPath, level: int, monitoring: str = "sampled") -> np.ndarray:
    """Raw stopping-time step sums on the sample grid, one row per integrand.

    The stops are shared: a stop happens as soon as any integrand row or
    ``S`` has moved by ``2**-level`` since the previous stop.
    """
    rows = _integrand_rows(X, S)
    mode = monitoring_code(monitoring)
    h = grid_step(level)
    seg, theta = K.rho_stops(rows, S.values, h, mode)
    return np.stack([K.step_sum_on_grid(r, S.values, seg, theta) for r in rows])


def ito_integral(X, S: SampledPath, level: int, eval_times=None,
                 monitoring: str = "sampled"):
    """Model-free Itô integral of ``X`` against ``S`` at approximation level ``n``.

    The integrand is frozen at stopping times at which either the integrand
    or ``S`` has moved by ``2**-n``, and the left-point step sum is returned.

    Parameters
    ----------
    X : SampledPath, array_like or callable
        Integrand values along this path on the grid of ``S``.  A 2-D array
        integrates several integrands on one shared stopping grid.  A callable
        is applied to ``S`` first.
    S : SampledPath
        Integrator; must start at 0.
    level : int
    eval_times : array_like, optional
        Output times; off-grid times interpolate the grid values linearly.
    monitoring : {"sampled", "interpolated"}

    Returns
    -------
    IntegralResult or list of IntegralResult
        A list when ``X`` is 2-D.  ``est_error`` is the sup gap to level
        ``n - 1`` (NaN at level 0).
    """
    S.require_origin("integrator")
    check_level(S, level, monitoring, cap=True)
    rows = _integrand_rows(X, S)
    for r in rows:
        check_level(S.with_values(r), level, monitoring, cap=True)
    fine = ito_sums(rows, S, level, monitoring)
    if level >= 1:
        coarse = ito_sums(rows, S, level - 1, monitoring)
        gaps = [K.sup_abs_diff(a, b) for a, b in zip(fine, coarse)]
    else:
        gaps = [float("nan")] * len(rows)
    out = [IntegralResult(_on_times(S, v, eval_times), int(level), float(g))
           for v, g in zip(fine, gaps)]
    if np.ndim(X) == 2:
        return out
    return out[0]


def _merged(X: SampledPath, A: SampledPath):
    if X.same_grid(A):
        return A.times, X.values, A.values
    end = min(X.horizon, A.horizon)
    t = np.union1d(X.times[X.times <= end], A.times[A.times <= end])
    return t, np.interp(t, X.times, X.values), np.interp(t, A.times, A.values)


def stieltjes_integral(X, A: SampledPath, eval_times=None, monotone: bool = False) -> IntegralResult:
    """Left-point Riemann–Stieltjes sum of ``X`` against a BV integrator ``A``.

    Work is done on the union of both sample grids.  With ``monotone`` set,
    ``A`` is checked to be nondecreasing.
    """
    if not isinstance(X, SampledPath):
        X = A.with_values(np.broadcast_to(np.asarray(X, dtype=np.float64), A.values.shape))
    if monotone and np.any(np.diff(A.values) < 0):
        raise ValueError("integrator declared monotone but decreases")
    t, x, a = _merged(X, A)
    vals = np.empty(t.size)
    vals[0] = 0.0
    np.cumsum(x[:-1] * np.diff(a), out=vals[1:])
    grid = SampledPath(t, vals)
    if eval_times is None:
        return IntegralResult(A.with_values(vals) if X.same_grid(A) else grid, None, 0.0)
    et = _eval_grid(None, eval_times)
    return IntegralResult(SampledPath(et, evaluate(grid, et)), None, 0.0)


def _as_path(z, S: SampledPath, name: str) -> SampledPath:
    if isinstance(z, SampledPath):
        if not z.same_grid(S):
            raise ValueError(f"{name} must share the grid of S")
        return z
    return S.with_values(np.broadcast_to(np.asarray(z, dtype=np.float64), S.values.shape))


def _qv_on(S: SampledPath, qv: QVResult) -> SampledPath:
    q = qv.qv_path
    if q.same_grid(S):
        return q
    if q.horizon < S.horizon:
        raise ValueError("qv path does not cover the integrator domain")
    return S.with_values(np.interp(S.times, q.times, q.values))


def ito_formula_residual(f: Callable, f_prime: Callable, f_second: Callable, A, B,
                         S: SampledPath, qv: QVResult, level: int,
                         monitoring: str = "sampled") -> SampledPath:
    """Pathwise Itô formula defect for ``Y = int A dS + int B du``.

    ``r_t = f(Y_t) - f(Y_0) - int f'(Y) B du - int f'(Y) A dS
    - 1/2 int f''(Y) A^2 d<S>``, with the ``dS`` integrals taken at
    ``level`` and ``<S>`` from ``qv``.  ``A`` and ``B`` may be paths on the
    grid of ``S`` or constants.
    """
    if qv.level is not None and qv.level < level:
        raise ValueError(f"qv level {qv.level} is coarser than the integral level {level}")
    A = _as_path(A, S, "A")
    B = _as_path(B, S, "B")
    clock = S.with_values(S.times)
    Y = ito_integral(A, S, level, monitoring=monitoring).values \
        + stieltjes_integral(B, clock).values
    Yp = S.with_values(Y)
    fy = np.asarray(f(Y), dtype=np.float64)
    d1 = np.asarray(f_prime(Y), dtype=np.float64) * np.ones_like(Y)
    d2 = np.asarray(f_second(Y), dtype=np.float64) * np.ones_like(Y)
    drift = stieltjes_integral(Yp.with_values(d1 * B.values), clock).values
    mart = ito_integral(d1 * A.values, S, level, monitoring=monitoring).values
    corr = stieltjes_integral(Yp.with_values(d2 * A.values ** 2), _qv_on(S, qv)).values
    return S.with_values(fy - fy[0] - drift - mart - 0.5 * corr)


def integral_time_change_check(X: SampledPath, S: SampledPath, phi: TimeChange, level: int,
                               eval_times=None, new_times=None,
                               monitoring: str = "sampled") -> float:
    """``max_t |int_0^{phi(t)} X dS - int_0^t (X o phi) d(S o phi)|``.

    Both sides are stopping-time integrals at ``level``.  ``eval_times``
    defaults to the composed grid.
    """
    if not X.same_grid(S):
        raise ValueError("integrand and integrator must share one time grid")
    Sc = compose_time_change(S, phi, new_times)
    Xc = compose_time_change(X, phi, Sc.times)
    et = Sc.times if eval_times is None else _eval_grid(None, eval_times)
    lhs = evaluate(ito_integral(Xc, Sc, level, monitoring=monitoring).value_path, et)
    mapped = np.atleast_1d(phi(et))
    rhs = np.interp(mapped, S.times, ito_sums(X, S, level, monitoring)[0])
    return float(np.max(np.abs(np.atleast_1d(lhs) - rhs)))
