"""ODE transforms of one-dimensional SDEs: the flow of sigma, the transformed drift,
pathwise ODE solves and the BV-approximation experiment."""

from __future__ import annotations

import math
import threading
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from numba import njit

from . import _kernels as K
from ._parallel import ordered_map
from .models import CoefficientPair, limit_equation
from .partition import QVResult
from .paths import SampledPath, generate_brownian, piecewise_linear_bv_approximation
from .sde_euler import (ConvergenceReport, _qv_array, driver_qv, euler_solve,
                        summarize_errors)

MODES = ("against_qv", "against_qv_bv_driver")
_FD_STEP = 2.0 ** -14


@njit(nogil=True)
def _no_second(x):
    return 0.0


def _fd_derivative(fn):
    jf = K.jit_scalar(fn)
    e = 2.0 ** -20
    if jf is None:
        return lambda x: (fn(x + e) - fn(x - e)) / (2.0 * e)

    @njit(nogil=True)
    def d(x):
        return (jf(x + e) - jf(x - e)) / (2.0 * e)
    return d


class FlowTable:
    """Cached flow ``g(x, y)`` of ``dg/dx = sigma(g)``, ``g(0, y) = y``.

    The flow and ``L = log dg/dy`` are integrated with RK4 along ``x`` for a
    lattice of ``y`` values and evaluated by bicubic Hermite interpolation
    using the exact node derivatives ``g_x = sigma(g)``, ``g_y = e^L``.  The
    lattice spacing is fixed at build time; queries outside the current
    rectangle extend it lazily under a lock.  Node values never depend on
    how far the table has been extended.

    Use :func:`build_flow` to construct.
    """

    def __init__(self, c: CoefficientPair, tolerance: float, dx: float, dy: float,
                 y_center: float, substeps: int = 4, limit: float = 1e12):
        self.c = c
        self.tolerance = float(tolerance)
        self.dx = float(dx)
        self.dy = float(dy)
        self.y_center = float(y_center)
        self.substeps = int(substeps)
        self.limit = float(limit)
        self.sigma_prime_used = c.sigma_prime is not None
        self._sigma = c.sigma
        self._dsigma = c.sigma_prime if c.sigma_prime is not None else _fd_derivative(c.sigma)
        self._d2 = c.sigma_second
        self._lock = threading.Lock()
        self._state = None
        self.extensions = 0

    # -- construction ------------------------------------------------------

    def _rows(self, ys, nneg, npos):
        has_d2 = self._d2 is not None
        d2 = self._d2 if has_d2 else _no_second
        G, L, LY, status = K.call_kernel(
            K.flow_integrate, (self._sigma, self._dsigma, d2),
            np.ascontiguousarray(ys, dtype=np.float64), int(nneg), int(npos), self.dx,
            self.substeps, tail=(has_d2, self.limit))
        if status != 0:
            raise FloatingPointError(
                f"flow of sigma blows up within x in [{-nneg * self.dx:g}, {npos * self.dx:g}]")
        if not has_d2:
            # per-row central differences keep node values local to the row
            Lp = K.call_kernel(K.flow_integrate, (self._sigma, self._dsigma, _no_second),
                               np.ascontiguousarray(ys + _FD_STEP), int(nneg), int(npos),
                               self.dx, self.substeps, tail=(False, self.limit))
            Lm = K.call_kernel(K.flow_integrate, (self._sigma, self._dsigma, _no_second),
                               np.ascontiguousarray(ys - _FD_STEP), int(nneg), int(npos),
                               self.dx, self.substeps, tail=(False, self.limit))
            if Lp[3] != 0 or Lm[3] != 0:
                raise FloatingPointError("flow of sigma blows up near the table edge")
            LY = (Lp[1] - Lm[1]) / (2.0 * _FD_STEP)
        return G, L, LY

    def _assemble(self, jlo, jhi, nneg, npos):
        ys = self.y_center + self.dy * np.arange(jlo, jhi + 1, dtype=np.float64)
        G, L, LY = self._rows(ys, nneg, npos)
        sig = K.vectorize(self._sigma)
        dsig = K.vectorize(self._dsigma)
        eL = np.exp(L)
        GX = sig(G)
        GY = eL
        LX = dsig(G)
        GXY = LX * eL
        if self._d2 is not None:
            LXY = K.vectorize(self._d2)(G) * eL
        else:
            # row-local, so node values stay independent of the table extent
            LXY = _row_local_dy(self._dsigma, G, eL)
        tables = (np.ascontiguousarray(G), np.ascontiguousarray(GX),
                  np.ascontiguousarray(GY), np.ascontiguousarray(GXY))
        ltables = (np.ascontiguousarray(L), np.ascontiguousarray(LX),
                   np.ascontiguousarray(LY), np.ascontiguousarray(LXY))
        xlo = -nneg * self.dx
        ylo = float(ys[0])
        for a in tables + ltables:
            a.setflags(write=False)
        lat = (0.0, self.dx, int(nneg), self.y_center, self.dy, int(-jlo))
        return {"jlo": jlo, "jhi": jhi, "nneg": nneg, "npos": npos, "xlo": xlo,
                "ylo": ylo, "lat": lat, "G": tables, "L": ltables}

    def ensure(self, x_range, y_range):
        """Make sure ``[x_range] x [y_range]`` is covered; returns the current state."""
        xa, xb = float(x_range[0]), float(x_range[1])
        ya, yb = float(y_range[0]), float(y_range[1])
        st = self._state
        if st is not None and self._covers(st, xa, xb, ya, yb):
            return st
        with self._lock:
            st = self._state
            if st is not None and self._covers(st, xa, xb, ya, yb):
                return st
            nneg = max(int(math.ceil(-xa / self.dx)) + 2, 2)
            npos = max(int(math.ceil(xb / self.dx)) + 2, 2)
            jlo = int(math.floor((ya - self.y_center) / self.dy)) - 2
            jhi = int(math.ceil((yb - self.y_center) / self.dy)) + 2
            if st is not None:
                # grow geometrically so repeated small overshoots stay cheap
                nneg = max(nneg, st["nneg"], 2 * st["nneg"] if nneg > st["nneg"] else 0)
                npos = max(npos, st["npos"], 2 * st["npos"] if npos > st["npos"] else 0)
                span = st["jhi"] - st["jlo"]
                jlo = min(jlo, st["jlo"], st["jlo"] - span if jlo < st["jlo"] else st["jlo"])
                jhi = max(jhi, st["jhi"], st["jhi"] + span if jhi > st["jhi"] else st["jhi"])
                self.extensions += 1
            self._state = self._assemble(jlo, jhi, nneg, npos)
            return self._state

    def _covers(self, st, xa, xb, ya, yb):
        xlo = st["xlo"]
        xhi = st["npos"] * self.dx
        ylo = st["ylo"]
        yhi = self.y_center + st["jhi"] * self.dy
        return xlo <= xa and xb <= xhi and ylo <= ya and yb <= yhi

    @property
    def x_range(self):
        st = self._state
        return (st["xlo"], st["npos"] * self.dx)

    @property
    def y_range(self):
        st = self._state
        return (st["ylo"], self.y_center + st["jhi"] * self.dy)

    # -- evaluation --------------------------------------------------------

    def _eval(self, table, x, y, dxord=0):
        x = np.asarray(x, dtype=np.float64)
        y = np.asarray(y, dtype=np.float64)
        x, y = np.broadcast_arrays(x, y)
        shape = x.shape
        xf = np.ascontiguousarray(x.reshape(-1))
        yf = np.ascontiguousarray(y.reshape(-1))
        if xf.size == 0:
            return np.empty(shape)
        st = self.ensure((xf.min(), xf.max()), (yf.min(), yf.max()))
        F, FX, FY, FXY = st[table]
        out = K.bicubic_many(F, FX, FY, FXY, st["lat"], xf, yf, dxord)
        return out.reshape(shape)

    def g(self, x, y):
        """Flow value; exactly ``y`` at ``x = 0``."""
        out = self._eval("G", x, y)
        x = np.broadcast_to(np.asarray(x, dtype=np.float64), out.shape)
        yb = np.broadcast_to(np.asarray(y, dtype=np.float64), out.shape)
        out = np.where(x == 0.0, yb, out)
        return float(out) if out.ndim == 0 else out

    def log_g_y(self, x, y):
        out = self._eval("L", x, y)
        out = np.where(np.broadcast_to(np.asarray(x), out.shape) == 0.0, 0.0, out)
        return float(out) if out.ndim == 0 else out

    def g_y(self, x, y):
        return np.exp(self.log_g_y(x, y))

    def rho(self, x, y):
        """``1 / g_y``."""
        return np.exp(-self.log_g_y(x, y))

    def g_x(self, x, y):
        """``sigma(g(x, y))`` (the defining identity)."""
        return K.vectorize(self._sigma)(np.asarray(self.g(x, y), dtype=np.float64))

    def dg_dx_interpolated(self, x, y):
        """x-derivative of the interpolant itself, for residual checks."""
        out = self._eval("G", x, y, dxord=1)
        return float(out) if out.ndim == 0 else out

    def residual(self, x, y):
        """``|d/dx g_interp - sigma(g_interp)|`` at the given points."""
        return np.abs(self.dg_dx_interpolated(x, y) - self.g_x(x, y))

    def cell_centres(self):
        st = self._state
        nx = st["nneg"] + st["npos"]
        ny = st["jhi"] - st["jlo"]
        xc = st["xlo"] + self.dx * (np.arange(nx) + 0.5)
        yc = st["ylo"] + self.dy * (np.arange(max(ny, 1)) + 0.5)
        return np.meshgrid(xc, yc)

    def directional_residuals(self):
        """Worst residual between x nodes on the rows and between y nodes on the columns.

        Along ``x`` the derivative error of the cubic Hermite interpolant
        vanishes at cell midpoints and peaks at fractions
        ``1/2 +- 1/(2 sqrt 3)``, so those are probed; along ``y`` the value
        error peaks at the midpoint.
        """
        st = self._state
        nx = st["nneg"] + st["npos"]
        ny = st["jhi"] - st["jlo"]
        xn = st["xlo"] + self.dx * np.arange(nx + 1)
        yn = st["ylo"] + self.dy * np.arange(ny + 1)
        off = 0.5 / math.sqrt(3.0)
        xs = np.concatenate([xn[:-1] + (0.5 - off) * self.dx, xn[:-1] + (0.5 + off) * self.dx])
        xa, ya = np.meshgrid(xs, yn)
        xb, yb = np.meshgrid(xn, yn[:-1] + 0.5 * self.dy)
        return (float(np.max(self.residual(xa.ravel(), ya.ravel()))),
                float(np.max(self.residual(xb.ravel(), yb.ravel()))))

    def max_residual(self) -> float:
        xc, yc = self.cell_centres()
        return float(np.max(self.residual(xc.ravel(), yc.ravel())))

    @property
    def tables(self):
        st = self._state
        return st["G"], st["L"], st["lat"]


def _row_local_dy(dsigma, G, eL):
    # d/dy sigma'(g(x, y)) = sigma''(g) g_y, with sigma'' by central differences
    d = K.vectorize(dsigma)
    e = _FD_STEP
    return (d(G + e) - d(G - e)) / (2.0 * e) * eL


@dataclass(frozen=True)
class TransformedDrift:
    """``f(x, y) = rho(x, y) b(g(x, y))``."""

    flow: FlowTable
    b: object
    provenance: dict = field(default_factory=dict)

    def __call__(self, x, y):
        vb = K.vectorize(self.b)
        return self.flow.rho(x, y) * vb(np.asarray(self.flow.g(x, y), dtype=np.float64))


def build_flow(c: CoefficientPair, tolerance: float = 1e-6, x_range=(-4.0, 4.0),
               y_range=None, y_center=None, dx: float = 1.0 / 16, max_nodes: int = 1 << 22,
               substeps: int = 4) -> FlowTable:
    """Integrate the flow of ``sigma`` on a rectangle and refine until it is accurate.

    The lattice spacing is halved along ``x`` or ``y``, whichever carries
    the larger interpolation error, until the residual
    ``|dg/dx - sigma(g)|`` at every cell centre is at most ``tolerance``.

    Parameters
    ----------
    c : CoefficientPair
        ``sigma`` is required; ``sigma_prime`` and ``sigma_second`` are used
        when present (finite differences otherwise).
    tolerance : float
    x_range, y_range : (float, float)
        Initial rectangle; ``y_range`` defaults to ``x0 +- 1``.
    y_center : float, optional
        Lattice anchor in ``y``; defaults to ``c.x0``.
    """
    if not tolerance > 0:
        raise ValueError("tolerance must be positive")
    yc = float(c.x0 if y_center is None else y_center)
    if y_range is None:
        y_range = (yc - 1.0, yc + 1.0)
    if c.sigma_prime is None:
        warnings.warn("sigma_prime not supplied; g_y uses finite differences", UserWarning,
                      stacklevel=2)
    hx = hy = float(dx)
    area = (x_range[1] - x_range[0]) * (y_range[1] - y_range[0])
    while True:
        flow = FlowTable(c, tolerance, hx, hy, yc, substeps=substeps)
        flow.ensure(x_range, y_range)
        ex, ey = flow.directional_residuals()
        if max(ex, ey) <= tolerance / 2 and flow.max_residual() <= tolerance:
            return flow
        # halve only the direction whose interpolation error dominates
        if ex > tolerance / 2:
            hx /= 2.0
        if ey > tolerance / 2 or ex <= tolerance / 2:
            hy /= 2.0
        if area / (hx * hy) > max_nodes:
            raise RuntimeError(
                f"flow table cannot reach tolerance {tolerance:g} (residuals {ex:.3g} along x, "
                f"{ey:.3g} along y at spacing {flow.dx:g} x {flow.dy:g})")


def _range(a, pad=0.0):
    return float(np.min(a)) - pad, float(np.max(a)) + pad


def _integrator(qv_or_bv, driver: SampledPath) -> np.ndarray:
    if isinstance(qv_or_bv, QVResult):
        return _qv_array(driver, qv_or_bv)
    if isinstance(qv_or_bv, SampledPath):
        if qv_or_bv.same_grid(driver):
            return np.ascontiguousarray(qv_or_bv.values)
        return np.interp(driver.times, qv_or_bv.times, qv_or_bv.values)
    raise TypeError("integrator must be a QVResult or a SampledPath")


def _ode_solve(kernel, fn, flow, drv, q, x0, with_l, tol, max_refine, max_extend=12):
    """Run a midpoint kernel, extending the flow table when the path leaves it."""
    y_guess = (x0 - 1.0, x0 + 1.0)
    pad = 4 * flow.dx
    extra = 0.0
    for _ in range(max_extend):
        xr = _range(drv, pad + extra)
        st = flow.ensure(xr, y_guess)
        gt, lt = st["G"], st["L"]
        args = (drv, q, float(x0), gt, lt) if with_l else (drv, q, float(x0), gt)
        Y, status, j, where = K.call_kernel(
            kernel, (fn,), *args, st["lat"],
            tail=(float(tol), int(max_refine)))
        if status == 0:
            return Y, j
        if status == 2:
            raise RuntimeError(
                f"ODE step halving did not converge to {tol:g} after {max_refine} halvings")
        # table exceeded near sample `where`: widen around the solution so far
        seen = Y[:max(where, 1)]
        lo, hi = _range(seen)
        span = max(hi - lo, flow.dy * 8, 1.0)
        y_guess = (min(y_guess[0], lo - span), max(y_guess[1], hi + span))
        extra = extra * 2.0 + 1.0
    raise RuntimeError("ODE solution keeps leaving the flow table")


def solve_Y(flow: FlowTable, c: CoefficientPair, x0: float, driver: SampledPath, qv_or_bv,
            mode: str = "against_qv", tolerance: float | None = None,
            max_refine: int = 12) -> SampledPath:
    """Solve ``Y_t = x0 + int_0^t f(D_u, Y_u) d<S>_u`` along a driver ``D``.

    ``D`` is ``S`` itself (``mode="against_qv"``) or a bounded-variation
    approximation of it (``"against_qv_bv_driver"``); the integrator is the
    quadratic variation of ``S`` in both cases.  Explicit midpoint with
    ``2**j`` substeps per sample interval; ``j`` grows until two successive
    solutions agree within ``tolerance``.
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    driver.require_origin("driver")
    q = _integrator(qv_or_bv, driver)
    tol = flow.tolerance if tolerance is None else float(tolerance)
    drv = np.ascontiguousarray(driver.values)
    Y, _ = _ode_solve(K.ds_drift_solve, c.b, flow, drv, q, x0, True, tol, max_refine)
    return driver.with_values(Y, copy=False)


def assemble_solution(flow: FlowTable, Y: SampledPath, driver: SampledPath) -> SampledPath:
    """``X_t = g(D_t, Y_t)`` pointwise on the shared grid."""
    if not Y.same_grid(driver):
        raise ValueError("Y and the driver must share one grid")
    return driver.with_values(flow.g(driver.values, Y.values), copy=False)


def doss_sussmann_solve(flow: FlowTable, c: CoefficientPair, x0: float, driver: SampledPath,
                        qv_or_bv, mode: str = "against_qv") -> SampledPath:
    Y = solve_Y(flow, c, x0, driver, qv_or_bv, mode)
    return assemble_solution(flow, Y, driver)


def lamperti_solve(c: CoefficientPair, x0: float, S: SampledPath, qv: QVResult,
                   flow: FlowTable | None = None, tolerance: float = 1e-8,
                   max_refine: int = 12) -> SampledPath:
    """Solve ``Z_t = int_0^t b_tilde(g(Z_s + S_s, x0)) d<S>_s`` and return
    ``X_t = g(Z_t + S_t, x0)``, for drifts factorised as ``b = sigma b_tilde``."""
    if c.b_tilde is None:
        raise ValueError("Lamperti transform needs the factor b_tilde with b = sigma * b_tilde")
    S.require_origin("driver")
    _probe_boundedness(c)
    if flow is None:
        flow = build_flow(c, tolerance=max(tolerance, 1e-6), x_range=_range(S.values, 1.0),
                          y_center=x0, y_range=(x0 - 0.5, x0 + 0.5))
    q = _qv_array(S, qv)
    drv = np.ascontiguousarray(S.values)
    Z, _ = _ode_solve(K.lamperti_drift_solve, c.b_tilde, flow, drv, q, x0, False, tolerance,
                      max_refine)
    return S.with_values(flow.g(Z + drv, np.full(drv.shape, float(x0))), copy=False)


def _probe_boundedness(c: CoefficientPair, radius: float = 1e3):
    x = np.linspace(-radius, radius, 2001)
    with np.errstate(all="ignore"):
        bt = np.abs(K.vectorize(c.b_tilde)(x))
        sg = np.abs(K.vectorize(c.sigma)(x))
    grows = lambda v: not np.all(np.isfinite(v)) or v.max() > 0.1 * radius
    if grows(bt) and grows(sg):
        warnings.warn("neither b_tilde nor sigma looks bounded on probes", UserWarning,
                      stacklevel=3)


# --- experiment -------------------------------------------------------------

def doss_sussmann_experiment(c: CoefficientPair, x0: float, seed: int, num_paths: int,
                             steps: int, horizon: float, bv_levels: Sequence[int],
                             qv_mode: str = "wiener_dt", qv_level: int | None = None,
                             tolerance: float = 1e-6, euler_level: int | None = None,
                             threads: int | None = None) -> ConvergenceReport:
    """Sup-error of ``X^(n) = g(S^(n), Y^(n))`` against ``X = g(S, Y)`` per BV level.

    ``S^(n)`` is the piecewise-linear interpolation through the level-``n``
    crossings of ``S``.  With ``euler_level`` set, the limit solution is
    also compared with the Euler solve at that level of the SDE with drift
    ``b + sigma sigma'/2``; the mean and max of that sup gap, and the max
    gap of the finest ``X^(n)``, go to ``extras``.
    """
    levels = [int(l) for l in bv_levels]
    if not levels or any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("bv_levels must be a non-empty increasing sequence")
    if c.sigma_prime is None:
        raise ValueError("the transform experiment needs sigma_prime")
    batch = generate_brownian(seed, horizon, steps, num_paths)
    R = 5.0 * math.sqrt(horizon)
    flow = build_flow(c, tolerance=tolerance, x_range=(-R, R), y_center=x0,
                      y_range=(x0 - 1.0, x0 + 1.0))
    lim = limit_equation(c) if euler_level is not None else None
    qv_level = 14 if qv_level is None else int(qv_level)

    def one(i):
        S = batch.path(i)
        qv = driver_qv(S, qv_mode, qv_level)
        X = doss_sussmann_solve(flow, c, x0, S, qv, "against_qv").values
        errs = np.empty(len(levels))
        dist = np.empty(len(levels))
        for j, lev in enumerate(levels):
            Sn = piecewise_linear_bv_approximation(S, lev)
            Xn = doss_sussmann_solve(flow, c, x0, Sn, qv, "against_qv_bv_driver").values
            errs[j] = K.sup_abs_diff(Xn, X)
            dist[j] = K.sup_abs_diff(Sn.values, S.values)
        gap = (math.nan, math.nan)
        if lim is not None:
            Xe = euler_solve(lim, x0, S, qv, euler_level, warn=False).solution.values
            gap = (K.sup_abs_diff(Xe, X), K.sup_abs_diff(Xe, Xn))
        return errs, dist, gap

    out = ordered_map(one, range(num_paths), threads)
    errors = np.array([o[0] for o in out])
    dists = np.array([o[1] for o in out])
    gaps = np.array([o[2] for o in out])
    extras = {"model": c.name, "qv_mode": qv_mode, "flow_spacing": flow.dx,
              "per_path_errors": errors, "per_path_bv_dist": dists}
    if lim is not None:
        extras.update(euler_level=euler_level, euler_gap_mean=float(np.mean(gaps[:, 0])),
                      euler_gap_max=float(np.max(gaps[:, 0])),
                      euler_gap_finest_max=float(np.max(gaps[:, 1])))
    return summarize_errors(levels, errors, bv_dist=dists, extras=extras)
