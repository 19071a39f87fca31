"""Euler scheme on joint dyadic stopping grids of S and <S>, and strong-rate experiments."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import _kernels as K
from ._parallel import ordered_map
from .models import CoefficientPair
from .partition import (QVResult, check_level, discrete_qv, grid_step, monitoring_code,
                        wiener_calibration)
from .paths import SampledPath, fmt, generate_brownian

TRIGGER_NAMES = {K.TRIGGER_S: "SCrossing", K.TRIGGER_QV: "QVCrossing",
                 K.TRIGGER_S | K.TRIGGER_QV: "SCrossing|QVCrossing"}


# --- coefficient validation -------------------------------------------------

@dataclass(frozen=True)
class CoefficientReport:
    lipschitz_ok: bool
    holder_ok: bool
    bounded_ok: bool
    worst_ratios: dict
    witnesses: dict = field(default_factory=dict)


def _probe_pairs(rng, count, lo, hi):
    half = count // 2
    x = rng.uniform(lo, hi, count)
    y = np.empty(count)
    y[:half] = rng.uniform(lo, hi, half)
    # close pairs catch local violations of a Hölder or Lipschitz bound
    scale = 10.0 ** rng.uniform(-8, -1, count - half)
    y[half:] = np.clip(x[half:] + scale * (hi - lo) * rng.choice([-1.0, 1.0], count - half), lo, hi)
    keep = x != y
    return x[keep], y[keep]


def validate_coefficients(c: CoefficientPair, probe_count: int = 10_000,
                          probe_range=(-10.0, 10.0), seed: int = 0) -> CoefficientReport:
    """Falsification probes of the declared regularity constants.

    Draws ``probe_count`` pairs in ``probe_range`` (half far apart, half
    close) and compares ``|b(x)-b(y)|/|x-y|`` with ``C_b``,
    ``|s(x)-s(y)|/|x-y|**0.5`` with ``C_sigma`` and sup values with the
    declared bounds.  Undeclared constants pass vacuously; their worst ratio
    is still reported.
    """
    if probe_count < 2:
        raise ValueError("probe_count must be >= 2")
    lo, hi = (float(v) for v in probe_range)
    if not lo < hi:
        raise ValueError("probe_range must be a nondegenerate interval")
    rng = np.random.default_rng(seed)
    x, y = _probe_pairs(rng, int(probe_count), lo, hi)
    vb = c.vec("b")
    vs = c.vec("sigma")
    bx, by, sx, sy = vb(x), vb(y), vs(x), vs(y)
    d = np.abs(x - y)
    rb = np.abs(bx - by) / d
    rs = np.abs(sx - sy) / np.sqrt(d)
    ib, is_ = int(np.argmax(rb)), int(np.argmax(rs))
    ratios = {"lipschitz_b": float(rb[ib]), "holder_sigma": float(rs[is_]),
              "sup_b": float(max(np.max(np.abs(bx)), np.max(np.abs(by)))),
              "sup_sigma": float(max(np.max(np.abs(sx)), np.max(np.abs(sy))))}
    tol = 1e-9
    lip = c.C_b is None or ratios["lipschitz_b"] <= c.C_b * (1 + tol) + tol
    hol = c.C_sigma is None or ratios["holder_sigma"] <= c.C_sigma * (1 + tol) + tol
    bnd = ((c.bound_b is None or ratios["sup_b"] <= c.bound_b * (1 + tol) + tol)
           and (c.bound_sigma is None or ratios["sup_sigma"] <= c.bound_sigma * (1 + tol) + tol))
    wit = {}
    if not lip:
        wit["lipschitz_b"] = (float(x[ib]), float(y[ib]))
    if not hol:
        wit["holder_sigma"] = (float(x[is_]), float(y[is_]))
    return CoefficientReport(bool(lip), bool(hol), bool(bnd), ratios, wit)


# --- the scheme -------------------------------------------------------------

@dataclass(frozen=True)
class EulerGrid:
    """Stopping grid of the scheme.

    ``segment[k]``/``theta[k]`` place stop ``k`` at fraction ``theta`` of the
    sample interval ending at index ``segment[k]``; ``trigger`` holds bit
    flags (1 = S reached a new level, 2 = <S> did).
    """

    level: int
    times: np.ndarray
    trigger: np.ndarray
    segment: np.ndarray
    theta: np.ndarray

    def __len__(self):
        return self.times.size

    def trigger_names(self) -> list:
        return ["Start"] + [TRIGGER_NAMES[int(f)] for f in self.trigger[1:]]


@dataclass(frozen=True)
class EulerDiagnostics:
    stopping_count: int
    sup_drift_step: float
    sup_diff_step: float
    sup_move: float
    clamp_count: int
    move_bound: float | None


@dataclass(frozen=True)
class SolveResult:
    solution: SampledPath
    grid: EulerGrid
    level: int
    diagnostics: EulerDiagnostics
    anchor: np.ndarray = field(repr=False, default=None)
    reference: bool = False


def _qv_array(S: SampledPath, qv: QVResult) -> np.ndarray:
    q = qv.qv_path
    if q.same_grid(S):
        return np.ascontiguousarray(q.values)
    if q.horizon < S.horizon:
        raise ValueError("qv path does not cover the driver domain")
    return np.interp(S.times, q.times, q.values)


def move_bound(c: CoefficientPair, level: int, S: SampledPath, q: np.ndarray,
               monitoring: str) -> float | None:
    """Bound on ``|X_u - X_tau|`` between stops, or None without declared bounds.

    Exact grid hits give ``(bound_b + bound_sigma) 2**-n``.  Sampled stops can
    overshoot a level by one sample step, counted twice for re-centring.
    """
    if not c.bounded:
        return None
    h = grid_step(level)
    if monitoring_code(monitoring) == K.INTERPOLATED:
        ss = sq = 0.0
    else:
        ss = 2.0 * S.max_step()
        sq = 2.0 * (float(np.max(np.abs(np.diff(q)))) if q.size > 1 else 0.0)
    return c.bound_b * (h + sq) + c.bound_sigma * (h + ss)


def euler_solve(c: CoefficientPair, x0: float, S: SampledPath, qv: QVResult, level: int,
                monitoring: str = "sampled", check_bounds: bool = True,
                warn: bool = True) -> SolveResult:
    """Frozen-coefficient Euler scheme on the joint stopping grid of ``S`` and ``<S>``.

    Between consecutive stops ``tau_k`` the solution is
    ``X_t = X_tau + b(X_tau) (q_t - q_tau) + sigma(X_tau) (S_t - S_tau)``;
    a stop happens when ``S`` or ``q = <S>`` reaches a new level of
    ``2**-level * Z``.  The state is clamped into ``c.domain`` before
    ``sigma`` is evaluated.

    Parameters
    ----------
    c : CoefficientPair
    x0 : float
    S : SampledPath
        Driver starting at 0.
    qv : QVResult
        ``<S>`` on the grid of ``S`` at a level >= ``level``, or the Wiener
        calibration.
    level : int
    monitoring : {"sampled", "interpolated"}
    check_bounds : bool
        Assert the move bound when ``c`` declares sup bounds.
    warn : bool
        Warn when the drift has no declared bound.  Batch callers pass
        False and warn once themselves, since warning filters are not
        thread-safe.

    Returns
    -------
    SolveResult
    """
    S.require_origin("driver")
    if qv.level is not None and qv.level < level:
        raise ValueError(f"qv level {qv.level} is coarser than the scheme level {level}")
    check_level(S, level, monitoring, cap=True)
    if not math.isfinite(x0):
        raise ValueError("x0 must be finite")
    q = _qv_array(S, qv)
    h = grid_step(level)
    s = np.ascontiguousarray(S.values)
    seg, theta, trig = K.euler_stops(s, q, h, monitoring_code(monitoring))
    lo, hi = (float(v) for v in c.domain)
    X, anchor, diag = K.call_kernel(K.euler_walk, (c.b, c.sigma), s, q, seg, theta, float(x0),
                                    tail=(lo, hi))
    if not np.all(np.isfinite(X)):
        raise FloatingPointError("Euler solution left the finite range")
    t = S.times
    prev = t[np.maximum(seg - 1, 0)]
    times = np.where(theta == 1.0, t[seg], prev + theta * (t[seg] - prev))
    times[0] = 0.0
    grid = EulerGrid(level=int(level), times=times, trigger=trig, segment=seg, theta=theta)
    bound = move_bound(c, level, S, q, monitoring)
    if warn and bound is None and c.bound_b is None and check_bounds:
        warnings.warn(f"drift of {c.name!r} has no declared bound; move-bound check skipped",
                      UserWarning, stacklevel=2)
    if check_bounds and bound is not None and diag[2] > bound * (1 + 1e-12) + 1e-15:
        raise AssertionError(
            f"per-step move {diag[2]:.6g} exceeds the bound {bound:.6g} at level {level}")
    d = EulerDiagnostics(stopping_count=int(seg.size - 1), sup_drift_step=float(diag[0]),
                         sup_diff_step=float(diag[1]), sup_move=float(diag[2]),
                         clamp_count=int(diag[3]), move_bound=bound)
    return SolveResult(S.with_values(X), grid, int(level), d, anchor)


def reference_solution(c: CoefficientPair, x0: float, S: SampledPath, qv: QVResult,
                       ref_level: int, compare_levels: Sequence[int] = (),
                       monitoring: str = "sampled") -> SolveResult:
    """Finest-level Euler solve used as the stand-in for the strong solution."""
    if compare_levels and ref_level <= max(compare_levels):
        raise ValueError(
            f"reference level {ref_level} must exceed every compared level {max(compare_levels)}")
    r = euler_solve(c, x0, S, qv, ref_level, monitoring=monitoring, warn=False)
    return SolveResult(r.solution, r.grid, r.level, r.diagnostics, r.anchor, reference=True)


# --- convergence report -----------------------------------------------------

@dataclass(frozen=True)
class ConvergenceRow:
    level: int
    n_effective: int
    num_paths: int
    mean_sup_error: float
    std_err: float
    bv_sup_dist: float | None = None


@dataclass(frozen=True)
class ConvergenceReport:
    rows: tuple
    fit_slope: float
    reference_level: int | None
    extras: dict = field(default_factory=dict)

    @property
    def levels(self) -> list:
        return [r.level for r in self.rows]

    @property
    def errors(self) -> np.ndarray:
        return np.array([r.mean_sup_error for r in self.rows])

    def strictly_decreasing(self) -> bool:
        e = self.errors
        return bool(np.all(np.diff(e) < 0))

    def to_csv(self) -> str:
        with_bv = any(r.bv_sup_dist is not None for r in self.rows)
        head = "level,n_effective,num_paths,mean_sup_error,std_err"
        lines = [head + (",bv_sup_dist" if with_bv else "")]
        for r in self.rows:
            cells = [str(r.level), str(r.n_effective), str(r.num_paths),
                     fmt(r.mean_sup_error), fmt(r.std_err)]
            if with_bv:
                cells.append(fmt(r.bv_sup_dist))
            lines.append(",".join(cells))
        lines.append(f"fit_slope,{fmt(self.fit_slope)}")
        return "\n".join(lines) + "\n"

    def write_csv(self, target) -> None:
        Path(target).write_text(self.to_csv())

    @classmethod
    def read_csv(cls, source) -> "ConvergenceReport":
        lines = [l for l in Path(source).read_text().splitlines() if l.strip()]
        head = lines[0].split(",")
        with_bv = "bv_sup_dist" in head
        rows = []
        slope = math.nan
        for line in lines[1:]:
            cells = line.split(",")
            if cells[0] == "fit_slope":
                slope = float(cells[1])
                continue
            rows.append(ConvergenceRow(int(cells[0]), int(cells[1]), int(cells[2]),
                                       float(cells[3]), float(cells[4]),
                                       float(cells[5]) if with_bv else None))
        return cls(tuple(rows), slope, None)


def fit_loglog_slope(x, y) -> float:
    """Least-squares slope of ``log y`` against ``log x``; NaN if undefined."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    ok = (x > 0) & (y > 0)
    if ok.sum() < 2:
        return math.nan
    return float(np.polyfit(np.log(x[ok]), np.log(y[ok]), 1)[0])


def summarize_errors(levels, errors, n_effective=None, reference_level=None,
                     bv_dist=None, extras=None) -> ConvergenceReport:
    """Reduce a ``(paths, levels)`` error table to a report, in path order."""
    errors = np.asarray(errors, dtype=np.float64)
    n_paths = errors.shape[0]
    if n_effective is None:
        n_effective = [2 ** int(l) for l in levels]
    rows = []
    for j, lev in enumerate(levels):
        col = errors[:, j]
        mean = float(np.mean(col))
        se = float(np.std(col, ddof=1) / math.sqrt(n_paths)) if n_paths > 1 else 0.0
        bv = None if bv_dist is None else float(np.mean(np.asarray(bv_dist)[:, j]))
        rows.append(ConvergenceRow(int(lev), int(n_effective[j]), n_paths, mean, se, bv))
    slope = fit_loglog_slope([r.n_effective for r in rows], [r.mean_sup_error for r in rows])
    return ConvergenceReport(tuple(rows), slope, reference_level, extras or {})


def cubed_levels(levels, ref_level) -> list:
    """The ``m**3`` subsequence, keeping only levels below the reference."""
    return sorted({int(m) ** 3 for m in levels if int(m) ** 3 < ref_level})


def driver_qv(S: SampledPath, qv_mode: str, qv_level: int) -> QVResult:
    if qv_mode == "wiener_dt":
        return wiener_calibration(S)
    if qv_mode == "estimated":
        return discrete_qv(S, qv_level)
    raise ValueError(f"qv_mode must be 'estimated' or 'wiener_dt', got {qv_mode!r}")


def convergence_experiment(c: CoefficientPair, x0: float, seed: int, num_paths: int, steps: int,
                           horizon: float, levels: Sequence[int], ref_level: int,
                           subsequence_cubed: bool = False, qv_mode: str = "wiener_dt",
                           qv_level: int | None = None, monitoring: str = "sampled",
                           threads: int | None = None) -> ConvergenceReport:
    """Mean sup-distance of level-``n`` Euler solves to the reference level.

    Each Brownian path is generated from its own seeded stream inside the
    worker, solved at ``ref_level`` and every level, then discarded.
    ``fit_slope`` is the log-log slope against ``n_effective = 2**level``.
    """
    levels = [int(l) for l in levels]
    if subsequence_cubed:
        levels = cubed_levels(levels, ref_level)
    if not levels:
        raise ValueError("no levels to run")
    if any(b <= a for a, b in zip(levels, levels[1:])):
        raise ValueError("levels must be strictly increasing")
    if levels[-1] >= ref_level:
        raise ValueError(f"all levels must be below the reference level {ref_level}")
    if num_paths < 1:
        raise ValueError("num_paths must be >= 1")
    qv_level = ref_level if qv_level is None else int(qv_level)
    if qv_mode == "estimated" and qv_level < ref_level:
        raise ValueError("qv_level must be at least the reference level")
    batch = generate_brownian(seed, horizon, steps, num_paths)

    def one(i):
        S = batch.path(i)
        qv = driver_qv(S, qv_mode, qv_level)
        ref = reference_solution(c, x0, S, qv, ref_level, levels, monitoring).solution.values
        row = np.empty(len(levels))
        for j, lev in enumerate(levels):
            x = euler_solve(c, x0, S, qv, lev, monitoring=monitoring, warn=False).solution.values
            row[j] = K.sup_abs_diff(x, ref)
        return row

    if c.bound_b is None:
        warnings.warn(f"drift of {c.name!r} has no declared bound; move-bound check skipped",
                      UserWarning, stacklevel=2)

    errors = np.array(ordered_map(one, range(num_paths), threads))
    return summarize_errors(levels, errors, reference_level=ref_level,
                            extras={"qv_mode": qv_mode, "model": c.name})
