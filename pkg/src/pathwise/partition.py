"""Lebesgue stopping times on dyadic grids and discrete quadratic variation."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .paths import SampledPath, TimeChange, compose_time_change

MONITORING = {"sampled": K.SAMPLED, "interpolated": K.INTERPOLATED}
MAX_LEVEL = 60


def grid_step(level: int) -> float:
    """Mesh ``2**-level`` of the dyadic grid (exact in binary)."""
    return math.ldexp(1.0, -int(level))


def monitoring_code(monitoring: str) -> int:
    try:
        return MONITORING[monitoring]
    except KeyError:
        raise ValueError(f"monitoring must be one of {sorted(MONITORING)}, got {monitoring!r}")


def resolution_cap(path: SampledPath) -> int:
    """Finest level whose mesh is at least four times the largest sample step."""
    step = path.max_step()
    if step == 0.0:
        return MAX_LEVEL
    # may be negative: then no level is admissible
    return min(int(math.floor(-math.log2(4.0 * step))), MAX_LEVEL)


def check_level(path: SampledPath, level: int, monitoring: str = "interpolated",
                cap: bool = False) -> None:
    """Raise ``ValueError`` if ``level`` is not admissible for ``path``.

    With ``cap`` set, interpolated crossings are only trusted on grids
    coarser than the sampling scale (see :func:`resolution_cap`).  Sampled
    crossings are exact observations at any level the floating-point grid
    can represent.
    """
    if int(level) != level or level < 0:
        raise ValueError(f"level must be a nonnegative integer, got {level!r}")
    if level > MAX_LEVEL:
        raise ValueError(f"level {level} above the supported maximum {MAX_LEVEL}")
    if monitoring_code(monitoring) == K.INTERPOLATED:
        limit = resolution_cap(path)
        if cap and level > limit:
            raise ValueError(
                f"level {level} exceeds the resolution cap {limit} of this path "
                f"(mesh must be >= 4 x max sample step {path.max_step():.3g})")
    else:
        span = float(np.max(np.abs(path.values))) if len(path) else 0.0
        if span / grid_step(level) >= 2.0 ** 52:
            raise ValueError(f"level {level} is below float resolution for this path")


def interpolation_slack(path: SampledPath, level: int) -> float:
    """First-order interpolation slack ``4 * 2**-n * max sample step``."""
    return 4.0 * grid_step(level) * path.max_step()


@dataclass(frozen=True)
class LebesguePartition:
    """Level-``n`` crossing structure of a sampled path.

    Attributes
    ----------
    level : int
    crossing_times : ndarray
        Nondecreasing, starting at 0.
    crossing_values : ndarray
        Grid levels visited; consecutive entries differ by exactly ``2**-n``
        (the first entry is the start value).
    path_values : ndarray
        Path value recorded at each stop.  Equal to ``crossing_values``
        under interpolated monitoring; the observed sample otherwise.
    sample_index : ndarray
        Index of the sample at which each crossing was detected.
    source_len : int
    monitoring : str
    """

    level: int
    crossing_times: np.ndarray
    crossing_values: np.ndarray
    path_values: np.ndarray
    sample_index: np.ndarray
    source_len: int
    monitoring: str = "interpolated"

    def __len__(self):
        return self.crossing_times.size

    @property
    def mesh(self) -> float:
        return grid_step(self.level)


@dataclass(frozen=True)
class QVResult:
    """Discrete quadratic variation ``t -> V^n_t`` as a path.

    ``level`` is ``None`` for the analytic Wiener calibration ``<S>_t = t``.
    """

    level: int | None
    qv_path: SampledPath
    terminal: float

    @property
    def times(self):
        return self.qv_path.times

    @property
    def values(self):
        return self.qv_path.values


def lebesgue_stopping_times(path: SampledPath, level: int,
                            monitoring: str = "interpolated") -> LebesguePartition:
    """All crossings of new levels of ``2**-level * Z`` by ``path``.

    A stop happens when the path reaches a grid level different from the
    previous stop's level.  Under ``"interpolated"`` monitoring
    crossing times are solved exactly on the linear interpolant, and a
    sample step spanning ``m`` levels yields ``m`` ordered crossings.  Under
    ``"sampled"`` monitoring the stop is the first sample at or past the next
    level.

    Examples
    --------
    >>> p = SampledPath([0.0, 1.0], [0.0, 1.0])
    >>> lebesgue_stopping_times(p, 1).crossing_times.tolist()
    [0.0, 0.5, 1.0]
    """
    check_level(path, level, monitoring)
    h = grid_step(level)
    ct, cl, cv, ci = K.lebesgue_crossings(path.times, path.values, h, monitoring_code(monitoring))
    return LebesguePartition(level=int(level), crossing_times=ct, crossing_values=cl,
                             path_values=cv, sample_index=ci, source_len=len(path),
                             monitoring=monitoring)


def _sorted_times(path, eval_times):
    et = np.atleast_1d(np.asarray(eval_times, dtype=np.float64))
    if et.size and (et[0] < 0.0 or et[-1] > path.horizon):
        raise ValueError("eval_times outside the path domain")
    if et.size > 1 and np.any(np.diff(et) < 0):
        raise ValueError("eval_times must be sorted")
    return et


def qv_values(path: SampledPath, level: int, eval_times=None,
              monitoring: str = "sampled") -> np.ndarray:
    """``V^n_t`` as a raw array, on the sample grid or at ``eval_times``."""
    check_level(path, level, monitoring)
    mode = monitoring_code(monitoring)
    h = grid_step(level)
    if eval_times is None:
        return K.qv_on_grid(path.values, h, mode)
    et = _sorted_times(path, eval_times)
    ct, cl, cv, ci = K.lebesgue_crossings(path.times, path.values, h, mode)
    return K.qv_at_times(ct, cv, et, np.interp(et, path.times, path.values))


def discrete_qv(path: SampledPath, level: int, eval_times=None,
                monitoring: str = "sampled") -> QVResult:
    """Discrete quadratic variation ``V^n_t`` along the level-``n`` stops.

    ``V^n_t = sum_k (w(s_{k+1} ^ t) - w(s_k ^ t))**2``, so the partial last
    increment up to ``t`` contributes.

    Parameters
    ----------
    path : SampledPath
    level : int
    eval_times : array_like, optional
        Sorted times in the path domain; defaults to the sample grid.
    monitoring : {"sampled", "interpolated"}

    Returns
    -------
    QVResult
        ``qv_path`` lives on ``eval_times`` (which must then start at 0) or
        on the sample grid.
    """
    vals = qv_values(path, level, eval_times, monitoring)
    if eval_times is None:
        qp = path.with_values(vals)
    else:
        qp = SampledPath(np.asarray(eval_times, dtype=np.float64), vals)
    return QVResult(level=int(level), qv_path=qp, terminal=float(vals[-1]))


def estimate_qv(path: SampledPath, level_lo: int, level_hi: int, eval_times=None,
                monitoring: str = "sampled"):
    """Finest-level QV estimate and the Cauchy gaps between adjacent levels.

    Returns
    -------
    (QVResult, ndarray)
        ``V^{level_hi}`` and ``sup_t |V^{n+1}_t - V^n_t|`` over the sample grid
        for ``n = level_lo, ..., level_hi - 1``.
    """
    if not level_lo < level_hi:
        raise ValueError("level_lo must be below level_hi")
    check_level(path, level_hi, monitoring, cap=True)
    check_level(path, level_lo, monitoring)
    prev, gaps = K.qv_levels_gaps(np.ascontiguousarray(path.values), int(level_lo),
                                  int(level_hi - level_lo + 1), monitoring_code(monitoring))
    if eval_times is None:
        result = QVResult(level=int(level_hi), qv_path=path.with_values(prev),
                          terminal=float(prev[-1]))
    else:
        result = discrete_qv(path, level_hi, eval_times, monitoring)
    return result, gaps


def wiener_calibration(path: SampledPath) -> QVResult:
    """``<S>_t = t`` on the path's grid, the value under Wiener measure."""
    return QVResult(level=None, qv_path=path.with_values(path.times), terminal=path.horizon)


def qv_time_change_check(path: SampledPath, phi: TimeChange, level: int, eval_times,
                         new_times=None, monitoring: str = "sampled") -> float:
    """``max_t |V^n_t(w o phi) - V^n_{phi(t)}(w)|`` over ``eval_times``.

    The composed path is sampled on ``new_times`` (default: the grid of a
    tabulated ``phi``).  When ``phi`` sends every new sample onto an original
    sample the two sides use identical crossing sequences.
    """
    composed = compose_time_change(path, phi, new_times)
    et = _sorted_times(composed, eval_times)
    mapped = np.atleast_1d(phi(et))
    order = np.argsort(mapped, kind="stable")
    lhs = qv_values(composed, level, et, monitoring)
    rhs = np.empty_like(lhs)
    rhs[order] = qv_values(path, level, mapped[order], monitoring)
    return float(np.max(np.abs(lhs - rhs))) if lhs.size else 0.0


def qv_monotone_slack(path: SampledPath, level: int, monitoring: str = "sampled") -> float:
    """Largest possible drop of ``t -> V^n_t``.

    Only the truncated last increment can shrink; it is bounded by the
    squared distance to the next stop.
    """
    h = grid_step(level)
    if monitoring_code(monitoring) == K.SAMPLED:
        return (h + path.max_step()) ** 2
    return h * h
