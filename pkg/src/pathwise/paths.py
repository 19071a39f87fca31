"""Sampled continuous paths, time-changes, Brownian batches and path I/O."""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterator, Sequence

import numpy as np

INTERPOLATION_RULES = ("linear",)

_MAGIC = b"TPTH"
_VERSION = 1
_HEADER = struct.Struct("<4sIIId")


def _frozen(a, dtype=np.float64, copy=True):
    a = np.array(a, dtype=dtype, copy=True) if copy else np.asarray(a, dtype=dtype)
    if a.flags.writeable and not copy and a.base is not None:
        a = a.copy()  # never freeze a view of someone else's buffer
    a.setflags(write=False)
    return a


class SampledPath:
    """A continuous path on ``[0, T]`` given by samples and linear interpolation.

    Parameters
    ----------
    times : array_like
        Strictly increasing sample times starting at 0.
    values : array_like
        Finite path values, same length as ``times``.
    interpolation : str
        Only ``"linear"`` is supported.

    Notes
    -----
    Instances are immutable; the underlying arrays are read-only.  The start
    value may be nonzero so that solution paths and integrals can reuse the
    type; drivers are checked with :meth:`require_origin`.
    """

    __slots__ = ("_times", "_values", "_interpolation")

    def __init__(self, times, values, interpolation="linear"):
        t = _frozen(times)
        v = _frozen(values)
        if t.ndim != 1 or v.ndim != 1:
            raise ValueError("times and values must be one-dimensional")
        if t.shape != v.shape:
            raise ValueError(f"times ({t.size}) and values ({v.size}) differ in length")
        if t.size == 0:
            raise ValueError("a path needs at least one sample")
        if t[0] != 0.0:
            raise ValueError(f"times must start at 0, got {t[0]!r}")
        if t.size > 1 and not np.all(np.diff(t) > 0):
            raise ValueError("times must be strictly increasing")
        if not (np.all(np.isfinite(t)) and np.all(np.isfinite(v))):
            raise ValueError("times and values must be finite")
        if interpolation not in INTERPOLATION_RULES:
            raise ValueError(f"unknown interpolation rule {interpolation!r}")
        self._times = t
        self._values = v
        self._interpolation = interpolation

    @classmethod
    def uniform(cls, values, horizon=1.0):
        """Path with ``len(values)`` samples evenly spaced on ``[0, horizon]``."""
        values = np.asarray(values, dtype=np.float64)
        return cls(uniform_times(horizon, values.size - 1), values)

    @property
    def times(self) -> np.ndarray:
        return self._times

    @property
    def values(self) -> np.ndarray:
        return self._values

    @property
    def interpolation(self) -> str:
        return self._interpolation

    @property
    def horizon(self) -> float:
        return float(self._times[-1])

    @property
    def steps(self) -> int:
        return self._times.size - 1

    def __len__(self):
        return self._times.size

    def __repr__(self):
        return f"SampledPath(samples={len(self)}, horizon={self.horizon:g})"

    def __call__(self, t):
        return evaluate(self, t)

    def require_origin(self, name="path"):
        """Raise unless the path starts at 0 (drivers live in the space of paths from 0)."""
        if self._values[0] != 0.0:
            raise ValueError(f"{name} must start at 0, got {self._values[0]!r}")
        return self

    def same_grid(self, other) -> bool:
        return self._times is other._times or np.array_equal(self._times, other._times)

    def with_values(self, values, copy=True) -> "SampledPath":
        """A path on the same grid with new values (the grid is not re-validated).

        With ``copy=False`` a freshly allocated array is adopted and frozen.
        """
        out = object.__new__(SampledPath)
        v = _frozen(values, copy=copy)
        if v.shape != self._times.shape:
            raise ValueError("values do not match the time grid")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        out._times = self._times
        out._values = v
        out._interpolation = self._interpolation
        return out

    def max_step(self) -> float:
        """Largest absolute change between adjacent samples."""
        if self._values.size < 2:
            return 0.0
        return float(np.max(np.abs(np.diff(self._values))))


def uniform_times(horizon, steps):
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if not horizon > 0:
        raise ValueError("horizon must be positive")
    return np.linspace(0.0, float(horizon), int(steps) + 1)


def evaluate(path: SampledPath, t):
    """Linearly interpolated path value at ``t`` (scalar or array).

    Exact at sample points; raises ``ValueError`` outside ``[0, T]``.
    """
    ta = np.asarray(t, dtype=np.float64)
    if np.any(ta < path.times[0]) or np.any(ta > path.times[-1]) or np.any(np.isnan(ta)):
        raise ValueError(f"t outside the path domain [0, {path.horizon!r}]")
    out = np.interp(ta, path.times, path.values)
    return float(out) if out.ndim == 0 else out


class TimeChange:
    """A nondecreasing time-change with ``phi(0) = 0``.

    Either wraps a vectorised callable or a table of ``(t, phi(t))`` pairs,
    interpolated linearly.

    Parameters
    ----------
    func : callable, optional
        Evaluable ``phi``; must accept numpy arrays.
    times, values : array_like, optional
        Table representation.
    strictly_increasing : bool
        Declares ``phi`` strictly increasing; checked on the table or on
        the sample points it is evaluated at.
    """

    def __init__(self, func: Callable | None = None, *, times=None, values=None,
                 strictly_increasing=False):
        if (func is None) == (times is None):
            raise ValueError("give either func or a (times, values) table")
        self.strictly_increasing = bool(strictly_increasing)
        self.func = func
        self.table = None
        if times is not None:
            table = SampledPath(times, values)
            self._check(table.values)
            self.table = table
        else:
            if float(np.asarray(func(np.zeros(1)))[0]) != 0.0:
                raise ValueError("time-change must satisfy phi(0) = 0")

    @classmethod
    def from_table(cls, times, values, strictly_increasing=False):
        return cls(times=times, values=values, strictly_increasing=strictly_increasing)

    @classmethod
    def identity(cls):
        return cls(lambda t: np.asarray(t, dtype=np.float64) * 1.0, strictly_increasing=True)

    def _check(self, vals):
        if vals[0] != 0.0:
            raise ValueError("time-change must satisfy phi(0) = 0")
        d = np.diff(vals)
        if np.any(d < 0):
            raise ValueError("time-change must be nondecreasing")
        if self.strictly_increasing and np.any(d <= 0):
            raise ValueError("time-change declared strictly increasing but has flat pieces")

    @property
    def domain_end(self) -> float:
        return np.inf if self.table is None else self.table.horizon

    def __call__(self, t):
        t = np.asarray(t, dtype=np.float64)
        if self.table is not None:
            return evaluate(self.table, t)
        out = np.asarray(self.func(t), dtype=np.float64)
        if out.shape != t.shape:
            out = np.broadcast_to(out, t.shape).copy()
        return float(out) if out.ndim == 0 else out

    def sample(self, new_times) -> np.ndarray:
        """Evaluate on a time grid and check monotonicity there."""
        vals = np.asarray(self(np.asarray(new_times, dtype=np.float64)), dtype=np.float64)
        vals = np.atleast_1d(vals)
        if new_times[0] == 0.0:
            self._check(vals)
        return vals


def compose_time_change(path: SampledPath, phi: TimeChange, new_times=None) -> SampledPath:
    """The path ``t -> omega(phi(t))`` sampled on ``new_times``.

    ``new_times`` defaults to the table grid of a tabulated ``phi``.
    """
    if new_times is None:
        if phi.table is None:
            raise ValueError("new_times is required for a functional time-change")
        new_times = phi.table.times
    new_times = np.asarray(new_times, dtype=np.float64)
    if new_times[0] != 0.0:
        raise ValueError("new_times must start at 0")
    if new_times[-1] > phi.domain_end:
        raise ValueError("new_times extend beyond the time-change table")
    mapped = phi.sample(new_times)
    if mapped[-1] > path.horizon:
        raise ValueError(
            f"time-change range {mapped[-1]!r} exceeds the path domain {path.horizon!r}")
    return SampledPath(new_times, np.interp(mapped, path.times, path.values))


def compose_time_changes(phi: TimeChange, psi: TimeChange, new_times) -> TimeChange:
    """Table of ``phi o psi`` on ``new_times``."""
    inner = psi.sample(new_times)
    return TimeChange.from_table(new_times, phi(inner))


def piecewise_linear_bv_approximation(path: SampledPath, level: int,
                                      monitoring: str = "interpolated") -> SampledPath:
    """Piecewise-linear interpolation of the path through its level-``n`` crossings.

    Constant after the last crossing.  Under interpolated monitoring the sup
    distance to ``path`` on the sample grid is at most ``2 * 2**-level``.
    """
    from .partition import lebesgue_stopping_times

    part = lebesgue_stopping_times(path, level, monitoring=monitoring)
    vals = np.interp(path.times, part.crossing_times, part.path_values)
    # np.interp picks the right-most entry for repeated knots, which is the
    # last crossing emitted at that instant
    return path.with_values(vals)


# --- Brownian batches -------------------------------------------------------

def brownian_values(seed: int, index: int, horizon: float, steps: int) -> np.ndarray:
    """Values of Brownian path ``index`` of the batch with ``seed``.

    Each index has its own PCG64 stream seeded by ``(seed, index)``.
    """
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, int(index)])
    out = np.empty(steps + 1)
    out[0] = 0.0
    z = rng.standard_normal(steps)
    z *= np.sqrt(horizon / steps)
    np.cumsum(z, out=out[1:])
    return out


@dataclass(frozen=True)
class PathBatch:
    """A batch of seeded Brownian paths on a shared uniform grid.

    Paths are generated on access, so large batches never live in memory at
    once; ``path(i)`` always returns bit-identical values.
    """

    seed: int
    horizon: float
    steps: int
    count: int
    generator_tag: str = "brownian/pcg64/v1"

    @property
    def times(self) -> np.ndarray:
        return self.template.times

    @property
    def template(self) -> SampledPath:
        """Zero path on the shared grid; the grid is validated once."""
        tpl = self.__dict__.get("_template")
        if tpl is None:
            tpl = SampledPath(uniform_times(self.horizon, self.steps), np.zeros(self.steps + 1))
            object.__setattr__(self, "_template", tpl)
        return tpl

    def path(self, index: int, times=None) -> SampledPath:
        """Path ``index``; ``times`` is accepted for backwards compatibility and ignored."""
        if not 0 <= index < self.count:
            raise IndexError(index)
        vals = brownian_values(self.seed, index, self.horizon, self.steps)
        return self.template.with_values(vals, copy=False)

    @property
    def paths(self) -> list:
        return [self.path(i) for i in range(self.count)]

    def __len__(self):
        return self.count

    def __getitem__(self, index):
        if index < 0:
            index += self.count
        return self.path(index)

    def __iter__(self) -> Iterator[SampledPath]:
        for i in range(self.count):
            yield self.path(i)


def generate_brownian(seed: int, horizon: float, steps: int, count: int) -> PathBatch:
    """Seeded Brownian batch on ``[0, horizon]`` with ``steps`` increments per path."""
    if int(steps) != steps or steps < 1:
        raise ValueError("steps must be a positive integer")
    if not horizon > 0 or not np.isfinite(horizon):
        raise ValueError("horizon must be positive and finite")
    if int(count) != count or count < 1:
        raise ValueError("count must be a positive integer")
    return PathBatch(seed=int(seed), horizon=float(horizon), steps=int(steps), count=int(count))


def brownian_path(seed: int, horizon: float = 1.0, steps: int = 1024, index: int = 0) -> SampledPath:
    return generate_brownian(seed, horizon, steps, index + 1).path(index)


# --- I/O --------------------------------------------------------------------

def fmt(x) -> str:
    """Shortest round-trip text for a float."""
    return repr(float(x))


def write_path_csv(path: SampledPath, target) -> None:
    lines = ["t,value"]
    lines.extend(f"{fmt(t)},{fmt(v)}" for t, v in zip(path.times, path.values))
    Path(target).write_text("\n".join(lines) + "\n")


def read_path_csv(source) -> SampledPath:
    data = Path(source).read_text().splitlines()
    if not data or data[0].strip() != "t,value":
        raise ValueError("expected header 't,value'")
    rows = [line.split(",") for line in data[1:] if line.strip()]
    t = [float(r[0]) for r in rows]
    v = [float(r[1]) for r in rows]
    return SampledPath(t, v)


def write_batch_binary(paths: Sequence[SampledPath] | PathBatch, target, horizon=None) -> None:
    """Write uniformly sampled paths in the TPTH batch format.

    Layout (little-endian): magic ``TPTH``, version u32, count u32, steps u32,
    horizon f64, then ``count * (steps + 1)`` f64 values row-major.
    """
    paths = list(paths)
    if not paths:
        raise ValueError("nothing to write")
    steps = paths[0].steps
    horizon = paths[0].horizon if horizon is None else float(horizon)
    grid = uniform_times(horizon, steps)
    for p in paths:
        if p.steps != steps or not np.array_equal(p.times, grid):
            raise ValueError("binary batches require one shared uniform grid")
    with open(target, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _VERSION, len(paths), steps, horizon))
        for p in paths:
            fh.write(np.ascontiguousarray(p.values, dtype="<f8").tobytes())


def read_batch_binary(source) -> list:
    raw = Path(source).read_bytes()
    if len(raw) < _HEADER.size:
        raise ValueError("truncated TPTH header")
    magic, version, count, steps, horizon = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise ValueError(f"bad magic {magic!r}")
    if version != _VERSION:
        raise ValueError(f"unsupported TPTH version {version}")
    n = count * (steps + 1)
    body = np.frombuffer(raw, dtype="<f8", count=n, offset=_HEADER.size)
    if body.size != n or len(raw) != _HEADER.size + 8 * n:
        raise ValueError("TPTH payload size does not match header")
    grid = uniform_times(horizon, steps)
    return [SampledPath(grid, body[i * (steps + 1):(i + 1) * (steps + 1)]) for i in range(count)]
