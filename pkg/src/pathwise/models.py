"""Coefficient pairs, presets and the custom-expression grammar."""

from __future__ import annotations

import ast
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numba import njit

from ._kernels import jit_scalar, vectorize


@dataclass(frozen=True)
class CoefficientPair:
    """Drift ``b`` and diffusion ``sigma`` of a one-dimensional SDE, with metadata.

    Parameters
    ----------
    b, sigma : callable
        Scalar functions ``float -> float``.  Numba-compatible functions run
        in compiled kernels; anything else falls back to interpreted loops.
    sigma_prime, sigma_second : callable, optional
    C_b : float, optional
        Declared Lipschitz constant of ``b``.
    C_sigma : float, optional
        Declared Hölder-1/2 constant of ``sigma``.
    bound_b, bound_sigma : float, optional
        Declared sup bounds.
    domain : (float, float)
        Interval on which ``sigma`` is evaluated; states are clamped into it.
    b_tilde : callable, optional
        Factor with ``b = sigma * b_tilde``, used by the Lamperti transform.
    x0 : float
        Suggested initial value (presets only).
    name : str
    """

    b: Callable
    sigma: Callable
    sigma_prime: Callable | None = None
    sigma_second: Callable | None = None
    C_b: float | None = None
    C_sigma: float | None = None
    bound_b: float | None = None
    bound_sigma: float | None = None
    domain: tuple = (-math.inf, math.inf)
    b_tilde: Callable | None = None
    x0: float = 0.0
    name: str = "custom"
    expressions: dict = field(default_factory=dict, compare=False)

    @property
    def bounded(self) -> bool:
        return self.bound_b is not None and self.bound_sigma is not None

    def with_x0(self, x0) -> "CoefficientPair":
        return replace(self, x0=float(x0))

    def vec(self, which: str):
        """Array-valued version of ``b``, ``sigma``, ``sigma_prime``, ... by name."""
        fn = getattr(self, which)
        if fn is None:
            raise ValueError(f"coefficient {which} not supplied")
        return vectorize(fn)

    def describe(self) -> dict:
        out = {"name": self.name, "x0": self.x0, "domain": list(self.domain)}
        for key in ("C_b", "C_sigma", "bound_b", "bound_sigma"):
            out[key] = getattr(self, key)
        out.update(self.expressions)
        return out


def limit_drift(c: CoefficientPair) -> Callable:
    """Drift ``b + sigma * sigma' / 2`` of the equation solved by the ODE transform."""
    if c.sigma_prime is None:
        raise ValueError("sigma_prime is required for the corrected drift")
    b, s, sp = (jit_scalar(f) for f in (c.b, c.sigma, c.sigma_prime))
    if b is not None and s is not None and sp is not None:
        @njit(nogil=True)
        def drift(x):
            return b(x) + 0.5 * s(x) * sp(x)
        return drift
    b, s, sp = c.b, c.sigma, c.sigma_prime
    return lambda x: b(x) + 0.5 * s(x) * sp(x)


def limit_equation(c: CoefficientPair) -> CoefficientPair:
    """Coefficients of the SDE with drift corrected by ``sigma sigma' / 2``."""
    # bounds on b + sigma sigma'/2 would need sup|sigma'|, which is not declared
    return replace(c, b=limit_drift(c), C_b=None, bound_b=None, b_tilde=None,
                   name=f"{c.name}+ito-correction")


# --- presets ----------------------------------------------------------------

@njit(nogil=True)
def _zero(x):
    return 0.0


@njit(nogil=True)
def _one(x):
    return 1.0


@njit(nogil=True)
def _ident(x):
    return x


@njit(nogil=True)
def _cir_b(x):
    return 2.0 * (1.0 - x)


@njit(nogil=True)
def _sqrt_pos(x):
    return math.sqrt(max(x, 0.0))


@njit(nogil=True)
def _sqrt_prime(x):
    return 0.5 / math.sqrt(x) if x > 0.0 else math.inf


@njit(nogil=True)
def _cir_trunc_b(x):
    return min(max(2.0 * (1.0 - x), -4.0), 4.0)


@njit(nogil=True)
def _sqrt_trunc(x):
    return math.sqrt(min(max(x, 0.0), 4.0))


@njit(nogil=True)
def _tanh(x):
    return math.tanh(x)


@njit(nogil=True)
def _tanh_p(x):
    t = math.tanh(x)
    return 1.0 - t * t


@njit(nogil=True)
def _tanh_pp(x):
    t = math.tanh(x)
    return -2.0 * t * (1.0 - t * t)


@njit(nogil=True)
def _neg_half_tanh(x):
    return -0.5 * math.tanh(x)


@njit(nogil=True)
def _neg_half(x):
    return -0.5


@njit(nogil=True)
def _neg_half_x(x):
    return -0.5 * x


def _presets():
    inf = math.inf
    return {
        "cir": CoefficientPair(
            b=_cir_b, sigma=_sqrt_pos, sigma_prime=_sqrt_prime, C_b=2.0, C_sigma=1.0,
            domain=(0.0, inf), x0=1.0, name="cir",
            expressions={"b": "2*(1-x)", "sigma": "sqrt(pos(x))"}),
        "cir-trunc": CoefficientPair(
            b=_cir_trunc_b, sigma=_sqrt_trunc, C_b=2.0, C_sigma=1.0, bound_b=4.0,
            bound_sigma=2.0, domain=(0.0, inf), x0=1.0, name="cir-trunc",
            expressions={"b": "min(max(2*(1-x),-4),4)", "sigma": "sqrt(min(pos(x),4))"}),
        "gbm": CoefficientPair(
            b=_zero, sigma=_ident, sigma_prime=_one, sigma_second=_zero, C_b=0.0,
            b_tilde=_zero, x0=1.0, name="gbm", expressions={"b": "0", "sigma": "x"}),
        "const": CoefficientPair(
            b=_zero, sigma=_one, sigma_prime=_zero, sigma_second=_zero, C_b=0.0, C_sigma=0.0,
            bound_b=0.0, bound_sigma=1.0, b_tilde=_zero, x0=0.0, name="const",
            expressions={"b": "0", "sigma": "1"}),
        "tanh": CoefficientPair(
            b=_zero, sigma=_tanh, sigma_prime=_tanh_p, sigma_second=_tanh_pp, C_b=0.0,
            C_sigma=math.sqrt(2.0), bound_b=0.0, bound_sigma=1.0, b_tilde=_zero, x0=0.0,
            name="tanh", expressions={"b": "0", "sigma": "tanh(x)"}),
        "tanh-drift": CoefficientPair(
            b=_neg_half_tanh, sigma=_tanh, sigma_prime=_tanh_p, sigma_second=_tanh_pp,
            C_b=0.5, C_sigma=math.sqrt(2.0), bound_b=0.5, bound_sigma=1.0, x0=1.0,
            name="tanh-drift", expressions={"b": "-0.5*tanh(x)", "sigma": "tanh(x)"}),
        "gbm-drift": CoefficientPair(
            b=_neg_half_x, sigma=_ident, sigma_prime=_one, sigma_second=_zero,
            C_b=0.5, b_tilde=_neg_half, x0=1.0, name="gbm-drift",
            expressions={"b": "-0.5*x", "sigma": "x", "b_tilde": "-0.5"}),
    }


PRESET_NAMES = ("cir", "cir-trunc", "gbm", "const", "tanh", "tanh-drift", "gbm-drift")


def preset(name: str, **overrides) -> CoefficientPair:
    """A named coefficient preset, optionally with fields replaced."""
    table = _presets()
    if name not in table:
        raise ValueError(f"unknown model preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    c = table[name]
    return replace(c, **overrides) if overrides else c


# --- expression grammar -----------------------------------------------------

GRAMMAR_HELP = """\
Custom coefficients are arithmetic expressions in the variable x:
  numbers, x, pi, e, parentheses, + - * / ** and unary minus;
  functions sqrt exp log abs tanh sin cos pos(x)=max(x,0) max(a,b) min(a,b).
Example: --b "2*(1-x)" --sigma "sqrt(pos(x))"."""

_FUNCS = {
    "sqrt": "math.sqrt", "exp": "math.exp", "log": "math.log", "abs": "abs",
    "tanh": "math.tanh", "sin": "math.sin", "cos": "math.cos", "max": "max", "min": "min",
    "pos": "_pos",
}
_ARITY = {"max": 2, "min": 2}
_CONSTS = {"pi": repr(math.pi), "e": repr(math.e)}
_BINOPS = {ast.Add: "+", ast.Sub: "-", ast.Mult: "*", ast.Div: "/", ast.Pow: "**"}


@njit(nogil=True)
def _pos(x):
    return max(x, 0.0)


def _emit(node) -> str:
    if isinstance(node, ast.Expression):
        return _emit(node.body)
    if isinstance(node, ast.Constant) and isinstance(node.value, (int, float)) \
            and not isinstance(node.value, bool):
        return repr(float(node.value))
    if isinstance(node, ast.Name):
        if node.id == "x":
            return "x"
        if node.id in _CONSTS:
            return _CONSTS[node.id]
        raise ValueError(f"unknown name {node.id!r} in expression")
    if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
        return f"({_emit(node.left)} {_BINOPS[type(node.op)]} {_emit(node.right)})"
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        sign = "-" if isinstance(node.op, ast.USub) else "+"
        return f"({sign}{_emit(node.operand)})"
    if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
            and node.func.id in _FUNCS and not node.keywords:
        want = _ARITY.get(node.func.id, 1)
        if len(node.args) != want:
            raise ValueError(f"{node.func.id} takes {want} argument(s)")
        return f"{_FUNCS[node.func.id]}({', '.join(_emit(a) for a in node.args)})"
    raise ValueError(f"unsupported syntax in expression: {ast.dump(node)[:60]}")


def compile_expression(text: str) -> Callable:
    """Compile an expression in ``x`` from the grammar above to a jitted scalar function."""
    if not isinstance(text, str) or not text.strip():
        raise ValueError("empty expression")
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ValueError(f"cannot parse expression {text!r}: {exc.msg}") from None
    body = _emit(tree)
    ns = {"math": math, "_pos": _pos}
    exec(f"def _expr(x):\n    return float({body})\n", ns)
    fn = njit(nogil=True)(ns["_expr"])
    try:
        fn(0.5)
    except ZeroDivisionError:
        pass
    except Exception as exc:
        raise ValueError(f"expression {text!r} does not compile: {exc}") from None
    return fn


def custom(b: str, sigma: str, sigma_prime: str | None = None, sigma_second: str | None = None,
           b_tilde: str | None = None, x0: float = 0.0, **meta) -> CoefficientPair:
    """Coefficient pair from expression strings."""
    exprs = {"b": b, "sigma": sigma}
    kw = {}
    for key, val in (("sigma_prime", sigma_prime), ("sigma_second", sigma_second),
                     ("b_tilde", b_tilde)):
        if val is not None:
            kw[key] = compile_expression(val)
            exprs[key] = val
    return CoefficientPair(b=compile_expression(b), sigma=compile_expression(sigma),
                           x0=float(x0), name="custom", expressions=exprs, **kw, **meta)


def sample_values(fn, x) -> np.ndarray:
    return vectorize(fn)(np.asarray(x, dtype=np.float64))
