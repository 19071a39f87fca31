"""Command-line harness: one subcommand per experiment, CSV data files plus a JSON sidecar."""

from __future__ import annotations

import argparse
import json
import math
import subprocess
import sys
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .doss_sussmann import doss_sussmann_experiment, lamperti_solve
from .integrate import ito_formula_residual, ito_integral
from .models import GRAMMAR_HELP, PRESET_NAMES, compile_expression, custom, preset
from .partition import qv_values
from .paths import SampledPath, brownian_path, evaluate, fmt, read_path_csv
from .sde_euler import convergence_experiment, driver_qv, euler_solve
from .yamada import (TestFunctionParams, check_properties, phi, phi_prime, phi_second, psi,
                     psi_mass)


class ConfigError(ValueError):
    """Invalid configuration; maps to exit status 2."""


# --- field declarations -----------------------------------------------------

@dataclass(frozen=True)
class Field:
    name: str
    kind: object
    default: object
    help: str

    @property
    def flag(self) -> str:
        return "--" + self.name.replace("_", "-")


def level_range(text: str) -> list:
    """``lo:hi`` inclusive, or a single level."""
    try:
        if ":" in text:
            lo, hi = (int(p) for p in text.split(":"))
        else:
            lo = hi = int(text)
    except ValueError:
        raise ValueError(f"expected lo:hi, got {text!r}") from None
    if lo < 0 or hi < lo:
        raise ValueError(f"level range {text!r} must satisfy 0 <= lo <= hi")
    return list(range(lo, hi + 1))


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


def _opt(kind):
    def conv(text):
        if text is None or str(text).strip().lower() in ("", "none"):
            return None
        return kind(text)
    conv.__name__ = getattr(kind, "__name__", "value")
    return conv


def _choice(*options):
    def conv(text):
        if text not in options:
            raise ValueError(f"must be one of {', '.join(options)}")
        return text
    conv.__name__ = "choice"
    return conv


_SEED = Field("seed", int, 0, "base seed; path i uses the stream (seed, i)")
_STEPS = lambda d: Field("steps", int, d, "samples per path (grid of steps + 1 points)")
_HORIZON = Field("horizon", float, 1.0, "time horizon T")
_INDEX = Field("index", int, 0, "which path of the seeded batch to use")
_INPUT = Field("input", _opt(str), None, "read the driver from a t,value CSV instead")
_EVAL = Field("eval_points", int, 1025, "evaluation times, uniform on [0, T]; 0 = full grid")
_OUT = Field("out", str, None, "data CSV to write (required)")
_THREADS = Field("threads", _opt(int), None, "worker threads (fallback: TP_THREADS, then 1)")
# single-path commands run serially; the flag is accepted so every command shares it
_THREADS_SERIAL = Field("threads", _opt(int), None,
                        "accepted for uniformity; this command runs on one thread")
_MON = Field("monitoring", _choice("sampled", "interpolated"), "sampled",
             "stopping-time monitoring of the sampled driver")
_QVMODE = lambda d: Field("qv_mode", _choice("estimated", "wiener_dt"), d,
                          "<S> from V^n of the path, or <S>_t = t")
_QVLEVEL = lambda d: Field("qv_level", _opt(int), d, "level of the V^n estimate for <S>")

_MODEL = lambda d: [
    Field("model", _choice(*PRESET_NAMES, "custom"), d,
          f"coefficient preset ({', '.join(PRESET_NAMES)}) or custom"),
    Field("x0", _opt(float), None, "initial value; omit for the preset's"),
    Field("b", _opt(str), None, "custom drift expression in x"),
    Field("sigma", _opt(str), None, "custom diffusion expression in x"),
    Field("sigma_prime", _opt(str), None, "custom sigma' expression"),
    Field("sigma_second", _opt(str), None, "custom sigma'' expression"),
    Field("b_tilde", _opt(str), None, "custom factor with b = sigma * b_tilde"),
    Field("c_b", _opt(float), None, "declared Lipschitz constant of b"),
    Field("c_sigma", _opt(float), None, "declared Hoelder-1/2 constant of sigma"),
    Field("bound_b", _opt(float), None, "declared sup |b|"),
    Field("bound_sigma", _opt(float), None, "declared sup |sigma|"),
]

COMMANDS = {
    "qv": ("discrete quadratic variation V^n of a Brownian sample at several levels",
           [_SEED, _STEPS(1 << 20), _HORIZON, _INDEX, _INPUT,
            Field("levels", level_range, "4:9", "levels lo:hi"), _EVAL, _MON, _THREADS_SERIAL, _OUT]),
    "integrate": ("model-free Ito integral of F(S) against S",
                  [_SEED, _STEPS(1 << 20), _HORIZON, _INDEX, _INPUT,
                   Field("integrand", str, "x", "integrand as an expression in x = S_t"),
                   Field("level", int, 8, "approximation level"), _EVAL, _MON, _THREADS_SERIAL, _OUT]),
    "ito-check": ("pathwise Ito formula residual for Y = int A dS + int B dt",
                  [_SEED, _STEPS(1 << 20), _HORIZON, _INDEX, _INPUT,
                   Field("f", str, "x**2", "f as an expression in x"),
                   Field("f_prime", str, "2*x", "f'"), Field("f_second", str, "2", "f''"),
                   Field("a", float, 1.0, "constant A"), Field("b_const", float, 0.0,
                                                             "constant B"),
                   Field("level", int, 8, "integral level"), _QVMODE("estimated"),
                   _QVLEVEL(10), _EVAL, _MON, _THREADS_SERIAL, _OUT]),
    "euler": ("Euler scheme on Lebesgue stopping times for one path",
              [*_MODEL("cir"), _SEED, _STEPS(1 << 20), _HORIZON, _INDEX, _INPUT,
               Field("level", int, 8, "scheme level"),
               Field("ref", _opt(int), None, "also solve at this level and report the sup gap"),
               _QVMODE("wiener_dt"), _QVLEVEL(None), _EVAL, _MON, _THREADS_SERIAL, _OUT]),
    "converge": ("strong convergence of the Euler scheme against a reference level",
                 [*_MODEL("cir"), _SEED, Field("paths", int, 128, "number of paths"),
                  _STEPS(1 << 22), _HORIZON, Field("levels", level_range, "4:9", "levels lo:hi"),
                  Field("ref", int, 12, "reference level"),
                  Field("cubed", _bool, False, "use the m**3 subsequence of levels"),
                  _QVMODE("wiener_dt"), _QVLEVEL(None), _MON, _THREADS, _OUT]),
    "psi-check": ("test-function property suite for (epsilon, delta)",
                  [Field("epsilon", float, 1.0, "support upper end"),
                   Field("delta", float, math.e, "support ratio (> 1)"),
                   Field("points", int, 100_000, "probe grid size for the property suite"),
                   Field("grid_points", int, 1001, "rows of the x,psi,phi,... table"),
                   Field("grid_extent", _opt(float), None,
                         "table covers [-extent, extent] (default: 2 * epsilon)"), _THREADS_SERIAL, _OUT]),
    "doss": ("ODE-transform solution under BV approximations of the driver",
             [*_MODEL("gbm"), _SEED, Field("paths", int, 64, "number of paths"),
              _STEPS(1 << 16), _HORIZON,
              Field("levels", level_range, "3:8", "BV approximation levels lo:hi"),
              Field("tolerance", float, 1e-6, "flow table and ODE tolerance"),
              Field("euler_level", _opt(int), None,
                    "also compare with the Euler solve of the corrected SDE at this level"),
              _QVMODE("wiener_dt"), _QVLEVEL(14), _THREADS, _OUT]),
    "lamperti": ("Lamperti-transform solution for b = sigma * b_tilde on one path",
                 [*_MODEL("gbm"), _SEED, _STEPS(1 << 16), _HORIZON, _INDEX, _INPUT,
                  Field("tolerance", float, 1e-8, "ODE tolerance"), _QVMODE("wiener_dt"),
                  _QVLEVEL(14), _EVAL, _THREADS_SERIAL, _OUT]),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pathwise", description="Pathwise stochastic calculus experiments.",
        epilog=GRAMMAR_HELP + "\n\nExit status: 0 success, 2 invalid input, 1 runtime failure.",
        formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--version", action="version", version=version_string())
    sub = parser.add_subparsers(dest="command", metavar="command")
    sub.required = True
    for name, (desc, fields) in COMMANDS.items():
        p = sub.add_parser(name, help=desc, description=desc, epilog=GRAMMAR_HELP,
                           argument_default=argparse.SUPPRESS,
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="key=value file; flags override its entries")
        for f in fields:
            suffix = "" if f.default is None else f" (default: {f.default})"
            p.add_argument(f.flag, dest=f.name, metavar=f.name.upper(), help=f.help + suffix)
    return parser


def read_config(path) -> dict:
    out = {}
    for num, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{num}: expected key=value")
        key, val = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = val
    return out


def effective_config(command: str, given: dict) -> dict:
    """Defaults, then the config file, then flags; every value converted and named."""
    fields = {f.name: f for f in COMMANDS[command][1]}
    raw = {}
    if given.get("config"):
        try:
            file_vals = read_config(given["config"])
        except OSError as exc:
            raise ConfigError(f"config: cannot read {given['config']}: {exc}") from None
        for key in file_vals:
            if key not in fields:
                raise ConfigError(f"config: unknown field {key!r} for {command}")
        raw.update(file_vals)
    raw.update({k: v for k, v in given.items() if k != "config"})
    cfg = {}
    for name, f in fields.items():
        val = raw.get(name, f.default)
        try:
            cfg[name] = f.kind(val) if isinstance(val, str) else val
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    if not cfg.get("out"):
        raise ConfigError("out: an output file is required")
    return cfg


def version_string() -> str:
    described = None
    try:
        res = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"],
                             cwd=Path(__file__).resolve().parent, capture_output=True,
                             text=True, timeout=5)
        if res.returncode == 0 and res.stdout.strip():
            described = res.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return f"pathwise {__version__}" + (f" ({described})" if described else "")


# --- shared plumbing --------------------------------------------------------

def _positive(cfg, *names):
    for n in names:
        if cfg[n] is not None and not cfg[n] > 0:
            raise ConfigError(f"{n}: must be positive")


def load_model(cfg):
    extra = {k: cfg[k] for k in ("c_b", "c_sigma", "bound_b", "bound_sigma")
             if cfg[k] is not None}
    meta = {"C_b": extra.get("c_b"), "C_sigma": extra.get("c_sigma"),
            "bound_b": extra.get("bound_b"), "bound_sigma": extra.get("bound_sigma")}
    meta = {k: v for k, v in meta.items() if v is not None}
    wants_custom = cfg["model"] == "custom" or cfg["b"] is not None or cfg["sigma"] is not None
    if wants_custom:
        if cfg["b"] is None or cfg["sigma"] is None:
            raise ConfigError("b/sigma: custom models need both --b and --sigma")
        try:
            c = custom(cfg["b"], cfg["sigma"], cfg["sigma_prime"], cfg["sigma_second"],
                       cfg["b_tilde"], x0=cfg["x0"] or 0.0, **meta)
        except ValueError as exc:
            raise ConfigError(f"model: {exc}") from None
    else:
        overrides = {}
        for key in ("sigma_prime", "sigma_second", "b_tilde"):
            if cfg[key] is not None:
                overrides[key] = compile_expression(cfg[key])
        c = preset(cfg["model"], **overrides, **meta)
    if cfg["x0"] is not None:
        c = c.with_x0(cfg["x0"])
    return c


def load_driver(cfg) -> SampledPath:
    if cfg["input"]:
        try:
            S = read_path_csv(cfg["input"])
        except (OSError, ValueError) as exc:
            raise ConfigError(f"input: {exc}") from None
        S.require_origin("input")
        return S
    _positive(cfg, "steps", "horizon")
    if cfg["index"] < 0:
        raise ConfigError("index: must be >= 0")
    return brownian_path(cfg["seed"], cfg["horizon"], cfg["steps"], cfg["index"])


def eval_times(cfg, S: SampledPath) -> np.ndarray:
    m = cfg["eval_points"]
    if m < 0 or m == 1:
        raise ConfigError("eval_points: must be 0 or at least 2")
    if m == 0:
        return S.times
    t = np.linspace(0.0, S.horizon, m)
    t[-1] = S.horizon
    return t


def write_rows(target, header, rows) -> None:
    lines = [header]
    lines.extend(",".join(c if isinstance(c, str) else fmt(c) for c in r) for r in rows)
    Path(target).write_text("\n".join(lines) + "\n")


def _expr(cfg, key):
    try:
        return np.vectorize(compile_expression(cfg[key]), otypes=[float])
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from None


# --- commands ---------------------------------------------------------------

def cmd_qv(cfg):
    S = load_driver(cfg)
    levels = cfg["levels"]
    et = eval_times(cfg, S)
    rows, full = [], {}
    for n in levels:
        full[n] = qv_values(S, n, None, cfg["monitoring"])
        vals = np.interp(et, S.times, full[n])
        rows.extend((str(n), t, v) for t, v in zip(et, vals))
    write_rows(cfg["out"], "level,t,Vn", rows)
    summ = []
    for n in levels:
        gap = float(np.max(np.abs(full[n + 1] - full[n]))) if n + 1 in full else math.nan
        summ.append((str(n), gap, float(full[n][-1])))
    side = summary_path(cfg["out"])
    write_rows(side, "level,gap_sup,terminal", summ)
    top = levels[-1]
    return f"qv: V^{top}_T = {full[top][-1]:.6f} over levels {levels[0]}..{top}", [side]


def summary_path(out) -> Path:
    p = Path(out)
    return p.with_name(p.stem + ".summary" + (p.suffix or ".csv"))


def cmd_integrate(cfg):
    S = load_driver(cfg)
    F = _expr(cfg, "integrand")
    et = eval_times(cfg, S)
    X = S.with_values(F(S.values))
    n = cfg["level"]
    fine = ito_integral(X, S, n, monitoring=cfg["monitoring"]).values
    if n > 0:
        coarse = ito_integral(X, S, n - 1, monitoring=cfg["monitoring"]).values
        err = np.abs(fine - coarse)
    else:
        err = np.full_like(fine, math.nan)
    v = np.interp(et, S.times, fine)
    e = np.interp(et, S.times, err)
    write_rows(cfg["out"], "t,value,est_error", zip(et, v, e))
    return f"integrate: I_T = {fine[-1]:.6f} at level {n}, sup est_error {np.max(err):.3g}", []


def cmd_ito_check(cfg):
    S = load_driver(cfg)
    f, fp, fpp = (_expr(cfg, k) for k in ("f", "f_prime", "f_second"))
    qv_level = cfg["qv_level"] if cfg["qv_level"] is not None else cfg["level"]
    qv = driver_qv(S, cfg["qv_mode"], qv_level)
    r = ito_formula_residual(f, fp, fpp, cfg["a"], cfg["b_const"], S, qv, cfg["level"],
                             monitoring=cfg["monitoring"])
    et = eval_times(cfg, S)
    write_rows(cfg["out"], "t,residual", zip(et, np.interp(et, S.times, r.values)))
    return f"ito-check: sup |residual| = {np.max(np.abs(r.values)):.4g}", []


def cmd_euler(cfg):
    c = load_model(cfg)
    S = load_driver(cfg)
    x0 = c.x0
    qv_level = cfg["qv_level"] if cfg["qv_level"] is not None else \
        max(cfg["level"], cfg["ref"] or 0)
    qv = driver_qv(S, cfg["qv_mode"], qv_level)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        res = euler_solve(c, x0, S, qv, cfg["level"], monitoring=cfg["monitoring"])
        msg = f"euler: X_T = {res.solution.values[-1]:.6f} at level {cfg['level']} " \
              f"({res.diagnostics.stopping_count} stops)"
        if cfg["ref"] is not None:
            if cfg["ref"] <= cfg["level"]:
                raise ConfigError("ref: must exceed level")
            ref = euler_solve(c, x0, S, qv, cfg["ref"], monitoring=cfg["monitoring"])
            gap = float(np.max(np.abs(ref.solution.values - res.solution.values)))
            msg += f", sup gap to level {cfg['ref']} = {gap:.4g}"
    et = eval_times(cfg, S)
    write_rows(cfg["out"], "t,value", zip(et, evaluate(res.solution, et)))
    return msg, []


def cmd_converge(cfg):
    c = load_model(cfg)
    _positive(cfg, "paths", "steps", "horizon")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        rep = convergence_experiment(
            c, c.x0, cfg["seed"], cfg["paths"], cfg["steps"], cfg["horizon"], cfg["levels"],
            cfg["ref"], subsequence_cubed=cfg["cubed"], qv_mode=cfg["qv_mode"],
            qv_level=cfg["qv_level"], monitoring=cfg["monitoring"], threads=cfg["threads"])
    rep.write_csv(cfg["out"])
    return (f"converge: {c.name}, fit_slope {rep.fit_slope:.4f}, strictly decreasing: "
            f"{rep.strictly_decreasing()}"), []


def cmd_psi_check(cfg):
    try:
        p = TestFunctionParams(cfg["epsilon"], cfg["delta"])
    except ValueError as exc:
        raise ConfigError(f"epsilon/delta: {exc}") from None
    if cfg["points"] < 4:
        raise ConfigError("points: need at least 4")
    if cfg["grid_points"] < 2:
        raise ConfigError("grid_points: need at least 2")
    extent = 2.0 * p.epsilon if cfg["grid_extent"] is None else cfg["grid_extent"]
    if not extent > 0:
        raise ConfigError("grid_extent: must be positive")
    x = np.linspace(-extent, extent, cfg["grid_points"])
    write_rows(cfg["out"], "x,psi,phi,phi_prime,phi_second",
               zip(x, psi(np.abs(x), p), phi(x, p), phi_prime(x, p), phi_second(x, p)))
    res = check_properties(p, cfg["points"])
    mass = psi_mass(p)
    rows = [(k, "true" if ok else "false", m) for k, (ok, m) in res.items()]
    rows.append(("psi_mass", "true" if abs(mass - 1.0) <= 1e-12 else "false", mass))
    side = summary_path(cfg["out"])
    write_rows(side, "property,ok,value", rows)
    bad = [k for k, (ok, _) in res.items() if not ok]
    return (f"psi-check: integral of psi = {mass!r} (error {abs(mass - 1.0):.1e}); "
            + ("all properties hold" if not bad else "failed: " + ", ".join(bad))), [side]


def cmd_doss(cfg):
    c = load_model(cfg)
    _positive(cfg, "paths", "steps", "horizon", "tolerance")
    rep = doss_sussmann_experiment(
        c, c.x0, cfg["seed"], cfg["paths"], cfg["steps"], cfg["horizon"], cfg["levels"],
        qv_mode=cfg["qv_mode"], qv_level=cfg["qv_level"], tolerance=cfg["tolerance"],
        euler_level=cfg["euler_level"], threads=cfg["threads"])
    rep.write_csv(cfg["out"])
    msg = f"doss: {c.name}, errors strictly decreasing: {rep.strictly_decreasing()}"
    if "euler_gap_max" in rep.extras:
        msg += f", max sup gap to Euler level {cfg['euler_level']}: " \
               f"{rep.extras['euler_gap_max']:.4g}"
    return msg, []


def cmd_lamperti(cfg):
    c = load_model(cfg)
    S = load_driver(cfg)
    qv = driver_qv(S, cfg["qv_mode"], cfg["qv_level"] or 14)
    X = lamperti_solve(c, c.x0, S, qv, tolerance=cfg["tolerance"])
    et = eval_times(cfg, S)
    write_rows(cfg["out"], "t,value", zip(et, evaluate(X, et)))
    return f"lamperti: {c.name}, X_T = {X.values[-1]:.6f}", []


HANDLERS = {"qv": cmd_qv, "integrate": cmd_integrate, "ito-check": cmd_ito_check,
            "euler": cmd_euler, "converge": cmd_converge, "psi-check": cmd_psi_check,
            "doss": cmd_doss, "lamperti": cmd_lamperti}


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return repr(v)
    return v


def run(argv=None) -> int:
    parser = build_parser()
    try:
        ns = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    command = ns.command
    given = {k: v for k, v in vars(ns).items() if k != "command"}
    start = time.perf_counter()
    try:
        cfg = effective_config(command, given)
        summary, extra_files = HANDLERS[command](cfg)
    except ValueError as exc:
        print(f"pathwise {command}: invalid input: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, ArithmeticError, AssertionError, OSError) as exc:
        print(f"pathwise {command}: failed: {exc}", file=sys.stderr)
        return 1
    meta = {
        "command": command,
        "config": {k: _jsonable(v) for k, v in sorted(cfg.items())},
        "version": version_string(),
        "duration_seconds": time.perf_counter() - start,
        "outputs": [str(cfg["out"])] + [str(p) for p in extra_files],
    }
    Path(str(cfg["out"]) + ".meta.json").write_text(json.dumps(meta, indent=2) + "\n")
    print(summary)
    return 0


def main(argv=None) -> int:
    return run(argv)
