import math

import numpy as np
import pytest

from pathwise import PRESET_NAMES, custom, limit_equation, preset
from pathwise.models import compile_expression
from pathwise.models import sample_values


class TestGrammar:
    @pytest.mark.parametrize("text,x,expect", [
        ("2*(1-x)", 0.25, 1.5),
        ("sqrt(pos(x))", -3.0, 0.0),
        ("x**2 - 3*x + 1", 2.0, -1.0),
        ("-x", 4.0, -4.0),
        ("max(x, 1) + min(x, -1)", 0.0, 0.0),
        ("exp(log(x))", 3.0, 3.0),
        ("abs(sin(pi*x)) + cos(0)", 0.5, 2.0),
        ("tanh(x)", 0.3, math.tanh(0.3)),
        ("e", 0.0, math.e),
        ("1/x", 4, 0.25),
    ])
    def test_evaluation(self, text, x, expect):
        assert compile_expression(text)(float(x)) == pytest.approx(expect, rel=1e-15)

    @pytest.mark.parametrize("text", [
        "", "   ", "y + 1", "x.real", "__import__('os')", "x if x else 1", "max(x)",
        "sqrt(x, 2)", "x ** ", "[x]", "lambda: 1", "x // 2", "True + x", "'a'",
    ])
    def test_rejects(self, text):
        with pytest.raises(ValueError):
            compile_expression(text)

    def test_custom_pair(self):
        c = custom("2*(1-x)", "sqrt(pos(x))", sigma_prime="0.5/sqrt(x)", x0=0.5, C_b=2.0)
        assert c.b(0.0) == 2.0 and c.sigma(4.0) == 2.0 and c.x0 == 0.5 and c.C_b == 2.0
        assert c.expressions["sigma_prime"] == "0.5/sqrt(x)"
        assert np.allclose(sample_values(c.sigma, [0.0, 1.0, 9.0]), [0.0, 1.0, 3.0])


class TestPresets:
    @pytest.mark.parametrize("name", PRESET_NAMES)
    def test_all_presets_evaluate(self, name):
        c = preset(name)
        x = np.linspace(0.0, 3.0, 7)
        assert np.all(np.isfinite(c.vec("b")(x))) and np.all(np.isfinite(c.vec("sigma")(x)))
        assert c.name == name

    def test_unknown_and_overrides(self):
        with pytest.raises(ValueError):
            preset("heston")
        assert preset("cir", x0=2.0).x0 == 2.0

    def test_bounded_flag(self):
        assert preset("cir-trunc").bounded and not preset("cir").bounded

    def test_limit_equation_adds_correction(self):
        c = limit_equation(preset("gbm"))
        assert c.b(2.0) == pytest.approx(1.0)
        assert c.C_b is None and c.bound_b is None
        with pytest.raises(ValueError):
            limit_equation(preset("cir-trunc"))

    def test_b_tilde_factorises_drift(self):
        c = preset("gbm-drift")
        x = np.linspace(-2, 2, 9)
        assert np.allclose(c.vec("b")(x), c.vec("sigma")(x) * c.vec("b_tilde")(x))

    def test_describe(self):
        d = preset("cir").describe()
        assert d["b"] == "2*(1-x)" and d["C_b"] == 2.0 and d["domain"][0] == 0.0
