#!/usr/bin/env python3
"""
Expression layer: parsing, canonical form, total derivatives, substitution, evaluation
"""
import math

import numpy as np
import pytest
import sympy as sp

from services.expr_core import (
    Density,
    JetSpace,
    VerticalField,
    canonicalize,
    equal,
    eval_numeric,
    is_zero,
    jet_order,
    parse,
    partial,
    render,
    substitute,
    total_derivative,
)
from utils.errors import (
    DomainEvalError,
    ExpressionSyntaxError,
    JetOrderError,
    MissingBindingError,
    SubstitutionError,
    UnknownSymbolError,
)


def string_space(max_order: int = 4) -> JetSpace:
    return JetSpace(independent=("X",), fields=("w", "p"), parameters=("rho", "P"), max_order=max_order)


def test_parse_canonical_form():
    space = string_space()
    w_X = space.jet_symbol("w", (0,))
    assert parse("w_X + 2*w_X", space) == 3 * w_X
    assert parse("(1/2)*P*w_X^2", space) == canonicalize(space.parameter("P") * w_X**2 / 2)
    assert is_zero(parse("p/rho - p*rho^(-1)", space))
    print("✅ parse + canonical form")


def test_total_derivative_call_and_product_rule():
    space = string_space()
    X = space.independent_symbols[0]
    P = space.parameter("P")
    expected = P * space.jet_symbol("w", (0, 0)) + sp.Derivative(P, X) * space.jet_symbol("w", (0,))
    assert equal(parse("Dx(P*w_X)", space), expected)
    assert equal(total_derivative(P * space.jet_symbol("w", (0,)), "X", space), expected)
    assert jet_order(expected, space) == 2


def test_formal_parameter_derivative_renders_in_grammar():
    space = string_space()
    d = parse("D[P,X]", space)
    assert d == sp.Derivative(space.parameter("P"), space.independent_symbols[0])
    assert render(d) == "D[P,X]"
    assert parse(render(d), space) == d


def test_render_round_trip():
    space = string_space()
    for text in ("p^2/(2*rho) + (1/2)*P*w_X^2", "-P*w_XX - D[P,X]*w_X", "sin(pi*X)*w + 3/4"):
        e = parse(text, space)
        assert equal(parse(render(e), space), e), text


def test_syntax_error_position():
    space = string_space()
    with pytest.raises(ExpressionSyntaxError) as info:
        parse("w_X +", space)
    assert info.value.position == 5
    with pytest.raises(ExpressionSyntaxError):
        parse(".", space)


def test_unknown_symbol_and_jet_order():
    space = string_space(max_order=2)
    with pytest.raises(UnknownSymbolError) as info:
        parse("rho*q", space)
    assert info.value.name == "q"
    assert info.value.position == 4
    with pytest.raises(JetOrderError):
        parse("w_XXX", space)


def test_substitute_follows_total_derivatives():
    space = string_space()
    X = space.independent_symbols[0]
    assert equal(substitute(parse("w_X^2", space), {"w": X**2}, space), 4 * X**2)
    assert equal(substitute(parse("P*w_X", space), {"P": 1 + X, "w": X}, space), 1 + X)
    assert equal(substitute(parse("D[P,X]", space), {"P": X**2}, space), 2 * X)
    with pytest.raises(SubstitutionError):
        substitute(parse("w", space), {"w": X**2, "w_X": 3}, space)


def test_eval_numeric():
    space = string_space()
    assert eval_numeric(parse("P*w_X^2", space), {"P": 2.0, "w_X": 3.0}) == pytest.approx(18.0)
    assert eval_numeric(parse("D[P,X]*w", space), {"D[P,X]": 0.5, "w": 4.0}) == pytest.approx(2.0)
    assert eval_numeric(parse("sin(pi*X)", space), {"X": 0.5}) == pytest.approx(1.0)

    with pytest.raises(MissingBindingError) as info:
        eval_numeric(parse("P*w_X", space), {"w_X": 1.0})
    assert "P" in info.value.names
    with pytest.raises(DomainEvalError):
        eval_numeric(parse("1/w", space), {"w": 0.0})
    with pytest.raises(DomainEvalError):
        eval_numeric(parse("sqrt(w)", space), {"w": -1.0})


def test_density_order():
    space = string_space()
    H = Density(space=space, integrand=parse("p^2/(2*rho) + (1/2)*P*w_X^2", space))
    assert H.order == 1
    assert H.dim == 1
    assert math.isclose(eval_numeric(H.integrand, {"p": 2.0, "rho": 1.0, "P": 1.0, "w_X": 0.0}), 2.0)


def _random_expression(rng, space: JetSpace, depth: int) -> sp.Expr:
    atoms = [space.jet_symbol("w"), space.jet_symbol("p"), space.jet_symbol("w", (0,)),
             space.jet_symbol("p", (0,)), space.independent_symbols[0], space.parameter("rho")]
    if depth == 0 or rng.random() < 0.25:
        leaf = atoms[rng.integers(len(atoms))]
        if rng.random() < 0.3:
            leaf = (leaf + int(rng.integers(-3, 4))) ** int(rng.integers(2, 4))
        return leaf * int(rng.integers(1, 5))
    op = rng.integers(3)
    left = _random_expression(rng, space, depth - 1)
    if op == 0:
        return sp.Add(left, _random_expression(rng, space, depth - 1), evaluate=False)
    if op == 1:
        return sp.Add(left, -_random_expression(rng, space, depth - 1), evaluate=False)
    # one factor stays a leaf so expansion stays small
    return sp.Mul(left, _random_expression(rng, space, 0), evaluate=False)


def test_canonical_form_is_idempotent():
    rng = np.random.default_rng(11)
    space = string_space()
    for _ in range(50):
        e = _random_expression(rng, space, 6)
        once = canonicalize(e)
        assert canonicalize(once) == once
        assert equal(parse(render(once), space), once)
    print("✅ canonical form idempotent on 50 random expressions")


def test_total_derivative_linearity_and_leibniz():
    space = string_space()
    f = parse("P*w_X^2 + X*p", space)
    g = parse("sin(w)*p/rho", space)
    d = lambda e: total_derivative(e, "X", space)
    assert equal(d(3 * f - 2 * g), 3 * d(f) - 2 * d(g))
    assert equal(d(f * g), f * d(g) + g * d(f))
    assert is_zero(d(sp.Integer(7)))


def test_total_derivatives_commute():
    space = JetSpace(independent=("X", "Y"), fields=("w",), max_order=4)
    e = parse("sin(X*Y)*w_X*w + w_Y^2*w + X*w_XY", space)
    xy = total_derivative(total_derivative(e, "Y", space), "X", space)
    yx = total_derivative(total_derivative(e, "X", space), "Y", space)
    assert equal(xy, yx)
    assert jet_order(xy, space) == 4


def test_total_derivative_matches_finite_differences():
    space = JetSpace(independent=("X",), fields=("w",), max_order=3)
    X = space.independent_symbols[0]
    e = parse("w*w_X^2 + X*w", space)
    de = total_derivative(e, "X", space)
    section = sp.sin(X)
    jets = [sp.lambdify(X, sp.diff(section, X, k)) for k in range(3)]

    def point(x: float) -> dict:
        return {"X": x, "w": jets[0](x), "w_X": jets[1](x), "w_XX": jets[2](x)}

    x0 = 0.3
    errors = []
    for h in (0.02, 0.01):
        central = (eval_numeric(e, point(x0 + h)) - eval_numeric(e, point(x0 - h))) / (2 * h)
        errors.append(abs(central - eval_numeric(de, point(x0))))
    ratio = errors[0] / errors[1]
    print(f"✅ finite-difference ratio {ratio:.3f}")
    assert 3.6 <= ratio <= 4.4


def test_partial_of_the_kinetic_energy():
    space = string_space()
    assert equal(partial(parse("p^2/(2*rho)", space), "p", space), parse("p/rho", space))
    assert is_zero(partial(parse("p^2/(2*rho)", space), "w_X", space))


def test_rendering_is_independent_of_argument_order():
    space = string_space()
    assert render(parse("w_X*P", space)) == "P*w_X"
    assert render(parse("-w_XX*P - w_X*D[P,X]", space)) == "-D[P,X]*w_X - P*w_XX"
    assert render(parse("p/rho", space)) == "p/rho"
    assert render(parse("p^2/(2*rho) + 1", space)) == "p^2/(2*rho) + 1"


def test_vertical_field_needs_one_component_per_field():
    space = string_space()
    assert len(VerticalField(space=space, components=(1, 0)).components) == 2
    with pytest.raises(ValueError, match="1 components for 2 fields"):
        VerticalField(space=space, components=(1,))


if __name__ == "__main__":
    test_parse_canonical_form()
    test_total_derivative_call_and_product_rule()
    test_formal_parameter_derivative_renders_in_grammar()
    test_render_round_trip()
    test_syntax_error_position()
    test_unknown_symbol_and_jet_order()
    test_substitute_follows_total_derivatives()
    test_eval_numeric()
    test_density_order()
    test_canonical_form_is_idempotent()
    test_total_derivative_linearity_and_leibniz()
    test_total_derivatives_commute()
    test_total_derivative_matches_finite_differences()
    test_partial_of_the_kinetic_energy()
    test_rendering_is_independent_of_argument_order()
    test_vertical_field_needs_one_component_per_field()
    print("✅ expr_core tests passed")
