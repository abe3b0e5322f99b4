#!/usr/bin/env python3
"""
Euler-Lagrange / boundary operators, Lie split and adjoints
"""
import pytest
import sympy as sp

from services.builtin_models import mhd_model, string_model
from services.expr_core import Density, JetSpace, VerticalField, equal, is_zero, parse
from services.variational import (
    AdjointResult,
    LinDiffOp,
    OperatorImage,
    adjoint,
    adjoint_identity_check,
    apply_op,
    boundary_operator,
    divergence_form,
    lie_identity_residual,
    prolong,
    variational_derivative,
)
from utils.errors import JetOrderError


def test_string_variational_derivative_golden():
    sys = string_model()
    space = sys.space
    delta = variational_derivative(sys.hamiltonian)
    assert equal(delta.components[0], parse("-Dx(P*w_X)", space))
    assert equal(delta.components[1], parse("p/rho", space))

    covector = boundary_operator(sys.hamiltonian)
    assert equal(covector.component("w", "X"), parse("P*w_X", space))
    assert covector.component("p", "X") == 0
    print("✅ δℌ = (−d_X(P w_X), p/ρ), δ∂ℌ = P w_X")


def test_lie_split_closes_for_first_order_density():
    sys = string_model(damped=True)
    space = sys.space
    v = [parse("p*w_X", space), parse("sin(X)*w + D[r,X]", space)]
    assert is_zero(lie_identity_residual(sys.hamiltonian, v))


def test_higher_order_density_needs_flag():
    space = JetSpace(independent=("X",), fields=("w",), max_order=4)
    bending = Density(space=space, integrand=parse("w_XX^2/2", space))
    with pytest.raises(JetOrderError):
        variational_derivative(bending)
    delta = variational_derivative(bending, allow_higher_order=True)
    assert delta.components[0] == space.jet_symbol("w", (0, 0, 0, 0))


def test_adjoint_of_total_derivative():
    space = JetSpace(independent=("X",), fields=("w",), max_order=3)
    d_x = LinDiffOp(space=space, n_in=1, n_out=1, coefficients={(0, 0, (0,)): 1})
    result = adjoint(d_x)
    assert result.adjoint.same_as(d_x.scaled(-1))
    check = adjoint_identity_check(d_x)
    assert check.passed
    assert check.residual == 0


def test_damped_string_dissipation_is_self_adjoint():
    R = string_model(damped=True).R_op
    result = adjoint(R)
    assert result.adjoint.same_as(R)
    assert adjoint_identity_check(R).passed


def test_mhd_input_map_adjoint_identity():
    G = mhd_model(dim=2).G_op
    check = adjoint_identity_check(G)
    assert check.passed, check.residual


def test_sign_corrupted_adjoint_fails():
    R = string_model(damped=True).R_op
    result = adjoint(R)
    corrupted = AdjointResult(adjoint=result.adjoint.scaled(-1), remainder=result.remainder)
    check = adjoint_identity_check(R, corrupted)
    assert not check.passed
    assert not is_zero(check.residual)


def test_apply_op_matches_manual_expansion():
    sys = string_model(damped=True)
    space = sys.space
    out = apply_op(sys.R_op, [parse("w", space), parse("p_X", space)])
    assert out.components[0] == 0
    assert equal(out.components[1], parse("-Dx(r*Dx(p_X))", space))


def test_divergence_form_recognition():
    sys = string_model(damped=True)
    space = sys.space
    form = divergence_form(sys.R_op)
    assert form is not None
    assert form.zeroth == {}
    assert equal(form.second[(1, 1, 0, 0)], -space.parameter("r"))

    omega = [sp.Integer(0), space.jet_symbol("p")]
    assert equal(form.quadratic_density(omega), parse("r*p_X^2", space))
    assert equal(form.boundary_flux(omega).components[0], parse("-p*r*p_X", space))

    lopsided = LinDiffOp(space=space, n_in=2, n_out=2, coefficients={(1, 1, (0, 0)): 1, (1, 1, (0,)): 5})
    assert divergence_form(lopsided) is None


def test_total_divergences_have_no_euler_lagrange_term():
    space = JetSpace(independent=("X",), fields=("w",), parameters=("P",), max_order=3)
    for text in ("w_X", "w*w_X", "Dx(P*w)"):
        delta = variational_derivative(Density(space=space, integrand=parse(text, space)))
        assert is_zero(delta.components[0]), text


def test_adjoint_is_an_involution():
    sys = string_model(damped=True)
    space = sys.space
    op = LinDiffOp(space=space, n_in=2, n_out=2, coefficients={
        (0, 1, (0,)): space.parameter("P"),
        (1, 0, (0,)): space.jet_symbol("w", (0,)),
        (1, 1, (0, 0)): space.independent_symbols[0],
        (0, 0, ()): parse("p/rho", space),
    })
    twice = adjoint(adjoint(op).adjoint).adjoint
    assert twice.same_as(op)


def test_adjoint_sign_alternates_with_order():
    space = JetSpace(independent=("X",), fields=("w",), max_order=3)
    for k in (0, 1, 2):
        op = LinDiffOp(space=space, n_in=1, n_out=1, coefficients={(0, 0, (0,) * k): 1})
        assert adjoint(op).adjoint.same_as(op.scaled((-1) ** k)), k


def test_prolongation_of_the_velocity_field():
    space = string_model().space
    jet = prolong([parse("p/rho", space), 0], space)
    assert equal(jet.derivatives[0][0], parse("p_X/rho - p*D[rho,X]/rho^2", space))
    assert jet.derivatives[1][0] == 0

    constant = prolong(VerticalField(space=space, components=(3, -1)))
    assert all(d == 0 for row in constant.derivatives for d in row)


def test_operator_image_may_differ_from_the_field_count():
    sys = string_model()
    space = sys.space
    column = LinDiffOp(space=space, n_in=2, n_out=1, coefficients={(1, 0, (0,)): 1})
    image = apply_op(column, [parse("w", space), parse("p", space)])
    assert isinstance(image, OperatorImage)
    assert image.components == (space.jet_symbol("p", (0,)),)


if __name__ == "__main__":
    test_string_variational_derivative_golden()
    test_lie_split_closes_for_first_order_density()
    test_higher_order_density_needs_flag()
    test_adjoint_of_total_derivative()
    test_damped_string_dissipation_is_self_adjoint()
    test_mhd_input_map_adjoint_identity()
    test_sign_corrupted_adjoint_fails()
    test_apply_op_matches_manual_expansion()
    test_divergence_form_recognition()
    test_total_divergences_have_no_euler_lagrange_term()
    test_adjoint_is_an_involution()
    test_adjoint_sign_alternates_with_order()
    test_prolongation_of_the_velocity_field()
    test_operator_image_may_differ_from_the_field_count()
    print("✅ variational tests passed")
