#!/usr/bin/env python3
"""
Structural checks, power balance and Casimir verdicts on the built-in systems
"""
import sympy as sp

from schemas.phs import VerdictStatus
from services.builtin_models import casimir3_model, inverse_deformation_gradient, mhd_model, string_model
from services.expr_core import Density, JetSpace, equal, is_zero, parse, total_derivative
from services.phs_model import (
    PHSystem,
    casimir_check,
    check_self_adjoint_nonneg,
    check_skew,
    effort,
    output,
    power_balance,
    structural_checks,
)
from services.variational import LinDiffOp, apply_op, pairing


def test_canonical_skew_matrix_passes():
    space = string_model().space
    verdict = check_skew(LinDiffOp.from_matrix(space, [[0, 1], [-1, 0]])).verdict
    assert verdict.status == VerdictStatus.PASS
    print("✅ [[0,1],[-1,0]] is skew")


def test_symmetric_interconnection_fails_with_residual():
    space = string_model().space
    verdict = check_skew(LinDiffOp.from_matrix(space, [[0, 1], [1, 0]])).verdict
    assert verdict.status == VerdictStatus.FAIL
    o1, o2, v1, v2 = sp.symbols("omega1 omega2 varpi1 varpi2")
    assert equal(verdict.residual, 2 * o1 * v2 + 2 * o2 * v1)


def test_damped_string_dissipation_certificate():
    sys = string_model(damped=True)
    result = check_self_adjoint_nonneg(sys.R_op, sys.domain, sys.parameters)
    assert result.verdict.status == VerdictStatus.PASS
    assert result.nonnegativity.status == VerdictStatus.PASS


def test_indefinite_dissipation_fails_certificate():
    sys = string_model(damped=True)
    flipped = sys.R_op.scaled(-1)
    result = check_self_adjoint_nonneg(flipped, sys.domain, sys.parameters)
    assert result.verdict.status == VerdictStatus.PASS
    assert result.nonnegativity.status == VerdictStatus.FAIL


def test_builtins_pass_structural_checks():
    for sys in (string_model(), string_model(damped=True), casimir3_model(), mhd_model(dim=2)):
        verdicts = structural_checks(sys)
        assert all(v.status == VerdictStatus.PASS for v in verdicts), (sys.name, verdicts)
        print(f"✅ {sys.name}: {len(verdicts)} verdicts PASS")


def test_string_power_balance_boundary_term():
    sys = string_model()
    space = sys.space
    pb = power_balance(sys)
    w_dot = parse("p/rho", space)
    assert equal(pb.boundary_port.components[0], w_dot * parse("P*w_X", space))
    assert pb.boundary_port_rendered == ("dot(w)*(P*w_X)",)
    assert pb.dissipation == 0
    assert pb.domain_port == 0
    assert is_zero(pb.closure_residual)
    assert [f.side for f in pb.faces] == ["lower", "upper"]
    assert all(f.reduced and is_zero(f.value) for f in pb.faces)


def test_damped_string_power_balance():
    sys = string_model(damped=True)
    space = sys.space
    pb = power_balance(sys)
    w_dot = parse("p/rho", space)
    r, P = space.parameter("r"), space.parameter("P")
    slope = total_derivative(w_dot, "X", space)
    assert pb.split == "divergence-form"
    assert equal(pb.dissipation, r * slope**2)
    expected = w_dot * (r * slope + P * space.jet_symbol("w", (0,)))
    assert equal(pb.total_boundary.components[0], expected)
    assert is_zero(pb.closure_residual)


def test_mhd_ports():
    dim = 2
    sys = mhd_model(dim=dim)
    space = sys.space
    pb = power_balance(sys)
    F_hat = inverse_deformation_gradient(space, dim)
    rho, mu = space.parameter("rho"), space.parameter("mu")
    A0 = space.jet_symbol("A0")
    S = [(space.jet_symbol(f"p{a + 1}") - mu * space.function(f"A{a + 1}")) / rho for a in range(dim)]

    for B in range(dim):
        port = sum((mu * F_hat[B, a] * S[a] * A0 for a in range(dim)), sp.Integer(0))
        assert equal(pb.input_extra.components[B], port)
    y = -sum(
        (total_derivative(mu * F_hat[B, a] * S[a], B, space) for a in range(dim) for B in range(dim)),
        sp.Integer(0),
    )
    assert equal(pb.outputs[0], y)
    assert equal(pb.domain_port, A0 * y)
    assert is_zero(pb.closure_residual)


def test_casimir_rejects_displacement_on_string():
    sys = string_model()
    verdict = casimir_check(sys, Density(space=sys.space, integrand=sys.space.jet_symbol("w")))
    assert verdict.status == VerdictStatus.FAIL
    assert not verdict.is_casimir
    assert tuple(verdict.domain_condition_residual) == (0, 1)
    assert verdict.message == "not a Casimir"


def test_constant_density_is_conserved():
    sys = string_model()
    verdict = casimir_check(sys, Density(space=sys.space, integrand=sp.Integer(1)))
    assert verdict.status == VerdictStatus.PASS
    assert verdict.is_conserved


def test_casimir3_accepts_x3():
    sys = casimir3_model()
    verdict = casimir_check(sys, Density(space=sys.space, integrand=sys.derived["C"]))
    assert verdict.status == VerdictStatus.PASS
    assert verdict.is_casimir and verdict.is_conserved


def test_casimir_with_differential_interconnection_is_indeterminate():
    space = JetSpace(independent=("X",), fields=("w",), max_order=3)
    sys = PHSystem(
        name="transport",
        space=space,
        domain=((0.0, 1.0),),
        hamiltonian=Density(space=space, integrand=parse("w^2/2", space)),
        J_op=LinDiffOp(space=space, n_in=1, n_out=1, coefficients={(0, 0, (0,)): 1}),
        R_op=LinDiffOp.zero(space, 1, 1),
        G_op=LinDiffOp.zero(space, 0, 1),
    )
    verdict = casimir_check(sys, Density(space=space, integrand=space.jet_symbol("w")))
    assert verdict.status == VerdictStatus.INDETERMINATE


def test_off_diagonal_dissipation_is_self_adjoint_but_indefinite():
    space = string_model().space
    result = check_self_adjoint_nonneg(LinDiffOp.from_matrix(space, [[0, 1], [1, 0]]))
    assert result.verdict.status == VerdictStatus.PASS
    assert result.nonnegativity.status == VerdictStatus.FAIL


def test_casimir_verdict_ignores_added_constants():
    for sys, integrand in ((string_model(), "w"), (casimir3_model(), "x3")):
        space = sys.space
        plain = casimir_check(sys, Density(space=space, integrand=parse(integrand, space)))
        shifted = casimir_check(sys, Density(space=space, integrand=parse(f"{integrand} + 5", space)))
        assert shifted.status == plain.status
        assert shifted.is_casimir == plain.is_casimir
        assert all(equal(a, b) for a, b in zip(shifted.domain_condition_residual, plain.domain_condition_residual))


def _actuated_string(column) -> PHSystem:
    space = JetSpace(independent=("X",), fields=("w", "p"), inputs=("u",), parameters=("rho", "P"), max_order=4)
    return PHSystem(
        name="actuated",
        space=space,
        domain=((0.0, 1.0),),
        hamiltonian=Density(space=space, integrand=parse("p^2/(2*rho) + (1/2)*P*w_X^2", space)),
        J_op=LinDiffOp.from_matrix(space, [[0, 1], [-1, 0]]),
        R_op=LinDiffOp.zero(space, 2, 2),
        G_op=LinDiffOp.from_matrix(space, column),
    )


def test_unit_input_column_outputs_the_velocity():
    sys = _actuated_string([[0], [1]])
    space = sys.space
    y = output(sys)
    assert len(y) == 1
    assert equal(y[0], parse("p/rho", space))

    u = space.field_symbols(("u",))
    assert equal(pairing(apply_op(sys.G_op, u), effort(sys)), pairing(u, y))
    pb = power_balance(sys)
    assert equal(pb.domain_port, parse("u*p/rho", space))
    assert all(c == 0 for c in pb.input_extra.components)
    assert is_zero(pb.closure_residual)


def test_zero_input_map_has_zero_output():
    sys = _actuated_string([[0], [0]])
    assert output(sys) == (0,)


if __name__ == "__main__":
    test_canonical_skew_matrix_passes()
    test_symmetric_interconnection_fails_with_residual()
    test_damped_string_dissipation_certificate()
    test_indefinite_dissipation_fails_certificate()
    test_builtins_pass_structural_checks()
    test_string_power_balance_boundary_term()
    test_damped_string_power_balance()
    test_mhd_ports()
    test_casimir_rejects_displacement_on_string()
    test_constant_density_is_conserved()
    test_casimir3_accepts_x3()
    test_casimir_with_differential_interconnection_is_indeterminate()
    test_off_diagonal_dissipation_is_self_adjoint_but_indefinite()
    test_casimir_verdict_ignores_added_constants()
    test_unit_input_column_outputs_the_velocity()
    test_zero_input_map_has_zero_output()
    print("✅ phs_model tests passed")
