#!/usr/bin/env python3
"""
Discrete simulation: SBP identities, energy conservation, dissipation accounting,
actuated boundary power, Casimir drift and consistency with the symbolic layer
"""
import math

import numpy as np
import pytest
import sympy as sp

from schemas.phs import BoundaryCondition
from services.builtin_models import casimir3_model, mhd_model, string_model
from services.discrete_sim import (
    DiscreteSystem,
    Grid1D,
    State,
    cross_validate_vardiff,
    discrete_stokes_check,
    discretize_hamiltonian,
    functional,
    initial_state,
    quadrature_adjoint_check,
    run,
    step_midpoint,
)
from services.expr_core import TIME, Density, JetSpace, is_zero, parse
from services.model_dsl import parse_model
from services.phs_model import power_balance
from services.variational import LinDiffOp, adjoint
from utils.errors import UnsupportedModelError

DRIVEN = """\
model driven
independent X in [0, 1]
fields w p
inputs u
hamiltonian (1/2)*p^2 + (1/2)*w_X^2
J [[0, 1], [-1, 0]]
G [[0], [Dx(.)]]
initial p = X + 1
"""


def test_sbp_integration_by_parts():
    rng = np.random.default_rng(7)
    for n in (16, 64, 256):
        grid = Grid1D(n=n)
        for _ in range(1000):
            omega = rng.standard_normal(n)
            assert abs(discrete_stokes_check(grid, omega)) <= 1e-13 * np.max(np.abs(omega)) * n
        a, b = rng.standard_normal(n), rng.standard_normal(n)
        assert abs(grid.integration_by_parts_defect(a, b)) <= 1e-12 * n
        print(f"✅ discrete Stokes identity holds for N={n}")

    plain = Grid1D(n=64, closure="second_order")
    a, b = rng.standard_normal(64), rng.standard_normal(64)
    assert abs(plain.integration_by_parts_defect(a, b)) > 1e-8


def test_initial_energy_matches_closed_form():
    sys = string_model()
    grid = Grid1D.for_system(sys, 201)
    state = initial_state(sys, grid)
    H = discretize_hamiltonian(sys, grid).value(state.vector(sys.fields))
    assert H == pytest.approx(math.pi**2 / 4, abs=1e-3)


def test_undamped_string_conserves_energy():
    sys = string_model()
    grid = Grid1D.for_system(sys, 201)
    start = initial_state(sys, grid)
    result = run(sys, grid, start, None, dt=1e-3, t_end=1.0, stride=100)

    assert len(result.ledger) == 1000
    assert len(result.trajectory) == 11
    H0 = discretize_hamiltonian(sys, grid).value(start.vector(sys.fields))
    assert abs(result.ledger[-1].H - H0) <= 1e-9 * H0
    assert max(abs(row.residual) for row in result.ledger) <= 1e-9
    assert all(abs(row.dissipation) <= 1e-12 for row in result.ledger)
    print(f"✅ energy drift {abs(result.ledger[-1].H - H0) / H0:.2e}")


def test_damped_string_dissipation_accounting():
    sys = string_model(damped=True)
    grid = Grid1D.for_system(sys, 101)
    start = initial_state(sys, grid)
    dt = 1e-3
    result = run(sys, grid, start, None, dt=dt, t_end=0.2)

    H0 = discretize_hamiltonian(sys, grid).value(start.vector(sys.fields))
    energies = [H0] + [row.H for row in result.ledger]
    assert all(later <= earlier + 1e-12 for earlier, later in zip(energies, energies[1:]))
    assert all(row.dissipation >= 0 for row in result.ledger)
    assert max(abs(row.residual) for row in result.ledger) <= 1e-9

    drop = H0 - result.ledger[-1].H
    dissipated = sum(row.dissipation * dt for row in result.ledger)
    assert drop > 0
    assert abs(dissipated - drop) <= 1e-8 * drop


def test_damping_matrix_is_weight_symmetric():
    sys = string_model(damped=True)
    grid = Grid1D.for_system(sys, 31)
    discrete = DiscreteSystem(sys, grid)
    x = initial_state(sys, grid).vector(sys.fields).reshape(2, grid.n)
    R = discrete.R.matrix(discrete.compiler.arguments(x, None, 0.0)).toarray()
    weighted = np.diag(np.tile(grid.weights, 2)) @ R
    assert np.allclose(weighted, weighted.T, atol=1e-12)
    assert np.linalg.eigvalsh(0.5 * (weighted + weighted.T)).min() >= -1e-10

    e = np.random.default_rng(5).standard_normal((2, grid.n))
    direct = float(np.sum(np.tile(grid.weights, 2) * e.ravel() * (R @ e.ravel())))
    assert discrete.R.dissipation(e, discrete.compiler.arguments(x, None, 0.0)) == pytest.approx(direct, rel=1e-12)


def test_actuated_boundary_power():
    base = string_model(damped=True)
    g = sp.Rational(1, 100) * sp.sin(2 * sp.pi * TIME)
    boundary = (
        BoundaryCondition(coordinate="X", position=0.0, field="w", kind="rate", rate=0),
        BoundaryCondition(coordinate="X", position=1.0, field="w", kind="rate", rate=g),
    )
    sys = base.model_copy(update={"boundary": boundary})
    grid = Grid1D.for_system(sys, 51)
    dt = 1e-3
    result = run(sys, grid, initial_state(sys, grid), None, dt=dt, t_end=0.05)

    P, r = 1.0, 0.1
    D, W_end = grid.D, grid.weights[-1]
    for k, row in enumerate(result.ledger):
        before, after = result.trajectory[k], result.trajectory[k + 1]
        w_mid = 0.5 * (before.values["w"] + after.values["w"])
        p_mid = 0.5 * (before.values["p"] + after.values["p"])
        w_rate = (after.values["w"] - before.values["w"]) / dt
        p_rate = (after.values["p"] - before.values["p"]) / dt
        t_mid = before.t + 0.5 * dt
        g_mid = 0.01 * math.sin(2 * math.pi * t_mid)
        assert w_rate[-1] == pytest.approx(g_mid, abs=1e-12)

        # ẇ(P Dw + r Dẇ) at X=1, plus the power of the p row the rate condition replaces
        e_w = -(D @ (P * (D @ w_mid)))
        end_value = g_mid * (P * (D @ w_mid)[-1] + r * (D @ p_mid)[-1])
        replaced_row = W_end * g_mid * (p_rate[-1] + e_w[-1] - (D @ (r * (D @ p_mid)))[-1])
        assert row.boundary_port == pytest.approx(end_value + replaced_row, abs=1e-10)
        assert abs(row.residual) <= 1e-9
    print(f"✅ actuated end closes the ledger over {len(result.ledger)} steps")


def test_distributed_input_domain_port():
    sys = parse_model(DRIVEN)
    pb = power_balance(sys)
    assert is_zero(pb.domain_port - parse("-p_X*u", sys.space))

    grid = Grid1D.for_system(sys, 41)
    dt = 1e-3
    discrete = DiscreteSystem(sys, grid, lambda t: grid.nodes)
    before = initial_state(sys, grid)
    after, row = discrete.step(before, dt)

    p_mid = 0.5 * (before.values["p"] + after.values["p"])
    y = -(grid.D @ p_mid)
    assert row.domain_port == pytest.approx(grid.integrate(grid.nodes * y), abs=1e-12)
    assert row.domain_port == pytest.approx(-0.5, abs=1e-2)
    w_mid = 0.5 * (before.values["w"] + after.values["w"])
    w_rate = (after.values["w"] - before.values["w"]) / dt
    Dw = grid.D @ w_mid
    ends = w_rate[-1] * Dw[-1] - w_rate[0] * Dw[0]
    # [u p] at the ends moves to the boundary port
    flux = grid.nodes[-1] * p_mid[-1] - grid.nodes[0] * p_mid[0]
    assert row.boundary_port == pytest.approx(ends + flux, abs=1e-9)
    assert abs(row.residual) <= 1e-9


def test_time_dependent_structure_skips_the_cached_factorization():
    base = string_model()
    space = base.space
    J = LinDiffOp.from_matrix(space, [[0, 1 + TIME], [-(1 + TIME), 0]])
    sys = base.model_copy(update={"J_op": J})
    grid = Grid1D.for_system(sys, 41)
    assert DiscreteSystem(sys, grid).linear is False
    assert DiscreteSystem(base, grid).linear is True

    start = initial_state(sys, grid)
    result = run(sys, grid, start, None, dt=1e-3, t_end=0.2)
    H0 = discretize_hamiltonian(sys, grid).value(start.vector(sys.fields))
    assert abs(result.ledger[-1].H - H0) <= 1e-9 * H0
    assert max(abs(row.residual) for row in result.ledger) <= 1e-9

    frozen = run(base, grid, start, None, dt=1e-3, t_end=0.2)
    assert not np.allclose(result.trajectory[-1].values["w"], frozen.trajectory[-1].values["w"])


def test_discrete_energy_converges_at_second_order():
    sys = string_model()
    exact = math.pi**2 / 4
    errors = []
    for n in (51, 101):
        grid = Grid1D.for_system(sys, n)
        H = discretize_hamiltonian(sys, grid).value(initial_state(sys, grid).vector(sys.fields))
        errors.append(abs(H - exact))
    ratio = errors[0] / errors[1]
    print(f"✅ H_d convergence ratio {ratio:.3f}")
    assert 3.6 <= ratio <= 4.4


def test_effort_is_exact_on_quadratic_sections():
    sys = string_model()
    X = sys.space.independent_symbols[0]
    grid = Grid1D.for_system(sys, 21)
    assert cross_validate_vardiff(sys, grid, {"w": X**2, "p": X}) <= 1e-10
    assert cross_validate_vardiff(sys, grid, {"w": 3 * X - 1, "p": 2}) <= 1e-10
    assert cross_validate_vardiff(sys, grid, {}) == 0.0


def test_single_step_matches_run():
    sys = string_model()
    grid = Grid1D.for_system(sys, 51)
    start = initial_state(sys, grid)
    stepped = step_midpoint(sys, grid, start, None, 1e-3)
    ran = run(sys, grid, start, None, dt=1e-3, t_end=1e-3)
    assert stepped.t == pytest.approx(1e-3)
    assert np.array_equal(stepped.values["w"], ran.trajectory[-1].values["w"])
    assert np.array_equal(stepped.values["p"], ran.trajectory[-1].values["p"])

    H = discretize_hamiltonian(sys, grid)
    H0 = H.value(start.vector(sys.fields))
    assert abs(H.value(stepped.vector(sys.fields)) - H0) <= 1e-10 * H0

    zero = step_midpoint(sys, grid, State.zeros(sys.fields, grid.n), None, 1e-3)
    assert all(np.all(v == 0) for v in zero.values.values())



def test_casimir3_functional_is_conserved():
    sys = casimir3_model()
    grid = Grid1D.for_system(sys, 51)
    start = initial_state(sys, grid)
    result = run(sys, grid, start, None, dt=1e-3, t_end=1.0, stride=1000)
    C = Density(space=sys.space, integrand=sys.derived["C"])
    c0 = functional(sys, grid, C, result.trajectory[0])
    c1 = functional(sys, grid, C, result.trajectory[-1])
    assert c0 == pytest.approx(1.5, rel=1e-12)
    assert abs(c1 - c0) <= 1e-9 * abs(c0)


def test_zero_initial_data_stays_zero():
    sys = string_model()
    grid = Grid1D.for_system(sys, 21)
    result = run(sys, grid, State.zeros(sys.fields, grid.n), None, dt=1e-2, t_end=0.1)
    assert all(np.all(s.values["w"] == 0) and np.all(s.values["p"] == 0) for s in result.trajectory)
    assert all(row.H == 0 for row in result.ledger)


def test_effort_converges_at_second_order():
    sys = string_model()
    section = {"w": sp.sin(sp.pi * sys.space.independent_symbols[0]), "p": 0}
    coarse = cross_validate_vardiff(sys, Grid1D.for_system(sys, 51), section)
    fine = cross_validate_vardiff(sys, Grid1D.for_system(sys, 101), section)
    ratio = coarse / fine
    print(f"✅ convergence ratio {ratio:.3f}")
    assert 3.6 <= ratio <= 4.4


def test_quadrature_adjoint_identity():
    rng = np.random.default_rng(3)
    X = sp.Symbol("X")

    def polynomial(degree):
        return sum((float(c) * X**k for k, c in enumerate(rng.uniform(-1, 1, degree + 1))), sp.Integer(0))

    space = JetSpace(independent=("X",), fields=("w",), max_order=3)
    d_x = LinDiffOp(space=space, n_in=1, n_out=1, coefficients={(0, 0, (0,)): 1})
    assert quadrature_adjoint_check(d_x, adjoint(d_x), [polynomial(4)], [polynomial(5)]) <= 1e-10

    R = string_model(damped=True).R_op
    defect = quadrature_adjoint_check(
        R, adjoint(R), [polynomial(3), polynomial(4)], [polynomial(4), polynomial(3)], parameters={"r": 0.1}
    )
    assert defect <= 1e-10


def test_multidimensional_model_is_not_numerically_supported():
    with pytest.raises(UnsupportedModelError):
        Grid1D.for_system(mhd_model(), 11)


if __name__ == "__main__":
    test_sbp_integration_by_parts()
    test_initial_energy_matches_closed_form()
    test_undamped_string_conserves_energy()
    test_damped_string_dissipation_accounting()
    test_damping_matrix_is_weight_symmetric()
    test_actuated_boundary_power()
    test_distributed_input_domain_port()
    test_time_dependent_structure_skips_the_cached_factorization()
    test_discrete_energy_converges_at_second_order()
    test_effort_is_exact_on_quadratic_sections()
    test_single_step_matches_run()
    test_casimir3_functional_is_conserved()
    test_zero_initial_data_stays_zero()
    test_effort_converges_at_second_order()
    test_quadrature_adjoint_identity()
    test_multidimensional_model_is_not_numerically_supported()
    print("✅ discrete_sim tests passed")
