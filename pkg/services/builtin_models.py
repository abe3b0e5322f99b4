# services/builtin_models.py
"""
Built-in models, constructed programmatically: the vibrating string (with and
without structural damping), inductionless MHD in material coordinates, and a
three-field system with a degenerate interconnection and a Casimir.
"""
from __future__ import annotations

import logging
from typing import Callable, Dict, Tuple

import sympy as sp

from schemas.phs import BoundaryCondition, ParameterSpec
from services.expr_core import Density, JetSpace, canonicalize
from services.model_dsl import render_model
from services.phs_model import PHSystem, structural_checks
from services.variational import LinDiffOp

logger = logging.getLogger(__name__)

# ====== numeric defaults (marked in emitted files) ======
STRING_DEFAULTS = {"rho": 1.0, "P": 1.0, "r": 0.1, "length": 1.0}
MHD_DIMENSIONS = (2, 3)
_COORDINATES = ("X", "Y", "Z")


def _positive(name: str, value: float, closed: bool = False) -> ParameterSpec:
    return ParameterSpec(name=name, value=value, lower=0.0, lower_closed=closed, has_range=True, default_value=True)


def string_model(damped: bool = False, rho: float = 1.0, P: float = 1.0, r: float = 0.1, length: float = 1.0) -> PHSystem:
    """ℌ = p²/(2ρ) + ½P w_X², clamped at both ends; damping adds −d_X(r d_X ·) on p."""
    parameters = ("rho", "P", "r") if damped else ("rho", "P")
    space = JetSpace(independent=("X",), fields=("w", "p"), parameters=parameters, max_order=4)
    X = space.independent_symbols[0]
    w_X, p = space.jet_symbol("w", (0,)), space.jet_symbol("p")
    rho_, P_ = space.parameter("rho"), space.parameter("P")

    hamiltonian = p**2 / (2 * rho_) + P_ * w_X**2 / 2
    J = LinDiffOp.from_matrix(space, [[0, 1], [-1, 0]])
    R = LinDiffOp.zero(space, 2, 2)
    specs = [_positive("rho", rho), _positive("P", P)]
    if damped:
        r_ = space.parameter("r")
        R = LinDiffOp(space=space, n_in=2, n_out=2, coefficients={
            (1, 1, (0, 0)): -r_,
            (1, 1, (0,)): -sp.diff(r_, X),
        })
        specs.append(_positive("r", r, closed=True))

    return PHSystem(
        name="string_damped" if damped else "string",
        space=space,
        domain=((0.0, length),),
        hamiltonian=Density(space=space, integrand=hamiltonian),
        J_op=J,
        R_op=R,
        G_op=LinDiffOp.zero(space, 0, 2),
        parameters=tuple(specs),
        boundary=(
            BoundaryCondition(coordinate="X", position=0.0, field="w", kind="rate", rate=0),
            BoundaryCondition(coordinate="X", position=length, field="w", kind="rate", rate=0),
        ),
        initial={"w": sp.sin(sp.pi * X / sp.Rational(repr(length))), "p": sp.Integer(0)},
    )


def deformation_gradient(space: JetSpace, d: int) -> sp.Matrix:
    """F[α, A] = q^α_A."""
    return sp.Matrix(d, d, lambda a, A: space.jet_symbol(f"q{a + 1}", (A,)))


def inverse_deformation_gradient(space: JetSpace, d: int) -> sp.Matrix:
    """F̂[B, α] = (F⁻¹)^B_α via adjugate and determinant."""
    F = deformation_gradient(space, d)
    return F.adjugate() / F.det()


def mhd_model(dim: int = 3) -> PHSystem:
    """
    Inductionless MHD in material coordinates with the electrostatic potential A0 as input.

    ℌ = Σ (p_α − μA_α)²/(2ρ) + ρ Est, J = [[0, I], [−I, 0]],
    𝔊(A0) on p_α = μ F̂^B_α d_B(A0).
    """
    if dim not in MHD_DIMENSIONS:
        raise ValueError(f"mhd supports dimensions {MHD_DIMENSIONS}, got {dim}")
    coords = _COORDINATES[:dim]
    qs = tuple(f"q{a + 1}" for a in range(dim))
    ps = tuple(f"p{a + 1}" for a in range(dim))
    jets = tuple(f"{q}_{c}" for q in qs for c in coords)
    potentials = tuple(f"A{a + 1}" for a in range(dim))
    functions = tuple((name, qs) for name in potentials) + (("Est", jets),)
    space = JetSpace(
        independent=coords,
        fields=qs + ps,
        inputs=("A0",),
        parameters=("rho", "mu"),
        functions=functions,
        max_order=3,
    )
    rho_, mu_ = space.parameter("rho"), space.parameter("mu")
    A = [space.function(name) for name in potentials]
    p = [space.jet_symbol(name) for name in ps]

    kinetic = sum(((p[a] - mu_ * A[a]) ** 2 for a in range(dim)), sp.Integer(0)) / (2 * rho_)
    hamiltonian = kinetic + rho_ * space.function("Est")

    identity = sp.eye(dim)
    j_rows = [[0] * dim + list(identity.row(a)) for a in range(dim)]
    j_rows += [list(-identity.row(a)) + [0] * dim for a in range(dim)]
    J = LinDiffOp.from_matrix(space, j_rows)

    F_hat = inverse_deformation_gradient(space, dim)
    g_coefficients = {
        (0, dim + a, (B,)): mu_ * F_hat[B, a]
        for a in range(dim)
        for B in range(dim)
    }
    G = LinDiffOp(space=space, n_in=1, n_out=2 * dim, coefficients=g_coefficients)

    A0_grad = [space.jet_symbol("A0", (B,)) for B in range(dim)]
    q = space.field_symbols(qs)
    derived: Dict[str, sp.Expr] = {}
    for a in range(dim):
        derived[f"E0{a + 1}"] = canonicalize(sum((F_hat[B, a] * A0_grad[B] for B in range(dim)), sp.Integer(0)))
    for a in range(dim):
        for b in range(a + 1, dim):
            derived[f"B{a + 1}{b + 1}"] = canonicalize(sp.diff(A[b], q[a]) - sp.diff(A[a], q[b]))

    return PHSystem(
        name="mhd" if dim == 3 else f"mhd{dim}",
        space=space,
        domain=((0.0, 1.0),) * dim,
        hamiltonian=Density(space=space, integrand=hamiltonian),
        J_op=J,
        R_op=LinDiffOp.zero(space, 2 * dim, 2 * dim),
        G_op=G,
        parameters=(ParameterSpec(name="rho", lower=0.0, has_range=True),
                    ParameterSpec(name="mu", lower=0.0, has_range=True)),
        derived=derived,
    )


def casimir3_model() -> PHSystem:
    """Degenerate J: x3 never moves, so ∫x3 dX is a Casimir."""
    space = JetSpace(independent=("X",), fields=("x1", "x2", "x3"), max_order=2)
    X = space.independent_symbols[0]
    x1, x2, x3 = space.field_symbols()
    return PHSystem(
        name="casimir3",
        space=space,
        domain=((0.0, 1.0),),
        hamiltonian=Density(space=space, integrand=x2**2 / 2 + (x1 + x3) ** 2 / 2),
        J_op=LinDiffOp.from_matrix(space, [[0, 1, 0], [-1, 0, 0], [0, 0, 0]]),
        R_op=LinDiffOp.zero(space, 3, 3),
        G_op=LinDiffOp.zero(space, 0, 3),
        initial={"x1": sp.sin(sp.pi * X), "x2": sp.Integer(0), "x3": 1 + X},
        derived={"C": x3},
    )


BUILTINS: Dict[str, Callable[..., PHSystem]] = {
    "string": lambda **kw: string_model(damped=False, **kw),
    "string_damped": lambda **kw: string_model(damped=True, **kw),
    "mhd": mhd_model,
    "casimir3": casimir3_model,
}


def builtin_names() -> Tuple[str, ...]:
    return tuple(BUILTINS)


def build(name: str, **options) -> PHSystem:
    """Instantiate a built-in with its structural verdicts attached."""
    factory = BUILTINS.get(name)
    if factory is None:
        raise KeyError(f"unknown built-in model '{name}' (choose from {', '.join(BUILTINS)})")
    sys = factory(**options)
    return sys.with_verdicts(structural_checks(sys))


def emit(name: str, **options) -> str:
    """Model-file text of a built-in."""
    header = [f"built-in model '{name}'"]
    if name.startswith("string"):
        header.append("numeric parameter values are defaults, not physical claims")
    return render_model(build(name, **options), header=header)
