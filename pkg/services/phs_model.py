# services/phs_model.py
"""
Port-Hamiltonian systems on a jet space: structural checks of the
interconnection, dissipation and input operators, the right-hand side and
output, the symbolic power balance and the Casimir test.
"""
from __future__ import annotations

import logging
import math
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import sympy as sp
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.stats import qmc
from sympy.core.function import AppliedUndef

from schemas.phs import BoundaryCondition, FaceValue, ParameterSpec, Verdict, VerdictStatus
from services.expr_core import (
    TIME,
    BoundaryDensity,
    CovectorDensity,
    Density,
    JetSpace,
    SymExpr,
    VerticalField,
    as_expression,
    canonicalize,
    eval_numeric,
    is_zero,
    jet_coordinates,
    render,
)
from services.variational import (
    AdjointResult,
    BilinearBoundaryForm,
    DivergenceForm,
    LinDiffOp,
    adjoint,
    adjoint_identity_check,
    apply_op,
    boundary_operator,
    divergence_form,
    fresh_field_names,
    generic_space,
    lie_derivative,
    pairing,
    variational_derivative,
)
from utils.config import get_settings
from utils.errors import DimensionMismatchError, JetOrderError

logger = logging.getLogger(__name__)


# ────────────────────────────────────────────────────────────────────────────────
# System description
# ────────────────────────────────────────────────────────────────────────────────
class PHSystem(BaseModel):
    """ẋ = (𝔍 − ℜ)(δℌ) + 𝔊(u), y = 𝔊*(δℌ), with boundary conditions per face."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    name: str = "model"
    space: JetSpace
    domain: Tuple[Tuple[float, float], ...]
    hamiltonian: Density
    J_op: LinDiffOp
    R_op: LinDiffOp
    G_op: LinDiffOp
    parameters: Tuple[ParameterSpec, ...] = ()
    boundary: Tuple[BoundaryCondition, ...] = ()
    initial: Dict[str, SymExpr] = Field(default_factory=dict)
    derived: Dict[str, SymExpr] = Field(default_factory=dict)
    verdicts: Tuple[Verdict, ...] = ()

    @model_validator(mode="after")
    def _check_shapes(self) -> "PHSystem":
        n = len(self.space.fields)
        m = len(self.space.inputs)
        for label, op in (("J", self.J_op), ("R", self.R_op)):
            if (op.n_in, op.n_out) != (n, n):
                raise DimensionMismatchError(f"{label} must be {n}x{n}, got {op.n_out}x{op.n_in}")
        if (self.G_op.n_in, self.G_op.n_out) != (m, n):
            raise DimensionMismatchError(f"G must be {n}x{m}, got {self.G_op.n_out}x{self.G_op.n_in}")
        if len(self.domain) != self.space.dim:
            raise DimensionMismatchError("one domain interval per independent coordinate")
        for lo, hi in self.domain:
            if not lo < hi:
                raise ValueError(f"empty domain interval [{lo}, {hi}]")
        for bc in self.boundary:
            if bc.coordinate not in self.space.independent:
                raise ValueError(f"boundary condition on unknown coordinate '{bc.coordinate}'")
            if bc.field not in self.space.fields:
                raise ValueError(f"boundary condition on unknown field '{bc.field}'")
            self.side_of(bc)
        return self

    @property
    def fields(self) -> Tuple[str, ...]:
        return self.space.fields

    @property
    def inputs(self) -> Tuple[str, ...]:
        return self.space.inputs

    def parameter_spec(self, name: str) -> Optional[ParameterSpec]:
        return next((p for p in self.parameters if p.name == name), None)

    def parameter_values(self) -> Dict[str, float]:
        return {p.name: p.value for p in self.parameters if p.value is not None}

    def side_of(self, bc: BoundaryCondition) -> str:
        lo, hi = self.domain[self.space.base_index(bc.coordinate)]
        if math.isclose(bc.position, lo, abs_tol=1e-12):
            return "lower"
        if math.isclose(bc.position, hi, abs_tol=1e-12):
            return "upper"
        raise ValueError(f"boundary position {bc.coordinate}={bc.position} is not an end of [{lo}, {hi}]")

    def conditions_at(self, coordinate: str, side: str) -> List[BoundaryCondition]:
        return [bc for bc in self.boundary if bc.coordinate == coordinate and self.side_of(bc) == side]

    def with_verdicts(self, verdicts: Sequence[Verdict]) -> "PHSystem":
        values = {name: getattr(self, name) for name in type(self).model_fields}
        values["verdicts"] = tuple(verdicts)
        return PHSystem(**values)

    def input_symbols(self) -> Tuple[sp.Symbol, ...]:
        return self.space.field_symbols(self.space.inputs)


class SkewCheck(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    verdict: Verdict
    remainder: Optional[BilinearBoundaryForm] = None


class SelfAdjointCheck(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    verdict: Verdict
    nonnegativity: Verdict
    remainder: Optional[BilinearBoundaryForm] = None


# ────────────────────────────────────────────────────────────────────────────────
# Structural checks
# ────────────────────────────────────────────────────────────────────────────────
def _symmetry_check(op: LinDiffOp, sign: int, label: str) -> Tuple[Verdict, Optional[AdjointResult]]:
    """sign=+1 tests skew-adjointness, sign=-1 self-adjointness."""
    if not op.is_square:
        raise DimensionMismatchError(f"{label} must be square")
    ext, omega, varpi = generic_space(op)
    om, vp = ext.field_symbols(omega), ext.field_symbols(varpi)
    combined = canonicalize(
        pairing(apply_op(op, om, ext), vp) + sign * pairing(apply_op(op, vp, ext), om)
    )
    if op.order == 0:
        status = VerdictStatus.PASS if is_zero(combined) else VerdictStatus.FAIL
        return Verdict(check=label, status=status, residual=combined), None

    result = adjoint(op)
    if not result.adjoint.same_as(op.scaled(-sign)):
        return Verdict(check=label, status=VerdictStatus.FAIL, residual=combined,
                       message="adjoint does not match"), result
    residual = canonicalize(combined - result.remainder.as_density().divergence())
    status = VerdictStatus.PASS if is_zero(residual) else VerdictStatus.FAIL
    return Verdict(check=label, status=status, residual=residual), result


def check_skew(op: LinDiffOp, label: str = "J skew-adjoint") -> SkewCheck:
    verdict, result = _symmetry_check(op, 1, label)
    return SkewCheck(verdict=verdict, remainder=result.remainder if result else None)


# ====== non-negativity sampling ======
def _unit_interval(u: float) -> float:
    return 2.0 * u - 1.0


def _sampling_keys(
    exprs: Sequence[sp.Expr],
    space: JetSpace,
    domain: Sequence[Tuple[float, float]],
    parameters: Sequence[ParameterSpec],
) -> Dict[str, Callable[[float], float]]:
    """
    Every key `eval_numeric` may ask for, with a map from (0, 1) onto its range.
    Unranged parameters use their value, anything else without a range [−1, 1].
    """
    specs = {p.name: p for p in parameters}
    unit = _unit_interval
    keys: Dict[str, Callable[[float], float]] = {}
    for expr in exprs:
        for d in expr.atoms(sp.Derivative):
            keys.setdefault(render(d), unit)
        for fn in expr.atoms(AppliedUndef):
            name = fn.func.__name__
            spec = specs.get(name)
            if spec is not None and spec.has_range:
                keys.setdefault(name, spec.sample)
            elif spec is not None and spec.value is not None:
                keys.setdefault(name, lambda u, v=spec.value: v)
            else:
                keys.setdefault(name, unit)
        for sym in expr.free_symbols:
            if sym.name in space.independent:
                lo, hi = domain[space.independent.index(sym.name)]
                keys.setdefault(sym.name, lambda u, lo=lo, hi=hi: lo + u * (hi - lo))
            elif sym == TIME:
                keys.setdefault(sym.name, lambda u: u)
            else:
                keys.setdefault(sym.name, unit)
    return keys


def sample_points(keys: Mapping[str, Callable[[float], float]], count: int) -> List[Dict[str, float]]:
    """Unscrambled Sobol points, skipping the origin, mapped through each key's range map."""
    names = sorted(keys)
    if not names:
        return [{}]
    m = max(1, math.ceil(math.log2(count + 1)))
    units = qmc.Sobol(d=len(names), scramble=False).random_base2(m)[1:count + 1]
    return [{name: keys[name](float(u)) for name, u in zip(names, row)} for row in units]


def _min_eigenvalue(matrix: np.ndarray) -> float:
    if matrix.size == 0:
        return 0.0
    sym = 0.5 * (matrix + matrix.T)
    return float(np.linalg.eigvalsh(sym).min())


def nonnegativity_certificate(
    form: DivergenceForm,
    domain: Sequence[Tuple[float, float]],
    parameters: Sequence[ParameterSpec] = (),
    label: str = "R non-negative",
) -> Verdict:
    """
    M ⪰ 0 and −R ⪰ 0 as a quadratic form in d_B(ω_α), at sampled points.

    Args:
        form: operator in divergence form
        domain: intervals of the independent coordinates
        parameters: declared ranges used for sampling

    Returns:
        Verdict whose residual is the quadratic density in generic ω.
    """
    settings = get_settings()
    space = form.space
    n, dim = form.size, space.dim
    exprs = list(form.zeroth.values()) + list(form.second.values())
    points = sample_points(_sampling_keys(exprs, space, domain, parameters), settings.psd_samples)

    worst = math.inf
    for point in points:
        m_num = np.zeros((n, n))
        for (alpha, beta), coeff in form.zeroth.items():
            m_num[alpha, beta] = eval_numeric(coeff, point)
        r_num = np.zeros((n * dim, n * dim))
        for (alpha, beta, A, B), coeff in form.second.items():
            r_num[alpha * dim + B, beta * dim + A] = -eval_numeric(coeff, point)
        worst = min(worst, _min_eigenvalue(m_num), _min_eigenvalue(r_num))

    omega_names = fresh_field_names(space, "omega", n)
    ext = space.with_fields(omega_names)
    quadratic = form.quadratic_density(ext.field_symbols(omega_names), ext)
    status = VerdictStatus.PASS if worst >= -settings.psd_tol else VerdictStatus.FAIL
    message = f"min eigenvalue {worst:.3e} over {len(points)} sample points"
    logger.debug(f"{label}: {message}")
    return Verdict(check=label, status=status, residual=quadratic, message=message)


def check_self_adjoint_nonneg(
    op: LinDiffOp,
    domain: Optional[Sequence[Tuple[float, float]]] = None,
    parameters: Sequence[ParameterSpec] = (),
    label: str = "R self-adjoint",
) -> SelfAdjointCheck:
    domain = domain or ((0.0, 1.0),) * op.space.dim
    verdict, result = _symmetry_check(op, -1, label)
    remainder = result.remainder if result else None
    certificate_label = label.replace("self-adjoint", "non-negative")
    if not verdict.passed:
        certificate = Verdict(check=certificate_label, status=VerdictStatus.INDETERMINATE,
                              message="operator is not self-adjoint")
        return SelfAdjointCheck(verdict=verdict, nonnegativity=certificate, remainder=remainder)

    form = divergence_form(op)
    if form is None:
        certificate = Verdict(check=certificate_label, status=VerdictStatus.INDETERMINATE,
                              message="operator is not of the form M + d_A(R d_B .)")
        logger.warning(f"{certificate_label}: indeterminate, unsupported operator shape")
    else:
        certificate = nonnegativity_certificate(form, domain, parameters, certificate_label)
    return SelfAdjointCheck(verdict=verdict, nonnegativity=certificate, remainder=remainder)


def structural_checks(sys: PHSystem) -> Tuple[Verdict, ...]:
    """All verdicts that gate a model: J skew, R self-adjoint and non-negative, G adjoint identity."""
    skew = check_skew(sys.J_op)
    damping = check_self_adjoint_nonneg(sys.R_op, sys.domain, sys.parameters)
    verdicts = [skew.verdict, damping.verdict, damping.nonnegativity]
    if sys.G_op.order > 0:
        identity = adjoint_identity_check(sys.G_op)
        verdicts.append(Verdict(
            check="G adjoint identity",
            status=VerdictStatus.PASS if identity.passed else VerdictStatus.FAIL,
            residual=identity.residual,
        ))
    for v in verdicts:
        if v.status == VerdictStatus.INDETERMINATE:
            logger.warning(f"{sys.name}: {v.check} indeterminate ({v.message})")
    return tuple(verdicts)


# ────────────────────────────────────────────────────────────────────────────────
# Dynamics
# ────────────────────────────────────────────────────────────────────────────────
def effort(sys: PHSystem) -> CovectorDensity:
    """δℌ."""
    return variational_derivative(sys.hamiltonian)


def _inputs(sys: PHSystem, u: Optional[Sequence]) -> Tuple[sp.Expr, ...]:
    if u is None:
        return sys.input_symbols()
    if len(u) != len(sys.inputs):
        raise DimensionMismatchError(f"{sys.name} has {len(sys.inputs)} inputs, got {len(u)}")
    return tuple(as_expression(v) for v in u)


def assemble_rhs(sys: PHSystem, u: Optional[Sequence] = None) -> VerticalField:
    delta = effort(sys)
    drift = apply_op(sys.J_op - sys.R_op, delta)
    forcing = apply_op(sys.G_op, _inputs(sys, u))
    return VerticalField(
        space=sys.space,
        components=tuple(canonicalize(a + b) for a, b in zip(drift.components, forcing.components)),
    )


def output(sys: PHSystem) -> Tuple[sp.Expr, ...]:
    """y = 𝔊*(δℌ), one density per input."""
    if not sys.inputs:
        return ()
    g_star = adjoint(sys.G_op).adjoint
    return apply_op(g_star, effort(sys)).components


# ====== boundary conditions on faces ======
def _impose_rate(value: sp.Expr, rate_expr: sp.Expr, prescribed: sp.Expr, space: JetSpace) -> Tuple[sp.Expr, bool]:
    """Eliminate one jet coordinate of `rate_expr = prescribed` from `value`."""
    if is_zero(rate_expr - prescribed):
        return value, True
    candidates = sorted(jet_coordinates(rate_expr, space), key=lambda item: (item[1].order, item[0].name))
    for sym, _ in candidates:
        if sp.diff(rate_expr, sym, 2) != 0:
            continue
        solved = sp.solve(sp.Eq(rate_expr, prescribed), sym)
        if len(solved) == 1:
            return canonicalize(value.subs(sym, solved[0])), True
    return value, False


def face_values(sys: PHSystem, density: BoundaryDensity, rates: Optional[VerticalField] = None) -> Tuple[FaceValue, ...]:
    """Outward flux of `density` through every face, with declared rate conditions imposed."""
    rates = rates or assemble_rhs(sys)
    faces = []
    for A, coordinate in enumerate(sys.space.independent):
        lo, hi = sys.domain[A]
        for side, position, sign in (("lower", lo, -1), ("upper", hi, 1)):
            value = canonicalize(sign * density.components[A])
            reduced = True
            for bc in sys.conditions_at(coordinate, side):
                if bc.kind != "rate":
                    continue
                alpha = sys.fields.index(bc.field)
                value, ok = _impose_rate(value, rates.components[alpha], bc.rate, sys.space)
                reduced = reduced and ok
            faces.append(FaceValue(coordinate=coordinate, position=position, side=side,
                                   value=value, reduced=reduced))
    return tuple(faces)


# ────────────────────────────────────────────────────────────────────────────────
# Power balance
# ────────────────────────────────────────────────────────────────────────────────
class PowerBalanceSymbolic(BaseModel):
    """Ḣ = −∫Q + ∫u⌋y + ∫d_h(boundary_port + operator_boundary_extras)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    rates: VerticalField
    outputs: Tuple[SymExpr, ...]
    dissipation: SymExpr
    domain_port: SymExpr
    boundary_port: BoundaryDensity
    boundary_port_rendered: Tuple[str, ...]
    skew_extra: BoundaryDensity
    dissipation_extra: BoundaryDensity
    input_extra: BoundaryDensity
    split: str
    faces: Tuple[FaceValue, ...]
    closure_residual: SymExpr

    @property
    def operator_boundary_extras(self) -> BoundaryDensity:
        return self.skew_extra + self.dissipation_extra + self.input_extra

    @property
    def total_boundary(self) -> BoundaryDensity:
        return self.boundary_port + self.operator_boundary_extras


def _render_boundary_port(sys: PHSystem, covector_rows) -> Tuple[str, ...]:
    rendered = []
    for A in range(sys.space.dim):
        terms = [
            f"dot({field})*({render(row[A])})"
            for field, row in zip(sys.fields, covector_rows)
            if row[A] != 0
        ]
        rendered.append(" + ".join(terms) if terms else "0")
    return tuple(rendered)


def power_balance(sys: PHSystem) -> PowerBalanceSymbolic:
    space = sys.space
    delta = effort(sys)
    rates = assemble_rhs(sys)
    u = sys.input_symbols()
    y = output(sys)
    domain_port = pairing(u, y) if u else sp.Integer(0)
    zero = BoundaryDensity.zero(space)

    form = divergence_form(sys.R_op)
    if form is not None:
        dissipation = form.quadratic_density(delta)
        dissipation_extra = form.boundary_flux(delta).scaled(-1)
        split = "divergence-form"
    else:
        dissipation = pairing(apply_op(sys.R_op, delta), delta)
        dissipation_extra = zero
        split = "unreduced"
        logger.warning(f"{sys.name}: R has no divergence form, dissipation left unreduced")

    skew_extra = zero
    if sys.J_op.order > 0:
        remainder = adjoint(sys.J_op).remainder
        skew_extra = remainder.evaluate(delta, delta, space).scaled(sp.Rational(1, 2))

    input_extra = zero
    if u and sys.G_op.order > 0:
        input_extra = adjoint(sys.G_op).remainder.evaluate(u, delta, space)

    covector = boundary_operator(sys.hamiltonian)
    boundary_port = covector.contract(rates)
    total = boundary_port + skew_extra + dissipation_extra + input_extra

    h_dot = lie_derivative(sys.hamiltonian, rates)
    closure = canonicalize(h_dot - (-dissipation + domain_port + total.divergence()))
    if not is_zero(closure):
        logger.warning(f"{sys.name}: power balance does not close, residual {render(closure)}")

    return PowerBalanceSymbolic(
        rates=rates,
        outputs=y,
        dissipation=dissipation,
        domain_port=domain_port,
        boundary_port=boundary_port,
        boundary_port_rendered=_render_boundary_port(sys, covector.rows),
        skew_extra=skew_extra,
        dissipation_extra=dissipation_extra,
        input_extra=input_extra,
        split=split,
        faces=face_values(sys, total, rates),
        closure_residual=closure,
    )


# ────────────────────────────────────────────────────────────────────────────────
# Casimir densities
# ────────────────────────────────────────────────────────────────────────────────
class CasimirVerdict(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    status: VerdictStatus
    variational_derivative: Tuple[SymExpr, ...] = ()
    domain_condition_residual: Tuple[SymExpr, ...] = ()
    boundary_condition: Optional[BoundaryDensity] = None
    faces: Tuple[FaceValue, ...] = ()
    input_pairing: SymExpr = sp.Integer(0)
    is_casimir: bool = False
    is_conserved: bool = False
    message: str = ""


def casimir_check(sys: PHSystem, density: Density) -> CasimirVerdict:
    """Kernel condition δ𝒞·(𝒥 − ℛ) = 0 plus vanishing boundary flux ẋ^α ∂^A_α 𝒞."""
    if sys.J_op.order > 0 or sys.R_op.order > 0:
        message = "Casimir conditions are only defined for order-0 J and R"
        logger.warning(f"{sys.name}: {message}")
        return CasimirVerdict(status=VerdictStatus.INDETERMINATE, message=message)
    if density.order > 1:
        raise JetOrderError(density.order, 1, "Casimir candidate")

    delta = variational_derivative(density)
    structure = sys.J_op - sys.R_op
    n = len(sys.fields)
    residual = tuple(
        canonicalize(sum((delta.components[beta] * structure.coefficient(alpha, beta) for beta in range(n)),
                         sp.Integer(0)))
        for alpha in range(n)
    )
    rates = assemble_rhs(sys)
    boundary = boundary_operator(density).contract(rates)
    faces = face_values(sys, boundary, rates)
    input_pairing = pairing(apply_op(sys.G_op, sys.input_symbols()), delta)

    is_casimir = all(is_zero(r) for r in residual) and all(is_zero(f.value) for f in faces)
    is_conserved = is_casimir and is_zero(input_pairing)
    return CasimirVerdict(
        status=VerdictStatus.PASS if is_casimir else VerdictStatus.FAIL,
        variational_derivative=delta.components,
        domain_condition_residual=residual,
        boundary_condition=boundary,
        faces=faces,
        input_pairing=input_pairing,
        is_casimir=is_casimir,
        is_conserved=is_conserved,
        message="conserved" if is_conserved else ("Casimir" if is_casimir else "not a Casimir"),
    )
