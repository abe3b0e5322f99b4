# services/variational.py
"""
Variational calculus on a jet space: Euler-Lagrange and boundary operators,
prolongation, the Lie-derivative split, and adjoints of linear differential
operators with their boundary remainders.
"""
from __future__ import annotations

import logging
from typing import Dict, Optional, Sequence, Tuple, Union

import sympy as sp
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from services.expr_core import (
    BoundaryDensity,
    CovectorDensity,
    Density,
    JetSpace,
    SymExpr,
    VerticalField,
    as_expression,
    canonicalize,
    is_zero,
    jet_coordinates,
    substitute,
    total_derivative,
    total_derivative_multi,
)
from utils.errors import DimensionMismatchError, JetOrderError

logger = logging.getLogger(__name__)

MultiIndex = Tuple[int, ...]
CoefficientKey = Tuple[int, int, MultiIndex]
Components = Union[CovectorDensity, VerticalField, "OperatorImage", Sequence]


# ────────────────────────────────────────────────────────────────────────────────
# Linear differential operators
# ────────────────────────────────────────────────────────────────────────────────
class LinDiffOp(BaseModel):
    """
    𝔇(ω)^β = Σ 𝔇^{αβ𝔎} d_𝔎(ω_α), coefficients keyed by (α, β, 𝔎).

    `n_in` counts the ω slots (α), `n_out` the output components (β).
    Zero coefficients are dropped on construction.
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: JetSpace
    n_in: int = Field(ge=0)
    n_out: int = Field(ge=0)
    coefficients: Dict[CoefficientKey, SymExpr] = Field(default_factory=dict)

    @field_validator("coefficients")
    @classmethod
    def _canonical_coefficients(cls, value: Dict[CoefficientKey, sp.Expr]) -> Dict[CoefficientKey, sp.Expr]:
        merged: Dict[CoefficientKey, sp.Expr] = {}
        for (alpha, beta, multi), coeff in value.items():
            key = (alpha, beta, tuple(sorted(multi)))
            merged[key] = merged.get(key, sp.Integer(0)) + coeff
        cleaned = {}
        for key in sorted(merged):
            coeff = canonicalize(merged[key])
            if coeff != 0:
                cleaned[key] = coeff
        return cleaned

    @model_validator(mode="after")
    def _check_indices(self) -> "LinDiffOp":
        for alpha, beta, multi in self.coefficients:
            if not (0 <= alpha < self.n_in and 0 <= beta < self.n_out):
                raise DimensionMismatchError(
                    f"coefficient ({alpha}, {beta}) outside a {self.n_out}x{self.n_in} operator"
                )
            if any(not 0 <= A < self.space.dim for A in multi):
                raise DimensionMismatchError(f"multi-index {multi} outside dimension {self.space.dim}")
        return self

    @classmethod
    def zero(cls, space: JetSpace, n_in: int, n_out: int) -> "LinDiffOp":
        return cls(space=space, n_in=n_in, n_out=n_out)

    @classmethod
    def from_matrix(cls, space: JetSpace, rows: Sequence[Sequence]) -> "LinDiffOp":
        """Order-0 operator; rows[β][α] is the coefficient of ω_α in output β."""
        n_out = len(rows)
        n_in = len(rows[0]) if rows else 0
        coefficients = {}
        for beta, row in enumerate(rows):
            if len(row) != n_in:
                raise DimensionMismatchError("ragged coefficient matrix")
            for alpha, value in enumerate(row):
                coefficients[(alpha, beta, ())] = as_expression(value)
        return cls(space=space, n_in=n_in, n_out=n_out, coefficients=coefficients)

    @property
    def order(self) -> int:
        return max((len(multi) for _, _, multi in self.coefficients), default=0)

    @property
    def is_square(self) -> bool:
        return self.n_in == self.n_out

    def coefficient(self, alpha: int, beta: int, multi: MultiIndex = ()) -> sp.Expr:
        return self.coefficients.get((alpha, beta, tuple(sorted(multi))), sp.Integer(0))

    def entry(self, beta: int, alpha: int) -> Dict[MultiIndex, sp.Expr]:
        return {m: c for (a, b, m), c in self.coefficients.items() if a == alpha and b == beta}

    def scaled(self, factor) -> "LinDiffOp":
        factor = as_expression(factor)
        return LinDiffOp(
            space=self.space,
            n_in=self.n_in,
            n_out=self.n_out,
            coefficients={k: factor * c for k, c in self.coefficients.items()},
        )

    def __neg__(self) -> "LinDiffOp":
        return self.scaled(-1)

    def __add__(self, other: "LinDiffOp") -> "LinDiffOp":
        if (self.n_in, self.n_out) != (other.n_in, other.n_out):
            raise DimensionMismatchError("operator shapes differ")
        merged = dict(self.coefficients)
        for key, coeff in other.coefficients.items():
            merged[key] = merged.get(key, sp.Integer(0)) + coeff
        return LinDiffOp(space=self.space, n_in=self.n_in, n_out=self.n_out, coefficients=merged)

    def __sub__(self, other: "LinDiffOp") -> "LinDiffOp":
        return self + (-other)

    def same_as(self, other: "LinDiffOp") -> bool:
        """Coefficient-wise symbolic equality."""
        if (self.n_in, self.n_out) != (other.n_in, other.n_out):
            return False
        keys = set(self.coefficients) | set(other.coefficients)
        return all(is_zero(self.coefficient(*k) - other.coefficient(*k)) for k in keys)


class OperatorImage(BaseModel):
    """𝔇(ω): n_out components, not necessarily one per field of `space`."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: JetSpace
    components: Tuple[SymExpr, ...]


def _components(value: Components) -> Tuple[sp.Expr, ...]:
    if isinstance(value, (CovectorDensity, VerticalField, OperatorImage)):
        return tuple(value.components)
    return tuple(as_expression(v) for v in value)


def pairing(first: Components, second: Components) -> sp.Expr:
    """Contraction v⌋ω of matching component lists."""
    a, b = _components(first), _components(second)
    if len(a) != len(b):
        raise DimensionMismatchError(f"cannot pair {len(a)} with {len(b)} components")
    return canonicalize(sum((x * y for x, y in zip(a, b)), sp.Integer(0)))


def apply_op(op: LinDiffOp, omega: Components, space: Optional[JetSpace] = None) -> OperatorImage:
    """𝔇(ω); pass `space` when ω lives on an extended jet space."""
    space = space or op.space
    comps = _components(omega)
    if len(comps) != op.n_in:
        raise DimensionMismatchError(f"operator takes {op.n_in} components, got {len(comps)}")
    derivatives: Dict[Tuple[int, MultiIndex], sp.Expr] = {}
    out = [sp.Integer(0)] * op.n_out
    for (alpha, beta, multi), coeff in op.coefficients.items():
        key = (alpha, multi)
        if key not in derivatives:
            derivatives[key] = total_derivative_multi(comps[alpha], multi, space)
        out[beta] = out[beta] + coeff * derivatives[key]
    return OperatorImage(space=space, components=tuple(canonicalize(c) for c in out))


# ────────────────────────────────────────────────────────────────────────────────
# Euler-Lagrange operator, boundary operator, prolongation
# ────────────────────────────────────────────────────────────────────────────────
class BoundaryCovector(BaseModel):
    """δ∂𝔉 = ∂^A_α ℱ dx^α ∧ dX_A, stored as rows[α][A]."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: JetSpace
    rows: Tuple[Tuple[SymExpr, ...], ...]

    def component(self, field: Union[int, str], base: Union[int, str] = 0) -> sp.Expr:
        alpha = self.space.fields.index(field) if isinstance(field, str) else field
        return self.rows[alpha][self.space.base_index(base)]

    def contract(self, v: Components) -> BoundaryDensity:
        comps = _components(v)
        if len(comps) != len(self.rows):
            raise DimensionMismatchError("vertical field and boundary covector sizes differ")
        out = []
        for A in range(self.space.dim):
            out.append(canonicalize(sum((vi * row[A] for vi, row in zip(comps, self.rows)), sp.Integer(0))))
        return BoundaryDensity(space=self.space, components=tuple(out))

    def is_zero(self) -> bool:
        return all(is_zero(c) for row in self.rows for c in row)


class ProlongedField(BaseModel):
    """j¹(v): components v^α and their total derivatives d_A(v^α) as derivatives[α][A]."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: JetSpace
    components: Tuple[SymExpr, ...]
    derivatives: Tuple[Tuple[SymExpr, ...], ...]


def _require_first_order(density: Density, operation: str) -> None:
    if density.order > 1:
        raise JetOrderError(density.order, 1, f"{operation} of a density")


def variational_derivative(density: Density, allow_higher_order: bool = False) -> CovectorDensity:
    """δ_α ℱ = Σ_𝔎 (−1)^{|𝔎|} d_𝔎 ∂ℱ/∂x^α_𝔎 (first-order densities unless allowed)."""
    if not allow_higher_order:
        _require_first_order(density, "variational derivative")
    space = density.space
    integrand = as_expression(density.integrand)
    comps = [sp.Integer(0)] * len(space.fields)
    for sym, coord in jet_coordinates(integrand, space):
        if coord.field not in space.fields:
            continue
        part = sp.diff(integrand, sym)
        term = total_derivative_multi(part, coord.multi, space)
        alpha = space.fields.index(coord.field)
        comps[alpha] = comps[alpha] + (-1) ** coord.order * term
    return CovectorDensity(space=space, components=tuple(canonicalize(c) for c in comps))


def boundary_operator(density: Density) -> BoundaryCovector:
    _require_first_order(density, "boundary operator")
    space = density.space
    integrand = as_expression(density.integrand)
    rows = []
    for field in space.fields:
        rows.append(
            tuple(canonicalize(sp.diff(integrand, space.jet_symbol(field, (A,)))) for A in range(space.dim))
        )
    return BoundaryCovector(space=space, rows=tuple(rows))


def prolong(v: Components, space: Optional[JetSpace] = None) -> ProlongedField:
    if space is None:
        if not isinstance(v, VerticalField):
            raise ValueError("prolong needs a jet space for plain component lists")
        space = v.space
    comps = _components(v)
    derivatives = tuple(
        tuple(total_derivative(c, A, space) for A in range(space.dim)) for c in comps
    )
    return ProlongedField(space=space, components=comps, derivatives=derivatives)


def lie_decompose(density: Density, v: Components) -> Tuple[sp.Expr, BoundaryDensity]:
    """Split j¹(v)(ℱ) into v^α δ_α ℱ and the boundary density v^α ∂^A_α ℱ."""
    delta = variational_derivative(density)
    domain = pairing(v, delta)
    boundary = boundary_operator(density).contract(v)
    return domain, boundary


def lie_derivative(density: Density, v: Components) -> sp.Expr:
    """j¹(v)(ℱ) expanded directly; total derivatives of v only where ℱ needs them."""
    space = density.space
    integrand = as_expression(density.integrand)
    comps = _components(v)
    result = sp.Integer(0)
    for sym, coord in jet_coordinates(integrand, space):
        if coord.field not in space.fields:
            continue
        vi = comps[space.fields.index(coord.field)]
        result += sp.diff(integrand, sym) * total_derivative_multi(vi, coord.multi, space)
    return canonicalize(result)


def lie_identity_residual(density: Density, v: Components) -> sp.Expr:
    domain, boundary = lie_decompose(density, v)
    return canonicalize(lie_derivative(density, v) - domain - boundary.divergence())


# ────────────────────────────────────────────────────────────────────────────────
# Adjoints
# ────────────────────────────────────────────────────────────────────────────────
def fresh_field_names(space: JetSpace, stem: str, count: int) -> Tuple[str, ...]:
    taken = set(space.independent) | set(space.jet_fields) | set(space.parameters)
    taken |= set(space.function_args)
    suffix = ""
    while True:
        names = tuple(f"{stem}{suffix}{i + 1}" for i in range(count))
        if not taken.intersection(names):
            return names
        suffix += "g"


class BilinearBoundaryForm(BaseModel):
    """𝔡(ω, ϖ), with components written over the generic fields `first` (ω) and `second` (ϖ)."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: JetSpace
    first: Tuple[str, ...]
    second: Tuple[str, ...]
    components: Tuple[SymExpr, ...]

    def as_density(self) -> BoundaryDensity:
        return BoundaryDensity(space=self.space, components=self.components)

    def evaluate(self, first: Components, second: Components, target: JetSpace) -> BoundaryDensity:
        bindings = dict(zip(self.first, _components(first)))
        bindings.update(zip(self.second, _components(second)))
        if len(bindings) != len(self.first) + len(self.second):
            raise DimensionMismatchError("bilinear form arguments have the wrong length")
        space = self.space.with_order(max(self.space.max_order, target.max_order))
        comps = tuple(substitute(c, bindings, space) for c in self.components)
        return BoundaryDensity(space=target, components=comps)


class AdjointResult(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    adjoint: LinDiffOp
    remainder: BilinearBoundaryForm


class IdentityCheck(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    passed: bool
    residual: SymExpr


def generic_space(op: LinDiffOp) -> Tuple[JetSpace, Tuple[str, ...], Tuple[str, ...]]:
    """Extend the operator's space with fresh fields ω (inputs) and ϖ (outputs)."""
    omega = fresh_field_names(op.space, "omega", op.n_in)
    varpi = fresh_field_names(op.space.with_fields(omega), "varpi", op.n_out)
    return op.space.with_fields(omega + varpi), omega, varpi


def adjoint(op: LinDiffOp) -> AdjointResult:
    """
    Integrate by parts term by term, moving one derivative off ω at a time,
    leftmost base index first. Each step adds T·d_rest(ω_α) to the remainder
    in direction A and replaces T by −d_A(T).
    """
    ext, omega, varpi = generic_space(op)
    per_slot = [sp.Integer(0)] * op.n_in
    remainder = [sp.Integer(0)] * op.space.dim
    for (alpha, beta, multi), coeff in op.coefficients.items():
        carried = coeff * ext.jet_symbol(varpi[beta])
        for position, A in enumerate(multi):
            rest = multi[position + 1:]
            remainder[A] = remainder[A] + carried * ext.jet_symbol(omega[alpha], rest)
            carried = -total_derivative(carried, A, ext)
        per_slot[alpha] = per_slot[alpha] + carried

    coefficients: Dict[CoefficientKey, sp.Expr] = {}
    for alpha, expr in enumerate(per_slot):
        expr = canonicalize(expr)
        for sym, coord in jet_coordinates(expr, ext):
            if coord.field in varpi:
                beta = varpi.index(coord.field)
                coefficients[(beta, alpha, coord.multi)] = sp.diff(expr, sym)
    adjoint_op = LinDiffOp(space=op.space, n_in=op.n_out, n_out=op.n_in, coefficients=coefficients)
    form = BilinearBoundaryForm(
        space=ext,
        first=omega,
        second=varpi,
        components=tuple(canonicalize(c) for c in remainder),
    )
    logger.debug(f"adjoint of an order-{op.order} operator has {len(coefficients)} coefficients")
    return AdjointResult(adjoint=adjoint_op, remainder=form)


def adjoint_identity_check(op: LinDiffOp, claimed: Optional[AdjointResult] = None) -> IdentityCheck:
    """𝔇(ω)⌋ϖ − 𝔇*(ϖ)⌋ω − d_h(𝔡) for generic ω, ϖ; passes iff it is 0."""
    result = claimed if claimed is not None else adjoint(op)
    form = result.remainder
    ext = form.space
    omega = ext.field_symbols(form.first)
    varpi = ext.field_symbols(form.second)
    lhs = pairing(apply_op(op, omega, ext), varpi)
    rhs = pairing(apply_op(result.adjoint, varpi, ext), omega)
    residual = canonicalize(lhs - rhs - form.as_density().divergence())
    return IdentityCheck(passed=is_zero(residual), residual=residual)


# ────────────────────────────────────────────────────────────────────────────────
# Divergence form M ω + d_A(R^{AB} d_B ω)
# ────────────────────────────────────────────────────────────────────────────────
class DivergenceForm(BaseModel):
    """
    Square operator written as ℜ(ω)^β = M^{αβ} ω_α + d_A(R^{αβAB} d_B ω_α).
    `second` is keyed by (α, β, A, B) and symmetric in (A, B).
    """

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: JetSpace
    size: int
    zeroth: Dict[Tuple[int, int], SymExpr]
    second: Dict[Tuple[int, int, int, int], SymExpr]

    def quadratic_density(self, omega: Components, space: Optional[JetSpace] = None) -> sp.Expr:
        """M^{αβ} ω_α ω_β − R^{αβAB} d_B ω_α d_A ω_β, the integrand of ∫ℜ(ω)⌋ω up to boundary terms."""
        space = space or self.space
        comps = _components(omega)
        grads = [[total_derivative(c, A, space) for A in range(space.dim)] for c in comps] if self.second else []
        total = sp.Integer(0)
        for (alpha, beta), m in self.zeroth.items():
            total += m * comps[alpha] * comps[beta]
        for (alpha, beta, A, B), r in self.second.items():
            total -= r * grads[alpha][B] * grads[beta][A]
        return canonicalize(total)

    def boundary_flux(self, omega: Components, space: Optional[JetSpace] = None) -> BoundaryDensity:
        """b_A = ω_β R^{αβAB} d_B ω_α, so that ℜ(ω)⌋ω = quadratic_density + d_h(b)."""
        space = space or self.space
        comps = _components(omega)
        out = [sp.Integer(0)] * space.dim
        for (alpha, beta, A, B), r in self.second.items():
            out[A] += comps[beta] * r * total_derivative(comps[alpha], B, space)
        return BoundaryDensity(space=space, components=tuple(canonicalize(c) for c in out))


def divergence_form(op: LinDiffOp) -> Optional[DivergenceForm]:
    """Recognise the M + d_A(R d_B ·) shape; None when the operator has another shape."""
    if not op.is_square or op.order > 2:
        return None
    space = op.space
    zeroth: Dict[Tuple[int, int], sp.Expr] = {}
    second: Dict[Tuple[int, int, int, int], sp.Expr] = {}
    first: Dict[Tuple[int, int, int], sp.Expr] = {}
    for (alpha, beta, multi), coeff in op.coefficients.items():
        if len(multi) == 0:
            zeroth[(alpha, beta)] = coeff
        elif len(multi) == 1:
            first[(alpha, beta, multi[0])] = coeff
        else:
            A, B = multi
            if A == B:
                second[(alpha, beta, A, A)] = coeff
            else:
                second[(alpha, beta, A, B)] = coeff / 2
                second[(alpha, beta, B, A)] = coeff / 2

    pairs = {(a, b) for a, b, _ in first} | {(a, b) for a, b, _, _ in second}
    for alpha, beta in pairs:
        for B in range(space.dim):
            expected = sum(
                (total_derivative(second.get((alpha, beta, A, B), 0), A, space) for A in range(space.dim)),
                sp.Integer(0),
            )
            if not is_zero(first.get((alpha, beta, B), 0) - expected):
                return None
    return DivergenceForm(
        space=space,
        size=op.n_in,
        zeroth=zeroth,
        second={k: canonicalize(v) for k, v in second.items()},
    )
