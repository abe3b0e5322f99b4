# services/discrete_sim.py
"""
1-D discretization with an exact discrete integration by parts (SBP first
derivative), implicit-midpoint time stepping, and the per-step power ledger.

The discrete Hamiltonian is H_d = Σ W 𝓗(X, x, Dx). Its gradient splits as
W e + B b with e = ∂𝓗 − D(∂^X𝓗) and b = ∂^X𝓗, the discrete counterpart of
the domain / boundary split of the variational derivative.
"""
from __future__ import annotations

import logging
import math
from functools import cached_property
from typing import Callable, Dict, List, Literal, Mapping, Optional, Sequence, Tuple

import numpy as np
import sympy as sp
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy import linalg, sparse
from sympy.core.function import AppliedUndef

from schemas.phs import PowerLedgerRow
from services.expr_core import (
    TIME,
    Density,
    JetSpace,
    as_expression,
    jet_coordinates,
    render,
    substitute,
)
from services.phs_model import PHSystem
from services.variational import (
    AdjointResult,
    LinDiffOp,
    adjoint,
    apply_op,
    divergence_form,
    pairing,
    variational_derivative,
)
from utils.config import get_settings
from utils.errors import (
    JetOrderError,
    NewtonConvergenceError,
    NumericalBreakdownError,
    UnsupportedModelError,
)

logger = logging.getLogger(__name__)

InputFunction = Callable[[float], np.ndarray]


# ────────────────────────────────────────────────────────────────────────────────
# Grid and state
# ────────────────────────────────────────────────────────────────────────────────
class Grid1D(BaseModel):
    """Uniform grid on [lower, upper] with diagonal quadrature W and first-derivative stencil D."""

    model_config = ConfigDict(frozen=True)

    n: int = Field(ge=3)
    lower: float = 0.0
    upper: float = 1.0
    closure: Literal["sbp", "second_order"] = "sbp"

    @model_validator(mode="after")
    def _check_interval(self) -> "Grid1D":
        if not self.lower < self.upper:
            raise ValueError(f"empty interval [{self.lower}, {self.upper}]")
        return self

    @classmethod
    def for_system(cls, sys: PHSystem, n: int, closure: str = "sbp") -> "Grid1D":
        if sys.space.dim != 1:
            raise UnsupportedModelError(f"{sys.name} is {sys.space.dim}-dimensional, not numerically supported")
        lo, hi = sys.domain[0]
        return cls(n=n, lower=lo, upper=hi, closure=closure)

    @property
    def h(self) -> float:
        return (self.upper - self.lower) / (self.n - 1)

    @cached_property
    def nodes(self) -> np.ndarray:
        return np.linspace(self.lower, self.upper, self.n)

    @cached_property
    def weights(self) -> np.ndarray:
        w = np.full(self.n, self.h)
        w[0] = w[-1] = self.h / 2
        return w

    @cached_property
    def boundary_signs(self) -> np.ndarray:
        """Diagonal of B: −1 at the first node, +1 at the last."""
        b = np.zeros(self.n)
        b[0], b[-1] = -1.0, 1.0
        return b

    @cached_property
    def D(self) -> sparse.csr_matrix:
        n, h = self.n, self.h
        op = sparse.lil_matrix((n, n))
        for i in range(1, n - 1):
            op[i, i - 1] = -0.5 / h
            op[i, i + 1] = 0.5 / h
        if self.closure == "sbp":
            # rows of P⁻¹Q with P = diag(h/2, h, ..., h/2)
            op[0, 0], op[0, 1] = -1.0 / h, 1.0 / h
            op[n - 1, n - 2], op[n - 1, n - 1] = -1.0 / h, 1.0 / h
        else:
            op[0, 0], op[0, 1], op[0, 2] = -1.5 / h, 2.0 / h, -0.5 / h
            op[n - 1, n - 3], op[n - 1, n - 2], op[n - 1, n - 1] = 0.5 / h, -2.0 / h, 1.5 / h
        return op.tocsr()

    @cached_property
    def D_adjoint(self) -> sparse.csr_matrix:
        """−W⁻¹DᵀW, the negative W-adjoint of D; equals D − W⁻¹B for the SBP closure."""
        W = sparse.diags(self.weights)
        return (-sparse.diags(1.0 / self.weights) @ self.D.T @ W).tocsr()

    def D_power(self, k: int) -> sparse.csr_matrix:
        result = sparse.identity(self.n, format="csr")
        for _ in range(k):
            result = self.D @ result
        return result

    def integrate(self, values: np.ndarray) -> float:
        return float(self.weights @ values)

    def integration_by_parts_defect(self, a: np.ndarray, b: np.ndarray) -> float:
        """⟨a, Db⟩_W + ⟨Da, b⟩_W − (a_N b_N − a_1 b_1); exactly 0 for the SBP closure."""
        a, b = np.asarray(a, float), np.asarray(b, float)
        lhs = self.integrate(a * (self.D @ b)) + self.integrate((self.D @ a) * b)
        return float(lhs - (a[-1] * b[-1] - a[0] * b[0]))


class State(BaseModel):
    """Nodal values per field at time t."""

    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    t: float = 0.0
    values: Dict[str, np.ndarray]

    @model_validator(mode="after")
    def _check_lengths(self) -> "State":
        lengths = {len(v) for v in self.values.values()}
        if len(lengths) > 1:
            raise ValueError(f"nodal vectors of different lengths: {sorted(lengths)}")
        return self

    def vector(self, fields: Sequence[str]) -> np.ndarray:
        return np.concatenate([np.asarray(self.values[f], dtype=float) for f in fields])

    @classmethod
    def from_vector(cls, t: float, fields: Sequence[str], vector: np.ndarray) -> "State":
        parts = np.split(np.asarray(vector, dtype=float), len(fields))
        return cls(t=t, values={f: p.copy() for f, p in zip(fields, parts)})

    @classmethod
    def zeros(cls, fields: Sequence[str], n: int, t: float = 0.0) -> "State":
        return cls(t=t, values={f: np.zeros(n) for f in fields})


class RunResult(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    trajectory: List[State] = Field(default_factory=list)
    ledger: List[PowerLedgerRow] = Field(default_factory=list)


# ────────────────────────────────────────────────────────────────────────────────
# Numeric compilation of symbolic pieces
# ────────────────────────────────────────────────────────────────────────────────
def _require_numeric(sys: PHSystem) -> None:
    if sys.space.dim != 1:
        raise UnsupportedModelError(f"{sys.name} is {sys.space.dim}-dimensional, not numerically supported")
    if sys.space.functions:
        raise UnsupportedModelError(f"{sys.name} uses symbolic functions, not numerically supported")
    missing = [p for p in sys.space.parameters if p not in sys.parameter_values()]
    if missing:
        raise UnsupportedModelError(f"parameters without numeric values: {', '.join(missing)}")


class NodalCompiler:
    """Turns expressions of X, fields, first jets, inputs and t into nodal numpy evaluators."""

    def __init__(self, sys: PHSystem, grid: Grid1D):
        _require_numeric(sys)
        self.sys = sys
        self.grid = grid
        self.space: JetSpace = sys.space
        self.values = sys.parameter_values()
        symbols = [self.space.independent_symbols[0]]
        for field in self.space.jet_fields:
            symbols += [self.space.jet_symbol(field), self.space.jet_symbol(field, (0,))]
        symbols.append(TIME)
        self.symbols = symbols

    def numeric_expression(self, expr) -> sp.Expr:
        return substitute(as_expression(expr), self.values, self.space) if self.values else as_expression(expr)

    def compile(self, expr, what: str) -> Callable:
        expr = self.numeric_expression(expr)
        if expr.atoms(AppliedUndef) or expr.atoms(sp.Derivative):
            raise UnsupportedModelError(f"{what} keeps symbolic parameters: {render(expr)}")
        high = [sym.name for sym, coord in jet_coordinates(expr, self.space) if coord.order > 1]
        if high:
            raise UnsupportedModelError(f"{what} uses jet coordinates above first order: {', '.join(high)}")
        unknown = expr.free_symbols - set(self.symbols)
        if unknown:
            raise UnsupportedModelError(f"{what} has unbound symbols: {', '.join(sorted(s.name for s in unknown))}")
        return sp.lambdify(self.symbols, expr, modules="numpy")

    def arguments(self, x: np.ndarray, u: Optional[np.ndarray], t: float) -> List:
        """x has one row per state field, u one row per input."""
        args: List = [self.grid.nodes]
        D = self.grid.D
        rows = list(x)
        if self.space.inputs:
            rows += list(u if u is not None else np.zeros((len(self.space.inputs), self.grid.n)))
        for row in rows:
            args += [row, D @ row]
        args.append(t)
        return args

    def evaluate(self, fn: Callable, args: Sequence) -> np.ndarray:
        value = np.asarray(fn(*args), dtype=float)
        return np.broadcast_to(value, (self.grid.n,)).copy()


def _state_free(expr, space: JetSpace) -> bool:
    return not any(coord.field in space.fields for _, coord in jet_coordinates(expr, space))


# ────────────────────────────────────────────────────────────────────────────────
# Discrete Hamiltonian
# ────────────────────────────────────────────────────────────────────────────────
class DiscreteHamiltonian:
    """H_d(x) = Σ W 𝓗 with its exact gradient W e + B b."""

    def __init__(self, sys: PHSystem, grid: Grid1D, compiler: Optional[NodalCompiler] = None):
        if sys.hamiltonian.order > 1:
            raise JetOrderError(sys.hamiltonian.order, 1, "discrete Hamiltonian")
        self.sys = sys
        self.grid = grid
        self.compiler = compiler or NodalCompiler(sys, grid)
        space = sys.space
        density = self.compiler.numeric_expression(sys.hamiltonian.integrand)
        self._density = self.compiler.compile(density, "Hamiltonian")

        value_syms = [space.jet_symbol(f) for f in space.fields]
        slope_syms = [space.jet_symbol(f, (0,)) for f in space.fields]
        first_value = [sp.diff(density, s) for s in value_syms]
        first_slope = [sp.diff(density, s) for s in slope_syms]
        self._dvalue = [self.compiler.compile(e, "∂𝓗") for e in first_value]
        self._dslope = [self.compiler.compile(e, "∂^X𝓗") for e in first_slope]

        second = {}
        for a in range(len(space.fields)):
            for b in range(len(space.fields)):
                second[(a, b)] = (
                    sp.diff(first_value[a], value_syms[b]),
                    sp.diff(first_value[a], slope_syms[b]),
                    sp.diff(first_slope[a], value_syms[b]),
                    sp.diff(first_slope[a], slope_syms[b]),
                )
        self.quadratic = all(_state_free(e, space) for quad in second.values() for e in quad)
        self.time_free = TIME not in density.free_symbols
        self._second = {k: tuple(self.compiler.compile(e, "second derivative of 𝓗") for e in quad)
                        for k, quad in second.items()}

    @property
    def n_fields(self) -> int:
        return len(self.sys.fields)

    def as_matrix(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return x.reshape(self.n_fields, self.grid.n)

    def density(self, x, t: float = 0.0) -> np.ndarray:
        return self.compiler.evaluate(self._density, self.compiler.arguments(self.as_matrix(x), None, t))

    def value(self, x, t: float = 0.0) -> float:
        return self.grid.integrate(self.density(x, t))

    def efforts(self, x, t: float = 0.0) -> Tuple[np.ndarray, np.ndarray]:
        """(e, b), one row per field: e = ∂𝓗 − D b, b = ∂^X𝓗."""
        args = self.compiler.arguments(self.as_matrix(x), None, t)
        b = np.array([self.compiler.evaluate(fn, args) for fn in self._dslope])
        e = np.array([self.compiler.evaluate(fn, args) for fn in self._dvalue]) - (self.grid.D @ b.T).T
        return e, b

    def gradient(self, x, t: float = 0.0) -> np.ndarray:
        e, b = self.efforts(x, t)
        return (e * self.grid.weights + b * self.grid.boundary_signs).ravel()

    def effort_jacobian(self, x, t: float = 0.0) -> sparse.csr_matrix:
        """∂e/∂x as an (nN × nN) sparse matrix."""
        args = self.compiler.arguments(self.as_matrix(x), None, t)
        D = self.grid.D
        def diag(fn):
            return sparse.diags(self.compiler.evaluate(fn, args))

        blocks = [[None] * self.n_fields for _ in range(self.n_fields)]
        for (a, b), (vv, vs, sv, ss) in self._second.items():
            blocks[a][b] = diag(vv) + diag(vs) @ D - D @ diag(sv) - D @ diag(ss) @ D
        return sparse.bmat(blocks, format="csr")


def discretize_hamiltonian(sys: PHSystem, grid: Grid1D) -> DiscreteHamiltonian:
    return DiscreteHamiltonian(sys, grid)


def functional(sys: PHSystem, grid: Grid1D, density: Density, state: State) -> float:
    """Σ W 𝒞(x, Dx) for a first-order density such as a Casimir candidate."""
    compiler = NodalCompiler(sys, grid)
    fn = compiler.compile(density.integrand, "functional")
    x = np.array([state.values[f] for f in sys.fields])
    return grid.integrate(compiler.evaluate(fn, compiler.arguments(x, None, state.t)))


# ────────────────────────────────────────────────────────────────────────────────
# Discrete operators
# ────────────────────────────────────────────────────────────────────────────────
class DiscreteOperator:
    """
    Nodal form of a LinDiffOp acting on effort (or input) rows.

    In divergence form the second-order part d_X(c d_X ·) becomes
    (−W⁻¹DᵀW) diag(c) D, which is W-self-adjoint and carries no end flux.
    """

    def __init__(self, op: LinDiffOp, compiler: NodalCompiler, use_divergence_form: bool = False):
        self.op = op
        self.compiler = compiler
        self.grid = compiler.grid
        self.form = divergence_form(op) if use_divergence_form else None
        if self.form is not None:
            self.zeroth = [(a, b, compiler.compile(c, "operator coefficient")) for (a, b), c in self.form.zeroth.items()]
            self.second = [(a, b, compiler.compile(c, "operator coefficient"))
                           for (a, b, _, _), c in self.form.second.items()]
            self.entries = []
        else:
            self.zeroth, self.second = [], []
            self.entries = [(a, b, len(m), compiler.compile(c, "operator coefficient"))
                            for (a, b, m), c in op.coefficients.items()]
        space = compiler.space
        self.state_free = all(_state_free(c, space) for c in op.coefficients.values())
        self.time_free = all(TIME not in compiler.numeric_expression(c).free_symbols for c in op.coefficients.values())

    def matrix(self, args: Sequence) -> sparse.csr_matrix:
        n = self.grid.n
        D = self.grid.D
        blocks = [[sparse.csr_matrix((n, n)) for _ in range(self.op.n_in)] for _ in range(self.op.n_out)]
        for a, b, k, fn in self.entries:
            blocks[b][a] = blocks[b][a] + sparse.diags(self.compiler.evaluate(fn, args)) @ self.grid.D_power(k)
        for a, b, fn in self.zeroth:
            blocks[b][a] = blocks[b][a] + sparse.diags(self.compiler.evaluate(fn, args))
        for a, b, fn in self.second:
            blocks[b][a] = blocks[b][a] + self.grid.D_adjoint @ sparse.diags(self.compiler.evaluate(fn, args)) @ D
        if self.op.n_in == 0 or self.op.n_out == 0:
            return sparse.csr_matrix((self.op.n_out * n, self.op.n_in * n))
        return sparse.bmat(blocks, format="csr")

    def dissipation(self, e: np.ndarray, args: Sequence) -> float:
        """Σ W Q, equal to ⟨e, R_d e⟩_W."""
        W = self.grid.weights
        if self.form is None:
            rate = (self.matrix(args) @ e.ravel()).reshape(e.shape)
            return float(np.sum(W * e * rate))
        De = (self.grid.D @ e.T).T
        q = np.zeros(self.grid.n)
        for a, b, fn in self.zeroth:
            q += self.compiler.evaluate(fn, args) * e[a] * e[b]
        for a, b, fn in self.second:
            q -= self.compiler.evaluate(fn, args) * De[a] * De[b]
        return float(W @ q)


# ────────────────────────────────────────────────────────────────────────────────
# Time stepping
# ────────────────────────────────────────────────────────────────────────────────
class _RateConstraint(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    source: int
    target: int
    direct: bool
    rate: Callable


class DiscreteSystem:
    """Semi-discrete port-Hamiltonian system ẋ = (J_d − R_d) e + G_d u with rate constraints."""

    def __init__(self, sys: PHSystem, grid: Grid1D, u: Optional[InputFunction] = None):
        self.sys = sys
        self.grid = grid
        self.settings = get_settings()
        self.compiler = NodalCompiler(sys, grid)
        self.hamiltonian = DiscreteHamiltonian(sys, grid, self.compiler)
        self.J = DiscreteOperator(sys.J_op, self.compiler)
        self.R = DiscreteOperator(sys.R_op, self.compiler, use_divergence_form=True)
        self.G = DiscreteOperator(sys.G_op, self.compiler)
        # y_d = G*_d e; its pairing with u is the domain port
        self.G_star = DiscreteOperator(adjoint(sys.G_op).adjoint, self.compiler) if sys.inputs else None
        self.u = u
        self.n_fields = len(sys.fields)
        self.analytic = self.J.state_free and self.R.state_free and self.G.state_free
        self.time_free = self.J.time_free and self.R.time_free and self.hamiltonian.time_free
        # the Newton matrix is then the same for every step of a given dt
        self.linear = self.analytic and self.hamiltonian.quadratic and self.time_free
        self._constraints: Optional[List[_RateConstraint]] = None
        self._lu: Dict[float, Tuple] = {}

    # -- pieces of the right-hand side
    def inputs(self, t: float) -> Optional[np.ndarray]:
        m = len(self.sys.inputs)
        if m == 0:
            return None
        if self.u is None:
            return np.zeros((m, self.grid.n))
        return np.broadcast_to(np.asarray(self.u(t), dtype=float).reshape(m, -1), (m, self.grid.n)).copy()

    def _args(self, x: np.ndarray, t: float) -> List:
        return self.compiler.arguments(x.reshape(self.n_fields, self.grid.n), self.inputs(t), t)

    def structure(self, x: np.ndarray, t: float) -> sparse.csr_matrix:
        args = self._args(x, t)
        return self.J.matrix(args) - self.R.matrix(args)

    def forcing(self, x: np.ndarray, t: float) -> np.ndarray:
        u = self.inputs(t)
        if u is None:
            return np.zeros(self.n_fields * self.grid.n)
        return self.G.matrix(self._args(x, t)) @ u.ravel()

    def outputs(self, e: np.ndarray, args: Sequence) -> Optional[np.ndarray]:
        """y_d = G*_d e, one row per input."""
        if self.G_star is None:
            return None
        return (self.G_star.matrix(args) @ e.ravel()).reshape(len(self.sys.inputs), self.grid.n)

    def rhs(self, x: np.ndarray, t: float) -> np.ndarray:
        e, _ = self.hamiltonian.efforts(x, t)
        return self.structure(x, t) @ e.ravel() + self.forcing(x, t)

    def rhs_jacobian(self, x: np.ndarray, t: float) -> np.ndarray:
        if self.analytic:
            jac = self.structure(x, t) @ self.hamiltonian.effort_jacobian(x, t)
            return jac.toarray()
        f0 = self.rhs(x, t)
        jac = np.empty((f0.size, x.size))
        for j in range(x.size):
            eps = 1e-7 * max(1.0, abs(x[j]))
            bumped = x.copy()
            bumped[j] += eps
            lowered = x.copy()
            lowered[j] -= eps
            jac[:, j] = (self.rhs(bumped, t) - self.rhs(lowered, t)) / (2 * eps)
        return jac

    # -- boundary conditions
    def constraints(self, x: np.ndarray, t: float) -> List[_RateConstraint]:
        """Rate conditions as row replacements, fixed on first use."""
        if self._constraints is not None:
            return self._constraints
        n = self.grid.n
        jac = self.rhs_jacobian(x, t)
        constraints: List[_RateConstraint] = []
        taken = set()
        for bc in self.sys.boundary:
            if bc.kind != "rate":
                continue
            node = 0 if self.sys.side_of(bc) == "lower" else n - 1
            alpha = self.sys.fields.index(bc.field)
            source = alpha * n + node
            coupling = [(abs(jac[source, beta * n + node]), beta) for beta in range(self.n_fields) if beta != alpha]
            best = max(coupling, default=(0.0, alpha))
            direct = best[0] == 0.0
            target = source if direct else best[1] * n + node
            if target in taken:
                raise UnsupportedModelError(f"conflicting boundary conditions at {bc.coordinate}={bc.position}")
            taken.add(target)
            rate_expr = self.compiler.numeric_expression(bc.rate).xreplace(
                {self.sys.space.independent_symbols[0]: sp.Float(bc.position)}
            )
            if rate_expr.free_symbols - {TIME}:
                raise UnsupportedModelError(f"boundary rate for '{bc.field}' depends on more than t")
            constraints.append(_RateConstraint(
                source=source, target=target, direct=direct,
                rate=sp.lambdify([TIME], rate_expr, modules="numpy"),
            ))
            logger.debug(f"rate condition on '{bc.field}' at {bc.coordinate}={bc.position} replaces row {target}")
        self._constraints = constraints
        return constraints

    def _residual(self, x_new: np.ndarray, x: np.ndarray, t_mid: float, dt: float,
                  constraints: Sequence[_RateConstraint]) -> np.ndarray:
        mid = 0.5 * (x + x_new)
        f = self.rhs(mid, t_mid)
        res = x_new - x - dt * f
        for c in constraints:
            g = float(c.rate(t_mid))
            if c.direct:
                res[c.target] = x_new[c.source] - x[c.source] - dt * g
            else:
                res[c.target] = dt * (f[c.source] - g)
        return res

    def _newton_matrix(self, mid: np.ndarray, t_mid: float, dt: float,
                       constraints: Sequence[_RateConstraint]) -> np.ndarray:
        jac = self.rhs_jacobian(mid, t_mid)
        matrix = np.eye(jac.shape[0]) - 0.5 * dt * jac
        for c in constraints:
            if c.direct:
                matrix[c.target, :] = 0.0
                matrix[c.target, c.source] = 1.0
            else:
                matrix[c.target, :] = 0.5 * dt * jac[c.source, :]
        return matrix

    def step(self, state: State, dt: float) -> Tuple[State, PowerLedgerRow]:
        if dt <= 0:
            raise ValueError("dt must be positive")
        fields = self.sys.fields
        x = state.vector(fields)
        t_mid = state.t + 0.5 * dt
        constraints = self.constraints(x, state.t)
        tol, max_iter = self.settings.newton_tol, self.settings.newton_max_iter

        x_new = x.copy()
        update_norm = math.inf
        for iteration in range(1, max_iter + 1):
            res = self._residual(x_new, x, t_mid, dt, constraints)
            if self.linear:
                if dt not in self._lu:
                    self._lu[dt] = linalg.lu_factor(self._newton_matrix(x, t_mid, dt, constraints))
                delta = linalg.lu_solve(self._lu[dt], -res)
            else:
                delta = np.linalg.solve(self._newton_matrix(0.5 * (x + x_new), t_mid, dt, constraints), -res)
            x_new = x_new + delta
            if not np.all(np.isfinite(x_new)):
                error_msg = f"{self.sys.name}: non-finite state at t={state.t + dt:.6g}"
                logger.error(error_msg)
                raise NumericalBreakdownError(error_msg)
            update_norm = float(np.max(np.abs(delta))) if delta.size else 0.0
            if update_norm <= tol * max(1.0, float(np.max(np.abs(x_new))) if x_new.size else 1.0):
                break
        else:
            logger.error(f"{self.sys.name}: Newton stalled at t={state.t:.6g}, update norm {update_norm:.3e}")
            raise NewtonConvergenceError(update_norm, max_iter, state.t)
        logger.debug(f"Newton converged in {iteration} iterations")

        new_state = State.from_vector(state.t + dt, fields, x_new)
        return new_state, self.ledger_row(x, x_new, state.t, dt)

    # -- ledger
    def ledger_row(self, x: np.ndarray, x_new: np.ndarray, t: float, dt: float) -> PowerLedgerRow:
        grid, W = self.grid, self.grid.weights
        t_mid = t + 0.5 * dt
        mid = 0.5 * (x + x_new)
        h0 = self.hamiltonian.value(x, t)
        h1 = self.hamiltonian.value(x_new, t + dt)
        dHdt = (h1 - h0) / dt

        e, b = self.hamiltonian.efforts(mid, t_mid)
        args = self._args(mid, t_mid)
        rate = ((x_new - x) / dt).reshape(self.n_fields, grid.n)

        dissipation = self.R.dissipation(e, args)
        e_flat = e.ravel()
        weights = np.tile(W, self.n_fields)
        forcing_power = float(np.sum(weights * e_flat * self.forcing(mid, t_mid)))
        y = self.outputs(e, args)
        domain_port = 0.0 if y is None else float(np.sum(W * self.inputs(t_mid) * y))
        skew_power = float(np.sum(weights * e_flat * (self.J.matrix(args) @ e_flat)))
        ends = float(np.sum(rate[:, -1] * b[:, -1]) - np.sum(rate[:, 0] * b[:, 0]))

        # rows replaced by rate conditions do not follow ẋ = f; their power enters through the boundary
        f = self.rhs(mid, t_mid)
        rate_flat = rate.ravel()
        constraint_power = float(sum(
            weights[c.target] * e_flat[c.target] * (rate_flat[c.target] - f[c.target])
            for c in self.constraints(x, t)
        ))
        boundary_port = ends + skew_power + (forcing_power - domain_port) + constraint_power

        residual = dHdt - (-dissipation + domain_port + boundary_port)
        row = PowerLedgerRow(
            t=t + dt, H=h1, dHdt=dHdt, dissipation=dissipation,
            domain_port=domain_port, boundary_port=boundary_port, residual=residual,
        )
        if not all(math.isfinite(v) for v in row.values()):
            error_msg = f"{self.sys.name}: non-finite ledger entry at t={t + dt:.6g}"
            logger.error(error_msg)
            raise NumericalBreakdownError(error_msg, last_row=row)
        return row


def initial_state(sys: PHSystem, grid: Grid1D, overrides: Optional[Mapping[str, object]] = None) -> State:
    """Nodal initial data from the model's `initial` lines, overridden per field; missing fields are 0."""
    compiler = NodalCompiler(sys, grid)
    profiles = dict(sys.initial)
    profiles.update(overrides or {})
    values = {}
    X = sys.space.independent_symbols[0]
    for field in sys.fields:
        expr = compiler.numeric_expression(profiles.get(field, 0))
        if expr.free_symbols - {X}:
            raise UnsupportedModelError(f"initial profile of '{field}' may only depend on {X}")
        fn = sp.lambdify([X], expr, modules="numpy")
        values[field] = np.broadcast_to(np.asarray(fn(grid.nodes), dtype=float), (grid.n,)).copy()
    return State(t=0.0, values=values)


def step_midpoint(sys: PHSystem, grid: Grid1D, state: State, u: Optional[InputFunction], dt: float) -> State:
    new_state, _ = DiscreteSystem(sys, grid, u).step(state, dt)
    return new_state


def run(
    sys: PHSystem,
    grid: Grid1D,
    initial: State,
    u: Optional[InputFunction],
    dt: float,
    t_end: float,
    stride: int = 1,
) -> RunResult:
    if stride < 1:
        raise ValueError("stride must be at least 1")
    steps = int(round((t_end - initial.t) / dt))
    discrete = DiscreteSystem(sys, grid, u)
    result = RunResult(trajectory=[initial])
    logger.info(f"Simulating {sys.name}: {steps} steps, N={grid.n}, dt={dt:g}")

    state = initial
    for k in range(1, steps + 1):
        try:
            state, row = discrete.step(state, dt)
        except NumericalBreakdownError as exc:
            if exc.last_row is None and result.ledger:
                exc.last_row = result.ledger[-1]
            raise
        result.ledger.append(row)
        if k % stride == 0 or k == steps:
            result.trajectory.append(state)

    final_h = result.ledger[-1].H if result.ledger else discrete.hamiltonian.value(initial.vector(sys.fields))
    logger.info(f"Finished {sys.name}: t={state.t:.6g}, H={final_h:.12g}")
    return result


# ────────────────────────────────────────────────────────────────────────────────
# Consistency checks
# ────────────────────────────────────────────────────────────────────────────────
def discrete_stokes_check(grid: Grid1D, omega) -> float:
    """Σ W (Dω) − (ω_N − ω_1)."""
    omega = np.asarray(omega, dtype=float)
    return float(grid.integrate(grid.D @ omega) - (omega[-1] - omega[0]))


def cross_validate_vardiff(sys: PHSystem, grid: Grid1D, section: Mapping[str, object]) -> float:
    """
    Max deviation between δ_α𝓗 evaluated on the section `field -> expression of X`
    and the discrete effort e_α from its nodal values, over nodes 2..N−3.
    """
    compiler = NodalCompiler(sys, grid)
    X = sys.space.independent_symbols[0]
    bindings = {f: as_expression(section.get(f, 0)) for f in sys.fields}
    exact_exprs = [
        compiler.numeric_expression(substitute(c, bindings, sys.space.with_order(sys.space.max_order + 2)))
        for c in variational_derivative(sys.hamiltonian).components
    ]
    profiles = [compiler.numeric_expression(bindings[f]) for f in sys.fields]

    def nodal(expr) -> np.ndarray:
        values = sp.lambdify([X], expr, modules="numpy")(grid.nodes)
        return np.broadcast_to(np.asarray(values, dtype=float), (grid.n,))

    x = np.array([nodal(p) for p in profiles])
    e, _ = DiscreteHamiltonian(sys, grid, compiler).efforts(x)
    exact = np.array([nodal(c) for c in exact_exprs])
    interior = slice(2, grid.n - 2)
    return float(np.max(np.abs(e[:, interior] - exact[:, interior])))


def quadrature_adjoint_check(
    op: LinDiffOp,
    result: AdjointResult,
    omega: Sequence,
    varpi: Sequence,
    interval: Tuple[float, float] = (0.0, 1.0),
    nodes: int = 128,
    parameters: Optional[Mapping[str, float]] = None,
) -> float:
    """
    |∫ 𝔇(ω)⌋ϖ − 𝔇*(ϖ)⌋ω dX − [𝔡(ω, ϖ)]_a^b| by Gauss-Legendre quadrature,
    for sections ω, ϖ given as expressions of X on a 1-D operator.
    """
    space = op.space
    if space.dim != 1:
        raise UnsupportedModelError("quadrature check needs a 1-D operator")
    X = space.independent_symbols[0]
    values = dict(parameters or {})

    def numeric(expr) -> sp.Expr:
        expr = substitute(expr, values, space) if values else as_expression(expr)
        if expr.free_symbols - {X} or expr.atoms(AppliedUndef):
            raise UnsupportedModelError(f"cannot evaluate {render(expr)} on sections of X alone")
        return expr

    omega = [as_expression(v) for v in omega]
    varpi = [as_expression(v) for v in varpi]
    integrand = numeric(
        pairing(apply_op(op, omega), varpi) - pairing(apply_op(result.adjoint, varpi), omega)
    )
    remainder = numeric(result.remainder.evaluate(omega, varpi, space).components[0])

    a, b = interval
    points, weights = np.polynomial.legendre.leggauss(nodes)
    mapped = 0.5 * (b - a) * points + 0.5 * (a + b)
    f = np.broadcast_to(np.asarray(sp.lambdify([X], integrand, modules="numpy")(mapped), dtype=float), mapped.shape)
    integral = 0.5 * (b - a) * float(weights @ f)
    g = sp.lambdify([X], remainder, modules="numpy")
    return abs(integral - (float(g(b)) - float(g(a))))
