# services/expr_core.py
"""
Symbolic expressions over jet coordinates.

Expressions are plain sympy expressions. A `JetSpace` is the symbol table a
model works in: independent coordinates (single letters), state and input
fields with their derivative coordinates (`w`, `w_X`, `w_XX`), parameters as
undefined functions of the independent coordinates (`P(X)`), and symbolic
functions of fields or jet coordinates (`A1(q1, q2, q3)`).
"""
from __future__ import annotations

import itertools
import logging
import re
from functools import cached_property
from typing import Annotated, Dict, Iterable, List, Literal, Mapping, Optional, Sequence, Tuple, Union

import sympy as sp
from pydantic import BaseModel, BeforeValidator, ConfigDict, Field, field_validator, model_validator
from sympy.core.function import AppliedUndef
from sympy.printing.precedence import PRECEDENCE
from sympy.printing.str import StrPrinter

from utils.config import get_settings
from utils.errors import (
    DimensionMismatchError,
    DomainEvalError,
    ExpressionSyntaxError,
    JetOrderError,
    MissingBindingError,
    SubstitutionError,
    UnknownSymbolError,
)

logger = logging.getLogger(__name__)

Expression = sp.Expr

# ====== grammar ======
FUNCTIONS = {"sin": sp.sin, "cos": sp.cos, "exp": sp.exp, "sqrt": sp.sqrt}
RESERVED = set(FUNCTIONS) | {"pi", "t", "D", "of", "inf"}
TIME = sp.Symbol("t")
SLOT_FIELD = "_slot"

_NAME_RE = re.compile(r"^[A-Za-z][A-Za-z0-9]*$")
_INTERNAL_NAME_RE = re.compile(r"^_?[A-Za-z][A-Za-z0-9]*$")
_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
   |(?P<number>\d+(?:\.\d*)?(?:[eE][+-]?\d+)?)
   |(?P<name>[A-Za-z][A-Za-z0-9]*(?:_[A-Za-z]+)?)
   |(?P<op>[-+*/^(),\[\].])
    """,
    re.VERBOSE,
)


def as_expression(value) -> sp.Expr:
    """Exact sympy form of ints, decimal floats and sympy objects."""
    if isinstance(value, sp.Basic):
        return value
    if isinstance(value, bool):
        raise TypeError("booleans are not expressions")
    if isinstance(value, int):
        return sp.Integer(value)
    if isinstance(value, float):
        return sp.Rational(repr(value))
    raise TypeError(f"cannot use {type(value).__name__} as an expression")


SymExpr = Annotated[sp.Expr, BeforeValidator(as_expression)]


def is_identifier(name: str) -> bool:
    return bool(_NAME_RE.match(name)) and name not in RESERVED


# ────────────────────────────────────────────────────────────────────────────────
# Coordinates and the jet space
# ────────────────────────────────────────────────────────────────────────────────
class Coordinate(BaseModel):
    model_config = ConfigDict(frozen=True)

    kind: Literal["independent", "dependent", "derivative"]
    field: Optional[str] = None
    alpha: Optional[int] = None
    multi: Tuple[int, ...] = ()
    base: Optional[int] = None

    @field_validator("multi")
    @classmethod
    def _sorted_multi(cls, value: Tuple[int, ...]) -> Tuple[int, ...]:
        return tuple(sorted(value))

    @model_validator(mode="after")
    def _check_kind(self) -> "Coordinate":
        if self.kind == "independent":
            if self.base is None or self.multi:
                raise ValueError("independent coordinate needs a base index and no multi-index")
        elif self.kind == "dependent":
            if self.field is None or self.multi:
                raise ValueError("dependent coordinate needs a field and an empty multi-index")
        elif self.field is None or not self.multi:
            raise ValueError("derivative coordinate needs a field and a non-empty multi-index")
        return self

    @property
    def order(self) -> int:
        return len(self.multi)


class JetSpace(BaseModel):
    """Symbol table of a model. Build new spaces with `replace`, not `model_copy`."""

    model_config = ConfigDict(frozen=True)

    independent: Tuple[str, ...] = ("X",)
    fields: Tuple[str, ...]
    inputs: Tuple[str, ...] = ()
    parameters: Tuple[str, ...] = ()
    functions: Tuple[Tuple[str, Tuple[str, ...]], ...] = ()
    max_order: int = Field(default_factory=lambda: get_settings().max_jet_order, ge=1)

    @model_validator(mode="after")
    def _check_names(self) -> "JetSpace":
        for name in self.independent:
            if len(name) != 1 or not name.isalpha():
                raise ValueError(f"independent coordinate '{name}' must be a single letter")
        names = list(self.independent) + list(self.fields) + list(self.inputs)
        names += list(self.parameters) + [fn for fn, _ in self.functions]
        for name in names[len(self.independent):]:
            if not _INTERNAL_NAME_RE.match(name):
                raise ValueError(f"invalid name '{name}'")
            if name in RESERVED:
                raise ValueError(f"'{name}' is reserved")
        duplicates = sorted({n for n in names if names.count(n) > 1})
        if duplicates:
            raise ValueError(f"duplicate names: {', '.join(duplicates)}")
        return self

    # -- construction helpers
    def replace(self, **changes) -> "JetSpace":
        values = {name: getattr(self, name) for name in type(self).model_fields}
        values.update(changes)
        return JetSpace(**values)

    def with_fields(self, extra: Sequence[str]) -> "JetSpace":
        return self.replace(fields=tuple(self.fields) + tuple(extra))

    def with_order(self, order: int) -> "JetSpace":
        return self.replace(max_order=order)

    # -- basic views
    @property
    def dim(self) -> int:
        return len(self.independent)

    @property
    def jet_fields(self) -> Tuple[str, ...]:
        return tuple(self.fields) + tuple(self.inputs)

    @cached_property
    def independent_symbols(self) -> Tuple[sp.Symbol, ...]:
        return tuple(sp.Symbol(name) for name in self.independent)

    @cached_property
    def function_args(self) -> Dict[str, Tuple[str, ...]]:
        return {name: tuple(args) for name, args in self.functions}

    def base_index(self, base: Union[int, str]) -> int:
        if isinstance(base, str):
            if base not in self.independent:
                raise UnknownSymbolError(base, reason="unknown base index")
            return self.independent.index(base)
        if not 0 <= base < self.dim:
            raise DimensionMismatchError(f"base index {base} outside dimension {self.dim}")
        return base

    def multi_indices(self, order: int) -> List[Tuple[int, ...]]:
        return list(itertools.combinations_with_replacement(range(self.dim), order))

    def all_multi_indices(self, max_order: Optional[int] = None) -> List[Tuple[int, ...]]:
        top = self.max_order if max_order is None else max_order
        return [m for k in range(top + 1) for m in self.multi_indices(k)]

    # -- symbols
    def symbol_name(self, field: str, multi: Sequence[int] = ()) -> str:
        multi = tuple(sorted(multi))
        if not multi:
            return field
        return field + "_" + "".join(self.independent[a] for a in multi)

    def jet_symbol(self, field: str, multi: Sequence[int] = ()) -> sp.Symbol:
        if field not in self.jet_fields:
            raise UnknownSymbolError(field)
        if len(multi) > self.max_order:
            raise JetOrderError(len(multi), self.max_order, self.symbol_name(field, multi))
        return sp.Symbol(self.symbol_name(field, multi))

    def field_symbols(self, names: Optional[Sequence[str]] = None) -> Tuple[sp.Symbol, ...]:
        return tuple(sp.Symbol(n) for n in (self.fields if names is None else names))

    @cached_property
    def coordinate_table(self) -> Dict[sp.Symbol, Coordinate]:
        table: Dict[sp.Symbol, Coordinate] = {}
        for A, sym in enumerate(self.independent_symbols):
            table[sym] = Coordinate(kind="independent", base=A)
        for alpha, field in enumerate(self.jet_fields):
            for multi in self.all_multi_indices():
                kind = "derivative" if multi else "dependent"
                table[sp.Symbol(self.symbol_name(field, multi))] = Coordinate(
                    kind=kind, field=field, alpha=alpha, multi=multi
                )
        return table

    def coordinate_of(self, symbol: sp.Symbol) -> Optional[Coordinate]:
        coord = self.coordinate_table.get(symbol)
        if coord is None or coord.kind == "independent":
            return None
        return coord

    def symbol_of(self, coord: Coordinate) -> sp.Symbol:
        if coord.kind == "independent":
            return self.independent_symbols[coord.base]
        return self.jet_symbol(coord.field, coord.multi)

    def promote(self, coord: Coordinate, base: int) -> sp.Symbol:
        return self.jet_symbol(coord.field, coord.multi + (base,))

    def parameter(self, name: str) -> sp.Expr:
        if name not in self.parameters:
            raise UnknownSymbolError(name)
        return sp.Function(name)(*self.independent_symbols)

    def function(self, name: str) -> sp.Expr:
        args = self.function_args.get(name)
        if args is None:
            raise UnknownSymbolError(name)
        return sp.Function(name)(*[sp.Symbol(a) for a in args])

    def resolve(self, name: str, position: int = 0, allow_time: bool = False) -> sp.Expr:
        """Map a grammar identifier to its expression."""
        if name in self.independent:
            return self.independent_symbols[self.independent.index(name)]
        if name == "pi":
            return sp.pi
        if name == "t":
            if not allow_time:
                raise UnknownSymbolError(name, position, reason="time symbol not allowed here")
            return TIME
        if name in self.parameters:
            return self.parameter(name)
        if name in self.function_args:
            return self.function(name)
        if name in self.jet_fields:
            return sp.Symbol(name)
        if "_" in name:
            field, suffix = name.split("_", 1)
            if field in self.jet_fields:
                multi = []
                for letter in suffix:
                    if letter not in self.independent:
                        raise UnknownSymbolError(
                            f"{letter}' in '{name}", position, reason="unknown base index"
                        )
                    multi.append(self.independent.index(letter))
                return self.jet_symbol(field, multi)
        raise UnknownSymbolError(name, position)


# ────────────────────────────────────────────────────────────────────────────────
# Value types
# ────────────────────────────────────────────────────────────────────────────────
class _SymbolicValue(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    space: JetSpace


class Density(_SymbolicValue):
    """ℱ dX for an integrand ℱ on the jet space."""

    integrand: SymExpr

    @property
    def dim(self) -> int:
        return self.space.dim

    @property
    def order(self) -> int:
        return jet_order(self.integrand, self.space)


class CovectorDensity(_SymbolicValue):
    components: Tuple[SymExpr, ...]

    @model_validator(mode="after")
    def _check_count(self) -> "CovectorDensity":
        if len(self.components) != len(self.space.fields):
            raise DimensionMismatchError(
                f"covector has {len(self.components)} components for {len(self.space.fields)} fields"
            )
        return self


class VerticalField(_SymbolicValue):
    """v^α ∂/∂x^α, one component per state field."""

    components: Tuple[SymExpr, ...]

    @model_validator(mode="after")
    def _check_count(self) -> "VerticalField":
        if len(self.components) != len(self.space.fields):
            raise DimensionMismatchError(
                f"vertical field has {len(self.components)} components for {len(self.space.fields)} fields"
            )
        return self


class BoundaryDensity(_SymbolicValue):
    """Coefficients of dX_A, one per base direction."""

    components: Tuple[SymExpr, ...]

    @model_validator(mode="after")
    def _check_count(self) -> "BoundaryDensity":
        if len(self.components) != self.space.dim:
            raise DimensionMismatchError(
                f"boundary density needs {self.space.dim} components, got {len(self.components)}"
            )
        return self

    @classmethod
    def zero(cls, space: JetSpace) -> "BoundaryDensity":
        return cls(space=space, components=(sp.Integer(0),) * space.dim)

    def __add__(self, other: "BoundaryDensity") -> "BoundaryDensity":
        return BoundaryDensity(
            space=self.space,
            components=tuple(canonicalize(a + b) for a, b in zip(self.components, other.components)),
        )

    def scaled(self, factor) -> "BoundaryDensity":
        return BoundaryDensity(
            space=self.space,
            components=tuple(canonicalize(factor * c) for c in self.components),
        )

    def divergence(self) -> sp.Expr:
        """Integrand of d_h of this boundary density."""
        return canonicalize(
            sum((total_derivative(c, A, self.space) for A, c in enumerate(self.components)), sp.Integer(0))
        )

    def is_zero(self) -> bool:
        return all(is_zero(c) for c in self.components)


# ────────────────────────────────────────────────────────────────────────────────
# Canonical form, printing
# ────────────────────────────────────────────────────────────────────────────────
def canonicalize(e) -> sp.Expr:
    return sp.expand(as_expression(e))


def is_zero(e) -> bool:
    c = canonicalize(e)
    if c == 0:
        return True
    if any(p.exp.is_negative for p in c.atoms(sp.Pow)):
        return sp.cancel(sp.together(c)) == 0
    return False


def equal(a, b) -> bool:
    return is_zero(as_expression(a) - as_expression(b))


def _factor_rank(factor: sp.Expr) -> int:
    base = factor.base if factor.is_Pow else factor
    if base.is_number:
        return 0
    if isinstance(base, (AppliedUndef, sp.Derivative)):
        return 1
    if isinstance(base, sp.Function):
        return 2
    if base.is_Symbol:
        return 3
    return 4


class ExpressionPrinter(StrPrinter):
    """
    Prints in the model grammar: bare parameter names, D[f,x] for formal partials.

    Products list numbers, then parameters, then functions, then jet
    coordinates; sums are ordered by the text of their terms. The output does
    not depend on sympy's internal argument order.
    """

    def _sorted(self, items: Iterable[sp.Expr]) -> List[str]:
        keyed = [(_factor_rank(f), self.parenthesize(f, PRECEDENCE["Mul"])) for f in items]
        return [text for _, text in sorted(keyed)]

    def _print_Mul(self, expr):
        coeff, rest = expr.as_coeff_Mul()
        sign = "-" if coeff.is_negative else ""
        coeff = -coeff if coeff.is_negative else coeff
        numerator: List[str] = []
        denominator: List[str] = []
        if coeff.is_Rational:
            if coeff.p != 1:
                numerator.append(str(coeff.p))
            if coeff.q != 1:
                denominator.append(str(coeff.q))
        elif coeff != 1:
            numerator.append(self._print(coeff))

        upper, lower = [], []
        for factor in sp.Mul.make_args(rest):
            if factor == 1:
                continue
            if factor.is_Pow and factor.exp.is_Rational and factor.exp.is_negative:
                lower.append(sp.Pow(factor.base, -factor.exp))
            else:
                upper.append(factor)
        numerator += self._sorted(upper)
        denominator += self._sorted(lower)

        text = sign + ("*".join(numerator) or "1")
        if len(denominator) == 1:
            text += "/" + denominator[0]
        elif denominator:
            text += "/(" + "*".join(denominator) + ")"
        return text

    def _print_Add(self, expr, order=None):
        terms = [(t.is_number, self._print(t)) for t in sp.Add.make_args(expr)]
        terms.sort(key=lambda item: (item[0], item[1].lstrip("-")))
        text = terms[0][1]
        for _, term in terms[1:]:
            text += f" - {term[1:]}" if term.startswith("-") else f" + {term}"
        return text

    def _print_AppliedUndef(self, expr):
        return expr.func.__name__

    def _print_Derivative(self, expr):
        text = self._print(expr.expr)
        for var, count in expr.variable_count:
            for _ in range(int(count)):
                text = f"D[{text},{self._print(var)}]"
        return text


def render(e) -> str:
    return ExpressionPrinter().doprint(as_expression(e)).replace("**", "^")


# ────────────────────────────────────────────────────────────────────────────────
# Parsing
# ────────────────────────────────────────────────────────────────────────────────
class _Token(BaseModel):
    kind: str
    text: str
    position: int


def _tokenize(text: str) -> List[_Token]:
    tokens: List[_Token] = []
    pos = 0
    while pos < len(text):
        match = _TOKEN_RE.match(text, pos)
        if match is None:
            raise ExpressionSyntaxError(f"unexpected character '{text[pos]}'", pos)
        kind = match.lastgroup
        if kind != "ws":
            tokens.append(_Token(kind=kind, text=match.group(), position=pos))
        pos = match.end()
    tokens.append(_Token(kind="end", text="", position=len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, space: JetSpace, allow_slot: bool, allow_time: bool):
        self.text = text
        self.space = space
        self.allow_slot = allow_slot
        self.allow_time = allow_time
        self.tokens = _tokenize(text)
        self.index = 0
        self.depth = 0
        self.max_depth = 0

    @property
    def current(self) -> _Token:
        return self.tokens[self.index]

    def _peek(self, offset: int = 1) -> _Token:
        return self.tokens[min(self.index + offset, len(self.tokens) - 1)]

    def _advance(self) -> _Token:
        token = self.current
        self.index += 1
        return token

    def _expect(self, text: str) -> _Token:
        if self.current.text != text:
            found = self.current.text or "end of input"
            raise ExpressionSyntaxError(f"expected '{text}', found '{found}'", self.current.position)
        return self._advance()

    def parse(self) -> sp.Expr:
        if self.current.kind == "end":
            raise ExpressionSyntaxError("empty expression", 0)
        result = self._sum()
        if self.current.kind != "end":
            raise ExpressionSyntaxError(f"unexpected '{self.current.text}'", self.current.position)
        return result

    def _sum(self) -> sp.Expr:
        result = self._product()
        while self.current.text in ("+", "-"):
            op = self._advance().text
            rhs = self._product()
            result = result + rhs if op == "+" else result - rhs
        return result

    def _product(self) -> sp.Expr:
        result = self._unary()
        while self.current.text in ("*", "/"):
            op = self._advance()
            rhs = self._unary()
            if op.text == "*":
                result = result * rhs
            else:
                if rhs == 0:
                    raise ExpressionSyntaxError("division by the constant 0", op.position)
                result = result / rhs
        return result

    def _unary(self) -> sp.Expr:
        if self.current.text == "-":
            self._advance()
            return -self._unary()
        if self.current.text == "+":
            self._advance()
            return self._unary()
        return self._power()

    def _power(self) -> sp.Expr:
        base = self._atom()
        if self.current.text == "^":
            op = self._advance()
            exponent = self._unary()
            if not exponent.is_Rational:
                raise ExpressionSyntaxError("exponent must be a rational constant", op.position)
            return base**exponent
        return base

    def _atom(self) -> sp.Expr:
        token = self.current
        if token.kind == "number":
            self._advance()
            return sp.Rational(token.text)
        if token.text == "(":
            self._advance()
            inner = self._sum()
            self._expect(")")
            return inner
        if token.text == ".":
            if not self.allow_slot:
                raise ExpressionSyntaxError("argument slot '.' outside an operator entry", token.position)
            self._advance()
            return self.space.jet_symbol(SLOT_FIELD)
        if token.kind == "name":
            return self._named(token)
        raise ExpressionSyntaxError(f"unexpected '{token.text or 'end of input'}'", token.position)

    def _named(self, token: _Token) -> sp.Expr:
        name = token.text
        following = self._peek().text
        if name in FUNCTIONS and following == "(":
            self._advance()
            self._advance()
            argument = self._sum()
            self._expect(")")
            return FUNCTIONS[name](argument)
        if name == "D" and following == "[":
            self._advance()
            return self._bracket_derivative()
        base = _total_derivative_base(name, self.space)
        if base is not None and following == "(":
            self._advance()
            self._advance()
            self.depth += 1
            self.max_depth = max(self.max_depth, self.depth)
            argument = self._sum()
            self.depth -= 1
            self._expect(")")
            return total_derivative(argument, base, self.space)
        self._advance()
        return self.space.resolve(name, token.position, allow_time=self.allow_time)

    def _bracket_derivative(self) -> sp.Expr:
        start = self._expect("[")
        if self.current.text == "D" and self._peek().text == "[":
            self._advance()
            target = self._bracket_derivative()
        elif self.current.kind == "name":
            tok = self._advance()
            target = self.space.resolve(tok.text, tok.position, allow_time=self.allow_time)
        else:
            raise ExpressionSyntaxError("expected a name inside D[...]", self.current.position)
        self._expect(",")
        if self.current.kind != "name":
            raise ExpressionSyntaxError("expected a coordinate inside D[...]", self.current.position)
        var_token = self._advance()
        variable = self.space.resolve(var_token.text, var_token.position)
        self._expect("]")

        coord = self.space.coordinate_of(target) if isinstance(target, sp.Symbol) else None
        if coord is not None:
            if variable not in self.space.independent_symbols:
                raise ExpressionSyntaxError("jet coordinates differentiate along independent coordinates", var_token.position)
            return self.space.promote(coord, self.space.independent_symbols.index(variable))
        if target.atoms(AppliedUndef) and isinstance(variable, sp.Symbol):
            result = sp.diff(target, variable)
            if result == 0:
                raise ExpressionSyntaxError(f"'{render(target)}' does not depend on '{variable}'", var_token.position)
            return result
        raise ExpressionSyntaxError("D[...] needs a field, parameter or function", start.position)


def _total_derivative_base(name: str, space: JetSpace) -> Optional[int]:
    if len(name) == 2 and name[0] == "D":
        for A, letter in enumerate(space.independent):
            if name[1] == letter.lower():
                return A
    return None


def parse(text: str, context: JetSpace, allow_slot: bool = False, allow_time: bool = False) -> sp.Expr:
    """Parse grammar text into a canonical expression in `context`."""
    return canonicalize(_Parser(text, context, allow_slot, allow_time).parse())


def parse_with_depth(text: str, context: JetSpace, allow_slot: bool = False, allow_time: bool = False) -> Tuple[sp.Expr, int]:
    """Like `parse`, also returning the deepest nesting of total-derivative calls."""
    parser = _Parser(text, context, allow_slot, allow_time)
    return canonicalize(parser.parse()), parser.max_depth


# ────────────────────────────────────────────────────────────────────────────────
# Differentiation, substitution, evaluation
# ────────────────────────────────────────────────────────────────────────────────
def jet_coordinates(e, space: JetSpace) -> List[Tuple[sp.Symbol, Coordinate]]:
    found = []
    for sym in as_expression(e).free_symbols:
        coord = space.coordinate_of(sym)
        if coord is not None:
            found.append((sym, coord))
    return sorted(found, key=lambda item: item[0].name)


def jet_order(e, space: JetSpace) -> int:
    return max((coord.order for _, coord in jet_coordinates(e, space)), default=0)


def partial(e, c: Union[Coordinate, sp.Symbol, str], space: JetSpace) -> sp.Expr:
    """Formal partial derivative; every coordinate is an independent symbol."""
    if isinstance(c, Coordinate):
        symbol = space.symbol_of(c)
    elif isinstance(c, str):
        symbol = space.resolve(c)
    else:
        symbol = c
    return canonicalize(sp.diff(as_expression(e), symbol))


def total_derivative(e, base: Union[int, str], space: JetSpace) -> sp.Expr:
    """d_A e = ∂_A e + Σ x^α_{𝔎A} ∂e/∂x^α_𝔎."""
    e = as_expression(e)
    A = space.base_index(base)
    result = sp.diff(e, space.independent_symbols[A])
    for sym, coord in jet_coordinates(e, space):
        derivative = sp.diff(e, sym)
        if derivative == 0:
            continue
        result += space.promote(coord, A) * derivative
    return canonicalize(result)


def total_derivative_multi(e, multi: Sequence[int], space: JetSpace) -> sp.Expr:
    for A in multi:
        e = total_derivative(e, A, space)
    return as_expression(e)


def substitute(e, bindings: Mapping[Union[str, sp.Symbol], object], space: JetSpace) -> sp.Expr:
    """Plug bindings into `e`; derivative coordinates of bound fields follow by total derivatives."""
    e = as_expression(e)
    explicit: Dict[Coordinate, sp.Expr] = {}
    function_map: Dict[sp.Expr, sp.Expr] = {}
    plain: Dict[sp.Symbol, sp.Expr] = {}
    for key, value in bindings.items():
        name = key if isinstance(key, str) else render(key)
        value = as_expression(value)
        if name in space.parameters:
            function_map[space.parameter(name)] = value
        elif name in space.function_args:
            function_map[space.function(name)] = value
        elif name in space.independent or name == "t":
            plain[sp.Symbol(name)] = value
        else:
            resolved = space.resolve(name)
            coord = space.coordinate_of(resolved) if isinstance(resolved, sp.Symbol) else None
            if coord is None:
                raise UnknownSymbolError(name)
            explicit[coord] = value

    sections = {c.field: v for c, v in explicit.items() if c.order == 0}
    cache: Dict[Tuple[str, Tuple[int, ...]], sp.Expr] = {}

    def derived(field: str, multi: Tuple[int, ...]) -> sp.Expr:
        key = (field, multi)
        if key not in cache:
            cache[key] = total_derivative_multi(sections[field], multi, space)
        return cache[key]

    for coord, value in explicit.items():
        if coord.order > 0 and coord.field in sections:
            if not equal(value, derived(coord.field, coord.multi)):
                raise SubstitutionError(
                    f"binding for '{space.symbol_name(coord.field, coord.multi)}' disagrees with "
                    f"the total derivative of the binding for '{coord.field}'"
                )

    if function_map:
        e = e.subs(function_map, simultaneous=True).doit()
    mapping: Dict[sp.Symbol, sp.Expr] = dict(plain)
    for sym, coord in jet_coordinates(e, space):
        if coord in explicit:
            mapping[sym] = explicit[coord]
        elif coord.field in sections:
            mapping[sym] = derived(coord.field, coord.multi)
    return canonicalize(e.xreplace(mapping)) if mapping else canonicalize(e)


def _bad_number(value: sp.Expr) -> Optional[str]:
    if value.has(sp.zoo, sp.oo, -sp.oo):
        return "division by zero"
    if value.has(sp.nan):
        return "undefined value"
    if value.is_number and value.is_real is False:
        return "non-real value (square root of a negative number?)"
    return None


def eval_numeric(e, point: Mapping[str, float]) -> float:
    """Float value of `e`; keys are symbol, parameter, function names or rendered `D[...]` atoms."""
    original = as_expression(e)
    missing: List[str] = []

    def bind(expr: sp.Expr, atoms: Iterable[sp.Expr], key_of) -> Dict[sp.Expr, sp.Expr]:
        found = {}
        for atom in atoms:
            key = key_of(atom)
            if key in point:
                found[atom] = sp.Float(float(point[key]))
            else:
                missing.append(key)
        return found

    d1 = bind(original, original.atoms(sp.Derivative), render)
    step1 = original.xreplace(d1)
    d2 = bind(step1, step1.atoms(AppliedUndef), lambda a: a.func.__name__)
    step2 = step1.xreplace(d2)
    d3 = bind(step2, step2.free_symbols, lambda a: a.name)
    if missing:
        raise MissingBindingError(sorted(set(missing)))

    def numeric(expr: sp.Expr) -> sp.Expr:
        return expr.xreplace(d1).xreplace(d2).xreplace(d3).evalf()

    value = numeric(original)
    reason = _bad_number(value)
    if reason is not None:
        offender = original
        descending = True
        while descending:
            descending = False
            for arg in offender.args:
                if _bad_number(numeric(arg)) is not None:
                    offender = arg
                    descending = True
                    break
        raise DomainEvalError(render(offender), reason)
    return float(value)
