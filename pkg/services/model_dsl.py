# services/model_dsl.py
"""
Line-oriented model files.

    model string_damped
    dim 1
    independent X in [0, 1]
    fields w p
    param rho = 1.0 range (0, inf)
    hamiltonian (1/(2*rho))*p^2 + (1/2)*P*w_X^2
    J [[0, 1], [-1, 0]]
    R [[0, 0], [0, -Dx(r*Dx(.))]]
    boundary X=0 : rate w = 0

Matrix rows are output fields, columns are argument slots (fields for J and
R, inputs for G). An entry is either a coefficient or a linear expression in
the slot `.` built with total-derivative calls such as `Dx(.)`.
"""
from __future__ import annotations

import logging
import math
import re
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import sympy as sp

from schemas.phs import BoundaryCondition, ParameterSpec, VerdictStatus
from services.expr_core import (
    SLOT_FIELD,
    Density,
    JetSpace,
    canonicalize,
    is_identifier,
    is_zero,
    jet_coordinates,
    parse,
    parse_with_depth,
    render,
    total_derivative,
)
from services.phs_model import PHSystem, structural_checks
from services.variational import LinDiffOp
from utils.config import get_settings
from utils.errors import (
    DimensionMismatchError,
    ExpressionSyntaxError,
    JetOrderError,
    ModelParseError,
    StructuralCheckError,
    UnknownSymbolError,
)

logger = logging.getLogger(__name__)

# ====== line grammar ======
MAX_OPERATOR_NESTING = 2
DEFAULT_LETTERS = ("X", "Y", "Z")

_INDEPENDENT_RE = re.compile(r"^independent\s+([A-Za-z])\s+in\s+\[\s*([^,\]]+?)\s*,\s*([^\]]+?)\s*\]$")
_PARAM_RE = re.compile(
    r"^param\s+(?P<name>[^\s=]+)"
    r"(?:\s*=\s*(?P<value>[^\s]+))?"
    r"(?:\s+range\s*(?P<open>[\[(])\s*(?P<lo>[^,]+?)\s*,\s*(?P<hi>[^\])]+?)\s*(?P<close>[\])]))?$"
)
_FUNCTION_RE = re.compile(r"^function\s+(\S+)\s+of\s+(.+)$")
_BOUNDARY_RE = re.compile(
    r"^boundary\s+(?P<coord>[A-Za-z])\s*=\s*(?P<pos>[^\s:]+)\s*:\s*(?P<kind>rate|free)\s+(?P<field>\w+)"
    r"(?:\s*=\s*(?P<expr>.+))?$"
)
_ASSIGN_RE = re.compile(r"^(initial|derived)\s+(\w+)\s*=\s*(.+)$")
_MATRIX_KEYS = ("J", "R", "G")
_EXPRESSION_ERRORS = (ExpressionSyntaxError, UnknownSymbolError, JetOrderError, DimensionMismatchError)


class _Line:
    def __init__(self, number: int, text: str):
        self.number = number
        self.text = text
        self.keyword, _, self.rest = text.partition(" ")
        self.rest = self.rest.strip()

    def column_of(self, fragment: str) -> int:
        """1-based column where `fragment` starts, 1 if it cannot be found."""
        index = self.text.find(fragment)
        return index + 1 if index >= 0 else 1

    def error(self, message: str, column: int = 1) -> ModelParseError:
        return ModelParseError(message, self.number, column)


def _number(text: str, line: _Line) -> float:
    value = text.strip().lower()
    if value in ("inf", "+inf"):
        return math.inf
    if value == "-inf":
        return -math.inf
    try:
        return float(value)
    except ValueError:
        raise line.error(f"expected a number, found '{text}'", line.column_of(text)) from None


def split_top_level(text: str, separator: str = ",") -> List[Tuple[str, int]]:
    """Split on `separator` outside brackets and parentheses; returns (segment, offset) pairs."""
    parts: List[Tuple[str, int]] = []
    depth = 0
    start = 0
    for i, ch in enumerate(text):
        if ch in "([":
            depth += 1
        elif ch in ")]":
            depth -= 1
            if depth < 0:
                raise ExpressionSyntaxError(f"unbalanced '{ch}'", i)
        elif ch == separator and depth == 0:
            parts.append((text[start:i], start))
            start = i + 1
    if depth != 0:
        raise ExpressionSyntaxError("unbalanced brackets", len(text))
    parts.append((text[start:], start))
    return parts


def _strip_brackets(text: str, offset: int) -> Tuple[str, int]:
    stripped = text.strip()
    lead = offset + len(text) - len(text.lstrip())
    if not (stripped.startswith("[") and stripped.endswith("]")):
        raise ExpressionSyntaxError("expected '[...]'", lead)
    return stripped[1:-1], lead + 1


def parse_matrix_text(text: str) -> List[List[Tuple[str, int]]]:
    """`[[a, b], [c, d]]` into rows of (entry text, offset in `text`)."""
    inner, offset = _strip_brackets(text, 0)
    rows = []
    if not inner.strip():
        return rows
    for row_text, row_offset in split_top_level(inner):
        row_inner, row_start = _strip_brackets(row_text, offset + row_offset)
        entries = []
        if row_inner.strip():
            for entry, entry_offset in split_top_level(row_inner):
                lead = len(entry) - len(entry.lstrip())
                entries.append((entry.strip(), row_start + entry_offset + lead))
        rows.append(entries)
    return rows


def operator_entry(text: str, space: JetSpace) -> Dict[Tuple[int, ...], sp.Expr]:
    """Coefficients by multi-index of an operator entry, linear in the slot."""
    slot_space = space.with_fields((SLOT_FIELD,))
    expr, depth = parse_with_depth(text, slot_space, allow_slot=True)
    if depth > MAX_OPERATOR_NESTING:
        raise ExpressionSyntaxError(
            f"operator entries allow at most {MAX_OPERATOR_NESTING} nested total derivatives", 0
        )
    slot_terms = [(sym, coord) for sym, coord in jet_coordinates(expr, slot_space) if coord.field == SLOT_FIELD]
    if not slot_terms:
        return {(): expr}
    coefficients: Dict[Tuple[int, ...], sp.Expr] = {}
    rest = expr
    for sym, coord in slot_terms:
        coeff = canonicalize(sp.diff(expr, sym))
        if any(c.field == SLOT_FIELD for _, c in jet_coordinates(coeff, slot_space)):
            raise ExpressionSyntaxError("operator entry is not linear in the slot '.'", 0)
        coefficients[coord.multi] = coeff
        rest = rest - coeff * sym
    if not is_zero(rest):
        raise ExpressionSyntaxError(f"term '{render(canonicalize(rest))}' does not act on the slot '.'", 0)
    return coefficients


# ────────────────────────────────────────────────────────────────────────────────
# Parsing
# ────────────────────────────────────────────────────────────────────────────────
class _Declarations:
    def __init__(self):
        self.name = "model"
        self.dim: Optional[int] = None
        self.order: Optional[int] = None
        self.independent: List[Tuple[str, float, float]] = []
        self.fields: List[str] = []
        self.inputs: List[str] = []
        self.parameters: List[ParameterSpec] = []
        self.functions: List[Tuple[str, Tuple[str, ...]]] = []
        self.deferred: List[_Line] = []


def _declare(line: _Line, decl: _Declarations) -> None:
    keyword, rest = line.keyword, line.rest
    if keyword == "model":
        if not rest:
            raise line.error("model needs a name")
        decl.name = rest
    elif keyword in ("dim", "order"):
        try:
            value = int(rest)
        except ValueError:
            raise line.error(f"{keyword} needs an integer", line.column_of(rest) if rest else 1) from None
        if value < 1:
            raise line.error(f"{keyword} must be positive", line.column_of(rest))
        setattr(decl, keyword, value)
    elif keyword == "independent":
        match = _INDEPENDENT_RE.match(line.text)
        if match is None:
            raise line.error("expected 'independent X in [a, b]'")
        letter, lo, hi = match.groups()
        decl.independent.append((letter, _number(lo, line), _number(hi, line)))
    elif keyword in ("fields", "inputs"):
        names = rest.split()
        for name in names:
            if not is_identifier(name):
                raise line.error(f"invalid name '{name}'", line.column_of(name))
        getattr(decl, keyword).extend(names)
    elif keyword == "param":
        decl.parameters.append(_parameter(line))
    elif keyword == "function":
        match = _FUNCTION_RE.match(line.text)
        if match is None:
            raise line.error("expected 'function NAME of SYMBOL ...'")
        name, args = match.group(1), tuple(match.group(2).split())
        if not is_identifier(name):
            raise line.error(f"invalid name '{name}'", line.column_of(name))
        decl.functions.append((name, args))
    elif keyword in ("hamiltonian", "boundary", "initial", "derived") + _MATRIX_KEYS:
        decl.deferred.append(line)
    else:
        raise line.error(f"unknown keyword '{keyword}'")


def _parameter(line: _Line) -> ParameterSpec:
    match = _PARAM_RE.match(line.text)
    if match is None:
        raise line.error("expected 'param NAME [= VALUE] [range (lo, hi)]'")
    name = match.group("name")
    if not is_identifier(name):
        raise line.error(f"invalid name '{name}'", line.column_of(name))
    value = _number(match.group("value"), line) if match.group("value") else None
    spec = {"name": name, "value": value}
    if match.group("open"):
        spec.update(
            lower=_number(match.group("lo"), line),
            upper=_number(match.group("hi"), line),
            lower_closed=match.group("open") == "[",
            upper_closed=match.group("close") == "]",
            has_range=True,
        )
    try:
        return ParameterSpec(**spec)
    except ValueError as exc:
        raise line.error(str(exc).splitlines()[-1] if str(exc) else "invalid parameter", line.column_of(name)) from None


def _space(decl: _Declarations, first_line: int) -> Tuple[JetSpace, Tuple[Tuple[float, float], ...]]:
    independent = decl.independent
    dim = decl.dim or len(independent) or 1
    if not independent:
        if dim > len(DEFAULT_LETTERS):
            raise ModelParseError(f"declare the independent coordinates of a {dim}-dimensional model", first_line)
        independent = [(DEFAULT_LETTERS[a], 0.0, 1.0) for a in range(dim)]
    if len(independent) != dim:
        raise ModelParseError(f"dim {dim} but {len(independent)} independent coordinates", first_line)
    if not decl.fields:
        raise ModelParseError("no fields declared", first_line)
    try:
        space = JetSpace(
            independent=tuple(letter for letter, _, _ in independent),
            fields=tuple(decl.fields),
            inputs=tuple(decl.inputs),
            parameters=tuple(p.name for p in decl.parameters),
            functions=tuple(decl.functions),
            max_order=decl.order or get_settings().max_jet_order,
        )
    except ValueError as exc:
        raise ModelParseError(_first_error(exc), first_line) from None
    return space, tuple((lo, hi) for _, lo, hi in independent)


def _first_error(exc: Exception) -> str:
    errors = getattr(exc, "errors", None)
    if callable(errors):
        details = errors()
        if details:
            return str(details[0].get("msg", exc))
    return str(exc)


def _expression(line: _Line, text: str, space: JetSpace, allow_time: bool = False) -> sp.Expr:
    try:
        return parse(text, space, allow_time=allow_time)
    except _EXPRESSION_ERRORS as exc:
        raise line.error(str(exc), line.column_of(text) + getattr(exc, "position", 0)) from None


def _matrix(line: _Line, space: JetSpace, n_in: int, n_out: int) -> LinDiffOp:
    label = line.keyword
    base = line.column_of(line.rest)
    try:
        rows = parse_matrix_text(line.rest)
    except ExpressionSyntaxError as exc:
        raise line.error(str(exc), base + exc.position) from None
    if len(rows) != n_out or any(len(row) != n_in for row in rows):
        shape = f"{len(rows)}x{len(rows[0]) if rows else 0}"
        raise line.error(f"{label} must be {n_out}x{n_in}, got {shape}", base)
    coefficients = {}
    for beta, row in enumerate(rows):
        for alpha, (entry, offset) in enumerate(row):
            try:
                for multi, coeff in operator_entry(entry, space).items():
                    coefficients[(alpha, beta, multi)] = coeff
            except _EXPRESSION_ERRORS as exc:
                raise line.error(f"{label}[{beta + 1}][{alpha + 1}]: {exc}", base + offset + getattr(exc, "position", 0)) from None
    return LinDiffOp(space=space, n_in=n_in, n_out=n_out, coefficients=coefficients)


def _boundary(line: _Line, space: JetSpace) -> BoundaryCondition:
    match = _BOUNDARY_RE.match(line.text)
    if match is None:
        raise line.error("expected 'boundary X=a : rate FIELD = EXPR' or 'boundary X=a : free FIELD'")
    kind, field = match.group("kind"), match.group("field")
    if field not in space.fields:
        raise line.error(f"unknown field '{field}'", line.column_of(field))
    if match.group("coord") not in space.independent:
        raise line.error(f"unknown coordinate '{match.group('coord')}'", line.column_of(match.group("coord")))
    rate = None
    if kind == "rate":
        if not match.group("expr"):
            raise line.error("rate condition needs '= EXPR'")
        rate = _expression(line, match.group("expr"), space, allow_time=True)
    elif match.group("expr"):
        raise line.error("free condition takes no expression", line.column_of(match.group("expr")))
    return BoundaryCondition(
        coordinate=match.group("coord"),
        position=_number(match.group("pos"), line),
        field=field,
        kind=kind,
        rate=rate,
    )


def parse_model(text: str, strict: bool = True) -> PHSystem:
    """
    Parse a model file into a PHSystem with structural verdicts attached.

    Args:
        text: model file contents
        strict: raise StructuralCheckError when a structural check fails

    Raises:
        ModelParseError: syntax, shape or symbol errors, with line and column
        StructuralCheckError: a failed check when `strict`
    """
    decl = _Declarations()
    first_line: Optional[int] = None
    for number, raw in enumerate(text.splitlines(), start=1):
        content = raw.split("#", 1)[0].strip()
        if not content:
            continue
        first_line = first_line or number
        _declare(_Line(number, content), decl)

    first_line = first_line or 1
    space, domain = _space(decl, first_line)
    n, m = len(space.fields), len(space.inputs)
    hamiltonian: Optional[sp.Expr] = None
    operators: Dict[str, LinDiffOp] = {}
    boundary: List[BoundaryCondition] = []
    initial: Dict[str, sp.Expr] = {}
    derived: Dict[str, sp.Expr] = {}

    for line in decl.deferred:
        keyword = line.keyword
        if keyword == "hamiltonian":
            if hamiltonian is not None:
                raise line.error("hamiltonian declared twice")
            hamiltonian = _expression(line, line.rest, space)
        elif keyword in _MATRIX_KEYS:
            if keyword in operators:
                raise line.error(f"{keyword} declared twice")
            n_in = m if keyword == "G" else n
            operators[keyword] = _matrix(line, space, n_in, n)
        elif keyword == "boundary":
            boundary.append(_boundary(line, space))
        else:
            match = _ASSIGN_RE.match(line.text)
            if match is None:
                raise line.error(f"expected '{keyword} NAME = EXPR'")
            _, name, expr_text = match.groups()
            if keyword == "initial":
                if name not in space.fields:
                    raise line.error(f"unknown field '{name}'", line.column_of(name))
                initial[name] = _expression(line, expr_text, space)
            else:
                derived[name] = _expression(line, expr_text, space)

    if hamiltonian is None:
        raise ModelParseError("missing 'hamiltonian' line", first_line)
    if "J" not in operators:
        raise ModelParseError("missing 'J' matrix", first_line)
    if m and "G" not in operators:
        logger.info(f"{decl.name}: inputs declared without G, using a zero input map")

    try:
        sys = PHSystem(
            name=decl.name,
            space=space,
            domain=domain,
            hamiltonian=Density(space=space, integrand=hamiltonian),
            J_op=operators["J"],
            R_op=operators.get("R", LinDiffOp.zero(space, n, n)),
            G_op=operators.get("G", LinDiffOp.zero(space, m, n)),
            parameters=tuple(decl.parameters),
            boundary=tuple(boundary),
            initial=initial,
            derived=derived,
        )
    except ValueError as exc:
        raise ModelParseError(_first_error(exc), first_line) from None

    sys = sys.with_verdicts(structural_checks(sys))
    logger.info(f"Parsed model '{sys.name}' ({n} fields, {m} inputs, dim {space.dim})")
    failed = [v for v in sys.verdicts if v.status == VerdictStatus.FAIL]
    if strict and failed:
        details = "; ".join(
            f"{v.check} failed" + (f": residual {render(v.residual)}" if v.residual is not None else "")
            for v in failed
        )
        raise StructuralCheckError(details, sys.verdicts)
    return sys


def load_model(path: Path, strict: bool = True) -> PHSystem:
    return parse_model(Path(path).read_text(encoding="utf-8"), strict=strict)


# ────────────────────────────────────────────────────────────────────────────────
# Rendering
# ────────────────────────────────────────────────────────────────────────────────
def _number_text(value: float) -> str:
    if math.isinf(value):
        return "inf" if value > 0 else "-inf"
    return repr(float(value))


def _factor(coeff: sp.Expr) -> str:
    text = render(coeff)
    if coeff.is_Symbol or coeff.is_Function or (coeff.is_Number and coeff >= 0):
        return text
    return f"({text})"


def _call(letter: str, inner: str) -> str:
    return f"D{letter.lower()}({inner})"


def render_entry(terms: Dict[Tuple[int, ...], sp.Expr], space: JetSpace) -> str:
    """Operator entry text that parses back to the same coefficients."""
    if not terms:
        return "0"
    if set(terms) == {()}:
        return render(terms[()])
    pieces = []
    remaining = dict(terms)
    if space.dim == 1 and (0, 0) in remaining:
        second = remaining[(0, 0)]
        if is_zero(remaining.get((0,), 0) - total_derivative(second, 0, space)):
            remaining.pop((0, 0))
            remaining.pop((0,), None)
            x = space.independent[0]
            pieces.append(_call(x, f"{_factor(second)}*{_call(x, '.')}"))
    for multi in sorted(remaining, key=lambda m: (len(m), m)):
        slot = "."
        for A in multi:
            slot = _call(space.independent[A], slot)
        coeff = remaining[multi]
        pieces.append(slot if coeff == 1 else f"{_factor(coeff)}*{slot}")
    return " + ".join(pieces)


def render_matrix(op: LinDiffOp) -> str:
    rows = []
    for beta in range(op.n_out):
        rows.append("[" + ", ".join(render_entry(op.entry(beta, alpha), op.space) for alpha in range(op.n_in)) + "]")
    return "[" + ", ".join(rows) + "]"


def _render_parameter(spec: ParameterSpec) -> str:
    text = f"param {spec.name}"
    if spec.value is not None:
        text += f" = {_number_text(spec.value)}"
    if spec.has_range:
        text += (
            f" range {'[' if spec.lower_closed else '('}{_number_text(spec.lower)}, "
            f"{_number_text(spec.upper)}{']' if spec.upper_closed else ')'}"
        )
    if spec.default_value:
        text += "  # numeric default, not a physical claim"
    return text


def render_model(sys: PHSystem, header: Sequence[str] = ()) -> str:
    space = sys.space
    lines = [f"# {h}" for h in header]
    lines += [f"model {sys.name}", f"dim {space.dim}", f"order {space.max_order}"]
    for letter, (lo, hi) in zip(space.independent, sys.domain):
        lines.append(f"independent {letter} in [{_number_text(lo)}, {_number_text(hi)}]")
    lines.append("fields " + " ".join(space.fields))
    if space.inputs:
        lines.append("inputs " + " ".join(space.inputs))
    lines += [_render_parameter(p) for p in sys.parameters]
    lines += [f"function {name} of {' '.join(args)}" for name, args in space.functions]
    lines.append(f"hamiltonian {render(sys.hamiltonian.integrand)}")
    lines.append(f"J {render_matrix(sys.J_op)}")
    if sys.R_op.coefficients:
        lines.append(f"R {render_matrix(sys.R_op)}")
    if space.inputs:
        lines.append(f"G {render_matrix(sys.G_op)}")
    for bc in sys.boundary:
        target = f"rate {bc.field} = {render(bc.rate)}" if bc.kind == "rate" else f"free {bc.field}"
        lines.append(f"boundary {bc.coordinate}={_number_text(bc.position)} : {target}")
    lines += [f"initial {field} = {render(expr)}" for field, expr in sys.initial.items()]
    lines += [f"derived {name} = {render(expr)}" for name, expr in sys.derived.items()]
    return "\n".join(lines) + "\n"
