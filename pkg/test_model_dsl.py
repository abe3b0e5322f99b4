#!/usr/bin/env python3
"""
Model files: parsing, diagnostics and the emit → parse round trip of the built-ins
"""
import math

import pytest

from schemas.phs import VerdictStatus
from services.builtin_models import build, builtin_names, emit
from services.expr_core import equal, parse
from services.model_dsl import load_model, operator_entry, parse_model, render_entry
from services.phs_model import assemble_rhs
from utils.errors import ModelParseError, StructuralCheckError

STRING_DAMPED = """\
model string_damped
dim 1
independent X in [0, 1]
fields w p
param rho = 1.0 range (0, inf)
param P   = 1.0 range (0, inf)
param r   = 0.1 range [0, inf)
hamiltonian (1/(2*rho))*p^2 + (1/2)*P*w_X^2
J [[0, 1], [-1, 0]]
R [[0, 0], [0, -Dx(r*Dx(.))]]
boundary X=0 : rate w = 0
boundary X=1 : rate w = 0
"""


def test_parse_damped_string_file():
    sys = parse_model(STRING_DAMPED)
    space = sys.space
    assert sys.name == "string_damped"
    assert sys.fields == ("w", "p")
    assert equal(sys.R_op.coefficient(1, 1, (0, 0)), -space.parameter("r"))
    assert equal(sys.R_op.coefficient(1, 1, (0,)), parse("-D[r,X]", space))
    assert all(v.status == VerdictStatus.PASS for v in sys.verdicts)

    r = sys.parameter_spec("r")
    assert r.value == 0.1 and r.lower == 0.0 and r.lower_closed and math.isinf(r.upper)
    assert [bc.position for bc in sys.boundary] == [0.0, 1.0]
    print("✅ string_damped parsed with R = −d_X(r d_X ·)")


def test_symmetric_interconnection_is_a_structural_failure():
    text = STRING_DAMPED.replace("J [[0, 1], [-1, 0]]", "J [[0, 1], [1, 0]]")
    with pytest.raises(StructuralCheckError) as info:
        parse_model(text)
    assert "J skew-adjoint failed" in str(info.value)
    assert "omega" in str(info.value)

    sys = parse_model(text, strict=False)
    skew = next(v for v in sys.verdicts if v.check == "J skew-adjoint")
    assert skew.status == VerdictStatus.FAIL


def test_undeclared_parameter_reports_line_and_column():
    text = STRING_DAMPED.replace("param rho = 1.0 range (0, inf)\n", "")
    with pytest.raises(ModelParseError) as info:
        parse_model(text)
    assert info.value.line == 7
    assert "rho" in str(info.value)
    assert info.value.column > len("hamiltonian ")


def test_shape_mismatch_is_reported():
    text = STRING_DAMPED.replace("J [[0, 1], [-1, 0]]", "J [[0, 1]]")
    with pytest.raises(ModelParseError) as info:
        parse_model(text)
    assert "J must be 2x2" in str(info.value)
    assert info.value.line == 9


def test_syntax_error_and_unknown_keyword():
    with pytest.raises(ModelParseError) as info:
        parse_model(STRING_DAMPED.replace("hamiltonian (1/(2*rho))*p^2 + (1/2)*P*w_X^2", "hamiltonian p^2 +"))
    assert info.value.line == 8
    with pytest.raises(ModelParseError) as info:
        parse_model("model m\nfields w\nsurprise 3\n")
    assert info.value.line == 3


def test_operator_entries():
    sys = parse_model(STRING_DAMPED)
    space = sys.space
    assert operator_entry("r*Dx(.)", space) == {(0,): space.parameter("r")}
    assert operator_entry("2", space) == {(): 2}
    for bad in ("Dx(Dx(Dx(.)))", "Dx(.)*.", "Dx(.) + 1"):
        with pytest.raises(ValueError):
            operator_entry(bad, space)
    terms = sys.R_op.entry(1, 1)
    assert operator_entry(render_entry(terms, space), space) == terms


def test_builtin_round_trip():
    for name in builtin_names():
        options = {"dim": 2} if name == "mhd" else {}
        direct = build(name, **options)
        parsed = parse_model(emit(name, **options))
        assert parsed.fields == direct.fields
        assert parsed.inputs == direct.inputs
        for a, b in zip(assemble_rhs(parsed).components, assemble_rhs(direct).components):
            assert equal(a, b), name
        assert set(parsed.derived) == set(direct.derived)
        print(f"✅ {name}: emit → parse round trip")


def test_emitted_file_marks_numeric_defaults(tmp_path):
    path = tmp_path / "string.phs"
    path.write_text(emit("string"), encoding="utf-8")
    text = path.read_text(encoding="utf-8")
    assert "numeric default, not a physical claim" in text
    assert load_model(path).name == "string"


if __name__ == "__main__":
    import pathlib
    import tempfile

    test_parse_damped_string_file()
    test_symmetric_interconnection_is_a_structural_failure()
    test_undeclared_parameter_reports_line_and_column()
    test_shape_mismatch_is_reported()
    test_syntax_error_and_unknown_keyword()
    test_operator_entries()
    test_builtin_round_trip()
    with tempfile.TemporaryDirectory() as tmp:
        test_emitted_file_marks_numeric_defaults(pathlib.Path(tmp))
    print("✅ model_dsl tests passed")
