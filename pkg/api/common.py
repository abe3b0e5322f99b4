# api/common.py
"""Shared plumbing for the command modules: model loading, report lines, exit codes."""
import functools
import json
import logging
from pathlib import Path

import click

from schemas.phs import Verdict, VerdictStatus
from services.builtin_models import BUILTINS, build
from services.expr_core import render
from services.model_dsl import load_model
from services.phs_model import PHSystem
from utils.errors import (
    DimensionMismatchError,
    DomainEvalError,
    ExpressionSyntaxError,
    JetOrderError,
    MissingBindingError,
    ModelParseError,
    NewtonConvergenceError,
    NumericalBreakdownError,
    StructuralCheckError,
    SubstitutionError,
    UnknownSymbolError,
    UnsupportedModelError,
)
from utils.sanitize import sanitize_for_json

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2

_USAGE_ERRORS = (
    ModelParseError,
    ExpressionSyntaxError,
    UnknownSymbolError,
    JetOrderError,
    DimensionMismatchError,
    SubstitutionError,
)
_NUMERIC_ERRORS = (NewtonConvergenceError, NumericalBreakdownError, MissingBindingError, DomainEvalError)

source_argument = click.argument("source", metavar="MODEL")
format_option = click.option(
    "--format", "output_format", type=click.Choice(["text", "json"]), default="text", show_default=True,
    help="Report format",
)


def load_system(source: str, strict: bool = True) -> PHSystem:
    """A model file path, or the name of a built-in model."""
    path = Path(source)
    if path.is_file():
        return load_model(path, strict=strict)
    if source in BUILTINS:
        return build(source)
    raise click.UsageError(f"'{source}' is neither a model file nor a built-in ({', '.join(BUILTINS)})")


def _fail(message: str, code: int) -> None:
    click.echo(f"Error: {message}", err=True)
    raise SystemExit(code)


def command_errors(fn):
    """Map domain exceptions to diagnostics on stderr and the documented exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except UnsupportedModelError as exc:
            _fail(f"not numerically supported: {exc}", EXIT_USAGE)
        except StructuralCheckError as exc:
            for verdict in exc.verdicts:
                click.echo(verdict_line(verdict), err=True)
            _fail(str(exc), EXIT_CHECK_FAILED)
        except _USAGE_ERRORS as exc:
            _fail(str(exc), EXIT_USAGE)
        except NumericalBreakdownError as exc:
            if exc.last_row is not None:
                click.echo(f"last ledger row: {exc.last_row.values()}", err=True)
            _fail(str(exc), EXIT_CHECK_FAILED)
        except _NUMERIC_ERRORS as exc:
            _fail(str(exc), EXIT_CHECK_FAILED)

    return wrapper


def verdict_line(verdict: Verdict) -> str:
    line = f"{verdict.status.value} {verdict.check}"
    if verdict.residual is not None and verdict.status != VerdictStatus.PASS:
        line += f": residual {render(verdict.residual)}"
    if verdict.message:
        line += f" ({verdict.message})"
    return line


def echo_json(payload) -> None:
    click.echo(json.dumps(sanitize_for_json(payload), indent=2, ensure_ascii=False))


def finish(failed: bool) -> None:
    if failed:
        raise SystemExit(EXIT_CHECK_FAILED)
