import math
from enum import Enum
from typing import Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from services.expr_core import SymExpr


class VerdictStatus(str, Enum):
    PASS = "PASS"
    FAIL = "FAIL"
    INDETERMINATE = "INDETERMINATE"


class Verdict(BaseModel):
    """One structural or Casimir check outcome, printed as a single report line"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    check: str
    status: VerdictStatus
    residual: Optional[SymExpr] = None
    message: str = ""

    @property
    def passed(self) -> bool:
        return self.status == VerdictStatus.PASS


class ParameterSpec(BaseModel):
    """`param NAME [= VALUE] [range (lo, hi)]`; a missing bound means infinite"""
    model_config = ConfigDict(frozen=True)

    name: str
    value: Optional[float] = None
    lower: float = -math.inf
    upper: float = math.inf
    lower_closed: bool = False
    upper_closed: bool = False
    has_range: bool = False
    default_value: bool = False

    @model_validator(mode="after")
    def _check_range(self) -> "ParameterSpec":
        if self.lower > self.upper:
            raise ValueError(f"empty range for parameter '{self.name}'")
        if self.value is not None and self.has_range and not self.contains(self.value):
            raise ValueError(f"value {self.value} of '{self.name}' lies outside its range")
        return self

    def contains(self, x: float) -> bool:
        above = x >= self.lower if self.lower_closed else x > self.lower
        below = x <= self.upper if self.upper_closed else x < self.upper
        return above and below

    def sample(self, u: float) -> float:
        """Map u in (0, 1) into the declared range."""
        lo, hi = self.lower, self.upper
        if math.isfinite(lo) and math.isfinite(hi):
            return lo + u * (hi - lo)
        if math.isfinite(lo):
            return lo + u / (1.0 - u)
        if math.isfinite(hi):
            return hi - u / (1.0 - u)
        return math.log(u / (1.0 - u))


class BoundaryCondition(BaseModel):
    """`boundary X=1 : rate w = EXPR` or `boundary X=1 : free w`"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    coordinate: str
    position: float
    field: str
    kind: Literal["rate", "free"]
    rate: Optional[SymExpr] = None

    @model_validator(mode="after")
    def _check_rate(self) -> "BoundaryCondition":
        if self.kind == "rate" and self.rate is None:
            raise ValueError("a rate boundary condition needs an expression")
        if self.kind == "free" and self.rate is not None:
            raise ValueError("a free boundary condition takes no expression")
        return self


class FaceValue(BaseModel):
    """Outward flux through one face, with the face's boundary conditions imposed"""
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    coordinate: str
    position: float
    side: Literal["lower", "upper"]
    value: SymExpr
    reduced: bool = True


LEDGER_COLUMNS = ("t", "H", "dHdt", "dissipation", "domain_port", "boundary_port", "residual")


class PowerLedgerRow(BaseModel):
    model_config = ConfigDict(frozen=True)

    t: float
    H: float
    dHdt: float
    dissipation: float = Field(description="non-negative; enters the balance with a minus sign")
    domain_port: float
    boundary_port: float
    residual: float

    def values(self) -> Tuple[float, ...]:
        return tuple(getattr(self, name) for name in LEDGER_COLUMNS)
