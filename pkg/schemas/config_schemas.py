from typing import Literal, Optional

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from services.exceptions import ConfigError
from services.fem_service import CoefficientField

# Named coefficient fields; `degree` sizes the quadrature rules.
COEFFICIENT_PRESETS: dict[str, CoefficientField] = {
    "unit": CoefficientField(func=lambda x, y: 1.0, degree=0, name="unit"),
    "linear": CoefficientField(func=lambda x, y: 1.0 + x + y, degree=1, name="linear"),
    "bump": CoefficientField(
        func=lambda x, y: 1.0 + 0.5 * np.sin(np.pi * x) * np.sin(np.pi * y), degree=4, name="bump"
    ),
}


def resolve_coefficient(value: str | float) -> CoefficientField:
    if isinstance(value, str) and value in COEFFICIENT_PRESETS:
        return COEFFICIENT_PRESETS[value]
    return CoefficientField.constant(float(value))


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    if isinstance(value, (int, float)):
        return [value]
    if isinstance(value, (list, tuple)):
        return [item for entry in value for item in (_split_list(entry) if isinstance(entry, str) else [entry])]
    return value


class RunConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    problem: Literal["laplace", "elliptic"] = "laplace"
    diffusion: str | float = "unit"   # preset name or positive constant
    weight: str | float = "unit"
    mesh: Optional[str] = None        # path stem of an imported .node/.ele pair
    way: Literal["multigrid", "multispace"] = "multigrid"
    m: list[int] = Field(default_factory=lambda: [4, 8])
    refinements: list[int] = Field(default_factory=lambda: [0, 1, 2])
    refine_step: int = Field(default=1, ge=1)
    levels: int = Field(default=2, ge=1)
    index: int = Field(default=1, ge=1)
    order: int = Field(default=1, ge=1, le=3)
    tol: float = Field(default=1e-10, gt=0.0, lt=1.0)
    cg_tol: float = Field(default=1e-12, gt=0.0, lt=1.0)
    max_iter: int = Field(default=500, ge=1)
    selection: Literal["index", "closest"] = "index"
    verify_bounds: bool = False
    out: Optional[str] = None

    @field_validator("m", "refinements", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)

    @field_validator("m")
    @classmethod
    def positive_subdivisions(cls, value: list[int]) -> list[int]:
        if not value or any(m < 1 for m in value):
            raise ValueError(f"subdivision counts must be positive, got {value}")
        return value

    @field_validator("refinements")
    @classmethod
    def non_negative_refinements(cls, value: list[int]) -> list[int]:
        if not value or any(r < 0 for r in value):
            raise ValueError(f"refinement counts must be non-negative, got {value}")
        return value

    @field_validator("diffusion", "weight")
    @classmethod
    def known_coefficient(cls, value):
        if isinstance(value, str) and value not in COEFFICIENT_PRESETS:
            try:
                value = float(value)
            except ValueError:
                raise ValueError(f"expected a positive number or one of {sorted(COEFFICIENT_PRESETS)}, got '{value}'")
        if not isinstance(value, str) and value <= 0.0:
            raise ValueError(f"coefficient must be positive, got {value}")
        return value

    @model_validator(mode="after")
    def compatible_ladder(self) -> "RunConfig":
        if self.problem == "laplace" and (self.diffusion not in ("unit", 1.0) or self.weight not in ("unit", 1.0)):
            raise ValueError("problem 'laplace' uses unit coefficients; choose problem 'elliptic' for others")
        if self.way == "multispace" and self.order + self.levels - 1 > 3:
            raise ValueError(
                f"multispace ladder from P{self.order} with {self.levels} levels exceeds P3"
            )
        if self.way == "multigrid" and self.levels > 1 and self.mesh is None:
            bad = [m for m in self.m if m < 2 or m & (m - 1)]
            if bad:
                raise ValueError(f"multigrid ladder needs power-of-two m >= 2, got {bad}")
        return self

    @property
    def diffusion_field(self) -> CoefficientField:
        return resolve_coefficient(self.diffusion)

    @property
    def weight_field(self) -> CoefficientField:
        return resolve_coefficient(self.weight)

    @property
    def on_unit_square(self) -> bool:
        return self.mesh is None

    @classmethod
    def build(cls, **values) -> "RunConfig":
        """Validate raw values, reporting every offending field as one ConfigError."""
        try:
            return cls(**{key: value for key, value in values.items() if value is not None})
        except ValidationError as e:
            problems = "; ".join(
                f"{'.'.join(str(part) for part in error['loc']) or 'config'}: {error['msg']}"
                for error in e.errors()
            )
            raise ConfigError(f"Invalid run configuration: {problems}")
