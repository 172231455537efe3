from typing import Optional

from pydantic import BaseModel, ConfigDict, Field

CSV_COLUMNS = [
    "level", "h_or_p", "dofs", "lambda", "err_lambda", "err_energy",
    "err_l2", "rate_lambda", "rate_energy", "wall_ms",
]


def _csv_value(value) -> str:
    """Shortest round-trip text; empty for missing values."""
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(float(value))
    return str(value)


class ConvergenceRow(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    level: int
    h_or_p: float
    dofs: int
    lambda_: float = Field(alias="lambda")
    err_lambda: Optional[float] = None
    err_energy: Optional[float] = None
    err_l2: Optional[float] = None
    rate_lambda: Optional[float] = None
    rate_energy: Optional[float] = None
    wall_ms: float = 0.0

    # Summary-only fields, kept out of the CSV
    m: Optional[int] = Field(default=None, exclude=True)
    stage: str = Field(default="direct", exclude=True)
    saturated: bool = Field(default=False, exclude=True)

    def csv_record(self) -> dict[str, str]:
        data = self.model_dump(by_alias=True)
        return {column: _csv_value(data[column]) for column in CSV_COLUMNS}


class RunReport(BaseModel):
    method: str                        # direct | two-grid | mlc
    way: Optional[str] = None
    index: int
    reference_label: str
    reference_value: float
    rows: list[ConvergenceRow]
