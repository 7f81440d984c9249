import json
import math
from typing import Dict, List, Optional

from pydantic import BaseModel

from app.utils.errors import ParameterError


def finite_or_none(value: Optional[float]) -> Optional[float]:
    if value is None or math.isnan(value):
        return None
    return float(value)


# --------------------------
# Training log
# --------------------------


class EpochRecord(BaseModel):
    epoch: int
    total: float
    occ: float
    lov: float
    cls: float
    cons: float
    disagreement: float
    lr: float
    val_miou: Optional[float] = None
    val_iou: Optional[float] = None
    wall_time: float = 0.0


class MetricsLog(BaseModel):
    records: List[EpochRecord] = []

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ParameterError(
                f"epoch {record.epoch} does not follow epoch {self.records[-1].epoch}"
            )
        self.records.append(record)

    def rows(self) -> List[Dict]:
        return [r.model_dump() for r in self.records]

    def fingerprint(self) -> str:
        """Every logged number except wall time, for determinism comparisons."""
        return json.dumps([r.model_dump(exclude={"wall_time"}) for r in self.records])

    def __len__(self) -> int:
        return len(self.records)


# --------------------------
# Evaluation
# --------------------------


class EvaluationResult(BaseModel):
    miou: Optional[float]
    iou: Optional[float]
    per_class: Dict[str, Optional[float]]
    scenes: int


class EvaluateRequest(BaseModel):
    checkpoint: str
    scenes: str


# --------------------------
# Ablation
# --------------------------


class AblationRow(BaseModel):
    name: str
    seed: int
    M: Optional[int] = None  # 2D prototypes per view
    miou: Optional[float] = None
    iou: Optional[float] = None
    final_loss: Optional[float] = None
    disagreement: Optional[float] = None
    overrides: str = "{}"


class AblationSummaryRow(BaseModel):
    name: str
    runs: int
    M: Optional[int] = None
    miou: str
    iou: str
    final_loss: str
    disagreement: str


# --------------------------
# Verification suites
# --------------------------


class CheckResult(BaseModel):
    name: str
    suite: str  # gradient | oracle
    instances: int
    worst: Optional[float]
    criterion: str  # "<=" or ">"
    tolerance: float
    passed: bool
    seconds: float = 0.0
    detail: str = ""


class CheckSuiteReport(BaseModel):
    suite: str
    results: List[CheckResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)
