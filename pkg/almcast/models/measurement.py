"""
Measurement results exchanged between end-hosts and the monitor.
"""

from enum import Enum
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .scenario import NodeId


class SampleStatus(str, Enum):
    OK = "ok"
    CONN_FAILED = "conn_failed"
    TIMED_OUT = "timed_out"


class LatencySample(BaseModel):
    """One EH->OH probe: connect time plus three RTTs, or a failure with its elapsed time."""

    model_config = ConfigDict(frozen=True)

    oh: NodeId
    status: SampleStatus = SampleStatus.OK
    conn_ms: float = Field(0.0, ge=0)
    lat_ms: Optional[Tuple[float, float, float]] = None
    elapsed_ms: Optional[float] = Field(None, ge=0)

    @model_validator(mode="after")
    def check_status(self) -> "LatencySample":
        if self.status is SampleStatus.OK:
            if self.lat_ms is None or self.elapsed_ms is not None:
                raise ValueError("ok samples carry three latencies and no elapsed time")
            if any(v < 0 for v in self.lat_ms):
                raise ValueError("latencies must be >= 0")
        elif self.lat_ms is not None or self.elapsed_ms is None:
            raise ValueError(f"{self.status.value} samples carry only elapsed_ms")
        return self

    @classmethod
    def ok(cls, oh: NodeId, conn_ms: float, lat1: float, lat2: float, lat3: float) -> "LatencySample":
        return cls(oh=oh, conn_ms=conn_ms, lat_ms=(lat1, lat2, lat3))

    @classmethod
    def conn_failed(cls, oh: NodeId, elapsed_ms: float) -> "LatencySample":
        return cls(oh=oh, status=SampleStatus.CONN_FAILED, elapsed_ms=elapsed_ms)

    @classmethod
    def timed_out(cls, oh: NodeId, elapsed_ms: float) -> "LatencySample":
        return cls(oh=oh, status=SampleStatus.TIMED_OUT, elapsed_ms=elapsed_ms)

    @property
    def is_ok(self) -> bool:
        return self.status is SampleStatus.OK

    @property
    def total_ms(self) -> float:
        """Conn + CummLat for ok samples, the elapsed time otherwise."""
        if self.is_ok:
            lat1, lat2, lat3 = self.lat_ms
            return self.conn_ms + lat1 + lat2 + lat3
        return self.elapsed_ms


class MeasurementReport(BaseModel):
    """An EH's full probe result; ``m_i_ms`` is the max sample total."""

    model_config = ConfigDict(frozen=True)

    eh: NodeId
    samples: Tuple[LatencySample, ...] = Field(..., min_length=1)
    m_i_ms: float = Field(..., ge=0)

    def ok_samples(self) -> List[LatencySample]:
        return [s for s in self.samples if s.is_ok]

    @property
    def usable(self) -> bool:
        return any(s.is_ok for s in self.samples)


class Assignment(BaseModel):
    model_config = ConfigDict(frozen=True)

    eh: NodeId
    oh: NodeId
    cost_ms: float
    decision_us: float = 0.0
