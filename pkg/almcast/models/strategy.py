"""
Connection strategies used by measuring end-hosts.
"""

from enum import Enum
from typing import Optional

from pydantic import BaseModel, ConfigDict, Field, model_validator


class StrategyKind(str, Enum):
    """How an EH reacts to a failed or slow connect."""
    BASELINE = "baseline"
    NO_RECONNECT = "noreconnect"
    APP_TIMEOUT = "apptimeout"
    PARTITIONED = "partition"


class StrategyConfig(BaseModel):
    """Strategy selection plus its parameters."""

    model_config = ConfigDict(frozen=True)

    kind: StrategyKind = Field(StrategyKind.BASELINE, description="Strategy kind")
    max_attempts: int = Field(5, ge=1, description="Connect attempts for baseline reconnect")
    timeout_ms: float = Field(10000.0, gt=0, description="Application connect timeout")
    group_count: int = Field(1, ge=1, description="Sub-group count for partitioning")
    inner: Optional["StrategyConfig"] = Field(None, description="Strategy used inside each sub-group")

    @model_validator(mode="after")
    def check_inner(self) -> "StrategyConfig":
        if self.kind is StrategyKind.PARTITIONED:
            if self.inner is None:
                raise ValueError("partitioned strategy needs an inner strategy")
            if self.inner.kind is StrategyKind.PARTITIONED:
                raise ValueError("partitioned strategies cannot nest")
        elif self.inner is not None:
            raise ValueError(f"{self.kind.value} takes no inner strategy")
        return self

    @property
    def effective(self) -> "StrategyConfig":
        """The strategy each probe actually follows."""
        return self.inner if self.kind is StrategyKind.PARTITIONED else self

    @property
    def app_timeout_ms(self) -> Optional[float]:
        eff = self.effective
        return eff.timeout_ms if eff.kind is StrategyKind.APP_TIMEOUT else None

    @property
    def groups(self) -> int:
        return self.group_count if self.kind is StrategyKind.PARTITIONED else 1

    @property
    def label(self) -> str:
        return format_strategy(self)

    @classmethod
    def baseline(cls, max_attempts: int = 5) -> "StrategyConfig":
        return cls(kind=StrategyKind.BASELINE, max_attempts=max_attempts)

    @classmethod
    def no_reconnect(cls) -> "StrategyConfig":
        return cls(kind=StrategyKind.NO_RECONNECT)

    @classmethod
    def app_timeout(cls, timeout_ms: float = 10000.0) -> "StrategyConfig":
        return cls(kind=StrategyKind.APP_TIMEOUT, timeout_ms=timeout_ms)

    @classmethod
    def partitioned(cls, group_count: int, inner: "StrategyConfig") -> "StrategyConfig":
        return cls(kind=StrategyKind.PARTITIONED, group_count=group_count, inner=inner)


StrategyConfig.model_rebuild()


def parse_strategy(text: str) -> StrategyConfig:
    """
    Parse ``baseline[:n]``, ``noreconnect``, ``apptimeout[:ms]`` or
    ``partition:<g>+<inner>``.

    Raises:
        ValueError: Unknown name or bad parameter
    """
    text = text.strip().lower()
    name, _, arg = text.partition(":")
    try:
        if name == StrategyKind.PARTITIONED.value:
            groups, plus, inner = arg.partition("+")
            if not plus:
                raise ValueError("partition needs '+<inner>'")
            return StrategyConfig.partitioned(int(groups), parse_strategy(inner))
        if name == StrategyKind.BASELINE.value:
            return StrategyConfig.baseline(int(arg)) if arg else StrategyConfig.baseline()
        if name == StrategyKind.NO_RECONNECT.value and not arg:
            return StrategyConfig.no_reconnect()
        if name == StrategyKind.APP_TIMEOUT.value:
            return StrategyConfig.app_timeout(float(arg)) if arg else StrategyConfig.app_timeout()
    except ValueError as e:
        raise ValueError(f"invalid strategy '{text}': {e}") from e
    raise ValueError(f"unknown strategy '{text}'")


def _num(value: float) -> str:
    return str(int(value)) if float(value).is_integer() else repr(value)


def format_strategy(strategy: StrategyConfig) -> str:
    """Inverse of :func:`parse_strategy`."""
    kind = strategy.kind
    if kind is StrategyKind.BASELINE:
        return f"baseline:{strategy.max_attempts}"
    if kind is StrategyKind.NO_RECONNECT:
        return "noreconnect"
    if kind is StrategyKind.APP_TIMEOUT:
        return f"apptimeout:{_num(strategy.timeout_ms)}"
    return f"partition:{strategy.group_count}+{format_strategy(strategy.inner)}"
