"""
Runtime configuration for almcast.
"""

import os
from pathlib import Path
from typing import Literal, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

from .scenario import TimingParams

# Load environment variables
load_dotenv()


class McastConfig(BaseModel):
    """Process-wide settings: logging, output location and live-mode timers."""

    # Logging
    log_level: str = Field("INFO", description="Logging level")
    log_format: Literal["json", "text"] = Field("text", description="Log format")
    log_file: Optional[Path] = Field(None, description="Optional rotating log file")

    # Output
    output_dir: Path = Field(Path("output/results"), description="Directory for CSV results")

    # Runs
    default_seed: int = Field(1, ge=0, description="Seed used when none is given")
    w_load: float = Field(0.0, ge=0, description="Load penalty, ms per unit load")

    # Live-mode timers
    load_interval_ms: float = Field(5000.0, gt=0, description="OH load report period")
    missed_reports: int = Field(3, ge=1, description="Missed load reports before an OH is dead")
    probe_timeout_ms: float = Field(5000.0, gt=0, description="Per-probe echo timeout")
    connect_timeout_ms: float = Field(75000.0, gt=0, description="OS-level connect cap")
    reconnect_base_ms: float = Field(1000.0, gt=0, description="First reconnect backoff")
    reconnect_cap_ms: float = Field(30000.0, gt=0, description="Backoff ceiling")
    reconnect_max_retries: int = Field(6, ge=1, description="Reconnects before giving up on a peer")

    @field_validator("output_dir")
    @classmethod
    def create_output_dir(cls, v: Path) -> Path:
        """Ensure output directory exists."""
        v.mkdir(parents=True, exist_ok=True)
        return v

    @classmethod
    def from_env(cls) -> "McastConfig":
        """Create config from environment variables."""
        log_file = os.getenv("MCAST_LOG_FILE")
        return cls(
            log_level=os.getenv("MCAST_LOG_LEVEL", "INFO"),
            log_format=os.getenv("MCAST_LOG_FORMAT", "text"),
            log_file=Path(log_file) if log_file else None,
            output_dir=Path(os.getenv("MCAST_OUTPUT_DIR", "output/results")),
            default_seed=int(os.getenv("MCAST_SEED", "1")),
            w_load=float(os.getenv("MCAST_W_LOAD", "0")),
            load_interval_ms=float(os.getenv("MCAST_LOAD_INTERVAL_MS", "5000")),
            missed_reports=int(os.getenv("MCAST_MISSED_REPORTS", "3")),
            probe_timeout_ms=float(os.getenv("MCAST_PROBE_TIMEOUT_MS", "5000")),
            connect_timeout_ms=float(os.getenv("MCAST_CONNECT_TIMEOUT_MS", "75000")),
            reconnect_base_ms=float(os.getenv("MCAST_RECONNECT_BASE_MS", "1000")),
            reconnect_cap_ms=float(os.getenv("MCAST_RECONNECT_CAP_MS", "30000")),
            reconnect_max_retries=int(os.getenv("MCAST_RECONNECT_MAX_RETRIES", "6")),
        )

    def timing(self, **overrides) -> TimingParams:
        """TimingParams for live mode, with optional per-call overrides."""
        values = dict(
            os_cap_ms=self.connect_timeout_ms,
            probe_timeout_ms=self.probe_timeout_ms,
            load_interval_ms=self.load_interval_ms,
            missed_reports=self.missed_reports,
            reconnect_base_ms=self.reconnect_base_ms,
            reconnect_cap_ms=self.reconnect_cap_ms,
            reconnect_max_retries=self.reconnect_max_retries,
        )
        values.update(overrides)
        return TimingParams(**values)
