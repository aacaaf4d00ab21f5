"""
Socket mode: the same protocol over asyncio TCP streams.
"""

from .endhost import EndHostClient
from .monitor import MonitorServer
from .overlay import OverlayNode
from .smoke import SmokeReport, run_real_smoke

__all__ = ["EndHostClient", "MonitorServer", "OverlayNode", "SmokeReport", "run_real_smoke"]
