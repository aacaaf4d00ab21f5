"""
Shared scenarios for the test suite.

``uniform`` puts every node in one region behind a jitter-free 10 ms link
with a 5 ms handshake, so a probe round trip is exactly 20 ms and an EH
finishes measuring at 5 + 3 * 20 = 65 ms.
"""

import pytest

from almcast.models.measurement import LatencySample, MeasurementReport
from almcast.models.scenario import NodeId, load_scenario
from almcast.core.endhost import build_report

UNIFORM = """\
[oh] region=a count=3
[eh] region=a count=4
[mh] region=a
[link] from=* to=* base_ms=10 fast_ms=5
"""

# 4 OH / 6 EH on the uniform link, for partitioned runs and drills
UNIFORM_WIDE = """\
[oh] region=a count=4
[eh] region=a count=6
[mh] region=a
[link] from=* to=* base_ms=10 fast_ms=5
"""

TAIL = """\
[oh] region=a count=3
[eh] region=a count=4
[mh] region=a
[link] from=* to=* base_ms=10 fast_ms=5 slow_p=0.5 slow_ms=20000
[run] seed=3
"""


@pytest.fixture
def uniform_spec():
    return load_scenario(UNIFORM)


@pytest.fixture
def wide_spec():
    return load_scenario(UNIFORM_WIDE)


@pytest.fixture
def tail_spec():
    return load_scenario(TAIL)


def ok_sample(oh: int, rtt_ms: float, conn_ms: float = 5.0) -> LatencySample:
    return LatencySample.ok(NodeId.oh(oh), conn_ms, rtt_ms, rtt_ms, rtt_ms)


def report_for(eh: int, edges_ms: dict) -> MeasurementReport:
    """Report whose OH ``k`` has mean round trip ``edges_ms[k]``; None marks a timeout."""
    samples = [
        ok_sample(oh, ms) if ms is not None else LatencySample.timed_out(NodeId.oh(oh), 10000.0)
        for oh, ms in sorted(edges_ms.items())
    ]
    return build_report(NodeId.eh(eh), samples)
