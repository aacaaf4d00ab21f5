import asyncio
import time

import pytest

from almcast.core import wire
from almcast.core.overlay import Direction, PeerConn
from almcast.errors import ConnectionClosedError
from almcast.live.monitor import MonitorServer
from almcast.live.overlay import CpuLoadSampler, OverlayNode, parse_peers
from almcast.live.smoke import SMOKE_TIMING, run_real_smoke
from almcast.live.transport import FramedConnection, parse_addr, start_listener
from almcast.models.scenario import NodeId

HOST = "127.0.0.1"


class TestParseAddr:
    def test_host_and_port(self):
        assert parse_addr("10.0.0.1:47000") == ("10.0.0.1", 47000)
        assert parse_addr(":9000") == ("127.0.0.1", 9000)

    def test_missing_port(self):
        with pytest.raises(ValueError):
            parse_addr("localhost")


class TestParsePeers:
    def test_position_gives_id(self):
        assert parse_peers("10.0.0.1:47001, 10.0.0.2:47001") == {
            NodeId.oh(0): "10.0.0.1:47001",
            NodeId.oh(1): "10.0.0.2:47001",
        }

    def test_explicit_ids(self):
        assert parse_peers("4=h:1,7=h:2") == {NodeId.oh(4): "h:1", NodeId.oh(7): "h:2"}
        assert parse_peers("") == {}

    def test_bad_entries(self):
        with pytest.raises(ValueError):
            parse_peers("x=h:1")
        with pytest.raises(ValueError):
            parse_peers("h1,h2:5")


class _Clock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


class TestCpuLoadSampler:
    def test_share_of_wall_time(self):
        cpu, wall = _Clock(), _Clock()
        sampler = CpuLoadSampler(cpu, wall)
        cpu.t, wall.t = 0.5, 2.0
        assert sampler.sample() == pytest.approx(0.25)
        cpu.t, wall.t = 4.5, 4.0
        assert sampler.sample() == 1.0
        assert sampler.sample() == 0.0

    def test_tracks_busy_loop(self):
        sampler = CpuLoadSampler()
        deadline = time.monotonic() + 0.3
        spins = 0
        while time.monotonic() < deadline:
            spins += 1
        busy = sampler.sample()
        time.sleep(0.3)
        idle = sampler.sample()
        assert busy > 0.5
        assert idle < 0.2
        assert busy > idle

    def test_fixed_load_overrides_sample(self):
        node = OverlayNode(NodeId.oh(0), f"{HOST}:47231", SMOKE_TIMING, load=0.3)
        assert node.current_load() == 0.3
        assert 0.0 <= OverlayNode(NodeId.oh(1), f"{HOST}:47232", SMOKE_TIMING).current_load() <= 1.0


class _RecordingConn:
    def __init__(self):
        self.is_open = True
        self.sent = []
        self.on_send = None

    async def try_send(self, msg):
        self.sent.append(msg)
        if self.on_send is not None:
            self.on_send()
        return True


class TestRelay:
    @pytest.mark.asyncio
    async def test_targets_closing_mid_relay_still_handled(self):
        node = OverlayNode(NodeId.oh(0), f"{HOST}:47241", SMOKE_TIMING)
        to_b, to_c, to_eh = _RecordingConn(), _RecordingConn(), _RecordingConn()
        node.peers = {
            NodeId.oh(1): PeerConn(NodeId.oh(1), Direction.OUTGOING, to_b),
            NodeId.oh(2): PeerConn(NodeId.oh(2), Direction.INCOMING, to_c),
        }
        node.local_ehs = {NodeId.eh(3): to_eh}

        def drop_others():
            node.peers.pop(NodeId.oh(2), None)
            node.local_ehs.pop(NodeId.eh(3), None)

        to_b.on_send = drop_others
        await node._on_data(to_eh, wire.Data(1, NodeId.eh(0), wire.Hop.SOURCE))
        assert [m.hop for m in to_b.sent] == [wire.Hop.PEER]
        assert len(to_c.sent) == 1
        assert len(to_eh.sent) == 1
        # a repeat of the same message is not relayed again
        await node._on_data(to_eh, wire.Data(1, NodeId.eh(0), wire.Hop.PEER))
        assert len(to_b.sent) == 1


class TestFramedConnection:
    @pytest.mark.asyncio
    async def test_ping_and_messages(self):
        received = []
        server_side = []

        async def on_msg(conn, msg):
            received.append(msg)

        def accepted(conn):
            server_side.append(conn)
            conn.serve(on_msg)

        server = await start_listener(f"{HOST}:47211", accepted)
        try:
            client = await FramedConnection.open(f"{HOST}:47211", 2000)
            client.serve(on_msg)
            rtt = await client.ping(2000)
            assert rtt is not None and rtt >= 0
            await client.send(wire.Assign(NodeId.oh(4)))
            for _ in range(100):
                if received:
                    break
                await asyncio.sleep(0.01)
            assert received == [wire.Assign(NodeId.oh(4))]
            await client.close()
            with pytest.raises(ConnectionClosedError):
                await client.send(wire.Bye())
        finally:
            for conn in server_side:
                await conn.close()
            server.close()
            await server.wait_closed()

    @pytest.mark.asyncio
    async def test_refused(self):
        with pytest.raises(OSError):
            await FramedConnection.open(f"{HOST}:47219", 1000)


class TestMonitorServer:
    @pytest.mark.asyncio
    async def test_directory_lists_registered_ohs(self, tmp_path):
        mh = MonitorServer(NodeId.mh(), f"{HOST}:47221", SMOKE_TIMING, log_path=tmp_path / "mh.csv")
        await mh.start()
        try:
            replies = asyncio.Queue()

            async def collect(conn, msg):
                await replies.put(msg)

            oh = await FramedConnection.open(f"{HOST}:47221", 2000)
            oh.serve(collect)
            await oh.send(wire.Hello(NodeId.oh(2), f"{HOST}:47222"))
            first = await asyncio.wait_for(replies.get(), 2.0)
            assert first == wire.Directory(())

            eh = await FramedConnection.open(f"{HOST}:47221", 2000)
            eh.serve(collect)
            await eh.send(wire.Hello(NodeId.eh(0)))
            listing = await asyncio.wait_for(replies.get(), 2.0)
            assert listing.entries == ((NodeId.oh(2), f"{HOST}:47222"),)
            assert (tmp_path / "mh.csv").read_text().startswith("eh_id,oh_id,cost_ms,decision_us")
            await oh.close()
            await eh.close()
        finally:
            await mh.stop()


@pytest.mark.slow
class TestRealSmoke:
    @pytest.mark.asyncio
    async def test_loopback_deployment(self):
        report = await asyncio.wait_for(run_real_smoke(base_port=47300, host=HOST), 60.0)
        failed = [c.name for c in report.checks if not c.passed]
        assert report.error is None
        assert not failed
        assert report.passed
        assert len(report.checks) == 6
