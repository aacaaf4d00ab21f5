import random
import struct
import time

import pytest

from almcast.core import wire
from almcast.errors import FrameError, NeedMoreData
from almcast.models.measurement import LatencySample, MeasurementReport
from almcast.models.scenario import NodeId, Role

from tests.conftest import report_for


def _random_message(rng: random.Random) -> wire.Message:
    kind = rng.randrange(12)
    if kind == 0:
        role = rng.choice([Role.OH, Role.EH, Role.MH])
        listen = rng.choice([None, f"10.0.0.{rng.randrange(256)}:{rng.randrange(1, 65536)}"])
        return wire.Hello(NodeId(role, rng.randrange(2 ** 32)), listen)
    if kind == 1:
        return wire.Ping(rng.randrange(2 ** 32))
    if kind == 2:
        return wire.Pong(rng.randrange(2 ** 32))
    if kind == 3:
        samples = []
        for oh in rng.sample(range(1000), rng.randint(1, 6)):
            if rng.random() < 0.7:
                samples.append(LatencySample.ok(NodeId.oh(oh), rng.uniform(0, 5000),
                                                *(rng.uniform(0, 900) for _ in range(3))))
            else:
                samples.append(LatencySample.timed_out(NodeId.oh(oh), rng.uniform(0, 75000)))
        report = MeasurementReport(eh=NodeId.eh(rng.randrange(10000)), samples=tuple(samples),
                                   m_i_ms=max(s.total_ms for s in samples))
        return wire.MeasReport(report)
    if kind == 4:
        return wire.Assign(NodeId.oh(rng.randrange(2 ** 32)))
    if kind == 5:
        return wire.Reject(rng.choice(["", "no usable OH", "überlastet"]))
    if kind == 6:
        return wire.LoadReport(rng.randrange(65536))
    if kind == 7:
        return wire.Data(rng.randrange(2 ** 64), NodeId.eh(rng.randrange(2 ** 32)),
                         rng.choice([wire.Hop.SOURCE, wire.Hop.PEER]), rng.randbytes(rng.randrange(64)))
    if kind == 8:
        return wire.Bye()
    if kind == 9:
        return wire.PeerMeas(rng.choice([None, rng.randrange(wire.NO_LATENCY)]))
    if kind == 10:
        return wire.LinkReport(NodeId.oh(rng.randrange(100)), rng.choice([None, rng.randrange(10 ** 6)]))
    entries = tuple((NodeId.oh(i), f"127.0.0.1:{47000 + i}") for i in range(rng.randrange(5)))
    return wire.Directory(entries)


class TestFrames:
    def test_ping_frame_is_1500_bytes(self):
        for seq in (0, 1, 2 ** 32 - 1):
            assert len(wire.encode(wire.Ping(seq))) == 1500

    def test_prebuilt_ping_frames_match_codec(self):
        for seq in (0, 1, 77, 2 ** 32 - 1):
            assert wire.encode_ping(seq) == wire.encode(wire.Ping(seq))
            assert wire.encode_pong(seq) == wire.encode(wire.Pong(seq))
            assert wire.decode_frame(bytearray(wire.encode_ping(seq))) == wire.Ping(seq)
            assert wire.decode_frame(wire.encode_pong(seq)) == wire.Pong(seq)
        with pytest.raises(FrameError):
            wire.encode_ping(2 ** 32)

    def test_header(self):
        frame = wire.encode(wire.Assign(NodeId.oh(7)))
        assert frame[:4] == struct.pack(">I", 5)
        assert frame[4] == wire.MsgType.ASSIGN

    def test_report_carries_status(self):
        report = report_for(3, {0: 20.0, 1: None})
        decoded = wire.decode_frame(wire.encode(wire.MeasReport(report)))
        assert decoded.report == report

    def test_load_report_scaling(self):
        assert wire.LoadReport.from_load(1.0).level == 65535
        assert wire.LoadReport.from_load(0.5).load == pytest.approx(0.5, abs=1e-4)
        with pytest.raises(FrameError):
            wire.LoadReport.from_load(1.5)

    def test_random_messages_survive_encoding(self):
        rng = random.Random(2024)
        for _ in range(10_000):
            msg = _random_message(rng)
            assert wire.decode_frame(wire.encode(msg)) == msg


class TestDecodeErrors:
    def test_need_more_data(self):
        frame = wire.encode(wire.Pong(1))
        with pytest.raises(NeedMoreData):
            wire.decode(frame[:3])
        with pytest.raises(NeedMoreData):
            wire.decode(frame[:-1])

    def test_unknown_type(self):
        with pytest.raises(FrameError):
            wire.decode(struct.pack(">IB", 1, 0x7F))

    def test_zero_length(self):
        with pytest.raises(FrameError):
            wire.decode(struct.pack(">I", 0))

    def test_oversize_length(self):
        with pytest.raises(FrameError):
            wire.decode(struct.pack(">IB", wire.MAX_PAYLOAD + 2, wire.MsgType.DATA))

    def test_truncated_payload(self):
        with pytest.raises(FrameError):
            wire.decode_frame(struct.pack(">IB", 3, wire.MsgType.PONG) + b"\x00\x01")

    def test_short_ping(self):
        with pytest.raises(FrameError):
            wire.decode_frame(struct.pack(">IBI", 5, wire.MsgType.PING, 1))

    def test_trailing_bytes(self):
        with pytest.raises(FrameError):
            wire.decode_frame(wire.encode(wire.Bye()) + b"\x00")


class TestStreamDecoder:
    def test_chunking_does_not_change_messages(self):
        rng = random.Random(99)
        for _ in range(200):
            msgs = [_random_message(rng) for _ in range(rng.randint(1, 8))]
            stream = b"".join(wire.encode(m) for m in msgs)
            decoder = wire.StreamDecoder()
            out, pos = [], 0
            while pos < len(stream):
                step = rng.randint(1, 700)
                out.extend(decoder.feed(stream[pos:pos + step]))
                pos += step
            assert out == msgs
            assert decoder.pending == 0
            decoder.close()

    def test_close_inside_frame(self):
        decoder = wire.StreamDecoder()
        assert decoder.feed(wire.encode(wire.Pong(3))[:6]) == []
        with pytest.raises(FrameError):
            decoder.close()

    def test_large_read_decodes_in_linear_time(self):
        frames = [wire.encode(wire.Assign(NodeId.oh(i % 40))) for i in range(50_000)]
        tail = wire.encode(wire.Pong(1))[:5]
        decoder = wire.StreamDecoder()
        started = time.perf_counter()
        out = decoder.feed(b"".join(frames) + tail)
        elapsed = time.perf_counter() - started
        assert len(out) == 50_000
        assert out[-1] == wire.Assign(NodeId.oh(49_999 % 40))
        assert decoder.pending == len(tail)
        assert elapsed < 2.0

    def test_bad_frame_keeps_earlier_frames_consumed(self):
        decoder = wire.StreamDecoder()
        good = wire.encode(wire.Bye())
        with pytest.raises(FrameError):
            decoder.feed(good + struct.pack(">IB", 1, 0xEE))
        assert decoder.pending == 5
