"""
Framed message connections over asyncio streams.
"""

import asyncio
import time
from typing import Awaitable, Callable, Dict, Optional, Tuple

from ..errors import ConnectionClosedError, FrameError
from ..models.scenario import NodeId
from ..utils.logger import get_logger
from ..core import wire

logger = get_logger("almcast.transport")

READ_CHUNK = 64 * 1024

Handler = Callable[["FramedConnection", wire.Message], Awaitable[None]]
CloseHandler = Callable[["FramedConnection"], None]


def parse_addr(addr: str) -> Tuple[str, int]:
    """
    Split ``host:port``.

    Raises:
        ValueError: Missing or invalid port
    """
    host, sep, port = addr.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"address must be host:port, got '{addr}'")
    return host or "127.0.0.1", int(port)


class FramedConnection:
    """
    One TCP connection carrying wire frames.

    :meth:`serve` starts a reader task that answers pings, resolves pongs and
    hands every other message to the owner's handler.
    """

    def __init__(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        self.reader = reader
        self.writer = writer
        self.peer_node: Optional[NodeId] = None
        self.local_addr = writer.get_extra_info("sockname")
        self.remote_addr = writer.get_extra_info("peername")
        self._decoder = wire.StreamDecoder()
        self._pings: Dict[int, asyncio.Future] = {}
        self._seq = 0
        self._closed = False
        self._closed_locally = False
        self._task: Optional[asyncio.Task] = None

    @classmethod
    async def open(cls, addr: str, timeout_ms: float) -> "FramedConnection":
        """
        Raises:
            asyncio.TimeoutError: No connection within ``timeout_ms``
            OSError: Refused or unreachable
        """
        host, port = parse_addr(addr)
        reader, writer = await asyncio.wait_for(asyncio.open_connection(host, port), timeout_ms / 1000.0)
        return cls(reader, writer)

    @property
    def is_open(self) -> bool:
        return not self._closed

    def __repr__(self) -> str:
        return f"FramedConnection({self.local_addr} -> {self.remote_addr}, peer={self.peer_node})"

    async def send(self, msg: wire.Message) -> None:
        """
        Raises:
            ConnectionClosedError: The connection is gone
        """
        if self._closed:
            raise ConnectionClosedError(f"send on closed connection to {self.peer_node or self.remote_addr}")
        try:
            self.writer.write(wire.encode(msg))
            await self.writer.drain()
        except (ConnectionError, OSError) as e:
            self._closed = True
            raise ConnectionClosedError(str(e)) from e

    async def try_send(self, msg: wire.Message) -> bool:
        try:
            await self.send(msg)
            return True
        except ConnectionClosedError:
            return False

    async def ping(self, timeout_ms: float) -> Optional[float]:
        """Round-trip time of one 1500-byte probe in ms, or None on timeout."""
        self._seq += 1
        seq = self._seq
        future = asyncio.get_running_loop().create_future()
        self._pings[seq] = future
        started = time.perf_counter()
        await self.send(wire.Ping(seq))
        try:
            finished = await asyncio.wait_for(future, timeout_ms / 1000.0)
        except asyncio.TimeoutError:
            self._pings.pop(seq, None)
            return None
        return (finished - started) * 1000.0

    def serve(self, handler: Handler, on_close: Optional[CloseHandler] = None) -> asyncio.Task:
        if self._task is None:
            self._task = asyncio.create_task(self._read_loop(handler, on_close))
        return self._task

    async def _read_loop(self, handler: Handler, on_close: Optional[CloseHandler]) -> None:
        try:
            while True:
                data = await self.reader.read(READ_CHUNK)
                if not data:
                    break
                for msg in self._decoder.feed(data):
                    if isinstance(msg, wire.Ping):
                        await self.send(wire.Pong(msg.seq))
                    elif isinstance(msg, wire.Pong):
                        future = self._pings.pop(msg.seq, None)
                        if future is not None and not future.done():
                            future.set_result(time.perf_counter())
                    else:
                        await handler(self, msg)
        except (ConnectionError, OSError, ConnectionClosedError):
            pass
        except FrameError as e:
            logger.warning(f"dropping connection to {self.peer_node or self.remote_addr}: {e}")
        except asyncio.CancelledError:
            raise
        except Exception as e:
            logger.exception(f"handler failed on {self!r}: {e}")
        finally:
            self._closed = True
            self.writer.close()
            for future in self._pings.values():
                if not future.done():
                    future.set_exception(ConnectionClosedError("connection closed during ping"))
            self._pings.clear()
            if on_close is not None and not self._closed_locally:
                on_close(self)

    async def close(self) -> None:
        """Close from this side; the owner's close handler is not called."""
        self._closed_locally = True
        if self._closed and self.writer.is_closing():
            return
        self._closed = True
        self.writer.close()
        try:
            await self.writer.wait_closed()
        except (ConnectionError, OSError):
            pass


async def start_listener(addr: str, on_connection: Callable[[FramedConnection], None]) -> asyncio.AbstractServer:
    """Listen on ``addr`` and wrap every accepted socket in a FramedConnection."""
    host, port = parse_addr(addr)

    async def accepted(reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        on_connection(FramedConnection(reader, writer))

    return await asyncio.start_server(accepted, host, port)
