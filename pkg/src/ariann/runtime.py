"""Online execution fabric: transports, framed messaging, and round accounting.

Roles: a trusted dealer produces correlated randomness offline (see
``dealer``); two evaluator parties then run the same program over a Session.
A round is one matched send+receive exchange between the parties within a
protocol step; primitives batch whole tensors into a single frame, so the
per-operation round counts are input-size independent.

Wire format (also in LAYOUT.md): frame = length u32 LE (= payload + 1)
| type tag byte | payload. TCP endpoints honor ARIANN_TIMEOUT_MS.
"""

from __future__ import annotations

import os
import queue
import socket
import struct
import threading
from dataclasses import dataclass, field

FRAME_REVEAL = 0x01
FRAME_MASKED = 0x02
FRAME_TRIPLE_DELTA = 0x03
FRAME_CONTROL = 0x04
FRAME_ABORT = 0x05

_FRAME_TAGS = {FRAME_REVEAL, FRAME_MASKED, FRAME_TRIPLE_DELTA, FRAME_CONTROL,
               FRAME_ABORT}

MAX_PAYLOAD = 2**32 - 2

DEFAULT_TIMEOUT_MS = 30_000


def timeout_seconds() -> float:
    return int(os.environ.get("ARIANN_TIMEOUT_MS", DEFAULT_TIMEOUT_MS)) / 1000.0


class SessionAbort(RuntimeError):
    """Protocol aborted: peer failure, timeout, or frame desync."""


@dataclass
class Frame:
    tag: int
    payload: bytes


def encode_frame(frame: Frame) -> bytes:
    if len(frame.payload) > MAX_PAYLOAD:
        raise ValueError("payload too large for a frame")
    return struct.pack("<IB", len(frame.payload) + 1, frame.tag) + frame.payload


def decode_frame(data: bytes) -> tuple[Frame, bytes]:
    """Decode one frame from the front of ``data``; returns (frame, rest)."""
    if len(data) < 5:
        raise SessionAbort("truncated frame header")
    (length,) = struct.unpack("<I", data[:4])
    if length < 1 or len(data) < 4 + length:
        raise SessionAbort("truncated frame payload")
    return Frame(data[4], data[5:4 + length]), data[4 + length:]


@dataclass
class RoundLedger:
    """Per-operation counters of online rounds, bytes, and elements."""

    rounds: dict = field(default_factory=dict)
    bytes_sent: dict = field(default_factory=dict)
    bytes_received: dict = field(default_factory=dict)
    elements: dict = field(default_factory=dict)

    def record(self, op: str, sent: int, received: int, elements: int):
        self.rounds[op] = self.rounds.get(op, 0) + 1
        self.bytes_sent[op] = self.bytes_sent.get(op, 0) + sent
        self.bytes_received[op] = self.bytes_received.get(op, 0) + received
        self.elements[op] = self.elements.get(op, 0) + elements

    def total_rounds(self) -> int:
        return sum(self.rounds.values())

    def total_bytes_sent(self) -> int:
        return sum(self.bytes_sent.values())

    def as_dict(self) -> dict:
        return {
            "rounds": dict(self.rounds),
            "bytes_sent": dict(self.bytes_sent),
            "bytes_received": dict(self.bytes_received),
            "elements": dict(self.elements),
        }

    def snapshot(self) -> dict:
        return {op: n for op, n in self.rounds.items()}


# ---------------------------------------------------------------------------
# Transports
# ---------------------------------------------------------------------------

class LocalTransport:
    """In-process duplex channel backed by a pair of FIFO queues."""

    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._inbox = inbox
        self._outbox = outbox
        self._closed = False

    def send(self, data: bytes):
        if self._closed:
            raise SessionAbort("transport closed")
        self._outbox.put(data)

    def recv(self) -> bytes:
        try:
            data = self._inbox.get(timeout=timeout_seconds())
        except queue.Empty:
            raise SessionAbort("timed out waiting for peer") from None
        if data is None:
            raise SessionAbort("peer closed the channel")
        return data

    def close(self):
        if not self._closed:
            self._closed = True
            self._outbox.put(None)


def local_pair() -> tuple[LocalTransport, LocalTransport]:
    a, b = queue.Queue(), queue.Queue()
    return LocalTransport(a, b), LocalTransport(b, a)


class TcpTransport:
    """Length-framed TCP channel; sends run in a helper thread so that two
    peers pushing large frames simultaneously cannot deadlock."""

    def __init__(self, sock: socket.socket):
        self._sock = sock
        self._sock.settimeout(timeout_seconds())
        self._buf = b""

    def send(self, data: bytes):
        try:
            self._sock.sendall(data)
        except OSError as exc:
            raise SessionAbort(f"send failed: {exc}") from None

    def send_async(self, data: bytes) -> threading.Thread:
        worker = threading.Thread(target=self.send, args=(data,), daemon=True)
        worker.start()
        return worker

    def recv(self) -> bytes:
        # One framed message per recv() call.
        while True:
            if len(self._buf) >= 5:
                (length,) = struct.unpack("<I", self._buf[:4])
                if len(self._buf) >= 4 + length:
                    out, self._buf = self._buf[:4 + length], self._buf[4 + length:]
                    return out
            try:
                chunk = self._sock.recv(1 << 20)
            except socket.timeout:
                raise SessionAbort("timed out waiting for peer") from None
            except OSError as exc:
                raise SessionAbort(f"recv failed: {exc}") from None
            if not chunk:
                raise SessionAbort("peer closed the connection")
            self._buf += chunk

    def close(self):
        try:
            self._sock.close()
        except OSError:
            pass


def tcp_listen(host: str, port: int) -> tuple[TcpTransport, int]:
    """Accept a single peer connection; returns (transport, bound_port)."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    srv.settimeout(timeout_seconds())
    bound = srv.getsockname()[1]
    try:
        conn, _ = srv.accept()
    except socket.timeout:
        raise SessionAbort("no peer connected before timeout") from None
    finally:
        srv.close()
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return TcpTransport(conn), bound


def tcp_connect(host: str, port: int, attempts: int = 50) -> TcpTransport:
    import time
    last = None
    for _ in range(attempts):
        try:
            sock = socket.create_connection((host, port), timeout=timeout_seconds())
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return TcpTransport(sock)
        except OSError as exc:
            last = exc
            time.sleep(0.1)
    raise SessionAbort(f"could not connect to {host}:{port}: {last}")


# ---------------------------------------------------------------------------
# Session
# ---------------------------------------------------------------------------

class Session:
    """One party's end of an online 2-party computation."""

    def __init__(self, party: int, transport):
        if party not in (0, 1):
            raise ValueError("party must be 0 or 1")
        self.party = party
        self.transport = transport
        self.ledger = RoundLedger()
        self.open = True

    def exchange(self, op: str, tag: int, payload: bytes, elements: int) -> bytes:
        """Send one frame and receive the peer's matching frame (one round)."""
        if not self.open:
            raise SessionAbort("session is closed")
        out = encode_frame(Frame(tag, payload))
        sender = None
        if isinstance(self.transport, TcpTransport):
            sender = self.transport.send_async(out)
        else:
            self.transport.send(out)
        try:
            raw = self.transport.recv()
        except SessionAbort:
            self.open = False
            raise
        finally:
            if sender is not None:
                sender.join()
        frame, rest = decode_frame(raw)
        if rest:
            self.open = False
            raise SessionAbort("unexpected trailing bytes in frame")
        if frame.tag == FRAME_ABORT:
            self.open = False
            raise SessionAbort(f"peer aborted: {frame.payload.decode(errors='replace')}")
        if frame.tag != tag:
            self.open = False
            raise SessionAbort(f"frame desync: expected tag {tag}, got {frame.tag}")
        self.ledger.record(op, len(payload), len(frame.payload), elements)
        return frame.payload

    def abort(self, reason: str = ""):
        if self.open:
            try:
                self.transport.send(encode_frame(Frame(FRAME_ABORT, reason.encode())))
            except Exception:
                pass
            self.open = False

    def close(self):
        self.open = False
        self.transport.close()


def run_session(party: int, transport, program):
    """Run ``program(session)``; returns (result, ledger)."""
    session = Session(party, transport)
    try:
        result = program(session)
    except Exception:
        session.abort("program failed")
        raise
    finally:
        session.close()
    return result, session.ledger


def run_local_pair(program0, program1=None):
    """Run two programs over the in-process transport, one thread per party.

    Returns ((result0, ledger0), (result1, ledger1)). Exceptions from either
    party are re-raised in the caller.
    """
    if program1 is None:
        program1 = program0
    t0, t1 = local_pair()
    results = [None, None]
    errors = [None, None]

    def runner(party, transport, program):
        try:
            results[party] = run_session(party, transport, program)
        except BaseException as exc:  # propagate to the caller
            errors[party] = exc
            transport.close()

    th0 = threading.Thread(target=runner, args=(0, t0, program0))
    th1 = threading.Thread(target=runner, args=(1, t1, program1))
    th0.start(); th1.start()
    th0.join(); th1.join()
    for err in errors:
        if err is not None:
            raise err
    return results[0], results[1]


def run_tcp_pair(program0, program1=None, host: str = "127.0.0.1"):
    """As run_local_pair but over a loopback TCP connection."""
    if program1 is None:
        program1 = program0
    port_box = queue.Queue()
    results = [None, None]
    errors = [None, None]

    def listener():
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind((host, 0))
        srv.listen(1)
        srv.settimeout(timeout_seconds())
        port_box.put(srv.getsockname()[1])
        try:
            conn, _ = srv.accept()
        finally:
            srv.close()
        conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        try:
            results[0] = run_session(0, TcpTransport(conn), program0)
        except BaseException as exc:
            errors[0] = exc

    def dialer():
        transport = tcp_connect(host, port_box.get(timeout=timeout_seconds()))
        try:
            results[1] = run_session(1, transport, program1)
        except BaseException as exc:
            errors[1] = exc

    th0 = threading.Thread(target=listener)
    th1 = threading.Thread(target=dialer)
    th0.start(); th1.start()
    th0.join(); th1.join()
    for err in errors:
        if err is not None:
            raise err
    return results[0], results[1]
