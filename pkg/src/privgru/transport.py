"""Two-party channel with framing, phase tagging and byte accounting.

Frame layout (normative): 4-byte big-endian payload length, 1-byte
message type, 1-byte phase tag, then the payload.  Unknown message
types poison the connection.  Every byte written to a channel lands in
exactly one (phase, msg_type, direction) accounting cell.
"""

import queue
import socket
import struct
import time
from collections import defaultdict

MSG_PK = 1
MSG_MASKED_CT = 2
MSG_GC_TABLES = 3
MSG_OT = 4
MSG_REMASKED_CT = 5
MSG_CONTROL = 6
_MSG_NAMES = {1: "PK", 2: "MASKED_CT", 3: "GC_TABLES", 4: "OT_MSG",
              5: "REMASKED_CT", 6: "CONTROL"}

PHASE_SETUP = 0
PHASE_OFFLINE = 1
PHASE_ONLINE = 2
_PHASE_NAMES = {0: "setup", 1: "offline", 2: "online"}


class ChannelClosed(RuntimeError):
    pass


class FrameError(RuntimeError):
    pass


class Frame:
    __slots__ = ("msg_type", "phase", "payload")

    def __init__(self, msg_type, phase, payload=b""):
        self.msg_type = msg_type
        self.phase = phase
        self.payload = payload

    def encode(self):
        return struct.pack(">IBB", len(self.payload), self.msg_type,
                           self.phase) + self.payload

    @classmethod
    def parse_header(cls, head):
        length, msg_type, phase = struct.unpack(">IBB", head)
        if msg_type not in _MSG_NAMES:
            raise FrameError(f"unknown msg_type {msg_type}")
        if phase not in _PHASE_NAMES:
            raise FrameError(f"unknown phase tag {phase}")
        return length, msg_type, phase

    def __len__(self):
        return 6 + len(self.payload)


class Accounting:
    """Per-endpoint tallies; 'sent'/'recv' keyed by (phase, msg_type)."""

    def __init__(self):
        self.sent = defaultdict(int)
        self.recv = defaultdict(int)
        self.msg_sent = defaultdict(int)
        self.phase_time = defaultdict(float)
        self.op_time = defaultdict(float)
        self.counters = defaultdict(int)

    def on_send(self, frame):
        self.sent[(frame.phase, frame.msg_type)] += len(frame)
        self.msg_sent[(frame.phase, frame.msg_type)] += 1

    def on_recv(self, frame):
        self.recv[(frame.phase, frame.msg_type)] += len(frame)

    def add_time(self, bucket, dt):
        self.op_time[bucket] += dt

    def to_dict(self):
        pack = lambda d: {f"{_PHASE_NAMES[p]}/{_MSG_NAMES[m]}": v
                          for (p, m), v in sorted(d.items())}
        return {"sent": pack(self.sent), "recv": pack(self.recv),
                "messages": pack(self.msg_sent),
                "phase_time": dict(self.phase_time),
                "op_time": dict(self.op_time),
                "counters": dict(self.counters)}


class ChannelEnd:
    """One side of a channel; subclasses move encoded frames."""

    def __init__(self, name):
        self.name = name
        self.acct = Accounting()
        self.poisoned = False

    def send(self, msg_type, phase, payload=b""):
        frame = Frame(msg_type, phase, payload)
        if self.poisoned:
            raise ChannelClosed("channel poisoned by earlier frame error")
        self.acct.on_send(frame)
        self._write(frame.encode())

    def recv(self, expect=None):
        if self.poisoned:
            raise ChannelClosed("channel poisoned by earlier frame error")
        head = self._read(6)
        try:
            length, msg_type, phase = Frame.parse_header(head)
        except FrameError:
            self.poisoned = True
            raise
        payload = self._read(length) if length else b""
        frame = Frame(msg_type, phase, payload)
        self.acct.on_recv(frame)
        if expect is not None and msg_type != expect:
            if msg_type == MSG_CONTROL and payload.startswith(b"ERR:"):
                raise ChannelClosed(payload.decode(errors="replace"))
            raise FrameError(f"expected {_MSG_NAMES[expect]}, "
                             f"got {_MSG_NAMES[msg_type]}")
        return frame

    def _write(self, data):
        raise NotImplementedError

    def _read(self, n):
        raise NotImplementedError

    def close(self):
        pass


class InProcEnd(ChannelEnd):
    def __init__(self, name, out_q, in_q):
        super().__init__(name)
        self.out_q = out_q
        self.in_q = in_q
        self._buf = b""

    def _write(self, data):
        self.out_q.put(data)

    def _read(self, n):
        while len(self._buf) < n:
            chunk = self.in_q.get()
            if chunk is None:
                raise ChannelClosed("peer closed")
            self._buf += chunk
        out, self._buf = self._buf[:n], self._buf[n:]
        return out

    def close(self):
        self.out_q.put(None)


def inproc_pair():
    q1, q2 = queue.Queue(), queue.Queue()
    return InProcEnd("server", q1, q2), InProcEnd("client", q2, q1)


class SocketEnd(ChannelEnd):
    def __init__(self, name, sock):
        super().__init__(name)
        self.sock = sock
        self.sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)

    def _write(self, data):
        self.sock.sendall(data)

    def _read(self, n):
        chunks = []
        got = 0
        while got < n:
            chunk = self.sock.recv(min(n - got, 1 << 20))
            if not chunk:
                raise ChannelClosed("socket closed")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def close(self):
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self.sock.close()


def listen_once(host, port):
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    conn, _ = srv.accept()
    srv.close()
    return SocketEnd("server", conn)


def connect(host, port, retries=50):
    last = None
    for _ in range(retries):
        try:
            sock = socket.create_connection((host, port), timeout=10)
            return SocketEnd("client", sock)
        except OSError as exc:
            last = exc
            time.sleep(0.1)
    raise ChannelClosed(f"cannot connect to {host}:{port}: {last}")


class PhaseTimer:
    def __init__(self, acct, phase_name):
        self.acct = acct
        self.phase_name = phase_name

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.acct.phase_time[self.phase_name] += time.perf_counter() - self.t0


class OpTimer:
    def __init__(self, acct, bucket):
        self.acct = acct
        self.bucket = bucket

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.acct.add_time(self.bucket, time.perf_counter() - self.t0)


class PhaseReport:
    """Merged two-party accounting for one protocol session."""

    def __init__(self, server_acct: Accounting, client_acct: Accounting):
        self.server = server_acct
        self.client = client_acct

    def bytes_by_phase(self, direction=None):
        out = defaultdict(int)
        for (p, m), v in self.server.sent.items():
            if direction in (None, "server_to_client"):
                out[_PHASE_NAMES[p]] += v
        for (p, m), v in self.client.sent.items():
            if direction in (None, "client_to_server"):
                out[_PHASE_NAMES[p]] += v
        return dict(out)

    def bytes_by_type(self):
        out = defaultdict(int)
        for acct in (self.server, self.client):
            for (p, m), v in acct.sent.items():
                out[_MSG_NAMES[m]] += v
        return dict(out)

    def cell(self, phase, msg_type):
        return (self.server.sent.get((phase, msg_type), 0)
                + self.client.sent.get((phase, msg_type), 0))

    def total_bytes(self):
        return (sum(self.server.sent.values())
                + sum(self.client.sent.values()))

    def gc_table_bytes(self):
        return self.cell(PHASE_OFFLINE, MSG_GC_TABLES) \
            + self.cell(PHASE_ONLINE, MSG_GC_TABLES)

    def ot_bytes(self):
        return self.cell(PHASE_OFFLINE, MSG_OT) + self.cell(PHASE_ONLINE, MSG_OT)

    def phase_seconds(self, name):
        return (self.server.phase_time.get(name, 0.0)
                + self.client.phase_time.get(name, 0.0))

    def op_seconds(self, bucket):
        return (self.server.op_time.get(bucket, 0.0)
                + self.client.op_time.get(bucket, 0.0))

    def to_dict(self):
        phases = {}
        for p, pname in _PHASE_NAMES.items():
            s2c = sum(v for (ph, m), v in self.server.sent.items() if ph == p)
            c2s = sum(v for (ph, m), v in self.client.sent.items() if ph == p)
            msgs = sum(v for (ph, m), v in self.server.msg_sent.items() if ph == p) \
                + sum(v for (ph, m), v in self.client.msg_sent.items() if ph == p)
            phases[pname] = {
                "wall_seconds": self.phase_seconds(pname),
                "bytes_server_to_client": s2c,
                "bytes_client_to_server": c2s,
                "messages": msgs,
            }
        return {
            "phases": phases,
            "bytes_by_msg_type": self.bytes_by_type(),
            "gc_table_bytes": self.gc_table_bytes(),
            "ot_bytes": self.ot_bytes(),
            "op_seconds": {k: self.op_seconds(k)
                           for k in set(self.server.op_time) | set(self.client.op_time)},
            "counters": {**dict(self.server.counters),
                         **dict(self.client.counters)},
        }
