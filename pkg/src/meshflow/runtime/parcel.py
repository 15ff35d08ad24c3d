"""Parcel encoding, action registry, and inter-locality transport.

A parcel is a serialized remote action: destination gid, action id, argument
bytes, optional continuation gid, source locality, and a generation hint.
Frames are length-prefixed:

    magic   u32 BE  0x50585031 ("PXP1")
    length  u32 BE  total frame length minus the magic (includes this field)
    dest    16 bytes (gid)
    action  u32 BE
    cflag   u8      (1 -> followed by 16-byte continuation gid)
    source  u32 BE
    gen     u64 BE
    argslen u32 BE, then argslen bytes

All integers are big-endian; floats cross the wire as IEEE-754 64-bit bit
patterns inside action codecs.  A zero-argument, no-continuation parcel is
exactly 45 bytes (length field value 41).  Frames longer than 64 MiB are
rejected without dropping the connection.

Transports move frames between localities: an in-process loopback hub for
same-process localities, TCP with one connection per ordered pair otherwise.
Send never blocks a worker; beyond a buffer watermark the sending task is
cooperatively suspended until the queue drains.
"""

from __future__ import annotations

import hashlib
import pickle
import socket
import struct
import threading
import time
from collections import deque
from dataclasses import dataclass

from ..ids import format_gid, gid_bytes, gid_from_bytes
from .waiting import WaitSupport

MAGIC = 0x50585031
MAX_FRAME = 64 * 1024 * 1024

SYSTEM_ACTION_MAX = 15

# System action ids (0..15 reserved).
ACT_HELLO = 0
ACT_AGAS_REGISTER = 1
ACT_AGAS_RESOLVE = 2
ACT_AGAS_REBIND = 3
ACT_AGAS_EVICT = 4
ACT_SET_LCO = 5

_HEADER = struct.Struct(">II")


class ParcelDecodeError(ValueError):
    """Structured decode failure: truncated frame, bad magic, oversize."""


class FrameTooLargeError(ParcelDecodeError):
    """Frame exceeds the 64 MiB cap; the stream remains well-framed, so the
    reader can skip the body and keep the connection."""

    def __init__(self, length):
        self.length = length
        super().__init__(f"frame length {length} exceeds {MAX_FRAME}")


class UnknownActionError(KeyError):
    pass


class RegistryFrozenError(RuntimeError):
    pass


class RegistryMismatchError(RuntimeError):
    def __init__(self, mismatched_ids, detail):
        self.mismatched_ids = mismatched_ids
        super().__init__(
            f"action registry mismatch for id(s) {sorted(mismatched_ids)}: {detail}"
        )


@dataclass(frozen=True)
class Parcel:
    dest: int
    action_id: int
    args: bytes
    continuation: int | None = None
    source_locality: int = 0
    generation_hint: int = 0


def encode_parcel(p: Parcel) -> bytes:
    body = bytearray()
    body += gid_bytes(p.dest)
    body += struct.pack(">I", p.action_id)
    if p.continuation is None:
        body.append(0)
    else:
        body.append(1)
        body += gid_bytes(p.continuation)
    body += struct.pack(">IQ", p.source_locality, p.generation_hint)
    body += struct.pack(">I", len(p.args))
    body += p.args
    length = 4 + len(body)
    if length + 4 > MAX_FRAME:
        raise ValueError(f"parcel frame exceeds {MAX_FRAME} bytes")
    return _HEADER.pack(MAGIC, length) + bytes(body)


def decode_parcel(frame: bytes) -> Parcel:
    if len(frame) < 8:
        raise ParcelDecodeError("truncated frame: missing header")
    magic, length = _HEADER.unpack_from(frame, 0)
    if magic != MAGIC:
        raise ParcelDecodeError(f"bad magic 0x{magic:08x}")
    if length > MAX_FRAME:
        raise ParcelDecodeError(f"frame length {length} exceeds {MAX_FRAME}")
    if len(frame) != 4 + length:
        raise ParcelDecodeError(
            f"frame length mismatch: header says {4 + length}, got {len(frame)}"
        )
    off = 8
    try:
        dest = gid_from_bytes(frame[off:off + 16]); off += 16
        (action_id,) = struct.unpack_from(">I", frame, off); off += 4
        cflag = frame[off]; off += 1
        continuation = None
        if cflag == 1:
            continuation = gid_from_bytes(frame[off:off + 16]); off += 16
        elif cflag != 0:
            raise ParcelDecodeError(f"bad continuation flag {cflag}")
        source, gen = struct.unpack_from(">IQ", frame, off); off += 12
        (argslen,) = struct.unpack_from(">I", frame, off); off += 4
        if off + argslen != len(frame):
            raise ParcelDecodeError("args length disagrees with frame length")
        args = frame[off:off + argslen]
    except struct.error as exc:
        raise ParcelDecodeError(f"truncated frame: {exc}") from None
    return Parcel(dest, action_id, bytes(args), continuation, source, gen)


# -- codecs -----------------------------------------------------------------

class PickleCodec:
    """Default argument/result codec: fixed-protocol pickling of a tuple."""

    name = "pickle"

    @staticmethod
    def encode(values: tuple) -> bytes:
        return pickle.dumps(values, protocol=5)

    @staticmethod
    def decode(raw: bytes) -> tuple:
        return pickle.loads(raw)


class NullCodec:
    """Codec for zero-argument actions / unit results."""

    name = "null"

    @staticmethod
    def encode(values) -> bytes:
        return b""

    @staticmethod
    def decode(raw: bytes):
        return ()


@dataclass
class ActionEntry:
    action_id: int
    name: str
    fn: object
    args_codec: object
    result_codec: object


class ActionRegistry:
    """Maps action ids to entry functions and codecs.

    Ids 0..15 are reserved for system actions.  User registration happens
    before runtime start and must be identical on every locality; the
    manifest is exchanged and verified at connect time.
    """

    def __init__(self):
        self._by_id: dict[int, ActionEntry] = {}
        self._by_name: dict[str, ActionEntry] = {}
        self._next_id = SYSTEM_ACTION_MAX + 1
        self._frozen = False

    def register_system(self, action_id, name, fn, args_codec=PickleCodec,
                        result_codec=PickleCodec):
        if not 0 <= action_id <= SYSTEM_ACTION_MAX:
            raise ValueError("system action id must be in 0..15")
        return self._insert(action_id, name, fn, args_codec, result_codec)

    def register(self, name, fn, args_codec=PickleCodec,
                 result_codec=PickleCodec):
        if self._frozen:
            raise RegistryFrozenError(
                "action registration after runtime start"
            )
        action_id = self._next_id
        self._next_id += 1
        return self._insert(action_id, name, fn, args_codec, result_codec)

    def _insert(self, action_id, name, fn, args_codec, result_codec):
        if action_id in self._by_id:
            raise ValueError(f"action id {action_id} already registered")
        if name in self._by_name:
            raise ValueError(f"action name {name!r} already registered")
        entry = ActionEntry(action_id, name, fn, args_codec, result_codec)
        self._by_id[action_id] = entry
        self._by_name[name] = entry
        return action_id

    def freeze(self):
        self._frozen = True

    def lookup(self, key) -> ActionEntry:
        table = self._by_name if isinstance(key, str) else self._by_id
        try:
            return table[key]
        except KeyError:
            raise UnknownActionError(f"unknown action {key!r}") from None

    def manifest(self) -> list[tuple[int, str]]:
        return sorted((e.action_id, e.name) for e in self._by_id.values())

    def checksum(self) -> bytes:
        text = ";".join(f"{i}={n}" for i, n in self.manifest())
        return hashlib.sha256(text.encode()).digest()

    @staticmethod
    def compare(mine: list, theirs: list) -> tuple[set, str]:
        """Returns (mismatched ids, human diagnostic); empty set if equal."""
        a = dict(mine)
        b = dict(theirs)
        bad = set()
        notes = []
        for i in sorted(set(a) | set(b)):
            if a.get(i) != b.get(i):
                bad.add(i)
                notes.append(f"id {i}: local={a.get(i)!r} remote={b.get(i)!r}")
        return bad, "; ".join(notes)


# -- transports --------------------------------------------------------------

class TransportError(RuntimeError):
    pass


class TransportStats:
    __slots__ = ("frames_sent", "frames_received", "bytes_sent",
                 "bytes_received", "malformed", "forwards")

    def __init__(self):
        self.frames_sent = 0
        self.frames_received = 0
        self.bytes_sent = 0
        self.bytes_received = 0
        self.malformed = 0
        self.forwards = 0

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__slots__}


class _Outbound:
    """Buffered, ordered frame queue to one destination locality.

    A dedicated sender thread drains the queue, preserving send order.
    Producers beyond the watermark are parked (task-cooperatively when
    possible) until the queue drains to half the watermark.
    """

    def __init__(self, send_fn, watermark, wait_support: WaitSupport):
        self._send_fn = send_fn
        self._watermark = watermark
        self._support = wait_support
        self._q = deque()
        self._cond = threading.Condition()
        self._producers = deque()
        self._stop = False
        self._dead = None
        self._thread = None

    def start(self, name):
        self._thread = threading.Thread(target=self._loop, name=name,
                                        daemon=True)
        self._thread.start()

    def put(self, frame):
        if self._dead is not None:
            raise TransportError(self._dead)
        while len(self._q) >= self._watermark:
            with self._cond:
                if len(self._q) < self._watermark:
                    continue
                waiter = self._support.make_waiter()
                self._producers.append(waiter)
            self._support.park(waiter)
            if self._dead is not None:
                raise TransportError(self._dead)
        with self._cond:
            self._q.append(frame)
            self._cond.notify()

    def _loop(self):
        while True:
            with self._cond:
                while not self._q and not self._stop:
                    self._cond.wait(0.05)
                if self._stop and not self._q:
                    return
                frame = self._q.popleft()
                if len(self._q) <= self._watermark // 2 and self._producers:
                    woken = list(self._producers)
                    self._producers.clear()
                else:
                    woken = []
            for w in woken:
                w.wake()
            try:
                self._send_fn(frame)
            except OSError as exc:
                self._dead = f"send failed: {exc}"
                with self._cond:
                    woken = list(self._producers)
                    self._producers.clear()
                for w in woken:
                    w.wake()
                return

    def stop(self):
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=5)


class LoopbackHub:
    """In-process frame exchange between localities sharing one process.

    Frames still pass through encode/decode; no sockets are involved.
    """

    def __init__(self):
        self._lock = threading.Lock()
        self._members = {}
        self._manifests = {}

    def attach(self, locality_id, transport):
        with self._lock:
            self._members[locality_id] = transport

    def set_manifest(self, locality_id, manifest):
        with self._lock:
            self._manifests[locality_id] = manifest

    def get_manifest(self, locality_id):
        with self._lock:
            return self._manifests.get(locality_id)

    def members(self):
        with self._lock:
            return dict(self._members)

    def get(self, locality_id):
        with self._lock:
            return self._members.get(locality_id)


class LoopbackTransport:
    """Transport over a :class:`LoopbackHub`; used when all localities are
    in-process (including the trivial L=1 mesh, which opens no sockets)."""

    def __init__(self, locality_id, hub, on_frame, wait_support,
                 watermark=8192):
        self.locality_id = locality_id
        self.hub = hub
        self.on_frame = on_frame
        self.stats = TransportStats()
        self._support = wait_support
        self._watermark = watermark
        self._outbound: dict[int, _Outbound] = {}
        self._inbox = deque()
        self._cond = threading.Condition()
        self._stop = False
        self._thread = None
        hub.attach(locality_id, self)

    def start(self):
        self._thread = threading.Thread(
            target=self._dispatch_loop,
            name=f"meshflow-loopback-{self.locality_id}", daemon=True)
        self._thread.start()

    def connect(self, peer_ids, manifest, timeout=10.0):
        self.hub.set_manifest(self.locality_id, manifest)
        deadline = time.monotonic() + timeout
        for pid in peer_ids:
            while (self.hub.get(pid) is None
                   or self.hub.get_manifest(pid) is None):
                if time.monotonic() > deadline:
                    raise TransportError(
                        f"partial connectivity: locality {pid} not attached"
                    )
                time.sleep(0.001)
            theirs = self.hub.get_manifest(pid)
            bad, detail = ActionRegistry.compare(manifest, theirs)
            if bad:
                raise RegistryMismatchError(bad, detail)

    def send(self, dest_locality, frame):
        ob = self._outbound.get(dest_locality)
        if ob is None:
            peer = self.hub.get(dest_locality)
            if peer is None:
                raise TransportError(f"unknown locality {dest_locality}")
            ob = _Outbound(peer._deliver, self._watermark, self._support)
            ob.start(f"meshflow-lb-send-{self.locality_id}->{dest_locality}")
            self._outbound[dest_locality] = ob
        self.stats.frames_sent += 1
        self.stats.bytes_sent += len(frame)
        ob.put(frame)

    def _deliver(self, frame):
        with self._cond:
            self._inbox.append(frame)
            self._cond.notify()

    def _dispatch_loop(self):
        while True:
            with self._cond:
                while not self._inbox and not self._stop:
                    self._cond.wait(0.05)
                if self._stop and not self._inbox:
                    return
                frame = self._inbox.popleft()
            self.stats.frames_received += 1
            self.stats.bytes_received += len(frame)
            self.on_frame(frame)

    def shutdown(self):
        for ob in self._outbound.values():
            ob.stop()
        with self._cond:
            self._stop = True
            self._cond.notify_all()
        if self._thread is not None:
            self._thread.join(timeout=5)


def _recv_exact(sock, n):
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed")
        buf += chunk
    return bytes(buf)


def read_frame(sock) -> bytes:
    """Reads one length-prefixed frame; validates magic and size bounds."""
    header = _recv_exact(sock, 8)
    magic, length = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ParcelDecodeError(f"bad magic 0x{magic:08x}")
    if length < 4:
        raise ParcelDecodeError(f"bad frame length {length}")
    if length > MAX_FRAME:
        raise FrameTooLargeError(length)
    return header + _recv_exact(sock, length - 4)


def _skip_exact(sock, n):
    left = n
    while left > 0:
        chunk = sock.recv(min(left, 1 << 16))
        if not chunk:
            raise ConnectionError("peer closed")
        left -= len(chunk)


class TcpTransport:
    """TCP mesh: one connection per ordered locality pair.

    Each side listens on its configured endpoint; ``connect`` dials every
    peer and exchanges hello frames carrying the action-registry manifest.
    """

    def __init__(self, locality_id, endpoints, on_frame, wait_support,
                 make_hello, check_hello, watermark=8192):
        self.locality_id = locality_id
        self.endpoints = endpoints
        self.on_frame = on_frame
        self.stats = TransportStats()
        self._support = wait_support
        self._watermark = watermark
        self._make_hello = make_hello
        self._check_hello = check_hello
        self._outbound: dict[int, _Outbound] = {}
        self._socks: list[socket.socket] = []
        self._listener = None
        self._accept_thread = None
        self._readers = []
        self._inbound_peers = set()
        self._lock = threading.Lock()
        self._stop = False

    def start(self):
        host, port = self.endpoints[self.locality_id]
        self._listener = socket.create_server((host, port), backlog=16)
        self._listener.settimeout(0.2)
        self._accept_thread = threading.Thread(
            target=self._accept_loop,
            name=f"meshflow-accept-{self.locality_id}", daemon=True)
        self._accept_thread.start()

    def _accept_loop(self):
        while not self._stop:
            try:
                conn, _ = self._listener.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            t = threading.Thread(target=self._serve_conn, args=(conn,),
                                 daemon=True)
            t.start()
            self._readers.append(t)

    def _serve_conn(self, conn):
        try:
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            hello = read_frame(conn)
            peer_id, err = self._check_hello(hello)
            conn.sendall(self._make_hello())
            if err is not None:
                conn.close()
                return
            with self._lock:
                self._inbound_peers.add(peer_id)
                self._socks.append(conn)
            while not self._stop:
                try:
                    frame = read_frame(conn)
                except FrameTooLargeError as exc:
                    # The stream stays well-framed: skip the body and keep
                    # the connection.
                    self.stats.malformed += 1
                    _skip_exact(conn, exc.length - 4)
                    continue
                self.stats.frames_received += 1
                self.stats.bytes_received += len(frame)
                self.on_frame(frame)
        except (ConnectionError, OSError):
            pass
        except ParcelDecodeError:
            # Corrupt stream framing (bad magic) is unrecoverable on a byte
            # stream; drop the connection.  Malformed *parcels inside valid
            # frames* are handled (and survived) by the dispatch layer.
            self.stats.malformed += 1
        finally:
            try:
                conn.close()
            except OSError:
                pass

    def connect(self, peer_ids, manifest, timeout=10.0):
        deadline = time.monotonic() + timeout
        for pid in peer_ids:
            host, port = self.endpoints[pid]
            sock = None
            while True:
                try:
                    sock = socket.create_connection((host, port), timeout=1.0)
                    break
                except OSError:
                    if time.monotonic() > deadline:
                        raise TransportError(
                            f"partial connectivity: cannot reach locality "
                            f"{pid} at {host}:{port}"
                        ) from None
                    time.sleep(0.05)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            sock.sendall(self._make_hello())
            reply = read_frame(sock)
            _, err = self._check_hello(reply)
            if err is not None:
                sock.close()
                raise err
            ob = _Outbound(sock.sendall, self._watermark, self._support)
            ob.start(f"meshflow-tcp-send-{self.locality_id}->{pid}")
            self._outbound[pid] = ob
            with self._lock:
                self._socks.append(sock)
        # Wait for the inbound half of the mesh.
        while True:
            with self._lock:
                if self._inbound_peers >= set(peer_ids):
                    return
            if time.monotonic() > deadline:
                with self._lock:
                    missing = set(peer_ids) - self._inbound_peers
                raise TransportError(
                    f"partial connectivity: no inbound connection from "
                    f"localities {sorted(missing)}"
                )
            time.sleep(0.01)

    def send(self, dest_locality, frame):
        ob = self._outbound.get(dest_locality)
        if ob is None:
            raise TransportError(f"no connection to locality {dest_locality}")
        self.stats.frames_sent += 1
        self.stats.bytes_sent += len(frame)
        ob.put(frame)

    def shutdown(self):
        self._stop = True
        for ob in self._outbound.values():
            ob.stop()
        if self._listener is not None:
            try:
                self._listener.close()
            except OSError:
                pass
        with self._lock:
            socks = list(self._socks)
        for s in socks:
            try:
                s.close()
            except OSError:
                pass
        if self._accept_thread is not None:
            self._accept_thread.join(timeout=5)
