"""Per-locality runtime facade.

A :class:`Locality` owns one task scheduler, an LCO factory, the naming
service, the action registry, and a transport endpoint.  ``apply`` is the
single entry point for invoking an action on a gid: local targets spawn a
task directly (no bytes on the wire); remote targets are encoded into a
parcel whose arrival instantiates a task on the destination.  An optional
continuation gid receives the action's return value (future set or dataflow
input write, chosen by the continuation gid's kind tag).
"""

from __future__ import annotations

import pickle
import sys
import threading

from ..ids import (
    KIND_DATAFLOW,
    KIND_FE,
    KIND_FUTURE,
    KIND_SEMAPHORE,
    NULL_GID,
    GidAllocator,
    format_gid,
    gid_kind,
)
from .agas import AgasService, Directory, GidNotFoundError
from .lco import (
    DataflowCell,
    FullEmptyCell,
    FutureCell,
    LcoSupport,
    MutexCell,
    SemaphoreCell,
)
from .parcel import (
    ACT_AGAS_EVICT,
    ACT_AGAS_REBIND,
    ACT_AGAS_REGISTER,
    ACT_AGAS_RESOLVE,
    ACT_HELLO,
    ACT_SET_LCO,
    ActionRegistry,
    LoopbackHub,
    LoopbackTransport,
    Parcel,
    ParcelDecodeError,
    PickleCodec,
    RegistryMismatchError,
    TcpTransport,
    TransportError,
    UnknownActionError,
    decode_parcel,
    encode_parcel,
)
from .scheduler import SchedulerConfig, TaskRuntime
from .waiting import WaitSupport

DIRECTORY_LOCALITY = 0


def parse_endpoint(text):
    host, _, port = text.rpartition(":")
    return host or "127.0.0.1", int(port)


class LocalityConfig:
    def __init__(self, locality_id=0, endpoints=None, scheduler=None,
                 loopback_hub=None, outbound_watermark=8192,
                 connect_timeout=20.0):
        self.locality_id = locality_id
        self.endpoints = endpoints or []
        self.scheduler = scheduler or SchedulerConfig()
        self.loopback_hub = loopback_hub
        self.outbound_watermark = outbound_watermark
        self.connect_timeout = connect_timeout


class Locality:
    def __init__(self, config: LocalityConfig | None = None):
        self.config = config or LocalityConfig()
        self.id = self.config.locality_id
        self.gids = GidAllocator(self.id)
        self.runtime = TaskRuntime(self.config.scheduler, self.id, self.gids)
        self.lco = LcoSupport(self.runtime, self.gids)
        self.wait_support = WaitSupport(self.runtime)
        self.registry = ActionRegistry()
        directory = Directory() if self.id == DIRECTORY_LOCALITY else None
        self.agas = AgasService(self.id, self.gids, directory,
                                self._directory_call)
        self.transport = None
        self.n_localities = 1
        self.error_sink: list[tuple[str, object]] = []
        self._error_lock = threading.Lock()
        self.parcels_executed = 0
        self._started = False
        self._old_switchinterval = None
        self._register_system_actions()

    # -- lifecycle -------------------------------------------------------------

    def start(self):
        if self._started:
            return self
        self._started = True
        # Cooperative wakeups across workers benefit from a short GIL slice.
        self._old_switchinterval = sys.getswitchinterval()
        sys.setswitchinterval(0.001)
        self.registry.freeze()
        self.runtime.start()
        return self

    def connect(self, endpoints=None, loopback_hub=None, n_localities=None):
        """Join the locality mesh and verify registry manifests.

        ``endpoints`` is the full list of ``host:port`` strings indexed by
        locality id (TCP mode); ``loopback_hub`` wires same-process
        localities without sockets.  With a single locality this is a no-op
        mesh: no sockets are opened.
        """
        self.start()
        manifest = self.registry.manifest()
        hub = loopback_hub or self.config.loopback_hub
        if hub is not None:
            self.n_localities = n_localities or len(hub.members()) or 1
            self.transport = LoopbackTransport(
                self.id, hub, self._on_frame, self.wait_support,
                self.config.outbound_watermark)
            self.transport.start()
            peer_ids = [i for i in range(self.n_localities) if i != self.id]
            self.transport.connect(peer_ids, manifest,
                                   self.config.connect_timeout)
            return self
        endpoints = endpoints if endpoints is not None else self.config.endpoints
        if not endpoints or len(endpoints) == 1:
            self.n_localities = 1
            hub = LoopbackHub()
            self.transport = LoopbackTransport(
                self.id, hub, self._on_frame, self.wait_support,
                self.config.outbound_watermark)
            self.transport.start()
            return self
        parsed = [parse_endpoint(e) if isinstance(e, str) else e
                  for e in endpoints]
        self.n_localities = len(parsed)
        self.transport = TcpTransport(
            self.id, parsed, self._on_frame, self.wait_support,
            self._make_hello, self._check_hello,
            self.config.outbound_watermark)
        self.transport.start()
        peer_ids = [i for i in range(self.n_localities) if i != self.id]
        self.transport.connect(peer_ids, manifest,
                               self.config.connect_timeout)
        return self

    def shutdown(self):
        if self.transport is not None:
            self.transport.shutdown()
        self.runtime.shutdown()
        if self._old_switchinterval is not None:
            sys.setswitchinterval(self._old_switchinterval)

    def __enter__(self):
        return self.start()

    def __exit__(self, *exc):
        self.shutdown()

    # -- task surface ------------------------------------------------------------

    def spawn(self, fn, args=(), priority=0):
        return self.runtime.spawn(fn, args, priority)

    def spawn_action(self, action, args=(), priority=0):
        """Spawn a registered action as a local task.

        Unknown action names/ids fail here, at spawn time.
        """
        entry = self.registry.lookup(action)
        return self.runtime.spawn(self._run_action,
                                  (entry, None, tuple(args), None), priority)

    def quiesce(self, timeout=None):
        return self.runtime.quiesce(timeout)

    def stats(self):
        return self.runtime.stats()

    # -- LCO factories -------------------------------------------------------------

    def new_future(self, continuation=None) -> FutureCell:
        return FutureCell(self.lco, continuation)

    def new_dataflow(self, arity, continuation) -> DataflowCell:
        return DataflowCell(self.lco, arity, continuation)

    def new_semaphore(self, initial=0) -> SemaphoreCell:
        return SemaphoreCell(self.lco, initial)

    def new_mutex(self) -> MutexCell:
        return MutexCell(self.lco)

    def new_fe_cell(self, consuming_reads=True) -> FullEmptyCell:
        return FullEmptyCell(self.lco, consuming_reads)

    def register_cell(self, cell):
        """Make a cell addressable by parcels (set-lco) from any locality."""
        return self.agas.register_with_gid(cell.gid, cell)

    # -- actions ---------------------------------------------------------------------

    def register_action(self, name, fn, args_codec=PickleCodec,
                        result_codec=PickleCodec):
        return self.registry.register(name, fn, args_codec, result_codec)

    def apply(self, dest, action, args=(), continuation=None):
        """Run ``action`` on the locality currently owning ``dest``.

        Local destinations spawn a task directly with no serialization.
        Remote destinations go out as a parcel; at most one forward hop
        corrects a stale binding.  ``continuation``, when given, is an LCO
        cell (or its gid) that receives the action's return value; passing
        the cell makes it addressable for the reply without a directory
        entry.
        """
        entry = self.registry.lookup(action)
        continuation = self._adopt_continuation(continuation)
        target = None if dest == NULL_GID else self.agas.local_ref(dest)
        if target is not None or dest == NULL_GID:
            self.runtime.spawn(self._run_action,
                               (entry, target, tuple(args), continuation))
            return
        loc, gen = self.agas.route(dest)
        if loc == self.id:
            raise GidNotFoundError(dest)
        parcel = Parcel(dest, entry.action_id,
                        entry.args_codec.encode(tuple(args)),
                        continuation, self.id, gen)
        self.transport.send(loc, encode_parcel(parcel))

    def _adopt_continuation(self, continuation):
        """Accepts a cell or a gid; ephemeral cells are inserted into the
        local table (no directory traffic) so the reply parcel can find them
        at their birth locality."""
        if continuation is None or isinstance(continuation, int):
            return continuation
        self.agas.insert_local(continuation.gid, continuation)
        return continuation.gid

    def _run_action(self, entry, target, args, continuation):
        result = entry.fn(self, target, *args)
        self.parcels_executed += 1
        if continuation is not None:
            self._deliver_to_lco(continuation, result)

    def _deliver_to_lco(self, gid, value, index=0):
        cell = self.agas.local_ref(gid)
        if cell is not None:
            _set_lco_cell(cell, gid, index, value)
            if gid_kind(gid) == KIND_FUTURE:
                self.agas.drop_ephemeral(gid)  # one-shot reply target
            return
        loc, gen = self.agas.route(gid)
        if loc == self.id:
            self._report_error("continuation gid not found", format_gid(gid))
            return
        parcel = Parcel(gid, ACT_SET_LCO,
                        PickleCodec.encode((index, value)),
                        None, self.id, gen)
        self.transport.send(loc, encode_parcel(parcel))

    # -- parcel reception ---------------------------------------------------------------

    def _on_frame(self, frame):
        try:
            parcel = decode_parcel(frame)
        except ParcelDecodeError as exc:
            self.transport.stats.malformed += 1
            self._report_error("malformed parcel", exc)
            return
        if parcel.action_id == ACT_HELLO:
            return
        self._dispatch(parcel)

    def _dispatch(self, parcel):
        try:
            entry = self.registry.lookup(parcel.action_id)
        except UnknownActionError as exc:
            self._report_error("unknown action in parcel", (parcel, exc))
            return
        target = None if parcel.dest == NULL_GID \
            else self.agas.local_ref(parcel.dest)
        if parcel.dest != NULL_GID and target is None:
            self.runtime.spawn(self._forward, (parcel,))
            return
        args = entry.args_codec.decode(parcel.args)
        self.runtime.spawn(self._run_action,
                           (entry, target, args, parcel.continuation))

    def _forward(self, parcel):
        loc, gen = self.agas.route_authoritative(parcel.dest)
        if loc == self.id:
            self._report_error("parcel for unknown local gid", parcel)
            return
        self.transport.stats.forwards += 1
        fresh = Parcel(parcel.dest, parcel.action_id, parcel.args,
                       parcel.continuation, parcel.source_locality, gen)
        try:
            self.transport.send(loc, encode_parcel(fresh))
        except TransportError as exc:
            self._report_error("forward failed", (parcel, exc))

    def _report_error(self, kind, payload):
        with self._error_lock:
            self.error_sink.append((kind, payload))

    # -- system actions -----------------------------------------------------------------

    def _register_system_actions(self):
        reg = self.registry
        reg.register_system(ACT_HELLO, "sys.hello", None)
        reg.register_system(ACT_AGAS_REGISTER, "sys.agas.register",
                            _act_agas_register)
        reg.register_system(ACT_AGAS_RESOLVE, "sys.agas.resolve",
                            _act_agas_resolve)
        reg.register_system(ACT_AGAS_REBIND, "sys.agas.rebind",
                            _act_agas_rebind)
        reg.register_system(ACT_AGAS_EVICT, "sys.agas.evict",
                            _act_agas_evict)
        reg.register_system(ACT_SET_LCO, "sys.set-lco", _act_set_lco)

    def _directory_call(self, op, args):
        """Split-phase request to the directory locality; blocks the caller
        (cooperatively inside tasks)."""
        action = {"register": ACT_AGAS_REGISTER,
                  "resolve": ACT_AGAS_RESOLVE,
                  "rebind": ACT_AGAS_REBIND}[op]
        return self.sys_request(DIRECTORY_LOCALITY, action, args)

    def sys_request(self, dest_locality, action_id, args):
        """Apply a system action on a peer locality and wait for its result."""
        fut = self.new_future()
        cont = self._adopt_continuation(fut)
        entry = self.registry.lookup(action_id)
        parcel = Parcel(NULL_GID, action_id,
                        entry.args_codec.encode(tuple(args)),
                        cont, self.id, 0)
        self.transport.send(dest_locality, encode_parcel(parcel))
        return fut.get()

    def evict_remote(self, locality_id, gid):
        """Synchronously drop ``gid`` from a peer's table and cache."""
        if locality_id == self.id:
            self.agas.drop_local(gid)
            return True
        return self.sys_request(locality_id, ACT_AGAS_EVICT, (gid,))

    # -- TCP handshake --------------------------------------------------------------------

    def _make_hello(self):
        payload = pickle.dumps(
            (self.id, DIRECTORY_LOCALITY, self.registry.manifest()),
            protocol=5)
        return encode_parcel(Parcel(NULL_GID, ACT_HELLO, payload,
                                    None, self.id, 0))

    def _check_hello(self, frame):
        try:
            parcel = decode_parcel(frame)
            peer_id, directory, manifest = pickle.loads(parcel.args)
        except (ParcelDecodeError, pickle.UnpicklingError, ValueError) as exc:
            return -1, TransportError(f"bad hello frame: {exc}")
        if directory != DIRECTORY_LOCALITY:
            return peer_id, TransportError(
                f"peer {peer_id} disagrees on directory locality "
                f"({directory} != {DIRECTORY_LOCALITY})")
        bad, detail = ActionRegistry.compare(self.registry.manifest(),
                                             manifest)
        if bad:
            return peer_id, RegistryMismatchError(bad, detail)
        return peer_id, None


# -- system action entry functions (fn(locality, target, *args)) ---------------

def _act_agas_register(loc, _target, gid, owner_locality):
    try:
        loc.agas.directory.insert(gid, owner_locality)
        return True
    except ValueError:
        return False


def _act_agas_resolve(loc, _target, gid):
    try:
        binding = loc.agas.directory.lookup(gid)
        return (True, binding[0], binding[1])
    except GidNotFoundError:
        return (False, 0, 0)


def _act_agas_rebind(loc, _target, gid, new_locality):
    try:
        gen, old = loc.agas.directory.rebind(gid, new_locality)
        return (True, gen, old)
    except GidNotFoundError:
        return (False, 0, 0)


def _act_agas_evict(loc, _target, gid):
    loc.agas.drop_local(gid)
    return True


def _act_set_lco(loc, target, index, value):
    if target is None:
        loc._report_error("set-lco for unknown gid", (index, value))
        return False
    _set_lco_cell(target, target.gid, index, value)
    if gid_kind(target.gid) == KIND_FUTURE:
        loc.agas.drop_ephemeral(target.gid)  # one-shot reply target
    return True


def _set_lco_cell(cell, gid, index, value):
    kind = gid_kind(gid)
    if kind == KIND_FUTURE:
        cell.set(value)
    elif kind == KIND_DATAFLOW:
        cell.write(index, value)
    elif kind == KIND_SEMAPHORE:
        cell.signal(value if isinstance(value, int) and value > 0 else 1)
    elif kind == KIND_FE:
        cell.write(value)
    else:
        raise TypeError(
            f"gid {format_gid(gid)} is not an LCO that accepts set"
        )
