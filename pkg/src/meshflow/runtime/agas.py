"""Active global address space: gid registration, resolution, rebinding.

Locality 0 hosts the authoritative directory; every locality keeps a local
object table (gid -> live object) and a resolve cache invalidated by
generation monotonicity.  Resolving a locally-born, never-rebound gid never
touches the network: the local table is checked first, and parcel routing
falls back to a gid's birth locality when the directory has no entry (public
``resolve`` stays strict and raises for unregistered gids).
"""

from __future__ import annotations

import threading

from ..ids import format_gid, gid_locality


class GidNotFoundError(KeyError):
    def __init__(self, gid):
        self.gid = gid
        super().__init__(f"gid {format_gid(gid)} not registered")


class Directory:
    """Authoritative gid -> (locality, generation) map on locality 0."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: dict[int, tuple[int, int]] = {}

    def insert(self, gid, locality):
        with self._lock:
            if gid in self._entries:
                raise ValueError(f"gid {format_gid(gid)} already registered")
            self._entries[gid] = (locality, 0)

    def lookup(self, gid):
        with self._lock:
            entry = self._entries.get(gid)
        if entry is None:
            raise GidNotFoundError(gid)
        return entry

    def rebind(self, gid, new_locality):
        with self._lock:
            entry = self._entries.get(gid)
            if entry is None:
                raise GidNotFoundError(gid)
            old_locality, gen = entry
            self._entries[gid] = (new_locality, gen + 1)
            return gen + 1, old_locality

    def __len__(self):
        with self._lock:
            return len(self._entries)


class AgasService:
    """Per-locality naming service.

    ``directory_call(action_id, args) -> value`` is provided by the locality
    facade and performs a split-phase round trip to locality 0 (or a direct
    call when this locality is the directory).
    """

    def __init__(self, locality_id, gids, directory, directory_call):
        self.locality_id = locality_id
        self._gids = gids
        self.directory = directory  # non-None only on locality 0
        self._directory_call = directory_call
        self._table: dict[int, object] = {}
        self._table_lock = threading.Lock()
        self._cache: dict[int, tuple[int, int]] = {}
        self._cache_lock = threading.Lock()
        self._generations: dict[int, int] = {}
        self._directory_registered: set[int] = set()
        self.stats = {
            "resolves_local": 0,
            "resolves_cached": 0,
            "resolves_directory": 0,
            "registrations": 0,
            "rebinds": 0,
        }

    # -- local object table --------------------------------------------------

    def local_ref(self, gid):
        with self._table_lock:
            return self._table.get(gid)

    def insert_local(self, gid, obj):
        with self._table_lock:
            self._table[gid] = obj

    def drop_local(self, gid):
        with self._table_lock:
            self._table.pop(gid, None)
        with self._cache_lock:
            self._cache.pop(gid, None)

    def drop_ephemeral(self, gid):
        """Drop a table entry only if the gid was never directory-registered
        (one-shot continuation targets)."""
        with self._table_lock:
            if gid in self._directory_registered:
                return
            self._table.pop(gid, None)

    # -- registration ---------------------------------------------------------

    def register(self, obj, kind) -> int:
        """Mint a fresh gid for ``obj`` living on this locality."""
        gid = self._gids.allocate(kind)
        self.register_with_gid(gid, obj)
        return gid

    def register_with_gid(self, gid, obj) -> int:
        """Register an object that already carries its gid (LCO cells)."""
        self.insert_local(gid, obj)
        if self.directory is not None:
            self.directory.insert(gid, self.locality_id)
        else:
            ok = self._directory_call("register", (gid, self.locality_id))
            if not ok:
                self.drop_local(gid)
                raise ValueError(f"gid {format_gid(gid)} already registered")
        with self._table_lock:
            self._directory_registered.add(gid)
        self.stats["registrations"] += 1
        return gid

    # -- resolution -----------------------------------------------------------

    def resolve(self, gid):
        """Current (locality, generation) binding; strict: raises for
        unregistered gids."""
        with self._table_lock:
            if gid in self._table:
                self.stats["resolves_local"] += 1
                return self.locality_id, self._generations.get(gid, 0)
        with self._cache_lock:
            cached = self._cache.get(gid)
        if cached is not None:
            self.stats["resolves_cached"] += 1
            return cached
        binding = self._resolve_directory(gid)
        if binding is None:
            raise GidNotFoundError(gid)
        return binding

    def _resolve_directory(self, gid):
        self.stats["resolves_directory"] += 1
        if self.directory is not None:
            try:
                binding = self.directory.lookup(gid)
            except GidNotFoundError:
                return None
        else:
            found, loc, gen = self._directory_call("resolve", (gid,))
            if not found:
                return None
            binding = (loc, gen)
        self._cache_update(gid, binding)
        return binding

    def route(self, gid):
        """(locality, generation) for parcel routing.

        Unlike :meth:`resolve`, falls back to the gid's birth locality when
        the directory has no entry (ephemeral objects such as continuation
        futures are never registered).
        """
        with self._table_lock:
            if gid in self._table:
                return self.locality_id, self._generations.get(gid, 0)
        with self._cache_lock:
            cached = self._cache.get(gid)
        if cached is not None:
            return cached
        binding = self._resolve_directory(gid)
        if binding is None:
            return gid_locality(gid), 0
        return binding

    def route_authoritative(self, gid):
        """Directory-fresh routing for forward-on-stale (skips the cache)."""
        binding = self._resolve_directory(gid)
        if binding is None:
            return gid_locality(gid), 0
        return binding

    def _cache_update(self, gid, binding):
        with self._cache_lock:
            old = self._cache.get(gid)
            if old is None or binding[1] >= old[1]:
                self._cache[gid] = binding

    # -- rebinding --------------------------------------------------------------

    def rebind(self, gid, new_local_ref) -> int:
        """Bind ``gid`` to this locality (caller holds the object's state
        here).  Returns the new generation."""
        self.insert_local(gid, new_local_ref)
        with self._table_lock:
            self._directory_registered.add(gid)
        if self.directory is not None:
            gen, old_loc = self.directory.rebind(gid, self.locality_id)
        else:
            found, gen, old_loc = self._directory_call(
                "rebind", (gid, self.locality_id))
            if not found:
                self.drop_local(gid)
                raise GidNotFoundError(gid)
        self._generations[gid] = gen
        self._cache_update(gid, (self.locality_id, gen))
        self.stats["rebinds"] += 1
        return gen, old_loc
