"""Shared building blocks for the simulator.

Configuration, keyed random streams, host/device memory accounting, spike
ring buffers, and the block-allocated connection store used by every rank.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

HOST = "host"
DEVICE = "device"

POINT_TO_POINT = -1  # group id sentinel: no group, use per-pair routing

# ---------------------------------------------------------------------------
# Modeled byte costs.
#
# The accounting arenas track *modeled* bytes, not Python object sizes, so
# every structure class has one declared per-entry cost.  The table is the
# single authority; tests replay allocation traces against it.
# ---------------------------------------------------------------------------
CONNECTION_RECORD_BYTES = 16   # source, target, weight, delay, port
MAP_ENTRY_BYTES = 4            # one index in a remote-source or image map
FIRST_INDEX_ENTRY_BYTES = 8    # offset of a node's first outgoing record
COUNT_ENTRY_BYTES = 4          # outgoing-record count of one node
ROUTE_ENTRY_BYTES = 8          # (rank or group, map position) routing pair
NEURON_STATE_BYTES = 48        # membrane state + parameters of one neuron
BUFFER_SLOT_BYTES = 8          # one ring-buffer accumulator slot
TEMP_IMAGE_SLOT_BYTES = 4      # transient per-source image scratch
TEMP_FLAG_BYTES = 1            # transient per-source used flag

PAIR_WIRE_BYTES = 8            # on-wire (position, multiplicity) pair


class DelayRangeError(ValueError):
    """A connection or buffer delay falls outside the representable range."""


class ArenaUnderflowError(RuntimeError):
    """More bytes freed from an arena than were ever allocated."""


class ProtocolError(RuntimeError):
    """A transport round was violated (missing rank, bad destination...)."""


class ConsistencyError(RuntimeError):
    """Internal bookkeeping disagrees with itself."""


COMM_MODES = ("p2p", "collective")


@dataclass
class SimConfig:
    """Static per-run configuration shared by all ranks."""

    n_ranks: int = 1
    resolution_ms: float = 0.1
    comm_mode: str = "p2p"
    opt_level: int = 2
    block_size: int = 1024
    flag_threshold: float = 1.0
    seed: int = 0

    def __post_init__(self):
        problems = []
        if self.n_ranks < 1:
            problems.append(f"n_ranks must be >= 1, got {self.n_ranks}")
        if not self.resolution_ms > 0.0:
            problems.append(f"resolution_ms must be > 0, got {self.resolution_ms}")
        if self.comm_mode not in COMM_MODES:
            problems.append(f"comm_mode must be one of {COMM_MODES}, got {self.comm_mode!r}")
        if self.opt_level not in (0, 1, 2, 3):
            problems.append(f"opt_level must be in 0..3, got {self.opt_level}")
        if self.block_size < 1:
            problems.append(f"block_size must be >= 1, got {self.block_size}")
        if not self.flag_threshold > 0.0:
            problems.append(f"flag_threshold must be > 0, got {self.flag_threshold}")
        if self.seed < 0:
            problems.append(f"seed must be >= 0, got {self.seed}")
        if problems:
            raise ValueError("; ".join(problems))

    def steps_for(self, span_ms: float) -> int:
        if span_ms < 0.0:
            raise ValueError(f"time span must be >= 0 ms, got {span_ms}")
        return int(round(span_ms / self.resolution_ms))


# ---------------------------------------------------------------------------
# Keyed random streams.
# ---------------------------------------------------------------------------

def _canonical_bytes(obj) -> bytes:
    """Stable byte encoding of nested tuples/lists of ints and strings."""
    if isinstance(obj, (tuple, list)):
        return b"(" + b",".join(_canonical_bytes(x) for x in obj) + b")"
    if isinstance(obj, str):
        return b"s:" + obj.encode("utf-8")
    if isinstance(obj, (int, np.integer)):
        return b"i:" + str(int(obj)).encode("ascii")
    raise TypeError(f"stream ids may contain only ints, strings and tuples, got {type(obj)!r}")


class RngStream:
    """Counter-based random stream keyed by (seed, stream_id).

    Two streams built from the same key yield identical output on any rank
    with no shared state, which is what keeps source draws aligned between
    the two ends of a remote connection call.  Backed by numpy's Philox
    bit generator; the 128-bit key is a digest of the canonicalized id.
    """

    def __init__(self, seed: int, stream_id):
        self.seed = int(seed)
        self.stream_id = stream_id
        digest = hashlib.blake2b(
            _canonical_bytes((self.seed, stream_id)), digest_size=16
        ).digest()
        self._key = int.from_bytes(digest, "little")
        self.gen = np.random.Generator(np.random.Philox(key=self._key))

    def integers(self, low, high, size=None):
        return self.gen.integers(low, high, size=size)

    def normal(self, loc, scale, size=None):
        return self.gen.normal(loc, scale, size=size)

    def uniform(self, low, high, size=None):
        return self.gen.uniform(low, high, size=size)

    def poisson(self, lam, size=None):
        return self.gen.poisson(lam, size=size)

    def choice_no_replace(self, n: int, k: int):
        return self.gen.choice(n, size=k, replace=False)

    @property
    def state(self):
        return self.gen.bit_generator.state

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id!r})"


# ---------------------------------------------------------------------------
# Memory accounting.
# ---------------------------------------------------------------------------

@dataclass
class MemoryArena:
    """Byte counter for one memory kind (host or device) of one rank.

    Tracks current and peak usage of modeled allocations; it does not own
    any storage itself.
    """

    kind: str
    current_bytes: int = 0
    peak_bytes: int = 0

    def alloc(self, n_bytes: int) -> None:
        if n_bytes < 0:
            raise ValueError(f"cannot allocate {n_bytes} bytes")
        self.current_bytes += int(n_bytes)
        if self.current_bytes > self.peak_bytes:
            self.peak_bytes = self.current_bytes

    def free(self, n_bytes: int) -> None:
        if n_bytes < 0:
            raise ValueError(f"cannot free {n_bytes} bytes")
        if n_bytes > self.current_bytes:
            raise ArenaUnderflowError(
                f"{self.kind} arena: freeing {n_bytes} bytes with only "
                f"{self.current_bytes} allocated"
            )
        self.current_bytes -= int(n_bytes)


def blocks_needed(n_entries: int, block_size: int) -> int:
    return -(-int(n_entries) // int(block_size)) if n_entries > 0 else 0


# ---------------------------------------------------------------------------
# Spike ring buffer.
# ---------------------------------------------------------------------------

class SpikeRingBuffer:
    """Circular accumulator of delayed spike contributions for one target.

    Slot arithmetic is (now + delay) mod length; reading the current slot
    consumes it.  Length must exceed the largest delay in use so a pending
    contribution is never overwritten before it is read.
    """

    def __init__(self, length: int):
        if length < 2:
            raise ValueError(f"ring buffer needs length >= 2, got {length}")
        self.length = int(length)
        self.slots = np.zeros(self.length, dtype=np.float64)

    def add(self, now: int, delay: int, amount: float) -> None:
        if not 1 <= delay < self.length:
            raise DelayRangeError(
                f"delay {delay} outside [1, {self.length - 1}]"
            )
        self.slots[(now + delay) % self.length] += amount

    def consume(self, now: int) -> float:
        idx = now % self.length
        value = float(self.slots[idx])
        self.slots[idx] = 0.0
        return value

    def peek(self, now: int, ahead: int = 0) -> float:
        return float(self.slots[(now + ahead) % self.length])


# ---------------------------------------------------------------------------
# Connection storage.
# ---------------------------------------------------------------------------

_REC_DTYPE = np.dtype(
    [
        ("src", np.int64),
        ("tgt", np.int64),
        ("weight", np.float64),
        ("delay", np.int64),
        ("port", np.int64),
    ]
)


class ConnectionStore:
    """Append-only store of one rank's connection records.

    Records arrive in batches during construction and are charged to the
    device arena in fixed-size blocks.  ``finalize`` sorts them stably by
    source node (ties keep insertion order) and builds the per-source
    first-index offsets used for delivery.
    """

    def __init__(self, block_size: int, arena: MemoryArena):
        self.block_size = int(block_size)
        self.arena = arena
        self.n_records = 0
        self.n_blocks = 0
        self._batches: list[np.ndarray] = []
        self._sorted: np.ndarray | None = None
        self.first_index: np.ndarray | None = None

    def append_batch(self, src, tgt, weight, delay, port) -> int:
        src = np.asarray(src, dtype=np.int64)
        tgt = np.asarray(tgt, dtype=np.int64)
        weight = np.asarray(weight, dtype=np.float64)
        delay = np.asarray(delay, dtype=np.int64)
        n = len(src)
        if not (len(tgt) == len(weight) == len(delay) == n):
            raise ValueError("connection batch arrays must share one length")
        if n == 0:
            return 0
        if delay.min() < 1:
            raise DelayRangeError(
                f"connection delays must be >= 1 step, got {delay.min()}"
            )
        if np.isscalar(port) or np.ndim(port) == 0:
            port_arr = np.full(n, int(port), dtype=np.int64)
        else:
            port_arr = np.asarray(port, dtype=np.int64)
            if len(port_arr) != n:
                raise ValueError("port array length mismatch")
        if port_arr.min() < 0:
            raise ValueError("ports must be >= 0")
        batch = np.empty(n, dtype=_REC_DTYPE)
        batch["src"] = src
        batch["tgt"] = tgt
        batch["weight"] = weight
        batch["delay"] = delay
        batch["port"] = port_arr
        self._batches.append(batch)
        self.n_records += n
        needed = blocks_needed(self.n_records, self.block_size)
        if needed > self.n_blocks:
            self.arena.alloc(
                (needed - self.n_blocks) * self.block_size * CONNECTION_RECORD_BYTES
            )
            self.n_blocks = needed
        return n

    @property
    def is_finalized(self) -> bool:
        return self._sorted is not None

    def finalize(self, n_nodes: int) -> None:
        """Sort records by source (stable) and build first-index offsets."""
        if self._sorted is not None:
            raise ConsistencyError("connection store already finalized")
        if self._batches:
            merged = np.concatenate(self._batches)
        else:
            merged = np.empty(0, dtype=_REC_DTYPE)
        order = np.argsort(merged["src"], kind="stable")
        self._sorted = merged[order]
        self._batches = []
        if self._sorted.size and self._sorted["src"][-1] >= n_nodes:
            raise ConsistencyError(
                f"record source {self._sorted['src'][-1]} >= node count {n_nodes}"
            )
        srcs = self._sorted["src"]
        self.first_index = np.zeros(n_nodes + 1, dtype=np.int64)
        np.add.at(self.first_index, srcs + 1, 1)
        np.cumsum(self.first_index, out=self.first_index)
        # Contiguous per-field copies: the kernels take flat arrays, and
        # views into the structured records are strided.
        self._src = np.ascontiguousarray(self._sorted["src"])
        self._tgt = np.ascontiguousarray(self._sorted["tgt"])
        self._weight = np.ascontiguousarray(self._sorted["weight"])
        self._delay = np.ascontiguousarray(self._sorted["delay"])
        self._port = np.ascontiguousarray(self._sorted["port"])

    def counts_from_first_index(self) -> np.ndarray:
        if self.first_index is None:
            raise ConsistencyError("finalize the store before asking for counts")
        return np.diff(self.first_index)

    @property
    def src(self) -> np.ndarray:
        self._require_finalized()
        return self._src

    @property
    def tgt(self) -> np.ndarray:
        self._require_finalized()
        return self._tgt

    @property
    def weight(self) -> np.ndarray:
        self._require_finalized()
        return self._weight

    @property
    def delay(self) -> np.ndarray:
        self._require_finalized()
        return self._delay

    @property
    def port(self) -> np.ndarray:
        self._require_finalized()
        return self._port

    def _require_finalized(self):
        if self._sorted is None:
            raise ConsistencyError("connection store not finalized yet")

    def records_from(self, node: int) -> np.ndarray:
        """All records outgoing from one node, in stored order."""
        self._require_finalized()
        lo, hi = self.first_index[node], self.first_index[node + 1]
        return self._sorted[lo:hi]

    def pending_records(self) -> np.ndarray:
        """Unsorted view of everything appended so far (pre-finalize)."""
        if self._sorted is not None:
            return self._sorted
        if not self._batches:
            return np.empty(0, dtype=_REC_DTYPE)
        return np.concatenate(self._batches)

    def max_delay(self) -> int:
        recs = self.pending_records()
        return int(recs["delay"].max()) if recs.size else 0

    def max_port(self) -> int:
        recs = self.pending_records()
        return int(recs["port"].max()) if recs.size else 0
