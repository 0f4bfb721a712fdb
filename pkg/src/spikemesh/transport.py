"""In-process spike exchange between ranks.

A lockstep executor owns every rank's mailbox: one exchange call is one
synchronous round in which every rank participates, with the send and
receive halves separated by the call boundary.  Traffic counters are kept
per phase so tests can prove construction and preparation stay silent.
Frame encode/decode helpers define the on-wire layout a socket backend
would use; the in-process exchanges only account for those bytes.
"""

from __future__ import annotations

import copy
import struct
from dataclasses import dataclass, field

import numpy as np

from .core import PAIR_WIRE_BYTES, ProtocolError

PHASES = ("construction", "preparation", "propagation")

FRAME_KIND_POINT = 1
FRAME_KIND_GATHER = 2

_GROUP_NONE_WIRE = 0xFFFFFFFF  # encodes the "no group" sentinel on the wire


@dataclass
class SpikePacket:
    """Spikes one rank sends: positions into the receiver-side map or the
    group roster, with per-spike multiplicities."""

    src_rank: int
    positions: np.ndarray
    multiplicities: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.int64)
        self.multiplicities = np.asarray(self.multiplicities, dtype=np.int64)
        if len(self.positions) != len(self.multiplicities):
            raise ValueError("positions and multiplicities must align")
        if len(self.multiplicities) and self.multiplicities.min() < 1:
            raise ValueError("multiplicities must be >= 1")

    @classmethod
    def empty(cls, src_rank: int) -> "SpikePacket":
        return cls(src_rank, np.empty(0, np.int64), np.empty(0, np.int64))

    @property
    def n_pairs(self) -> int:
        return len(self.positions)


@dataclass
class TransportStats:
    """Per-phase message and byte counters."""

    messages: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    bytes: dict = field(default_factory=lambda: {p: 0 for p in PHASES})
    rounds: dict = field(default_factory=lambda: {p: 0 for p in PHASES})

    def total_messages(self) -> int:
        return sum(self.messages.values())

    def total_bytes(self) -> int:
        return sum(self.bytes.values())


class LockstepTransport:
    """Deterministic synchronous exchange among in-process ranks."""

    def __init__(self, n_ranks: int, groups: dict[int, tuple[int, ...]] | None = None):
        if n_ranks < 1:
            raise ValueError(f"need >= 1 rank, got {n_ranks}")
        self.n_ranks = int(n_ranks)
        self.groups = dict(groups) if groups else {}
        self.phase = "construction"
        self._stats = TransportStats()

    def set_phase(self, phase: str) -> None:
        if phase not in PHASES:
            raise ValueError(f"unknown phase {phase!r}")
        self.phase = phase

    def declare_group(self, group_id: int, members) -> None:
        self.groups[int(group_id)] = tuple(int(m) for m in members)

    def stats_snapshot(self) -> TransportStats:
        return copy.deepcopy(self._stats)

    def exchange_point_to_point(
        self, outboxes: dict[int, dict[int, SpikePacket]]
    ) -> dict[int, list[SpikePacket]]:
        """One mesh round: every rank sends one packet to every other rank.

        ``outboxes[r]`` maps destination rank to that rank's packet; a
        missing destination is sent as an empty packet so the round stays
        synchronous.  A rank absent from ``outboxes`` altogether skipped
        the round, which is a protocol error, not a hang.
        """
        missing = [r for r in range(self.n_ranks) if r not in outboxes]
        if missing:
            raise ProtocolError(
                f"ranks {missing} skipped a point-to-point round"
            )
        for src, dests in outboxes.items():
            for dst in dests:
                if not 0 <= dst < self.n_ranks or dst == src:
                    raise ProtocolError(
                        f"rank {src} addressed an invalid destination {dst}"
                    )
        inboxes: dict[int, list[SpikePacket]] = {r: [] for r in range(self.n_ranks)}
        n_pairs = 0
        for src in range(self.n_ranks):
            for dst in range(self.n_ranks):
                if dst == src:
                    continue
                packet = outboxes[src].get(dst)
                if packet is None:
                    packet = SpikePacket.empty(src)
                elif packet.src_rank != src:
                    raise ProtocolError(
                        f"packet from rank {src} claims source {packet.src_rank}"
                    )
                inboxes[dst].append(packet)
                n_pairs += packet.n_pairs
        self._stats.messages[self.phase] += self.n_ranks * (self.n_ranks - 1)
        self._stats.bytes[self.phase] += n_pairs * PAIR_WIRE_BYTES
        self._stats.rounds[self.phase] += 1
        return inboxes

    def exchange_allgather(
        self, group_id: int, contributions: dict[int, SpikePacket]
    ) -> dict[int, list[SpikePacket]]:
        """One allgather round of one group.

        Every member contributes exactly one (possibly empty) packet; every
        member receives all contributions, its own included, ordered by
        source rank.
        """
        members = self.groups.get(group_id)
        if members is None:
            raise ProtocolError(f"group {group_id} is not declared")
        missing = [m for m in members if m not in contributions]
        if missing:
            raise ProtocolError(
                f"group {group_id}: members {missing} skipped an allgather round"
            )
        strangers = [r for r in contributions if r not in members]
        if strangers:
            raise ProtocolError(
                f"group {group_id}: ranks {strangers} are not members"
            )
        gathered = []
        n_pairs = 0
        for m in sorted(members):
            packet = contributions[m]
            if packet.src_rank != m:
                raise ProtocolError(
                    f"packet from rank {m} claims source {packet.src_rank}"
                )
            gathered.append(packet)
            n_pairs += packet.n_pairs
        self._stats.messages[self.phase] += len(members)
        self._stats.bytes[self.phase] += n_pairs * PAIR_WIRE_BYTES
        self._stats.rounds[self.phase] += 1
        return {m: list(gathered) for m in members}


# ---------------------------------------------------------------------------
# Wire framing (extension point for a socket backend).
# ---------------------------------------------------------------------------

_HEADER = struct.Struct("<IBII")  # length, kind, src_rank, group


def encode_frame(kind: int, src_rank: int, group: int,
                 positions, multiplicities) -> bytes:
    """Serialize one packet: little-endian header + (u32, u32) pairs.

    The length field covers everything after itself.  A group of -1 (no
    group, point-to-point traffic) is carried as an all-ones field.
    """
    positions = np.asarray(positions, dtype=np.uint32)
    multiplicities = np.asarray(multiplicities, dtype=np.uint32)
    if len(positions) != len(multiplicities):
        raise ValueError("positions and multiplicities must align")
    pairs = np.column_stack((positions, multiplicities)).astype("<u4").tobytes()
    wire_group = _GROUP_NONE_WIRE if group < 0 else int(group)
    body_len = _HEADER.size - 4 + len(pairs)
    return _HEADER.pack(body_len, kind, src_rank, wire_group) + pairs


def decode_frame(buf: bytes):
    """Inverse of encode_frame: (kind, src_rank, group, positions, mults)."""
    if len(buf) < _HEADER.size:
        raise ProtocolError(f"frame truncated at {len(buf)} bytes")
    body_len, kind, src_rank, wire_group = _HEADER.unpack_from(buf)
    if body_len != len(buf) - 4:
        raise ProtocolError(
            f"frame length field says {body_len}, buffer has {len(buf) - 4}"
        )
    payload = np.frombuffer(buf[_HEADER.size:], dtype="<u4").reshape(-1, 2)
    group = -1 if wire_group == _GROUP_NONE_WIRE else int(wire_group)
    return (
        int(kind),
        int(src_rank),
        group,
        payload[:, 0].astype(np.int64),
        payload[:, 1].astype(np.int64),
    )
