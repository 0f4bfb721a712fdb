"""The simulation engine: a cluster of ranks advancing in lockstep.

Each step consumes ring-buffer input, updates neurons, delivers local
spikes directly, and runs one synchronous exchange round per enabled
communication family (a point-to-point mesh round when per-pair routing
exists, one allgather round per declared group).  Within a step the buffer
contributions for a target apply in a fixed canonical order: local
sources first, then point-to-point packets by source rank, then group
packets by (group, source rank), with map positions and stored record
order fixed inside each.
"""

from __future__ import annotations

import json
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field

import numpy as np

from . import kernels
from .construction import (
    ConnSpec,
    RankState,
    SynSpec,
    add_poisson_source,
    connect_local,
    create_neurons,
    declare_group,
    distributed_fixed_indegree,
    prepare,
    remote_connect,
)
from .core import POINT_TO_POINT, ConsistencyError, ProtocolError, SimConfig
from .dynamics import LifParams, Raster
from .transport import LockstepTransport, SpikePacket


@dataclass
class PhaseTimers:
    """Wall-clock seconds accumulated per lifecycle phase."""

    initialization: float = 0.0
    node_creation: float = 0.0
    local_connection: float = 0.0
    remote_connection: float = 0.0
    preparation: float = 0.0
    propagation: float = 0.0

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class RunReport:
    """Everything one simulate() call measured, JSON-serializable."""

    n_ranks: int
    comm_mode: str
    opt_level: int
    seed: int
    kernel_backend: str
    n_neurons: int
    n_synapses: int
    timers: dict
    warmup_s: float
    model_time_s: float
    rtf: float
    host_peak_bytes: list
    device_peak_bytes: list
    transport_messages: dict
    transport_bytes: dict
    n_spike_events: int
    raster_sha256: str | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        return cls(**json.loads(text))


# ---------------------------------------------------------------------------
# Routing and delivery (per rank, per step).
# ---------------------------------------------------------------------------

def route_point_spikes(state: RankState, spiking: np.ndarray) -> dict[int, SpikePacket]:
    """Point-to-point packets for this step's local spikes.

    Positions index the receiving rank's sorted map; iterating spiking
    nodes in ascending order keeps each packet's positions ascending.
    """
    buckets: dict[int, list[int]] = {}
    for s in spiking:
        route = state.point_routes.get(int(s))
        if route is None:
            continue
        for tgt_rank, position in zip(route[0], route[1]):
            buckets.setdefault(int(tgt_rank), []).append(int(position))
    return {
        dst: SpikePacket(
            state.rank,
            np.asarray(positions, dtype=np.int64),
            np.ones(len(positions), dtype=np.int64),
        )
        for dst, positions in buckets.items()
    }


def route_group_spikes(state: RankState, spiking: np.ndarray) -> dict[int, SpikePacket]:
    """Allgather contributions per group for this step's local spikes."""
    buckets: dict[int, list[int]] = {}
    for s in spiking:
        route = state.group_routes.get(int(s))
        if route is None:
            continue
        for group, position in zip(route[0], route[1]):
            buckets.setdefault(int(group), []).append(int(position))
    return {
        group: SpikePacket(
            state.rank,
            np.asarray(positions, dtype=np.int64),
            np.ones(len(positions), dtype=np.int64),
        )
        for group, positions in buckets.items()
    }


def _deliver(state: RankState, nodes: np.ndarray, mults: np.ndarray, now: int) -> None:
    store = state.store
    kernels.deliver_spikes(
        np.ascontiguousarray(nodes, dtype=np.int64),
        np.ascontiguousarray(mults, dtype=np.int64),
        store.first_index, store.tgt, store.port, store.delay, store.weight,
        state.pool.buffers, now,
    )


def deliver_local_spikes(state: RankState, spiking: np.ndarray, now: int) -> None:
    if len(spiking):
        _deliver(state, spiking, np.ones(len(spiking), dtype=np.int64), now)


def deliver_point_packets(state: RankState, packets: list[SpikePacket],
                          now: int) -> None:
    """Deliver a mesh round's inbox through the per-pair image maps."""
    for packet in packets:
        if packet.n_pairs == 0:
            continue
        rmap = state.remote_maps.get((POINT_TO_POINT, packet.src_rank))
        if rmap is None:
            raise ProtocolError(
                f"rank {state.rank}: spikes from rank {packet.src_rank} "
                "but no map for that pair"
            )
        if packet.positions.max() >= rmap.n:
            raise ProtocolError(
                f"rank {state.rank}: position {packet.positions.max()} outside "
                f"map of size {rmap.n} for source rank {packet.src_rank}"
            )
        _deliver(state, rmap.image[packet.positions], packet.multiplicities, now)


def deliver_gather_packets(state: RankState, group: int,
                           packets: list[SpikePacket], now: int) -> None:
    """Deliver an allgather inbox through the roster image lookups.

    The rank's own contribution is skipped (its spikes were delivered
    locally); roster entries with no local image are silently dropped.
    """
    for packet in packets:
        if packet.src_rank == state.rank or packet.n_pairs == 0:
            continue
        lookup = state.image_lookups.get((group, packet.src_rank))
        if lookup is None:
            raise ProtocolError(
                f"rank {state.rank}: no roster lookup for group {group}, "
                f"source rank {packet.src_rank}"
            )
        if packet.positions.max() >= len(lookup):
            raise ProtocolError(
                f"rank {state.rank}: roster position {packet.positions.max()} "
                f"outside roster of size {len(lookup)}"
            )
        images = lookup[packet.positions]
        present = images >= 0
        if present.any():
            _deliver(state, images[present], packet.multiplicities[present], now)


# ---------------------------------------------------------------------------
# Cluster.
# ---------------------------------------------------------------------------

class Cluster:
    """All rank states plus the transport, driven in lockstep."""

    def __init__(self, cfg: SimConfig):
        t0 = time.perf_counter()
        self.cfg = cfg
        self.timers = PhaseTimers()
        self.ranks = [RankState(r, cfg) for r in range(cfg.n_ranks)]
        self.transport = LockstepTransport(cfg.n_ranks)
        self.now = 0
        self.prepared = False
        self._has_p2p = False
        self._group_ids: list[int] = []
        self.timers.initialization += time.perf_counter() - t0

    @contextmanager
    def _timed(self, bucket: str):
        t0 = time.perf_counter()
        try:
            yield
        finally:
            setattr(self.timers, bucket,
                    getattr(self.timers, bucket) + time.perf_counter() - t0)

    # -- construction façade -------------------------------------------------

    def declare_group(self, group_id: int, members) -> None:
        with self._timed("initialization"):
            declare_group(self.ranks, group_id, members)
            self.transport.declare_group(group_id, members)

    def create_neurons(self, rank: int, n: int, params: LifParams | None = None,
                       v_init=None, gids=None) -> range:
        with self._timed("node_creation"):
            return create_neurons(self.ranks[rank], self.cfg, n, params, v_init, gids)

    def add_poisson_source(self, rank: int, rate_hz: float, weight: float,
                           delay_steps: int, targets, port: int = 0):
        with self._timed("node_creation"):
            return add_poisson_source(self.ranks[rank], self.cfg, rate_hz,
                                      weight, delay_steps, targets, port)

    def connect(self, rank: int, sources, targets, conn: ConnSpec,
                syn: SynSpec, port: int = 0) -> int:
        with self._timed("local_connection"):
            return connect_local(self.ranks[rank], self.cfg, sources, targets,
                                 conn, syn, port)

    def connect_remote(self, src_rank: int, sources, tgt_rank: int, targets,
                       conn: ConnSpec, syn: SynSpec, port: int = 0,
                       group: int = POINT_TO_POINT) -> int:
        with self._timed("remote_connection"):
            return remote_connect(self.ranks, self.cfg, src_rank, sources,
                                  tgt_rank, targets, conn, syn, port, group)

    def connect_fixed_indegree_distributed(self, source_pops, target_pops,
                                           k_in: int, syn: SynSpec,
                                           port: int = 0,
                                           group: int = POINT_TO_POINT,
                                           allow_multapses: bool = True) -> int:
        with self._timed("remote_connection"):
            return distributed_fixed_indegree(self.ranks, self.cfg, source_pops,
                                              target_pops, k_in, syn, port,
                                              group, allow_multapses)

    def prepare(self) -> None:
        if self.prepared:
            raise ConsistencyError("cluster already prepared")
        self.transport.set_phase("preparation")
        with self._timed("preparation"):
            prepare(self.ranks, self.cfg)
        self._has_p2p = any(
            state.mirrors or any(k[0] == POINT_TO_POINT for k in state.remote_maps)
            for state in self.ranks
        )
        self._group_ids = sorted(self.ranks[0].groups) if self.ranks else []
        self.prepared = True

    # -- propagation ---------------------------------------------------------

    def step(self) -> dict[int, np.ndarray]:
        """Advance every rank one time step; returns spiking nodes per rank."""
        if not self.prepared:
            raise ConsistencyError("prepare() the cluster before stepping")
        now = self.now
        spikes: dict[int, np.ndarray] = {}
        outboxes: dict[int, dict[int, SpikePacket]] = {}
        gather: dict[int, dict[int, SpikePacket]] = {g: {} for g in self._group_ids}
        for state in self.ranks:
            inputs = state.pool.consume_inputs(now)
            spiking = state.pool.update(inputs)
            spikes[state.rank] = spiking
            if state.recorder.enabled and len(spiking):
                state.recorder.append(now, state.pool.gid[spiking])
            for dev in state.devices:
                dev.emit_into(state.pool, now)
            deliver_local_spikes(state, spiking, now)
            outboxes[state.rank] = route_point_spikes(state, spiking)
            for group, packet in route_group_spikes(state, spiking).items():
                gather[group][state.rank] = packet
        if self._has_p2p:
            inboxes = self.transport.exchange_point_to_point(outboxes)
            for state in self.ranks:
                deliver_point_packets(state, inboxes[state.rank], now)
        for group in self._group_ids:
            members = self.ranks[0].groups[group]
            contribs = {
                m: gather[group].get(m, SpikePacket.empty(m)) for m in members
            }
            inbox = self.transport.exchange_allgather(group, contribs)
            for m in members:
                deliver_gather_packets(self.ranks[m], group, inbox[m], now)
        self.now += 1
        return spikes

    def simulate(self, warmup_ms: float = 0.0, model_ms: float = 0.0,
                 record: bool = True) -> RunReport:
        """Run warmup (recording off), then the measured window.

        The reported rtf is the measured propagation wall time divided by
        the simulated model time; a zero-length window reports rtf 0.
        """
        if not self.prepared:
            self.prepare()
        warm_steps = self.cfg.steps_for(warmup_ms)
        model_steps = self.cfg.steps_for(model_ms)
        self.transport.set_phase("propagation")
        for state in self.ranks:
            state.recorder.enabled = False
        t0 = time.perf_counter()
        for _ in range(warm_steps):
            self.step()
        warmup_s = time.perf_counter() - t0
        for state in self.ranks:
            state.recorder.enabled = record
        t1 = time.perf_counter()
        for _ in range(model_steps):
            self.step()
        propagation_s = time.perf_counter() - t1
        self.timers.propagation += propagation_s
        model_time_s = model_steps * self.cfg.resolution_ms * 1e-3
        rtf = propagation_s / model_time_s if model_time_s > 0.0 else 0.0
        raster = self.merged_raster() if record else None
        stats = self.transport.stats_snapshot()
        return RunReport(
            n_ranks=self.cfg.n_ranks,
            comm_mode=self.cfg.comm_mode,
            opt_level=self.cfg.opt_level,
            seed=self.cfg.seed,
            kernel_backend=kernels.backend_name(),
            n_neurons=sum(st.pool.n_real for st in self.ranks),
            n_synapses=sum(st.store.n_records for st in self.ranks),
            timers=self.timers.as_dict(),
            warmup_s=warmup_s,
            model_time_s=model_time_s,
            rtf=rtf,
            host_peak_bytes=[st.host.peak_bytes for st in self.ranks],
            device_peak_bytes=[st.device.peak_bytes for st in self.ranks],
            transport_messages=dict(stats.messages),
            transport_bytes=dict(stats.bytes),
            n_spike_events=raster.n_events if raster is not None else 0,
            raster_sha256=raster.sha256() if raster is not None else None,
        )

    # -- inspection ----------------------------------------------------------

    def merged_raster(self) -> Raster:
        return Raster.merge(
            [st.recorder.events() for st in self.ranks], self.cfg.resolution_ms
        )

    def check_construction_silent(self) -> None:
        """Raise unless construction and preparation sent zero messages."""
        stats = self.transport.stats_snapshot()
        for phase in ("construction", "preparation"):
            if stats.messages[phase] or stats.bytes[phase]:
                raise ConsistencyError(
                    f"transport was used during {phase}: "
                    f"{stats.messages[phase]} messages"
                )

    def check_alignment(self) -> None:
        """Verify source mirrors equal target map keys for every pair."""
        for tgt_state in self.ranks:
            for (group, src_rank), rmap in tgt_state.remote_maps.items():
                if group != POINT_TO_POINT:
                    continue
                mirror = self.ranks[src_rank].mirrors.get(tgt_state.rank)
                if mirror is None or not np.array_equal(mirror, rmap.remote):
                    raise ConsistencyError(
                        f"mirror of rank {src_rank} for rank {tgt_state.rank} "
                        "does not match the map keys"
                    )
        for src_state in self.ranks:
            for tgt_rank, mirror in src_state.mirrors.items():
                rmap = self.ranks[tgt_rank].remote_maps.get(
                    (POINT_TO_POINT, src_state.rank)
                )
                if rmap is None or not np.array_equal(mirror, rmap.remote):
                    raise ConsistencyError(
                        f"map of rank {tgt_rank} for source rank "
                        f"{src_state.rank} does not match the mirror"
                    )
