"""Ready-made network models and the area-packing helpers.

Three builders live here: the sparsely connected excitatory/inhibitory
balanced network (desk-sized defaults, weak-scaled per rank), a small
multi-area network whose areas map onto ranks through a packing, and an
explicit gid-level network that can be instantiated under any
neuron-to-rank assignment for layout-equivalence checks.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .construction import ConnSpec, SynSpec
from .core import POINT_TO_POINT, RngStream
from .dynamics import LifParams

# Per-rank population of the full-scale balanced network, and the fixed
# per-neuron in-degree that goes with it.
FULL_NEURONS_PER_RANK = 11_250
FULL_EXC_PER_RANK = 9_000
FULL_INH_PER_RANK = 2_250
FULL_INDEGREE = FULL_EXC_PER_RANK + FULL_INH_PER_RANK


@dataclass(frozen=True)
class ModelSize:
    """Neuron/synapse totals of a weak-scaled balanced network."""

    n_ranks: int
    neurons: int
    synapses: int

    @property
    def neurons_millions(self) -> float:
        return round(self.neurons / 1e6, 1)

    @property
    def synapses_trillions(self) -> float:
        return round(self.synapses / 1e12, 2)


def balanced_model_size(n_ranks: int, scale: float = 1.0) -> ModelSize:
    """Closed-form size of the balanced network: no state is built.

    Every rank hosts ``11250 * scale`` neurons and every neuron receives
    11250 connections regardless of scale, so the synapse count is the
    neuron count times the fixed in-degree.
    """
    if n_ranks < 1:
        raise ValueError(f"need n_ranks >= 1, got {n_ranks}")
    per_rank = int(round(FULL_NEURONS_PER_RANK * scale))
    neurons = per_rank * n_ranks
    return ModelSize(n_ranks, neurons, neurons * FULL_INDEGREE)


# ---------------------------------------------------------------------------
# Desk-scale balanced network.
# ---------------------------------------------------------------------------

@dataclass
class BalancedParams:
    """Desk-sized balanced-network parameters.

    The weight ratio g scales inhibition; with the defaults the recurrent
    weights are 0.125 mV and -1.25 mV.  Weights are kept at exactly
    representable binary fractions so per-step input sums do not depend
    on delivery order.
    """

    neurons_per_rank: int = 1_000
    k_exc: int = 80
    k_inh: int = 20
    w_exc: float = 0.125
    g: float = 10.0
    delay_ms: float = 1.5
    ext_rate_hz: float = 11_000.0
    v_init: object = ("normal", -58.0, 5.0)
    lif: LifParams = field(default_factory=LifParams)

    @property
    def w_inh(self) -> float:
        return -self.g * self.w_exc

    @property
    def n_exc(self) -> int:
        return (4 * self.neurons_per_rank) // 5

    @property
    def n_inh(self) -> int:
        return self.neurons_per_rank - self.n_exc


@dataclass
class BalancedHandles:
    """Global ids per population, for rate and statistics readout."""

    exc_gids: np.ndarray
    inh_gids: np.ndarray
    params: BalancedParams


def build_balanced_network(cluster, params: BalancedParams | None = None) -> BalancedHandles:
    """Build the balanced network on an unprepared cluster.

    Each rank gets its own excitatory/inhibitory populations and an
    independent external Poisson drive; the two recurrent projections draw
    a fixed in-degree per neuron from the rank-spanning populations.  The
    cluster's comm_mode picks point-to-point pairs or one all-rank group.
    """
    p = params if params is not None else BalancedParams()
    cfg = cluster.cfg
    group = POINT_TO_POINT
    if cfg.comm_mode == "collective" and cfg.n_ranks > 1:
        group = 0
        cluster.declare_group(0, range(cfg.n_ranks))
    delay_steps = max(1, int(round(p.delay_ms / cfg.resolution_ms)))
    exc_pops, inh_pops, all_pops = [], [], []
    exc_gids, inh_gids = [], []
    for r in range(cfg.n_ranks):
        base = r * p.neurons_per_rank
        e_gids = base + np.arange(p.n_exc, dtype=np.int64)
        i_gids = base + p.n_exc + np.arange(p.n_inh, dtype=np.int64)
        exc = cluster.create_neurons(r, p.n_exc, p.lif, p.v_init, gids=e_gids)
        inh = cluster.create_neurons(r, p.n_inh, p.lif, p.v_init, gids=i_gids)
        exc_idx = np.arange(exc.start, exc.stop, dtype=np.int64)
        inh_idx = np.arange(inh.start, inh.stop, dtype=np.int64)
        exc_pops.append((r, exc_idx))
        inh_pops.append((r, inh_idx))
        all_pops.append((r, np.concatenate([exc_idx, inh_idx])))
        exc_gids.append(e_gids)
        inh_gids.append(i_gids)
        cluster.add_poisson_source(r, p.ext_rate_hz, p.w_exc, delay_steps,
                                   all_pops[-1][1])
    cluster.connect_fixed_indegree_distributed(
        exc_pops, all_pops, p.k_exc, SynSpec(p.w_exc, delay_steps), group=group
    )
    cluster.connect_fixed_indegree_distributed(
        inh_pops, all_pops, p.k_inh, SynSpec(p.w_inh, delay_steps), group=group
    )
    return BalancedHandles(np.concatenate(exc_gids), np.concatenate(inh_gids), p)


# ---------------------------------------------------------------------------
# Explicit gid-level networks (layout-equivalence fixtures).
# ---------------------------------------------------------------------------

@dataclass
class ExplicitNetwork:
    """A fully specified network: edges, weights, and delays per gid.

    Weights are binary fractions (multiples of 1/256) and the pacemaker
    drive is 1/4 mV per step, so buffer sums are exact in float64 and the
    spike raster is identical under every neuron-to-rank assignment.
    """

    n_neurons: int
    edges_src: np.ndarray
    edges_tgt: np.ndarray
    weights: np.ndarray
    delays: np.ndarray
    pacemaker: np.ndarray
    v_mean: float = -58.0
    v_std: float = 4.0
    pacemaker_drive: float = 0.25

    @classmethod
    def generate(cls, n_neurons: int, n_edges: int, seed: int,
                 max_delay_steps: int = 10,
                 pacemaker_fraction: float = 0.15) -> "ExplicitNetwork":
        stream = RngStream(seed, ("explicit-net",))
        src = stream.integers(0, n_neurons, size=n_edges).astype(np.int64)
        tgt = stream.integers(0, n_neurons, size=n_edges).astype(np.int64)
        weights = stream.integers(-64, 65, size=n_edges) / 256.0
        delays = stream.integers(1, max_delay_steps + 1, size=n_edges).astype(np.int64)
        pace = stream.uniform(0.0, 1.0, size=n_neurons) < pacemaker_fraction
        return cls(n_neurons, src, tgt, weights, delays, pace)

    @property
    def n_edges(self) -> int:
        return len(self.edges_src)

    def instantiate(self, cluster, rank_of) -> np.ndarray:
        """Create all neurons and edges; returns local index per gid.

        ``rank_of[gid]`` names the owning rank.  Neurons are created in
        ascending gid order per rank (pacemakers after the quiet ones) and
        edges are grouped per rank pair into assigned-rule calls.
        """
        rank_of = np.asarray(rank_of, dtype=np.int64)
        cfg = cluster.cfg
        if len(rank_of) != self.n_neurons:
            raise ValueError("rank_of needs one entry per neuron")
        if len(rank_of) and (rank_of.min() < 0 or rank_of.max() >= cfg.n_ranks):
            raise ValueError("rank_of entries outside the cluster's ranks")
        group = POINT_TO_POINT
        if cfg.comm_mode == "collective" and cfg.n_ranks > 1:
            group = 0
            cluster.declare_group(0, range(cfg.n_ranks))
        quiet = LifParams()
        driven = LifParams(i_e=self.pacemaker_drive)
        local_index = np.full(self.n_neurons, -1, dtype=np.int64)
        v_spec = ("normal", self.v_mean, self.v_std)
        for r in range(cfg.n_ranks):
            gids = np.flatnonzero(rank_of == r)
            if len(gids) == 0:
                raise ValueError(f"rank {r} was assigned no neurons")
            for flag, prm in ((False, quiet), (True, driven)):
                batch = gids[self.pacemaker[gids] == flag]
                if len(batch) == 0:
                    continue
                made = cluster.create_neurons(r, len(batch), prm, v_spec,
                                              gids=batch)
                local_index[batch] = np.arange(made.start, made.stop,
                                               dtype=np.int64)
        src_rank = rank_of[self.edges_src]
        tgt_rank = rank_of[self.edges_tgt]
        for sr, tr in sorted(set(zip(src_rank.tolist(), tgt_rank.tolist()))):
            m = (src_rank == sr) & (tgt_rank == tr)
            syn = SynSpec(self.weights[m], self.delays[m])
            s_loc = local_index[self.edges_src[m]]
            t_loc = local_index[self.edges_tgt[m]]
            if sr == tr:
                cluster.connect(sr, s_loc, t_loc, ConnSpec("assigned"), syn)
            else:
                cluster.connect_remote(sr, s_loc, tr, t_loc,
                                       ConnSpec("assigned"), syn, group=group)
        return local_index


# ---------------------------------------------------------------------------
# Areas: CSV input, packing onto ranks, and the multi-area builder.
# ---------------------------------------------------------------------------

AREA_CSV_HEADER = ["area_id", "neurons", "in_connections"]


@dataclass(frozen=True)
class AreaSpec:
    """One area: its name, neuron count, and inbound-connection load."""

    area_id: str
    neurons: int
    in_connections: int


def read_area_csv(path) -> list[AreaSpec]:
    """Parse an area table; raises ValueError naming the offending line."""
    areas: list[AreaSpec] = []
    seen: set[str] = set()
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != AREA_CSV_HEADER:
            raise ValueError(
                f"{path}: header must be {','.join(AREA_CSV_HEADER)!r}, "
                f"got {header!r}"
            )
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not cell.strip() for cell in row):
                continue
            if len(row) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 columns, got {len(row)}")
            area_id = row[0].strip()
            if not area_id:
                raise ValueError(f"{path}:{lineno}: empty area_id")
            if area_id in seen:
                raise ValueError(f"{path}:{lineno}: duplicate area_id {area_id!r}")
            seen.add(area_id)
            try:
                neurons = int(row[1])
                in_connections = int(row[2])
            except ValueError:
                raise ValueError(
                    f"{path}:{lineno}: neurons and in_connections must be integers"
                ) from None
            if neurons < 1:
                raise ValueError(f"{path}:{lineno}: neurons must be >= 1")
            if in_connections < 0:
                raise ValueError(f"{path}:{lineno}: in_connections must be >= 0")
            areas.append(AreaSpec(area_id, neurons, in_connections))
    if not areas:
        raise ValueError(f"{path}: no areas")
    return areas


def pack_areas(areas: list[AreaSpec], n_bins: int):
    """Greedy longest-processing-time packing of areas onto bins.

    Areas are placed heaviest-first (by in_connections, ties by input
    order) onto the currently lightest bin (ties by lowest bin index).
    Returns ({area_id: bin}, per-bin loads).
    """
    if n_bins < 1:
        raise ValueError(f"need n_bins >= 1, got {n_bins}")
    loads = [0] * n_bins
    assignment: dict[str, int] = {}
    order = sorted(range(len(areas)), key=lambda i: (-areas[i].in_connections, i))
    for i in order:
        b = min(range(n_bins), key=lambda j: (loads[j], j))
        assignment[areas[i].area_id] = b
        loads[b] += areas[i].in_connections
    return assignment, loads


def area_rank_map(areas: list[AreaSpec], assignment: dict[str, int]) -> np.ndarray:
    """Per-gid rank array for areas laid out contiguously in list order."""
    parts = []
    for area in areas:
        try:
            rank = assignment[area.area_id]
        except KeyError:
            raise ValueError(f"area {area.area_id!r} missing from assignment") from None
        parts.append(np.full(area.neurons, rank, dtype=np.int64))
    return np.concatenate(parts)


@dataclass
class MultiAreaParams:
    """Knobs of the randomly wired multi-area build."""

    k_intra_exc: int = 40
    k_intra_inh: int = 10
    k_inter: int = 10
    w_exc: float = 0.125
    g: float = 10.0
    delay_steps: int = 15
    ext_rate_hz: float = 13_000.0
    v_init: object = ("normal", -58.0, 5.0)
    lif: LifParams = field(default_factory=LifParams)

    @property
    def w_inh(self) -> float:
        return -self.g * self.w_exc


@dataclass
class AreaHandle:
    area_id: str
    rank: int
    exc_nodes: np.ndarray
    inh_nodes: np.ndarray
    gids: np.ndarray


def build_multi_area(cluster, areas: list[AreaSpec],
                     assignment: dict[str, int],
                     params: MultiAreaParams | None = None) -> list[AreaHandle]:
    """Random multi-area network: areas live on the ranks the packing says.

    Each area is a small balanced circuit (fixed in-degree from its own
    excitatory and inhibitory populations plus Poisson drive); every
    ordered area pair additionally gets ``k_inter`` excitatory inputs per
    target neuron, local or remote depending on the packing.
    """
    p = params if params is not None else MultiAreaParams()
    cfg = cluster.cfg
    group = POINT_TO_POINT
    if cfg.comm_mode == "collective" and cfg.n_ranks > 1:
        group = 0
        cluster.declare_group(0, range(cfg.n_ranks))
    handles: list[AreaHandle] = []
    gid_base = 0
    for area in areas:
        rank = assignment[area.area_id]
        if not 0 <= rank < cfg.n_ranks:
            raise ValueError(
                f"area {area.area_id!r} assigned to rank {rank}, "
                f"cluster has {cfg.n_ranks}"
            )
        n_exc = (4 * area.neurons) // 5
        n_inh = area.neurons - n_exc
        if n_exc == 0 or n_inh == 0:
            raise ValueError(f"area {area.area_id!r} too small to split 4:1")
        gids = gid_base + np.arange(area.neurons, dtype=np.int64)
        gid_base += area.neurons
        exc = cluster.create_neurons(rank, n_exc, p.lif, p.v_init, gids=gids[:n_exc])
        inh = cluster.create_neurons(rank, n_inh, p.lif, p.v_init, gids=gids[n_exc:])
        exc_idx = np.arange(exc.start, exc.stop, dtype=np.int64)
        inh_idx = np.arange(inh.start, inh.stop, dtype=np.int64)
        all_idx = np.concatenate([exc_idx, inh_idx])
        cluster.add_poisson_source(rank, p.ext_rate_hz, p.w_exc, p.delay_steps,
                                   all_idx)
        cluster.connect(rank, exc_idx, all_idx,
                        ConnSpec("fixed_indegree", k_in=p.k_intra_exc),
                        SynSpec(p.w_exc, p.delay_steps))
        cluster.connect(rank, inh_idx, all_idx,
                        ConnSpec("fixed_indegree", k_in=p.k_intra_inh),
                        SynSpec(p.w_inh, p.delay_steps))
        handles.append(AreaHandle(area.area_id, rank, exc_idx, inh_idx, gids))
    for src in handles:
        for tgt in handles:
            if src.area_id == tgt.area_id:
                continue
            all_tgt = np.concatenate([tgt.exc_nodes, tgt.inh_nodes])
            spec = ConnSpec("fixed_indegree", k_in=p.k_inter)
            syn = SynSpec(p.w_exc, p.delay_steps)
            cluster.connect_remote(src.rank, src.exc_nodes, tgt.rank, all_tgt,
                                   spec, syn, group=group)
    return handles
