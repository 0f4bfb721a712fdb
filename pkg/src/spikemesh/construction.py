"""Communication-free network construction across ranks.

Every rank executes the same construction script.  When a call wires
neurons of a source rank to neurons of a different target rank, the target
rank materializes local *image* nodes standing in for the remote sources
and keeps a per-pair map from remote source index to image index, while
the source rank replays the same keyed random draws to learn, without any
message exchange, exactly which of its neurons acquired images where.
Point-to-point routing uses per-pair sorted mirrors; group routing uses a
shared roster that every member of the group derives identically.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    COUNT_ENTRY_BYTES,
    DEVICE,
    FIRST_INDEX_ENTRY_BYTES,
    HOST,
    MAP_ENTRY_BYTES,
    POINT_TO_POINT,
    ROUTE_ENTRY_BYTES,
    TEMP_FLAG_BYTES,
    TEMP_IMAGE_SLOT_BYTES,
    ConnectionStore,
    ConsistencyError,
    MemoryArena,
    RngStream,
    SimConfig,
    blocks_needed,
)
from .dynamics import LifParams, NeuronPool, PoissonSource, SpikeRecorder


# ---------------------------------------------------------------------------
# Memory placement of the remote-connection structures.
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PlacementPlan:
    """Which arena holds each remote-structure class.

    ``counts`` may be None: the per-node record counts are then derived
    on the fly from the first-index offsets and no count array is charged.
    Functional behavior never depends on the placement.
    """

    remote_source_maps: str
    image_maps: str
    first_index: str
    counts: str | None


_PLACEMENTS = {
    0: PlacementPlan(HOST, HOST, HOST, HOST),
    1: PlacementPlan(DEVICE, HOST, HOST, HOST),
    2: PlacementPlan(DEVICE, DEVICE, DEVICE, None),
    3: PlacementPlan(DEVICE, DEVICE, DEVICE, DEVICE),
}


def placement_for_level(level: int) -> PlacementPlan:
    """Arena placement for memory optimization level 0..3 (default 2)."""
    try:
        return _PLACEMENTS[level]
    except KeyError:
        raise ValueError(f"optimization level must be in 0..3, got {level}") from None


# ---------------------------------------------------------------------------
# Connection and synapse specifications.
# ---------------------------------------------------------------------------

CONNECTION_RULES = (
    "one_to_one",
    "all_to_all",
    "fixed_indegree",
    "fixed_outdegree",
    "fixed_total",
    "assigned",
)

#: Rules that use every passed source by construction; they are never
#: worth flagging and consume no aligned source draws.
_DETERMINISTIC_USE_RULES = ("one_to_one", "all_to_all", "fixed_outdegree", "assigned")


@dataclass
class ConnSpec:
    """How to realize connections between a source and a target set."""

    rule: str
    k_in: int | None = None
    k_out: int | None = None
    n_total: int | None = None
    allow_autapses: bool = True
    allow_multapses: bool = True

    def validate(self, n_src: int, n_tgt: int) -> None:
        if self.rule not in CONNECTION_RULES:
            raise ValueError(f"unknown connection rule {self.rule!r}")
        if self.rule in ("one_to_one", "assigned") and n_src != n_tgt:
            raise ValueError(
                f"{self.rule} needs equally long source/target lists, "
                f"got {n_src} and {n_tgt}"
            )
        if self.rule == "fixed_indegree":
            if self.k_in is None or self.k_in < 0:
                raise ValueError(f"fixed_indegree needs k_in >= 0, got {self.k_in}")
            if not self.allow_multapses and self.k_in > n_src:
                raise ValueError(
                    f"k_in {self.k_in} > {n_src} sources with multapses disabled"
                )
        if self.rule == "fixed_outdegree" and (self.k_out is None or self.k_out < 0):
            raise ValueError(f"fixed_outdegree needs k_out >= 0, got {self.k_out}")
        if self.rule == "fixed_total" and (self.n_total is None or self.n_total < 0):
            raise ValueError(f"fixed_total needs n_total >= 0, got {self.n_total}")


@dataclass
class SynSpec:
    """Weight/delay realization: scalars, small distribution specs, or
    per-record arrays (the latter mostly for the assigned rule).

    weight: float, ("normal", mean, std), or an array, one per record
    delay_steps: int >= 1, ("uniform_int", low, high) with low >= 1,
        or an array of steps, one per record
    """

    weight: object = 1.0
    delay_steps: object = 1

    def validate(self) -> None:
        w, d = self.weight, self.delay_steps
        if isinstance(w, tuple):
            if len(w) != 3 or w[0] != "normal" or w[2] < 0:
                raise ValueError(f"bad weight spec {w!r}")
        elif isinstance(w, (list, np.ndarray)):
            np.asarray(w, dtype=np.float64)
        else:
            float(w)
        if isinstance(d, tuple):
            if len(d) != 3 or d[0] != "uniform_int" or d[1] < 1 or d[2] < d[1]:
                raise ValueError(f"bad delay spec {d!r}")
        elif isinstance(d, (list, np.ndarray)):
            arr = np.asarray(d, dtype=np.int64)
            if arr.size and arr.min() < 1:
                raise ValueError("per-record delays must all be >= 1 step")
        elif int(d) < 1:
            raise ValueError(f"delays must be >= 1 step, got {d}")


def _realize_syn(syn: SynSpec, n: int, stream: RngStream):
    w = syn.weight
    if isinstance(w, tuple):
        weights = stream.normal(w[1], w[2], size=n)
    elif isinstance(w, (list, np.ndarray)):
        weights = np.asarray(w, dtype=np.float64).copy()
        if len(weights) != n:
            raise ValueError(f"{len(weights)} weights for {n} records")
    else:
        weights = np.full(n, float(w), dtype=np.float64)
    d = syn.delay_steps
    if isinstance(d, tuple):
        delays = stream.integers(d[1], d[2] + 1, size=n).astype(np.int64)
    elif isinstance(d, (list, np.ndarray)):
        delays = np.asarray(d, dtype=np.int64).copy()
        if len(delays) != n:
            raise ValueError(f"{len(delays)} delays for {n} records")
    else:
        delays = np.full(n, int(d), dtype=np.int64)
    return weights, delays


# ---------------------------------------------------------------------------
# Remote source maps and mirrors.
# ---------------------------------------------------------------------------

class RemoteSourceMap:
    """Sorted map from remote source index to local image index.

    Target-rank side of one (group, source rank) pair.  Both columns grow
    in fixed-size blocks charged to the arenas picked by the placement
    plan; the remote column is strictly ascending at every point between
    calls.
    """

    def __init__(self, remote_arena: MemoryArena, image_arena: MemoryArena,
                 block_size: int):
        self.remote = np.empty(0, dtype=np.int64)
        self.image = np.empty(0, dtype=np.int64)
        self._remote_arena = remote_arena
        self._image_arena = image_arena
        self._block_size = int(block_size)
        self._capacity = 0

    @property
    def n(self) -> int:
        return len(self.remote)

    def _ensure_capacity(self, n_entries: int) -> None:
        need = blocks_needed(n_entries, self._block_size) * self._block_size
        if need > self._capacity:
            grown = need - self._capacity
            self._remote_arena.alloc(grown * MAP_ENTRY_BYTES)
            self._image_arena.alloc(grown * MAP_ENTRY_BYTES)
            self._capacity = need

    def lookup(self, values: np.ndarray):
        """(found mask, image indices) for sorted-unique ``values``."""
        values = np.asarray(values, dtype=np.int64)
        found = np.zeros(len(values), dtype=bool)
        images = np.full(len(values), -1, dtype=np.int64)
        if self.n and len(values):
            pos = np.searchsorted(self.remote, values)
            in_range = pos < self.n
            hit = in_range.copy()
            hit[in_range] = self.remote[pos[in_range]] == values[in_range]
            found[hit] = True
            images[hit] = self.image[pos[hit]]
        return found, images

    def insert(self, new_remote: np.ndarray, new_image: np.ndarray) -> None:
        """Merge new (remote, image) entries; keys must be new and sorted."""
        if len(new_remote) == 0:
            return
        self._ensure_capacity(self.n + len(new_remote))
        at = np.searchsorted(self.remote, new_remote)
        self.remote = np.insert(self.remote, at, new_remote)
        self.image = np.insert(self.image, at, new_image)
        if self.n > 1 and not (np.diff(self.remote) > 0).all():
            raise ConsistencyError("remote map keys no longer strictly ascending")

    def position_of(self, remote_value: int) -> int:
        pos = int(np.searchsorted(self.remote, remote_value))
        if pos >= self.n or self.remote[pos] != remote_value:
            raise KeyError(f"remote source {remote_value} not mapped")
        return pos


# ---------------------------------------------------------------------------
# Per-rank construction state.
# ---------------------------------------------------------------------------

class RankState:
    """Everything one rank owns: nodes, records, maps, routes, arenas."""

    def __init__(self, rank: int, cfg: SimConfig):
        self.rank = int(rank)
        self.cfg = cfg
        self.plan = placement_for_level(cfg.opt_level)
        self.host = MemoryArena(HOST)
        self.device = MemoryArena(DEVICE)
        self.pool = NeuronPool(self.device)
        self.store = ConnectionStore(cfg.block_size, self.device)
        self.recorder = SpikeRecorder()
        self.devices: list[PoissonSource] = []
        # target side: (group, src_rank) -> RemoteSourceMap
        self.remote_maps: dict[tuple[int, int], RemoteSourceMap] = {}
        # source side, point-to-point: tgt_rank -> sorted mirror of the
        # target's map keys
        self.mirrors: dict[int, np.ndarray] = {}
        self._mirror_capacity: dict[int, int] = {}
        # collective: every group member keeps the full source roster
        self.roster_sets: dict[tuple[int, int], set] = {}
        self.rosters: dict[tuple[int, int], np.ndarray] = {}
        self.image_lookups: dict[tuple[int, int], np.ndarray] = {}
        # built at preparation
        self.point_routes: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.group_routes: dict[int, tuple[np.ndarray, np.ndarray]] = {}
        self.counts_array: np.ndarray | None = None
        self.groups: dict[int, tuple[int, ...]] = {}
        self.pair_counters: dict[tuple[int, int], int] = {}
        self.dist_counter = 0
        self.local_call_counter = 0
        self.prepared = False

    def arena_of(self, kind: str) -> MemoryArena:
        return self.host if kind == HOST else self.device

    def map_for(self, group: int, src_rank: int) -> RemoteSourceMap:
        key = (int(group), int(src_rank))
        if key not in self.remote_maps:
            self.remote_maps[key] = RemoteSourceMap(
                self.arena_of(self.plan.remote_source_maps),
                self.arena_of(self.plan.image_maps),
                self.cfg.block_size,
            )
        return self.remote_maps[key]

    def mirror_merge(self, tgt_rank: int, new_values: np.ndarray) -> None:
        """Merge sorted-unique values into the mirror for ``tgt_rank``."""
        old = self.mirrors.get(tgt_rank)
        merged = np.union1d(old, new_values) if old is not None else (
            np.asarray(new_values, dtype=np.int64)
        )
        self.mirrors[tgt_rank] = merged
        need = blocks_needed(len(merged), self.cfg.block_size) * self.cfg.block_size
        have = self._mirror_capacity.get(tgt_rank, 0)
        if need > have:
            self.device.alloc((need - have) * MAP_ENTRY_BYTES)
            self._mirror_capacity[tgt_rank] = need

    def require_unprepared(self) -> None:
        if self.prepared:
            raise ConsistencyError(
                f"rank {self.rank}: construction after preparation"
            )


def declare_group(ranks: list[RankState], group_id: int, members) -> None:
    """Register a communication group on every rank (groups are global)."""
    members = tuple(int(m) for m in members)
    if group_id < 0:
        raise ValueError(f"group ids must be >= 0, got {group_id}")
    if len(set(members)) != len(members) or not members:
        raise ValueError(f"group members must be a non-empty unique list, got {members}")
    for m in members:
        if not 0 <= m < len(ranks):
            raise ValueError(f"group member rank {m} out of range")
    for state in ranks:
        if group_id in state.groups:
            raise ValueError(f"group {group_id} already declared")
        state.groups[group_id] = members


# ---------------------------------------------------------------------------
# Node creation.
# ---------------------------------------------------------------------------

def create_neurons(state: RankState, cfg: SimConfig, n: int,
                   params: LifParams | None = None, v_init=None,
                   gids=None) -> range:
    """Create ``n`` neurons on one rank; returns their node index range.

    ``v_init`` may be a scalar, an array, or ("normal", mean, std); the
    distribution form is drawn per global id so initial states do not
    depend on the rank layout.  Default gids are the local node indices,
    which only stay unique on a single rank; multi-rank models must pass
    explicit gids.
    """
    state.require_unprepared()
    if n <= 0:
        raise ValueError(f"need n >= 1 neurons, got {n}")
    params = params if params is not None else LifParams()
    if gids is None:
        gids = np.arange(state.pool.n_nodes, state.pool.n_nodes + n, dtype=np.int64)
    else:
        gids = np.asarray(gids, dtype=np.int64)
        if len(gids) != n:
            raise ValueError("gids must have one entry per neuron")
    if v_init is None:
        v_arr = np.full(n, params.v_rest, dtype=np.float64)
    elif isinstance(v_init, tuple):
        if len(v_init) != 3 or v_init[0] != "normal":
            raise ValueError(f"bad v_init spec {v_init!r}")
        v_arr = np.array(
            [RngStream(cfg.seed, ("init-v", int(g))).normal(v_init[1], v_init[2])
             for g in gids],
            dtype=np.float64,
        )
    elif np.ndim(v_init) == 0:
        v_arr = np.full(n, float(v_init), dtype=np.float64)
    else:
        v_arr = np.asarray(v_init, dtype=np.float64)
    return state.pool.add_neurons(n, params, v_arr, gids)


def add_poisson_source(state: RankState, cfg: SimConfig, rate_hz: float,
                       weight: float, delay_steps: int, targets,
                       port: int = 0) -> PoissonSource:
    state.require_unprepared()
    targets = np.asarray(targets, dtype=np.int64)
    if len(targets) and (targets.min() < 0 or targets.max() >= state.pool.n_nodes):
        raise ValueError("poisson targets outside the rank's node range")
    stream = RngStream(cfg.seed, ("poisson", state.rank, len(state.devices)))
    src = PoissonSource(rate_hz, weight, delay_steps, targets, stream,
                        cfg.resolution_ms, port)
    state.devices.append(src)
    return src


# ---------------------------------------------------------------------------
# Rule realization.
# ---------------------------------------------------------------------------

def _draw_source_positions(conn: ConnSpec, n_src: int, n_tgt: int,
                           aligned: RngStream) -> np.ndarray | None:
    """Source-position draws of one call, in the exact aligned order.

    Returns None for rules that use every source deterministically.  This
    is the only code path that touches the aligned stream, so the source
    rank can replay it verbatim.
    """
    if conn.rule == "fixed_indegree":
        k = int(conn.k_in)
        if conn.allow_multapses:
            return aligned.integers(0, n_src, size=k * n_tgt).astype(np.int64)
        rows = [aligned.choice_no_replace(n_src, k) for _ in range(n_tgt)]
        return np.concatenate(rows).astype(np.int64) if rows else np.empty(0, np.int64)
    if conn.rule == "fixed_total":
        return aligned.integers(0, n_src, size=int(conn.n_total)).astype(np.int64)
    return None


def _realize_pairs(conn: ConnSpec, n_src: int, targets: np.ndarray,
                   aligned: RngStream, local: RngStream):
    """(source positions, target indices) for every new connection."""
    n_tgt = len(targets)
    rule = conn.rule
    if rule in ("one_to_one", "assigned"):
        return np.arange(n_src, dtype=np.int64), targets.copy()
    if rule == "all_to_all":
        pos = np.tile(np.arange(n_src, dtype=np.int64), n_tgt)
        return pos, np.repeat(targets, n_src)
    if rule == "fixed_indegree":
        pos = _draw_source_positions(conn, n_src, n_tgt, aligned)
        return pos, np.repeat(targets, int(conn.k_in))
    if rule == "fixed_outdegree":
        k = int(conn.k_out)
        pos = np.repeat(np.arange(n_src, dtype=np.int64), k)
        tgt = targets[local.integers(0, n_tgt, size=k * n_src)]
        return pos, tgt
    if rule == "fixed_total":
        pos = _draw_source_positions(conn, n_src, n_tgt, aligned)
        tgt = targets[local.integers(0, n_tgt, size=int(conn.n_total))]
        return pos, tgt
    raise ValueError(f"unknown connection rule {rule!r}")


# ---------------------------------------------------------------------------
# The flag/extract/map/remap pipeline.
# ---------------------------------------------------------------------------

def should_flag_sources(conn: ConnSpec, n_src: int, n_tgt: int,
                        threshold: float) -> bool:
    """Whether to track per-source usage before creating images.

    Probabilistic rules flag when the expected connections per source fall
    below the threshold, so sparsely used populations do not get blanket
    images.  Deterministic-use rules never flag.
    """
    if conn.rule == "fixed_indegree":
        return int(conn.k_in) * n_tgt / n_src < threshold
    if conn.rule == "fixed_total":
        return int(conn.n_total) / n_src < threshold
    return False


def used_flags(n_src: int, positions: np.ndarray) -> np.ndarray:
    """Boolean per-source-position flag: appears in >= 1 new connection."""
    flags = np.zeros(n_src, dtype=bool)
    flags[positions] = True
    return flags


def extract_used(values: np.ndarray, flags: np.ndarray):
    """(used positions, used values), ordered by ascending value.

    ``values`` is the source array of the call; position i is used when
    flags[i] holds.  Ties (duplicate values) keep position order.
    """
    positions = np.flatnonzero(flags)
    used_vals = np.asarray(values, dtype=np.int64)[positions]
    order = np.argsort(used_vals, kind="stable")
    return positions[order], used_vals[order]


def lookup_or_create_images(rmap: RemoteSourceMap, uniq_values: np.ndarray,
                            pool: NeuronPool) -> np.ndarray:
    """Image indices for sorted-unique remote sources, creating the missing.

    New images are appended to the node range in ascending source order,
    then merged into the map so it stays sorted.
    """
    found, images = rmap.lookup(uniq_values)
    missing = uniq_values[~found]
    if len(missing):
        new_images = np.array([pool.add_image() for _ in missing], dtype=np.int64)
        rmap.insert(missing, new_images)
        images[~found] = new_images
    return images


def remap_connection_sources(positions: np.ndarray,
                             pos_to_image: np.ndarray) -> np.ndarray:
    """Temporary source positions -> local image indices for the records."""
    mapped = pos_to_image[positions]
    if len(mapped) and mapped.min() < 0:
        raise ConsistencyError("connection references a source with no image")
    return mapped


def merge_into_mirror(state: RankState, tgt_rank: int,
                      used_values: np.ndarray) -> None:
    state.mirror_merge(tgt_rank, np.unique(used_values))


# ---------------------------------------------------------------------------
# Connect calls.
# ---------------------------------------------------------------------------

def connect_local(state: RankState, cfg: SimConfig, sources, targets,
                  conn: ConnSpec, syn: SynSpec, port: int = 0) -> int:
    """Wire nodes of one rank to neurons of the same rank."""
    state.require_unprepared()
    sources = np.asarray(sources, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if len(sources) == 0 or len(targets) == 0:
        raise ValueError("connect needs non-empty source and target sets")
    for name, arr in (("source", sources), ("target", targets)):
        if arr.min() < 0 or arr.max() >= state.pool.n_nodes:
            raise ValueError(f"{name} index outside the rank's node range")
    conn.validate(len(sources), len(targets))
    syn.validate()
    state.local_call_counter += 1
    stream = RngStream(cfg.seed, ("conn-local", state.rank, state.local_call_counter))
    pos, tgt_idx = _realize_pairs(conn, len(sources), targets, stream, stream)
    src_idx = sources[pos]
    if not conn.allow_autapses and conn.rule in ("fixed_indegree", "fixed_total"):
        bad = np.flatnonzero(src_idx == tgt_idx)
        while len(bad):
            redraw = stream.integers(0, len(sources), size=len(bad))
            src_idx[bad] = sources[redraw]
            bad = bad[src_idx[bad] == tgt_idx[bad]]
    weights, delays = _realize_syn(
        syn, len(src_idx),
        RngStream(cfg.seed, ("syn-local", state.rank, state.local_call_counter)),
    )
    return state.store.append_batch(src_idx, tgt_idx, weights, delays, port)


def _bump_pair_counters(src_state: RankState, tgt_state: RankState) -> int:
    key = (src_state.rank, tgt_state.rank)
    a = src_state.pair_counters.get(key, 0) + 1
    b = tgt_state.pair_counters.get(key, 0) + 1
    if a != b:
        raise ConsistencyError(
            f"pair call counters diverged for ranks {key}: {a} vs {b}"
        )
    src_state.pair_counters[key] = a
    tgt_state.pair_counters[key] = b
    return a


def remote_connect(ranks: list[RankState], cfg: SimConfig, src_rank: int,
                   sources, tgt_rank: int, targets, conn: ConnSpec,
                   syn: SynSpec, port: int = 0,
                   group: int = POINT_TO_POINT) -> int:
    """Wire source-rank neurons to target-rank neurons without messages.

    The target rank realizes the rule with temporary source positions,
    optionally flags which sources were actually used, creates or reuses
    image nodes for them, and stores the records rewritten to image
    indices.  In point-to-point mode the source rank replays the aligned
    draws and merges the used sources into its mirror; in collective mode
    every member of ``group`` adds the passed sources to the shared
    roster.  Returns the number of records created on the target rank.
    """
    for r in (src_rank, tgt_rank):
        if not 0 <= r < len(ranks):
            raise ValueError(f"rank {r} out of range 0..{len(ranks) - 1}")
    if src_rank == tgt_rank:
        return connect_local(ranks[src_rank], cfg, sources, targets, conn, syn, port)
    src_state, tgt_state = ranks[src_rank], ranks[tgt_rank]
    src_state.require_unprepared()
    tgt_state.require_unprepared()
    sources = np.asarray(sources, dtype=np.int64)
    targets = np.asarray(targets, dtype=np.int64)
    if len(sources) == 0 or len(targets) == 0:
        raise ValueError("connect needs non-empty source and target sets")
    if sources.min() < 0 or sources.max() >= src_state.pool.n_nodes:
        raise ValueError("source index outside the source rank's node range")
    if targets.min() < 0 or targets.max() >= tgt_state.pool.n_nodes:
        raise ValueError("target index outside the target rank's node range")
    if group != POINT_TO_POINT:
        members = tgt_state.groups.get(group)
        if members is None:
            raise ValueError(f"group {group} is not declared")
        if src_rank not in members or tgt_rank not in members:
            raise ValueError(
                f"ranks {src_rank} and {tgt_rank} must both belong to group {group}"
            )
    conn.validate(len(sources), len(targets))
    syn.validate()

    n_src, n_tgt = len(sources), len(targets)
    call_idx = _bump_pair_counters(src_state, tgt_state)
    aligned_id = ("remote-src", src_rank, tgt_rank, call_idx)
    use_flag = should_flag_sources(conn, n_src, n_tgt, cfg.flag_threshold)

    # --- target side -------------------------------------------------------
    tgt_state.device.alloc(n_src * (TEMP_IMAGE_SLOT_BYTES + TEMP_FLAG_BYTES))
    pos, tgt_idx = _realize_pairs(
        conn, n_src, targets,
        RngStream(cfg.seed, aligned_id),
        RngStream(cfg.seed, ("remote-tgt", src_rank, tgt_rank, call_idx)),
    )
    weights, delays = _realize_syn(
        syn, len(pos),
        RngStream(cfg.seed, ("remote-syn", src_rank, tgt_rank, call_idx)),
    )
    flags = used_flags(n_src, pos) if use_flag else np.ones(n_src, dtype=bool)
    upos, uvals = extract_used(sources, flags)
    uniq = np.unique(uvals)
    pos_to_image = np.full(n_src, -1, dtype=np.int64)
    if len(uniq):
        rmap = tgt_state.map_for(group, src_rank)
        images = lookup_or_create_images(rmap, uniq, tgt_state.pool)
        pos_to_image[upos] = images[np.searchsorted(uniq, uvals)]
    rec_src = remap_connection_sources(pos, pos_to_image)
    n_records = tgt_state.store.append_batch(rec_src, tgt_idx, weights, delays, port)
    tgt_state.device.free(n_src * (TEMP_IMAGE_SLOT_BYTES + TEMP_FLAG_BYTES))

    # --- source side -------------------------------------------------------
    if group == POINT_TO_POINT:
        if use_flag:
            pos_src = _draw_source_positions(
                conn, n_src, n_tgt, RngStream(cfg.seed, aligned_id)
            )
            flags_src = used_flags(n_src, pos_src) if pos_src is not None else (
                np.ones(n_src, dtype=bool)
            )
        else:
            flags_src = np.ones(n_src, dtype=bool)
        _, uvals_src = extract_used(sources, flags_src)
        if len(uvals_src):
            merge_into_mirror(src_state, tgt_rank, uvals_src)
    else:
        for member in members:
            roster = ranks[member].roster_sets.setdefault((group, src_rank), set())
            roster.update(int(s) for s in sources)
    return n_records


def distributed_fixed_indegree(ranks: list[RankState], cfg: SimConfig,
                               source_pops, target_pops, k_in: int,
                               syn: SynSpec, port: int = 0,
                               group: int = POINT_TO_POINT,
                               allow_multapses: bool = True) -> int:
    """Fixed in-degree from a rank-spanning population, exact per target.

    ``source_pops`` and ``target_pops`` are lists of (rank, node indices).
    Each target draws ``k_in`` sources uniformly from the whole distributed
    source population; the draws are grouped by source rank (then source
    index) and handed to per-pair assigned-node calls, so the global
    in-degree is exact and no rank ever needs another rank's state.
    """
    if k_in < 0:
        raise ValueError(f"k_in must be >= 0, got {k_in}")
    src_ranks = [int(r) for r, _ in source_pops]
    src_nodes = [np.asarray(nodes, dtype=np.int64) for _, nodes in source_pops]
    if not src_nodes or any(len(a) == 0 for a in src_nodes):
        raise ValueError("source populations must be non-empty")
    all_ranks = np.concatenate(
        [np.full(len(a), r, dtype=np.int64) for r, a in zip(src_ranks, src_nodes)]
    )
    all_nodes = np.concatenate(src_nodes)
    total = len(all_nodes)
    if not allow_multapses and k_in > total:
        raise ValueError(f"k_in {k_in} > population size {total} without multapses")

    for state in ranks:
        state.dist_counter += 1
    call_idx = ranks[0].dist_counter

    n_created = 0
    for tgt_rank, tgts in target_pops:
        tgt_rank = int(tgt_rank)
        tgts = np.asarray(tgts, dtype=np.int64)
        if len(tgts) == 0:
            raise ValueError("target populations must be non-empty")
        stream = RngStream(cfg.seed, ("dist-indegree", call_idx, tgt_rank))
        if allow_multapses:
            flat = stream.integers(0, total, size=k_in * len(tgts)).astype(np.int64)
        else:
            flat = np.concatenate(
                [stream.choice_no_replace(total, k_in) for _ in tgts]
            ).astype(np.int64)
        sigma = all_ranks[flat]
        s_val = all_nodes[flat]
        t_val = np.repeat(tgts, k_in)
        order = np.lexsort((s_val, sigma))
        sigma, s_val, t_val = sigma[order], s_val[order], t_val[order]
        uniq_sigma, starts = np.unique(sigma, return_index=True)
        bounds = list(starts) + [len(sigma)]
        for i, sr in enumerate(uniq_sigma):
            part = slice(bounds[i], bounds[i + 1])
            spec = ConnSpec("assigned")
            if int(sr) == tgt_rank:
                n_created += connect_local(
                    ranks[tgt_rank], cfg, s_val[part], t_val[part], spec, syn, port
                )
            else:
                n_created += remote_connect(
                    ranks, cfg, int(sr), s_val[part], tgt_rank, t_val[part],
                    spec, syn, port, group
                )
    return n_created


# ---------------------------------------------------------------------------
# Preparation: freeze pools, sort stores, build routing tables.
# ---------------------------------------------------------------------------

def _build_point_routes(state: RankState) -> None:
    routes: dict[int, list[tuple[int, int]]] = {}
    for tgt_rank in sorted(state.mirrors):
        arr = state.mirrors[tgt_rank]
        for i in range(len(arr)):
            routes.setdefault(int(arr[i]), []).append((tgt_rank, i))
    n_entries = 0
    for s, pairs in routes.items():
        rks = np.array([p[0] for p in pairs], dtype=np.int64)
        pos = np.array([p[1] for p in pairs], dtype=np.int64)
        state.point_routes[s] = (rks, pos)
        n_entries += len(pairs)
    state.device.alloc(n_entries * ROUTE_ENTRY_BYTES)


def _build_group_routes(state: RankState) -> None:
    routes: dict[int, list[tuple[int, int]]] = {}
    for (group, src_rank) in sorted(state.rosters):
        if src_rank != state.rank:
            continue
        roster = state.rosters[(group, src_rank)]
        for i in range(len(roster)):
            routes.setdefault(int(roster[i]), []).append((group, i))
    n_entries = 0
    for s, pairs in routes.items():
        grp = np.array([p[0] for p in pairs], dtype=np.int64)
        pos = np.array([p[1] for p in pairs], dtype=np.int64)
        state.group_routes[s] = (grp, pos)
        n_entries += len(pairs)
    state.device.alloc(n_entries * ROUTE_ENTRY_BYTES)


def prepare(ranks: list[RankState], cfg: SimConfig) -> None:
    """Freeze all ranks for propagation.  No messages are exchanged.

    Sorts every connection store, materializes first-index (and, when the
    placement plan says so, count) arrays, turns mirror/roster structures
    into the per-source routing tables, and allocates ring buffers sized
    by the largest local delay.
    """
    gids = np.concatenate(
        [np.array([row[3] for row in st.pool._rows if row[0]], dtype=np.int64)
         for st in ranks]
    ) if ranks else np.empty(0, np.int64)
    if len(np.unique(gids)) != len(gids):
        raise ConsistencyError("neuron gids must be globally unique")

    for state in ranks:
        state.require_unprepared()
        max_delay = max(
            state.store.max_delay(),
            max((d.delay_steps for d in state.devices), default=0),
            1,
        )
        n_ports = 1 + max(
            state.store.max_port(),
            max((d.port for d in state.devices), default=0),
        )
        state.pool.freeze(cfg.resolution_ms, max_delay, n_ports)
        state.store.finalize(state.pool.n_nodes)
        n_nodes = state.pool.n_nodes
        state.arena_of(state.plan.first_index).alloc(
            (n_nodes + 1) * FIRST_INDEX_ENTRY_BYTES
        )
        if state.plan.counts is not None:
            state.counts_array = state.store.counts_from_first_index()
            state.arena_of(state.plan.counts).alloc(n_nodes * COUNT_ENTRY_BYTES)
        else:
            state.counts_array = None

        for key in sorted(state.roster_sets):
            roster = np.fromiter(sorted(state.roster_sets[key]), dtype=np.int64)
            state.rosters[key] = roster
            state.arena_of(state.plan.remote_source_maps).alloc(
                len(roster) * MAP_ENTRY_BYTES
            )
        for key in sorted(state.rosters):
            group, src_rank = key
            if src_rank == state.rank:
                continue
            roster = state.rosters[key]
            lookup = np.full(len(roster), -1, dtype=np.int64)
            rmap = state.remote_maps.get(key)
            if rmap is not None and rmap.n:
                at = np.searchsorted(roster, rmap.remote)
                if (at >= len(roster)).any() or (roster[at] != rmap.remote).any():
                    raise ConsistencyError(
                        f"rank {state.rank}: map keys for {key} missing from roster"
                    )
                lookup[at] = rmap.image
            state.image_lookups[key] = lookup
            state.arena_of(state.plan.image_maps).alloc(
                len(roster) * MAP_ENTRY_BYTES
            )

        _build_point_routes(state)
        _build_group_routes(state)
        state.prepared = True
