"""Neuron dynamics, stimulus devices, and spike recording.

The model neuron is a leaky integrate-and-fire unit advanced with the exact
exponential propagator for the membrane leak; synaptic input arrives as an
instantaneous membrane-potential deflection accumulated by the ring buffers.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .core import (
    BUFFER_SLOT_BYTES,
    NEURON_STATE_BYTES,
    ConsistencyError,
    MemoryArena,
    RngStream,
)


@dataclass
class LifParams:
    """Leaky integrate-and-fire parameters (mV, ms, pF).

    ``c_m`` is carried for completeness of the parameter set; with
    deflection-style synapses the update itself only needs the time
    constant.  ``i_e`` is a constant per-step drive in mV.
    """

    v_rest: float = -65.0
    v_reset: float = -65.0
    v_th: float = -50.0
    tau_m: float = 10.0
    c_m: float = 250.0
    t_ref: float = 2.0
    i_e: float = 0.0

    def __post_init__(self):
        if self.tau_m <= 0.0:
            raise ValueError(f"tau_m must be > 0, got {self.tau_m}")
        if self.t_ref < 0.0:
            raise ValueError(f"t_ref must be >= 0, got {self.t_ref}")
        if self.v_reset > self.v_th:
            raise ValueError("v_reset above threshold would spike forever")

    def decay_factor(self, dt_ms: float) -> float:
        return math.exp(-dt_ms / self.tau_m)

    def ref_steps(self, dt_ms: float) -> int:
        return int(round(self.t_ref / dt_ms))


@dataclass
class LifNeuron:
    """Scalar LIF state, the reference for the pooled/kernel version."""

    params: LifParams
    v_m: float
    ref_count: int = 0

    def update(self, input_mv: float, dt_ms: float) -> bool:
        """Advance one step with ``input_mv`` already summed; True on spike."""
        p = self.params
        if self.ref_count > 0:
            self.ref_count -= 1
            self.v_m = p.v_reset
            return False
        decay = p.decay_factor(dt_ms)
        self.v_m = p.v_rest + (self.v_m - p.v_rest) * decay + input_mv
        if self.v_m >= p.v_th:
            self.v_m = p.v_reset
            self.ref_count = p.ref_steps(dt_ms)
            return True
        return False


def lif_update(neuron: LifNeuron, input_mv: float, dt_ms: float) -> bool:
    return neuron.update(input_mv, dt_ms)


def initial_potential(seed: int, gid: int, mean: float, std: float) -> float:
    """Initial membrane potential keyed by global neuron identity.

    Keying on the gid (not on rank-local position) makes initial states
    independent of how neurons are laid out across ranks.
    """
    stream = RngStream(seed, ("init-v", int(gid)))
    return float(stream.normal(mean, std))


class NeuronPool:
    """Per-rank dense node arrays covering real neurons and image nodes.

    Node indices of real neurons and images share one space, so the arrays
    span all of it; image rows are masked out of the dynamics.  The pool is
    grown during construction and frozen (arrays + ring buffers built)
    during preparation.
    """

    def __init__(self, arena: MemoryArena):
        self.arena = arena
        self.n_nodes = 0
        self.n_real = 0
        self._rows: list[tuple] = []  # (real, params, v_init, gid) per node
        self.frozen = False
        # populated by freeze():
        self.v = None
        self.ref_count = None
        self.real_mask = None
        self.decay = None
        self.v_rest = None
        self.v_reset = None
        self.v_th = None
        self.ref_steps = None
        self.i_e = None
        self.gid = None
        self.buffers = None
        self.buffer_length = 0
        self.n_ports = 1

    def add_neurons(self, n: int, params: LifParams, v_init, gids) -> range:
        """Append ``n`` real neurons; returns their node index range."""
        if self.frozen:
            raise ConsistencyError("pool already frozen")
        if n <= 0:
            raise ValueError(f"need n >= 1 neurons, got {n}")
        v_init = np.asarray(v_init, dtype=np.float64)
        gids = np.asarray(gids, dtype=np.int64)
        if len(v_init) != n or len(gids) != n:
            raise ValueError("v_init and gids must have one entry per neuron")
        start = self.n_nodes
        for i in range(n):
            self._rows.append((True, params, float(v_init[i]), int(gids[i])))
        self.n_nodes += n
        self.n_real += n
        self.arena.alloc(n * NEURON_STATE_BYTES)
        return range(start, start + n)

    def add_image(self) -> int:
        """Append one image node (no dynamics); returns its node index."""
        if self.frozen:
            raise ConsistencyError("pool already frozen")
        idx = self.n_nodes
        self._rows.append((False, None, 0.0, -1))
        self.n_nodes += 1
        return idx

    def freeze(self, dt_ms: float, max_delay: int, n_ports: int) -> None:
        if self.frozen:
            raise ConsistencyError("pool already frozen")
        m = self.n_nodes
        self.v = np.zeros(m, dtype=np.float64)
        self.ref_count = np.zeros(m, dtype=np.int64)
        self.real_mask = np.zeros(m, dtype=np.uint8)
        self.decay = np.zeros(m, dtype=np.float64)
        self.v_rest = np.zeros(m, dtype=np.float64)
        self.v_reset = np.zeros(m, dtype=np.float64)
        self.v_th = np.full(m, np.inf, dtype=np.float64)
        self.ref_steps = np.zeros(m, dtype=np.int64)
        self.i_e = np.zeros(m, dtype=np.float64)
        self.gid = np.full(m, -1, dtype=np.int64)
        for i, (real, params, v_init, gid) in enumerate(self._rows):
            if not real:
                continue
            self.real_mask[i] = 1
            self.v[i] = v_init
            self.decay[i] = params.decay_factor(dt_ms)
            self.v_rest[i] = params.v_rest
            self.v_reset[i] = params.v_reset
            self.v_th[i] = params.v_th
            self.ref_steps[i] = params.ref_steps(dt_ms)
            self.i_e[i] = params.i_e
            self.gid[i] = gid
        self._rows = []
        self.n_ports = max(1, int(n_ports))
        self.buffer_length = max(2, int(max_delay) + 1)
        self.buffers = np.zeros(
            (m, self.n_ports, self.buffer_length), dtype=np.float64
        )
        self.arena.alloc(
            self.n_real * self.n_ports * self.buffer_length * BUFFER_SLOT_BYTES
        )
        self._spiked = np.zeros(m, dtype=np.uint8)
        self.frozen = True

    def consume_inputs(self, now: int) -> np.ndarray:
        """Read and zero the current slot of every buffer; add bias drive."""
        cur = now % self.buffer_length
        vals = self.buffers[:, :, cur].sum(axis=1)
        self.buffers[:, :, cur] = 0.0
        return vals + self.i_e

    def update(self, inputs: np.ndarray) -> np.ndarray:
        """One dynamics step; returns spiking node indices, ascending."""
        kernels.lif_step(
            self.v, self.ref_count, self.real_mask, inputs, self.decay,
            self.v_rest, self.v_reset, self.v_th, self.ref_steps, self._spiked,
        )
        return np.flatnonzero(self._spiked)

    def buffer_add(self, targets, ports, delays, amounts, now: int) -> None:
        slot = (now + np.asarray(delays)) % self.buffer_length
        np.add.at(self.buffers, (targets, ports, slot), amounts)


class PoissonSource:
    """Independent Poisson spike drive onto a set of local targets.

    Each target receives its own count every step, drawn in target order
    from the device's dedicated stream.
    """

    def __init__(self, rate_hz: float, weight: float, delay_steps: int,
                 targets, stream: RngStream, dt_ms: float, port: int = 0):
        if rate_hz < 0.0:
            raise ValueError(f"rate must be >= 0, got {rate_hz}")
        if delay_steps < 1:
            raise ValueError(f"delay must be >= 1 step, got {delay_steps}")
        self.rate_hz = float(rate_hz)
        self.weight = float(weight)
        self.delay_steps = int(delay_steps)
        self.targets = np.asarray(targets, dtype=np.int64)
        self.stream = stream
        self.port = int(port)
        self.lam = self.rate_hz * dt_ms * 1e-3

    def sample_counts(self, n: int) -> np.ndarray:
        return self.stream.poisson(self.lam, size=n)

    def emit_into(self, pool: NeuronPool, now: int) -> None:
        if len(self.targets) == 0 or self.lam == 0.0:
            return
        counts = self.sample_counts(len(self.targets))
        hit = counts > 0
        if not hit.any():
            return
        pool.buffer_add(
            self.targets[hit],
            np.full(int(hit.sum()), self.port, dtype=np.int64),
            np.full(int(hit.sum()), self.delay_steps, dtype=np.int64),
            self.weight * counts[hit].astype(np.float64),
            now,
        )


def poisson_emit(source: PoissonSource, dt_ms: float | None = None) -> int:
    """Draw one spike multiplicity for the current step."""
    return int(source.sample_counts(1)[0])


class SpikeRecorder:
    """Collects (step, gid) spike events for one rank."""

    def __init__(self):
        self.enabled = False
        self._steps: list[np.ndarray] = []
        self._gids: list[np.ndarray] = []
        self._last_step = -1

    def append(self, step: int, gids: np.ndarray) -> None:
        if not self.enabled or len(gids) == 0:
            return
        if step <= self._last_step:
            raise ConsistencyError(
                f"recorded step {step} not after previous {self._last_step}"
            )
        self._last_step = step
        self._steps.append(np.full(len(gids), step, dtype=np.int64))
        self._gids.append(np.asarray(gids, dtype=np.int64))

    def events(self) -> np.ndarray:
        """(n, 2) array of (step, gid), in recording order."""
        if not self._steps:
            return np.empty((0, 2), dtype=np.int64)
        return np.column_stack(
            (np.concatenate(self._steps), np.concatenate(self._gids))
        )

    def clear(self) -> None:
        self._steps = []
        self._gids = []
        self._last_step = -1


@dataclass
class Raster:
    """Merged spike raster: (step, gid) events sorted by time then gid."""

    events: np.ndarray  # (n, 2) int64, sorted
    resolution_ms: float

    @classmethod
    def from_events(cls, events: np.ndarray, resolution_ms: float) -> "Raster":
        events = np.asarray(events, dtype=np.int64).reshape(-1, 2)
        order = np.lexsort((events[:, 1], events[:, 0]))
        return cls(events[order], float(resolution_ms))

    @classmethod
    def merge(cls, parts: list[np.ndarray], resolution_ms: float) -> "Raster":
        if parts:
            stacked = np.concatenate([np.asarray(p).reshape(-1, 2) for p in parts])
        else:
            stacked = np.empty((0, 2), dtype=np.int64)
        return cls.from_events(stacked, resolution_ms)

    @property
    def n_events(self) -> int:
        return int(self.events.shape[0])

    def spikes_of(self, gid: int) -> np.ndarray:
        """Spike steps of one neuron, strictly increasing."""
        return self.events[self.events[:, 1] == gid, 0]

    def times_ms(self) -> np.ndarray:
        return self.events[:, 0] * self.resolution_ms

    def to_text(self) -> str:
        """Columnar form: one ``gid<TAB>time_ms`` line per spike."""
        lines = [
            f"{gid}\t{step * self.resolution_ms:.3f}"
            for step, gid in self.events
        ]
        return "\n".join(lines) + ("\n" if lines else "")

    @classmethod
    def from_text(cls, text: str, resolution_ms: float) -> "Raster":
        events = []
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ValueError(f"raster line {lineno}: expected gid<TAB>time_ms")
            gid, t_ms = int(parts[0]), float(parts[1])
            step = int(round(t_ms / resolution_ms))
            events.append((step, gid))
        return cls.from_events(np.array(events, dtype=np.int64).reshape(-1, 2),
                               resolution_ms)

    def sha256(self) -> str:
        return hashlib.sha256(self.to_text().encode("ascii")).hexdigest()
