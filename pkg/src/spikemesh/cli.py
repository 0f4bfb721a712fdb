"""Command line front end: benchmark runs, run-set validation, packing."""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import asdict, dataclass, field

import numpy as np

from .core import COMM_MODES, ConsistencyError, ProtocolError, SimConfig
from .engine import Cluster
from .models import (
    AreaSpec,
    BalancedParams,
    ExplicitNetwork,
    MultiAreaParams,
    build_balanced_network,
    build_multi_area,
    pack_areas,
    read_area_csv,
)
from .stats import population_statistics, validate_runs

MODELS = ("balanced", "multi_area", "explicit")

_BALANCED_KEYS = {"neurons_per_rank", "k_exc", "k_inh", "w_exc", "g",
                  "delay_ms", "ext_rate_hz"}
_MULTI_AREA_KEYS = {"areas", "k_intra_exc", "k_intra_inh", "k_inter",
                    "w_exc", "g", "delay_steps", "ext_rate_hz"}
_EXPLICIT_KEYS = {"n_neurons", "n_edges", "net_seed", "max_delay_steps"}

# Seed offset separating the repeat reference runs from the reference
# runs themselves during validation.
_REPEAT_SEED_STRIDE = 10_007


@dataclass
class BenchmarkManifest:
    """One benchmark description, loaded from JSON.

    ``from_dict`` collects every problem it can find before raising, so a
    bad manifest reports all its mistakes at once.
    """

    model: str
    n_ranks: int = 1
    comm_mode: str = "p2p"
    opt_level: int = 2
    seed: int = 0
    resolution_ms: float = 0.1
    warmup_ms: float = 100.0
    model_ms: float = 500.0
    repeats: int = 1
    record: bool = True
    model_params: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, raw) -> "BenchmarkManifest":
        problems: list[str] = []
        if not isinstance(raw, dict):
            raise ValueError(f"manifest must be a JSON object, got {type(raw).__name__}")
        known = set(cls.__dataclass_fields__)
        for key in sorted(set(raw) - known):
            problems.append(f"unknown key {key!r}")

        def take(key, kinds, default, check=None, what=""):
            value = raw.get(key, default)
            if isinstance(value, bool) and bool not in kinds:
                problems.append(f"{key} must be {what}, got a boolean")
                return default
            if not isinstance(value, kinds):
                problems.append(f"{key} must be {what}, got {value!r}")
                return default
            if check is not None and not check(value):
                problems.append(f"{key} out of range: {value!r}")
                return default
            return value

        model = take("model", (str,), "", lambda v: v in MODELS,
                     f"one of {MODELS}")
        if "model" not in raw:
            problems.append("model is required")
        n_ranks = take("n_ranks", (int,), 1, lambda v: v >= 1, "an integer >= 1")
        comm_mode = take("comm_mode", (str,), "p2p", lambda v: v in COMM_MODES,
                         f"one of {COMM_MODES}")
        opt_level = take("opt_level", (int,), 2, lambda v: 0 <= v <= 3,
                         "an integer 0..3")
        seed = take("seed", (int,), 0, lambda v: v >= 0, "an integer >= 0")
        resolution_ms = float(take("resolution_ms", (int, float), 0.1,
                                   lambda v: v > 0, "a positive number"))
        warmup_ms = float(take("warmup_ms", (int, float), 100.0,
                               lambda v: v >= 0, "a number >= 0"))
        model_ms = float(take("model_ms", (int, float), 500.0,
                              lambda v: v >= 0, "a number >= 0"))
        repeats = take("repeats", (int,), 1, lambda v: v >= 1, "an integer >= 1")
        record = take("record", (bool,), True, None, "a boolean")
        model_params = take("model_params", (dict,), {}, None, "an object")

        allowed = {"balanced": _BALANCED_KEYS, "multi_area": _MULTI_AREA_KEYS,
                   "explicit": _EXPLICIT_KEYS}.get(model, set())
        for key in sorted(set(model_params) - allowed):
            problems.append(f"model_params.{key} is not a {model} parameter")
        if model == "multi_area":
            areas = model_params.get("areas")
            if not isinstance(areas, list) or not areas:
                problems.append("model_params.areas must be a non-empty list")
            else:
                for i, a in enumerate(areas):
                    if (not isinstance(a, dict)
                            or set(a) != {"area_id", "neurons", "in_connections"}):
                        problems.append(
                            f"model_params.areas[{i}] needs exactly "
                            "area_id, neurons, in_connections"
                        )
        if problems:
            raise ValueError("bad manifest: " + "; ".join(problems))
        return cls(model, n_ranks, comm_mode, opt_level, seed, resolution_ms,
                   warmup_ms, model_ms, repeats, record, dict(model_params))

    def to_dict(self) -> dict:
        return asdict(self)


def load_manifest(path) -> BenchmarkManifest:
    with open(path) as fh:
        return BenchmarkManifest.from_dict(json.load(fh))


def _build_model(cluster: Cluster, man: BenchmarkManifest) -> dict[str, np.ndarray]:
    """Instantiate the manifest's model; returns gid arrays per population."""
    mp = man.model_params
    if man.model == "balanced":
        handles = build_balanced_network(cluster, BalancedParams(**mp))
        return {"exc": handles.exc_gids, "inh": handles.inh_gids}
    if man.model == "multi_area":
        areas = [AreaSpec(a["area_id"], int(a["neurons"]), int(a["in_connections"]))
                 for a in mp["areas"]]
        extra = {k: v for k, v in mp.items() if k != "areas"}
        assignment, _ = pack_areas(areas, cluster.cfg.n_ranks)
        handles = build_multi_area(cluster, areas, assignment,
                                   MultiAreaParams(**extra))
        return {h.area_id: h.gids for h in handles}
    net = ExplicitNetwork.generate(
        int(mp.get("n_neurons", 400)), int(mp.get("n_edges", 2_000)),
        int(mp.get("net_seed", 1)), int(mp.get("max_delay_steps", 10)),
    )
    rank_of = np.arange(net.n_neurons, dtype=np.int64) % cluster.cfg.n_ranks
    net.instantiate(cluster, rank_of)
    return {"all": np.arange(net.n_neurons, dtype=np.int64)}


def run_manifest(man: BenchmarkManifest, seed: int):
    """One full run: build, simulate, verify invariants.

    Returns (report, raster or None, populations).
    """
    cfg = SimConfig(n_ranks=man.n_ranks, resolution_ms=man.resolution_ms,
                    comm_mode=man.comm_mode, opt_level=man.opt_level, seed=seed)
    cluster = Cluster(cfg)
    populations = _build_model(cluster, man)
    report = cluster.simulate(man.warmup_ms, man.model_ms, record=man.record)
    cluster.check_construction_silent()
    cluster.check_alignment()
    raster = cluster.merged_raster() if man.record else None
    return report, raster, populations


# ---------------------------------------------------------------------------
# Subcommands.
# ---------------------------------------------------------------------------

def cmd_benchmark(args) -> int:
    man = load_manifest(args.manifest)
    os.makedirs(args.out, exist_ok=True)
    rows = []
    for i in range(man.repeats):
        seed = man.seed + i
        report, raster, _ = run_manifest(man, seed)
        with open(os.path.join(args.out, f"report_{i}.json"), "w") as fh:
            fh.write(report.to_json())
        if raster is not None:
            with open(os.path.join(args.out, f"raster_{i}.tsv"), "w") as fh:
                fh.write(raster.to_text())
        rows.append({
            "repeat": i,
            "seed": seed,
            "model": man.model,
            "n_ranks": man.n_ranks,
            "comm_mode": man.comm_mode,
            "opt_level": man.opt_level,
            "kernel_backend": report.kernel_backend,
            "n_neurons": report.n_neurons,
            "n_synapses": report.n_synapses,
            "n_spike_events": report.n_spike_events,
            "propagation_s": f"{report.timers['propagation']:.6f}",
            "model_time_s": f"{report.model_time_s:.6f}",
            "rtf": f"{report.rtf:.6f}",
            "raster_sha256": report.raster_sha256 or "",
        })
        print(f"run {i}: {report.n_neurons} neurons, "
              f"{report.n_synapses} synapses, rtf {report.rtf:.3f}")
    with open(os.path.join(args.out, "summary.csv"), "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)
    print(f"wrote {len(rows)} run(s) to {args.out}")
    return 0


def _statistics_for(man: BenchmarkManifest, seed: int, subset_seed: int):
    report, raster, populations = run_manifest(man, seed)
    t0 = man.warmup_ms
    t1 = man.warmup_ms + man.model_ms
    return {
        pop: population_statistics(raster, gids, t0, t1,
                                   seed=subset_seed, label=pop)
        for pop, gids in populations.items()
    }


def cmd_validate(args) -> int:
    man_a = load_manifest(args.a)
    man_b = load_manifest(args.b)
    if man_a.repeats != man_b.repeats:
        raise ValueError(
            f"run sets must match in size: {man_a.repeats} vs {man_b.repeats}"
        )
    if not man_a.record or not man_b.record:
        raise ValueError("validation needs record: true in both manifests")
    n = man_a.repeats
    set_a = [_statistics_for(man_a, man_a.seed + i, man_a.seed) for i in range(n)]
    set_ap = [_statistics_for(man_a, man_a.seed + _REPEAT_SEED_STRIDE + i,
                              man_a.seed) for i in range(n)]
    set_b = [_statistics_for(man_b, man_b.seed + i, man_a.seed) for i in range(n)]
    if set(set_a[0]) != set(set_b[0]):
        raise ValueError(
            f"population mismatch: {sorted(set_a[0])} vs {sorted(set_b[0])}"
        )
    report = validate_runs(set_a, set_ap, set_b)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "validation.json"), "w") as fh:
        fh.write(report.to_json())
    for pop, ok in sorted(report.population_verdicts.items()):
        print(f"{pop}: {'compatible' if ok else 'NOT compatible'}")
    print(f"overall: {'compatible' if report.all_compatible else 'NOT compatible'}")
    return 0


def cmd_pack(args) -> int:
    areas = read_area_csv(args.areas)
    assignment, loads = pack_areas(areas, args.bins)
    with open(args.out, "w") as fh:
        json.dump(assignment, fh, indent=2, sort_keys=True)
        fh.write("\n")
    for b, load in enumerate(loads):
        members = sorted(a for a, bb in assignment.items() if bb == b)
        print(f"bin {b}: load {load} ({', '.join(members) if members else 'empty'})")
    print(f"makespan: {max(loads)}")
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="spikemesh",
        description="Multi-rank spiking network simulation without "
                    "construction-time communication.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_bench = sub.add_parser("benchmark", help="run a benchmark manifest")
    p_bench.add_argument("--manifest", required=True, help="manifest JSON path")
    p_bench.add_argument("--out", required=True, help="output directory")
    p_bench.set_defaults(func=cmd_benchmark)

    p_val = sub.add_parser("validate",
                           help="compare two configurations statistically")
    p_val.add_argument("--a", required=True, help="reference manifest JSON")
    p_val.add_argument("--b", required=True, help="candidate manifest JSON")
    p_val.add_argument("--out", required=True, help="output directory")
    p_val.set_defaults(func=cmd_validate)

    p_pack = sub.add_parser("pack", help="pack areas onto ranks")
    p_pack.add_argument("--areas", required=True, help="area table CSV path")
    p_pack.add_argument("--bins", required=True, type=int, help="rank count")
    p_pack.add_argument("--out", required=True, help="assignment JSON path")
    p_pack.set_defaults(func=cmd_pack)

    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ConsistencyError, ProtocolError) as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
