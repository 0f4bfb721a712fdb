"""Compare the compiled and pure-numpy kernel backends.

Times the two hot kernels on a synthetic workload and checks that both
backends produce bitwise identical results.  Run from the repository
root:

    python benchmarks/bench_kernels.py
"""

from __future__ import annotations

import math
import time

import numpy as np

from spikemesh.kernels import available_backends


def make_workload(n_neurons=20_000, n_conns=400_000, n_ports=1, length=16,
                  n_spiking=400, seed=7):
    rng = np.random.default_rng(seed)
    v = rng.uniform(-70.0, -50.0, n_neurons)
    ref = rng.integers(0, 3, n_neurons).astype(np.int64)
    real = np.ones(n_neurons, dtype=np.uint8)
    inputs = rng.normal(0.0, 0.4, n_neurons)
    conn_first = np.linspace(0, n_conns, n_neurons + 1).astype(np.int64)
    conn_tgt = rng.integers(0, n_neurons, n_conns).astype(np.int64)
    conn_port = np.zeros(n_conns, dtype=np.int64)
    conn_delay = rng.integers(1, length, n_conns).astype(np.int64)
    conn_weight = rng.normal(0.1, 0.02, n_conns)
    buffers = np.zeros((n_neurons, n_ports, length))
    spiking = np.sort(rng.choice(n_neurons, n_spiking, replace=False)).astype(np.int64)
    mult = np.ones(n_spiking, dtype=np.int64)
    return {
        "lif": (v, ref, real, inputs, math.exp(-0.01), -65.0, -65.0, -50.0, 20),
        "deliver": (spiking, mult, conn_first, conn_tgt, conn_port,
                    conn_delay, conn_weight, buffers, 3),
    }


def run_lif(mod, work, repeats):
    v0, ref0, real, inputs, decay, v_rest, v_reset, v_th, ref_steps = work["lif"]
    best = math.inf
    out = None
    for _ in range(repeats):
        v = v0.copy()
        ref = ref0.copy()
        spiked = np.zeros(len(v), dtype=np.uint8)
        t0 = time.perf_counter()
        mod.lif_step(v, ref, real, inputs, decay, v_rest, v_reset, v_th,
                     ref_steps, spiked)
        best = min(best, time.perf_counter() - t0)
        out = (v, ref, spiked)
    return best, out


def run_deliver(mod, work, repeats):
    spiking, mult, first, tgt, port, delay, weight, buffers0, now = work["deliver"]
    best = math.inf
    out = None
    for _ in range(repeats):
        buffers = buffers0.copy()
        t0 = time.perf_counter()
        mod.deliver_spikes(spiking, mult, first, tgt, port, delay, weight,
                           buffers, now)
        best = min(best, time.perf_counter() - t0)
        out = buffers
    return best, out


def main():
    backends = available_backends()
    print(f"backends: {', '.join(backends)}")
    work = make_workload()
    results = {}
    for name, mod in backends.items():
        lif_s, lif_out = run_lif(mod, work, repeats=20)
        del_s, del_out = run_deliver(mod, work, repeats=20)
        results[name] = (lif_s, del_s, lif_out, del_out)
        print(f"{name:>8}: lif_step {lif_s * 1e3:8.3f} ms   "
              f"deliver_spikes {del_s * 1e3:8.3f} ms")
    names = list(results)
    if len(names) == 2:
        a, b = names
        for i, label in enumerate(("v", "ref", "spiked")):
            same = np.array_equal(results[a][2][i], results[b][2][i])
            print(f"lif_step {label}: {'bitwise identical' if same else 'MISMATCH'}")
        same = np.array_equal(results[a][3], results[b][3])
        print(f"deliver_spikes buffers: {'bitwise identical' if same else 'MISMATCH'}")
        lif_speedup = results[a][0] / results[b][0]
        del_speedup = results[a][1] / results[b][1]
        print(f"{b} vs {a}: lif_step x{lif_speedup:.2f}, "
              f"deliver_spikes x{del_speedup:.2f}")
    else:
        print("only one backend available; nothing to compare")


if __name__ == "__main__":
    main()
