"""Pure-numpy implementations of the propagation hot kernels.

These are the fallback used when the compiled extension is unavailable.
Both backends must produce bit-identical results: the arithmetic below is
written so each element sees exactly the operation sequence the compiled
loop performs.
"""

from __future__ import annotations

import numpy as np

BACKEND_NAME = "numpy"


def lif_step(v, ref_count, real_mask, inputs, decay, v_rest, v_reset, v_th,
             ref_steps, spiked_out):
    """Advance every neuron one step; mark spikes in ``spiked_out``.

    Refractory neurons sit clamped at reset and discard their input.
    All arrays are length M (the rank's full node range); entries where
    ``real_mask`` is 0 belong to image nodes and are left untouched.
    """
    real = real_mask.view(bool)
    refractory = real & (ref_count > 0)
    active = real & ~refractory

    integrated = v_rest + (v - v_rest) * decay + inputs
    spiked = active & (integrated >= v_th)

    v[active] = integrated[active]
    v[spiked] = v_reset[spiked]
    v[refractory] = v_reset[refractory]
    ref_count[refractory] -= 1
    ref_count[spiked] = ref_steps[spiked]

    spiked_out[:] = 0
    spiked_out[spiked] = 1


def deliver_spikes(src_nodes, multiplicities, first_index, conn_tgt,
                   conn_port, conn_delay, conn_weight, buffers, now):
    """Accumulate spikes from ``src_nodes`` into target ring buffers.

    ``buffers`` has shape (M, n_ports, length); the slot written for a
    record with delay d is (now + d) mod length.  Contributions apply in
    source order and, per source, in stored record order.
    """
    length = buffers.shape[2]
    for node, mult in zip(src_nodes, multiplicities):
        lo = first_index[node]
        hi = first_index[node + 1]
        if lo == hi:
            continue
        tgt = conn_tgt[lo:hi]
        prt = conn_port[lo:hi]
        slot = (now + conn_delay[lo:hi]) % length
        np.add.at(buffers, (tgt, prt, slot), conn_weight[lo:hi] * mult)
