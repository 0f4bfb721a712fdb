# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled propagation hot kernels.

Semantics mirror kernels._numpy_impl exactly, element for element, so the
two backends are interchangeable bit for bit.
"""

import numpy as np

BACKEND_NAME = "cython"


def lif_step(double[::1] v, long[::1] ref_count, unsigned char[::1] real_mask,
             double[::1] inputs, double[::1] decay, double[::1] v_rest,
             double[::1] v_reset, double[::1] v_th, long[::1] ref_steps,
             unsigned char[::1] spiked_out):
    cdef Py_ssize_t i, n = v.shape[0]
    cdef double integrated
    for i in range(n):
        if not real_mask[i]:
            spiked_out[i] = 0
            continue
        if ref_count[i] > 0:
            ref_count[i] -= 1
            v[i] = v_reset[i]
            spiked_out[i] = 0
            continue
        integrated = v_rest[i] + (v[i] - v_rest[i]) * decay[i] + inputs[i]
        if integrated >= v_th[i]:
            spiked_out[i] = 1
            v[i] = v_reset[i]
            ref_count[i] = ref_steps[i]
        else:
            spiked_out[i] = 0
            v[i] = integrated


def deliver_spikes(long[::1] src_nodes, long[::1] multiplicities,
                   long[::1] first_index, long[::1] conn_tgt,
                   long[::1] conn_port, long[::1] conn_delay,
                   double[::1] conn_weight, double[:, :, ::1] buffers,
                   long now):
    cdef Py_ssize_t j, k, lo, hi
    cdef long node, slot
    cdef double mult
    cdef long length = buffers.shape[2]
    for j in range(src_nodes.shape[0]):
        node = src_nodes[j]
        mult = <double> multiplicities[j]
        lo = first_index[node]
        hi = first_index[node + 1]
        for k in range(lo, hi):
            slot = (now + conn_delay[k]) % length
            buffers[conn_tgt[k], conn_port[k], slot] += conn_weight[k] * mult
