"""Numba kernels for the selective-scan recurrence.

The recurrence h_t = a_t * h_{t-1} + b_t is elementwise over (channel, state)
lanes, so each lane is an independent first-order scan. Hidden-state
accumulation runs in float64 regardless of the storage dtype; this keeps the
chunked (parallel-order) evaluation and the plain left-to-right evaluation
within a few ulps of each other instead of drifting apart over long sequences.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def scan_chunk_fwd(a_bar, bx, c_seq, h, y, h_cache, want_cache):
    """One chunk of the recurrence, continuing from carry state `h`.

    a_bar, bx: (m, d_inner, d_state); c_seq: (m, d_state); h: (d_inner, d_state)
    float64 carry, updated in place; y: (m, d_inner) output buffer.
    """
    m, di, ds = a_bar.shape
    for t in range(m):
        for i in range(di):
            acc = 0.0
            for s in range(ds):
                hv = a_bar[t, i, s] * h[i, s] + bx[t, i, s]
                h[i, s] = hv
                acc += c_seq[t, s] * hv
            y[t, i] = acc
            if want_cache:
                for s in range(ds):
                    h_cache[t, i, s] = h[i, s]


@njit(cache=True)
def compose_chunk(a_bar, bx, a_tot, h_tot):
    """Chunk-total composition: running the chunk from h=0.

    Writes the elementwise decay product into a_tot and the chunk-local final
    state into h_tot (both (d_inner, d_state) float64).
    """
    m, di, ds = a_bar.shape
    for i in range(di):
        for s in range(ds):
            a = 1.0
            h = 0.0
            for t in range(m):
                a = a * a_bar[t, i, s]
                h = a_bar[t, i, s] * h + bx[t, i, s]
            a_tot[i, s] = a
            h_tot[i, s] = h


@njit(cache=True)
def scan_chunk_fwd_tot(a_bar, bx, c_seq, h, y, h_cache, want_cache, a_tot, h_tot):
    """scan_chunk_fwd plus the chunk totals of compose_chunk in one traversal.

    Reads a_bar/bx once, producing the carried-in scan (h, y, optional cache)
    and the chunk's decay product / from-zero final state (a_tot, h_tot).
    """
    m, di, ds = a_bar.shape
    for i in range(di):
        for s in range(ds):
            a_tot[i, s] = 1.0
            h_tot[i, s] = 0.0
    for t in range(m):
        for i in range(di):
            acc = 0.0
            for s in range(ds):
                ab = a_bar[t, i, s]
                hv = ab * h[i, s] + bx[t, i, s]
                h[i, s] = hv
                acc += c_seq[t, s] * hv
                a_tot[i, s] = a_tot[i, s] * ab
                h_tot[i, s] = ab * h_tot[i, s] + bx[t, i, s]
            y[t, i] = acc
            if want_cache:
                for s in range(ds):
                    h_cache[t, i, s] = h[i, s]


@njit(cache=True)
def scan_chunk_bwd(a_bar, gy, c_seq, carry, lam_all):
    """Adjoint recurrence for one chunk, walked right to left.

    carry holds a_bar[t+1] * lambda[t+1] from the chunk to the right and is
    updated in place to hand off to the chunk on the left.
    """
    m, di, ds = a_bar.shape
    for t in range(m - 1, -1, -1):
        for i in range(di):
            for s in range(ds):
                lam = gy[t, i] * c_seq[t, s] + carry[i, s]
                lam_all[t, i, s] = lam
                carry[i, s] = a_bar[t, i, s] * lam
