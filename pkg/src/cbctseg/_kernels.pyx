# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops for STAPLE fusion and connected-component labeling.

Every function here has a numpy/scipy twin in ``_fallback.py`` with the same
signature; ``_backend.py`` picks one at import time.
"""

import numpy as np
cimport numpy as cnp
from cython.parallel cimport prange, parallel
from libc.math cimport exp, log, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()

# fixed voxel block size; partial sums are reduced in block order so results do
# not depend on the number of threads
cdef Py_ssize_t BLOCK = 65536
# exp(x) is exactly 0.0 in double precision below this
cdef double EXP_FLOOR = -746.0


cdef inline bint _same_votes(const cnp.uint16_t* v, Py_ssize_t N, Py_ssize_t a, Py_ssize_t b, Py_ssize_t K) noexcept nogil:
    cdef Py_ssize_t j
    for j in range(K):
        if v[j * N + a] != v[j * N + b]:
            return False
    return True


cdef inline double _posterior(const cnp.uint16_t* v, Py_ssize_t N, Py_ssize_t i,
                              const double* log_prior, const double* log_theta_t, Py_ssize_t L,
                              const cnp.intp_t* active, Py_ssize_t A,
                              double* lw, double* w, Py_ssize_t K) noexcept nogil:
    """Fill w[a] with normalised posteriors over active labels; return log normaliser."""
    cdef Py_ssize_t a, j, s
    cdef double m = -INFINITY, x, z = 0.0
    cdef Py_ssize_t LL = L * L
    for a in range(A):
        s = active[a]
        x = log_prior[s]
        for j in range(K):
            x = x + log_theta_t[j * LL + v[j * N + i] * L + s]
        lw[a] = x
        if x > m:
            m = x
    if m == -INFINITY:
        for a in range(A):
            w[a] = 1.0 / A
        return -INFINITY
    for a in range(A):
        x = lw[a] - m
        if x < EXP_FLOOR:
            w[a] = 0.0
        else:
            w[a] = exp(x)
            z = z + w[a]
    for a in range(A):
        w[a] = w[a] / z
    return m + log(z)


def staple_sweep(const cnp.uint16_t[:, ::1] votes, const double[::1] log_prior,
                 const double[:, :, ::1] log_theta_t, const cnp.intp_t[::1] active,
                 int num_threads=1):
    """One E-step plus M-step accumulation over all voxels.

    votes: (K, N) dense labels; log_theta_t[j, observed, true].
    Returns ``(acc, loglik)`` with acc[j, observed, true] = sum of posterior
    weight of ``true`` over voxels where rater j reported ``observed``.
    """
    cdef Py_ssize_t K = votes.shape[0], N = votes.shape[1], L = log_prior.shape[0]
    cdef Py_ssize_t A = active.shape[0]
    cdef Py_ssize_t nblocks = (N + BLOCK - 1) // BLOCK
    partial_arr = np.zeros((nblocks, K, L, L), dtype=np.float64)
    ll_arr = np.zeros(nblocks, dtype=np.float64)
    cdef double[:, :, :, ::1] partial = partial_arr
    cdef double[::1] ll = ll_arr
    cdef Py_ssize_t b, i, start, stop, a, j, s, prev
    cdef double run, lse, llb
    cdef double* lw
    cdef double* w
    cdef const cnp.uint16_t* vp = &votes[0, 0]
    cdef const double* lp = &log_prior[0]
    cdef const double* lt = &log_theta_t[0, 0, 0]
    cdef const cnp.intp_t* act = &active[0]

    with nogil, parallel(num_threads=num_threads):
        lw = <double*> malloc(A * sizeof(double))
        w = <double*> malloc(A * sizeof(double))
        for b in prange(nblocks, schedule="static"):
            start = b * BLOCK
            stop = start + BLOCK
            if stop > N:
                stop = N
            # runs of identical vote tuples share one posterior
            prev = start
            lse = _posterior(vp, N, start, lp, lt, L, act, A, lw, w, K)
            run = 1.0
            llb = 0.0
            for i in range(start + 1, stop + 1):
                if i < stop and _same_votes(vp, N, i, prev, K):
                    run = run + 1.0
                    continue
                for j in range(K):
                    for a in range(A):
                        s = act[a]
                        partial[b, j, vp[j * N + prev], s] += run * w[a]
                llb = llb + run * lse
                if i < stop:
                    prev = i
                    lse = _posterior(vp, N, i, lp, lt, L, act, A, lw, w, K)
                    run = 1.0
            ll[b] = llb
        free(lw)
        free(w)

    acc = np.zeros((K, L, L), dtype=np.float64)
    total = 0.0
    for b in range(nblocks):
        acc += partial_arr[b]
        total += ll_arr[b]
    return acc, total


def staple_sweep_weighted(const cnp.uint16_t[:, ::1] votes, const double[::1] weights,
                          const double[::1] log_prior, const double[:, :, ::1] log_theta_t,
                          const cnp.intp_t[::1] active, int num_threads=1):
    """Like :func:`staple_sweep` where column i stands for ``weights[i]`` voxels."""
    cdef Py_ssize_t K = votes.shape[0], N = votes.shape[1], L = log_prior.shape[0]
    cdef Py_ssize_t A = active.shape[0]
    cdef Py_ssize_t nblocks = (N + BLOCK - 1) // BLOCK
    partial_arr = np.zeros((nblocks, K, L, L), dtype=np.float64)
    ll_arr = np.zeros(nblocks, dtype=np.float64)
    cdef double[:, :, :, ::1] partial = partial_arr
    cdef double[::1] ll = ll_arr
    cdef Py_ssize_t b, i, start, stop, a, j, s
    cdef double lse, llb, c
    cdef double* lw
    cdef double* w
    cdef const cnp.uint16_t* vp = &votes[0, 0]
    cdef const double* lp = &log_prior[0]
    cdef const double* lt = &log_theta_t[0, 0, 0]
    cdef const cnp.intp_t* act = &active[0]

    with nogil, parallel(num_threads=num_threads):
        lw = <double*> malloc(A * sizeof(double))
        w = <double*> malloc(A * sizeof(double))
        for b in prange(nblocks, schedule="static"):
            start = b * BLOCK
            stop = start + BLOCK
            if stop > N:
                stop = N
            llb = 0.0
            for i in range(start, stop):
                c = weights[i]
                lse = _posterior(vp, N, i, lp, lt, L, act, A, lw, w, K)
                llb = llb + c * lse
                for j in range(K):
                    for a in range(A):
                        s = act[a]
                        partial[b, j, vp[j * N + i], s] += c * w[a]
            ll[b] = llb
        free(lw)
        free(w)

    acc = np.zeros((K, L, L), dtype=np.float64)
    total = 0.0
    for b in range(nblocks):
        acc += partial_arr[b]
        total += ll_arr[b]
    return acc, total


def staple_decide(const cnp.uint16_t[:, ::1] votes, const double[::1] log_prior,
                  const double[:, :, ::1] log_theta_t, const cnp.intp_t[::1] active,
                  cnp.uint16_t[::1] labels_out, double[:, ::1] post_out, double[::1] maxp_out,
                  bint want_post, bint want_maxp, int num_threads=1):
    """Final E-step: consensus label per voxel, optionally posteriors.

    Ties go to the lowest label id.
    """
    cdef Py_ssize_t K = votes.shape[0], N = votes.shape[1], L = log_prior.shape[0]
    cdef Py_ssize_t A = active.shape[0], i, a, best
    cdef double bw
    cdef double* lw
    cdef double* w
    cdef const cnp.uint16_t* vp = &votes[0, 0]
    cdef const double* lp = &log_prior[0]
    cdef const double* lt = &log_theta_t[0, 0, 0]
    cdef const cnp.intp_t* act = &active[0]
    with nogil, parallel(num_threads=num_threads):
        lw = <double*> malloc(A * sizeof(double))
        w = <double*> malloc(A * sizeof(double))
        for i in prange(N, schedule="static"):
            _posterior(vp, N, i, lp, lt, L, act, A, lw, w, K)
            best = 0
            bw = w[0]
            for a in range(1, A):
                if w[a] > bw:
                    bw = w[a]
                    best = a
            labels_out[i] = <cnp.uint16_t> act[best]
            if want_maxp:
                maxp_out[i] = bw
            if want_post:
                for a in range(A):
                    post_out[i, act[a]] = w[a]
        free(lw)
        free(w)


cdef inline cnp.int32_t _find(cnp.int32_t* parent, cnp.int32_t i) noexcept nogil:
    cdef cnp.int32_t root = i, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[i] != root:
        nxt = parent[i]
        parent[i] = root
        i = nxt
    return root


def label_components(const cnp.int32_t[::1] labels, int nx, int ny, int nz, int connectivity, long target=-1):
    """Union-find labeling over an x-fastest flat label array.

    With ``target >= 0`` only voxels of that label are labeled; otherwise every
    nonzero voxel is, and neighbours join only when they share a label.
    Components are numbered 1.. in order of their first voxel in scan order.
    Returns ``(components int32 array, count)``.
    """
    cdef Py_ssize_t N = labels.shape[0]
    if N != <Py_ssize_t> nx * ny * nz:
        raise ValueError("labels length does not match dims")
    if N >= 2147483647:
        raise ValueError("grid too large for 32-bit component ids")
    if connectivity not in (6, 18, 26):
        raise ValueError("connectivity must be 6, 18 or 26")

    # backward neighbour offsets (already visited in raster order)
    offs = []
    for dz in (-1, 0):
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                if (dz, dy, dx) >= (0, 0, 0):
                    continue
                order = abs(dx) + abs(dy) + abs(dz)
                if (connectivity == 6 and order > 1) or (connectivity == 18 and order > 2):
                    continue
                offs.append((dx, dy, dz))
    cdef int noff = len(offs)
    cdef int[13] odx, ody, odz
    cdef int k
    for k in range(noff):
        odx[k], ody[k], odz[k] = offs[k]

    parent_arr = np.empty(N, dtype=np.int32)
    comp_arr = np.zeros(N, dtype=np.int32)
    cdef cnp.int32_t[::1] parent = parent_arr
    cdef cnp.int32_t[::1] comp = comp_arr
    cdef cnp.int32_t* par = &parent[0]
    cdef Py_ssize_t x, y, z, i, n
    cdef int xx, yy, zz
    cdef cnp.int32_t lab, ra, rb, count = 0

    with nogil:
        for z in range(nz):
            for y in range(ny):
                for x in range(nx):
                    i = x + nx * (y + ny * z)
                    lab = labels[i]
                    if (target >= 0 and lab != target) or (target < 0 and lab == 0):
                        par[i] = -1
                        continue
                    par[i] = <cnp.int32_t> i
                    for k in range(noff):
                        xx = <int> x + odx[k]
                        yy = <int> y + ody[k]
                        zz = <int> z + odz[k]
                        if xx < 0 or xx >= nx or yy < 0 or yy >= ny or zz < 0:
                            continue
                        n = xx + nx * (yy + ny * zz)
                        if labels[n] != lab:
                            continue
                        ra = _find(par, <cnp.int32_t> i)
                        rb = _find(par, <cnp.int32_t> n)
                        # smaller index becomes root, so roots are first occurrences
                        if ra < rb:
                            par[rb] = ra
                        elif rb < ra:
                            par[ra] = rb
        for i in range(N):
            if par[i] < 0:
                continue
            ra = _find(par, <cnp.int32_t> i)
            if ra == i:
                count = count + 1
                comp[i] = count
            else:
                comp[i] = comp[ra]
    return comp_arr, int(count)
