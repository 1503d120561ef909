"""Pure numpy/scipy versions of the compiled kernels in ``_kernels.pyx``."""

import numpy as np
from scipy import ndimage

CHUNK = 65536


def _chunk_posteriors(votes, log_prior, log_theta_t, active):
    # votes: (K, n) chunk; returns w (n, A) and log normaliser (n,)
    lw = np.broadcast_to(log_prior[active], (votes.shape[1], active.size)).copy()
    for j in range(votes.shape[0]):
        lw += log_theta_t[j][votes[j]][:, active]
    m = lw.max(axis=1)
    dead = ~np.isfinite(m)
    m_safe = np.where(dead, 0.0, m)
    with np.errstate(under="ignore", invalid="ignore"):
        w = np.exp(lw - m_safe[:, None])
    z = w.sum(axis=1)
    w[dead] = 1.0
    z[dead] = active.size
    w /= z[:, None]
    lse = np.where(dead, -np.inf, m_safe + np.log(np.where(dead, 1.0, z)))
    return w, lse


def _accumulate(acc, votes, w, active, weights=None):
    K, L = acc.shape[0], acc.shape[1]
    A = active.size
    if weights is not None:
        w = w * weights[:, None]
    for j in range(K):
        idx = (votes[j].astype(np.intp)[:, None] * L + active[None, :]).ravel()
        acc[j] += np.bincount(idx, weights=w.ravel(), minlength=L * L).reshape(L, L)


def staple_sweep(votes, log_prior, log_theta_t, active, num_threads=1):
    K, N = votes.shape
    L = log_prior.shape[0]
    acc = np.zeros((K, L, L))
    total = 0.0
    for start in range(0, N, CHUNK):
        v = votes[:, start:start + CHUNK]
        w, lse = _chunk_posteriors(v, log_prior, log_theta_t, active)
        _accumulate(acc, v, w, active)
        total += lse.sum()
    return acc, total


def staple_sweep_weighted(votes, weights, log_prior, log_theta_t, active, num_threads=1):
    K, N = votes.shape
    L = log_prior.shape[0]
    acc = np.zeros((K, L, L))
    total = 0.0
    for start in range(0, N, CHUNK):
        v = votes[:, start:start + CHUNK]
        wt = weights[start:start + CHUNK]
        w, lse = _chunk_posteriors(v, log_prior, log_theta_t, active)
        _accumulate(acc, v, w, active, wt)
        total += float((wt * lse).sum())
    return acc, total


def staple_decide(votes, log_prior, log_theta_t, active, labels_out, post_out, maxp_out,
                  want_post, want_maxp, num_threads=1):
    N = votes.shape[1]
    for start in range(0, N, CHUNK):
        sl = slice(start, start + CHUNK)
        w, _ = _chunk_posteriors(votes[:, sl], log_prior, log_theta_t, active)
        best = w.argmax(axis=1)  # first maximum -> lowest label id
        labels_out[sl] = active[best]
        if want_maxp:
            maxp_out[sl] = w[np.arange(w.shape[0]), best]
        if want_post:
            post_out[sl] = 0.0
            post_out[sl, active] = w


def _structure(connectivity):
    if connectivity not in (6, 18, 26):
        raise ValueError("connectivity must be 6, 18 or 26")
    rank = {6: 1, 18: 2, 26: 3}[connectivity]
    return ndimage.generate_binary_structure(3, rank)


def label_components(labels, nx, ny, nz, connectivity, target=-1):
    if labels.shape[0] != nx * ny * nz:
        raise ValueError("labels length does not match dims")
    structure = _structure(connectivity)
    vol = labels.reshape((nx, ny, nz), order="F")
    comp = np.zeros(vol.shape, dtype=np.int32)
    classes = [target] if target >= 0 else [c for c in np.unique(vol) if c != 0]
    offset = 0
    for c in classes:
        lab, n = ndimage.label(vol == c, structure=structure)
        if n:
            mask = lab > 0
            comp[mask] = lab[mask] + offset
            offset += n
    flat = comp.ravel(order="F")
    if offset == 0:
        return flat.astype(np.int32), 0
    # renumber 1.. by first occurrence in x-fastest order
    ids, first = np.unique(flat, return_index=True)
    keep = ids > 0
    ids, first = ids[keep], first[keep]
    order = np.argsort(first, kind="stable")
    remap = np.zeros(offset + 1, dtype=np.int32)
    remap[ids[order]] = np.arange(1, ids.size + 1, dtype=np.int32)
    return remap[flat], int(ids.size)
