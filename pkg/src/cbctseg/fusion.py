"""Multi-label STAPLE fusion of several label maps, plus a majority-vote baseline.

The EM model: each rater j has a confusion matrix ``theta[j, true, observed]``;
the class prior is estimated once from majority-vote frequencies and held
fixed.  The E-step computes, per voxel,

    W(s) ~ prior(s) * prod_j theta[j, s, d_j]

in log space; the M-step re-estimates every ``theta[j, s, :]`` from the
posterior mass of ``s`` over the voxels where rater j reported each label.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _backend
from .grid import LabelGrid

log = logging.getLogger(__name__)

PRIORS = ("vote-frequency", "uniform")


@dataclass(frozen=True)
class FusionConfig:
    max_iters: int = 100
    tol: float = 1e-7
    init_diagonal: float = 0.9
    prior: str = "vote-frequency"
    # exact accelerator: EM over distinct rater-vote tuples weighted by count
    group_patterns: bool = True

    def __post_init__(self):
        if not 0.5 < self.init_diagonal < 1.0:
            raise ValueError(f"init_diagonal must lie in (0.5, 1), got {self.init_diagonal}")
        if not self.tol > 0:
            raise ValueError(f"tol must be > 0, got {self.tol}")
        if self.max_iters < 0:
            raise ValueError("max_iters must be >= 0")
        if self.prior not in PRIORS:
            raise ValueError(f"prior must be one of {PRIORS}, got {self.prior!r}")


@dataclass
class RaterModel:
    """Confusion matrices ``theta[j, true, observed]`` and the class prior."""

    theta: np.ndarray
    prior: np.ndarray

    def rater(self, j: int) -> np.ndarray:
        return self.theta[j]


@dataclass
class FusionResult:
    consensus: LabelGrid
    raters: RaterModel
    iterations: int
    converged: bool
    loglik: list = field(default_factory=list)
    posteriors: Optional[np.ndarray] = None  # dims + (L,)
    max_posterior: Optional[np.ndarray] = None  # dims


def _check_raters(raters: Sequence[LabelGrid]):
    if len(raters) == 0:
        raise ValueError("at least one rater is required")
    first = raters[0]
    for i, r in enumerate(raters[1:], 1):
        if not r.same_geometry(first):
            raise ValueError(
                f"rater {i} geometry {r.dims}/{r.spacing} differs from rater 0 {first.dims}/{first.spacing}"
            )


def _stack_votes(raters, n_labels):
    votes = np.empty((len(raters), int(np.prod(raters[0].dims))), dtype=np.uint16)
    for j, r in enumerate(raters):
        flat = r.flat()
        top = int(flat.max())
        if top >= n_labels:
            raise ValueError(f"rater {j} has label {top} outside the label range 0..{n_labels - 1}")
        votes[j] = flat
    return votes


def _majority(votes, n_labels):
    """Per-voxel modal label, lowest label on ties; O(N) memory."""
    N = votes.shape[1]
    best = np.zeros(N, dtype=np.uint16)
    best_count = np.zeros(N, dtype=np.int16)
    present = np.zeros(n_labels, dtype=bool)
    for row in votes:
        present[np.unique(row)] = True
    for label in np.flatnonzero(present):
        count = np.zeros(N, dtype=np.int16)
        for row in votes:
            count += row == label
        # strict > keeps the earlier (lower) label on ties
        better = count > best_count
        best[better] = label
        best_count[better] = count[better]
    return best


def majority_vote(raters: Sequence[LabelGrid], n_labels: Optional[int] = None) -> LabelGrid:
    """Per-voxel modal label; ties go to the lowest label id."""
    _check_raters(raters)
    if n_labels is None:
        n_labels = max(int(r.data.max()) for r in raters) + 1
    votes = _stack_votes(raters, n_labels)
    cons = _majority(votes, n_labels)
    first = raters[0]
    return first.with_data(cons.reshape(first.dims, order="F"))


def initial_theta(K: int, L: int, diagonal: float) -> np.ndarray:
    if L == 1:
        return np.ones((K, 1, 1))
    theta = np.full((K, L, L), (1.0 - diagonal) / (L - 1))
    idx = np.arange(L)
    theta[:, idx, idx] = diagonal
    return theta


def _log(a):
    with np.errstate(divide="ignore"):
        return np.log(a)


def _m_step(acc, theta_old):
    # acc[j, observed, true] -> theta[j, true, observed]
    num = np.transpose(acc, (0, 2, 1))
    den = num.sum(axis=2, keepdims=True)
    theta = np.where(den > 0, num / np.where(den > 0, den, 1.0), theta_old)
    # guard against drift in the row sums
    return theta / theta.sum(axis=2, keepdims=True)


def staple_fuse(
    raters: Sequence[LabelGrid],
    config: FusionConfig = FusionConfig(),
    n_labels: Optional[int] = None,
    return_posteriors: bool = False,
    return_max_posterior: bool = False,
    backend: Optional[str] = None,
) -> FusionResult:
    """Fuse dense-label rater maps with multi-label STAPLE.

    ``n_labels`` is the size of the dense label space (defaults to the largest
    label seen plus one); any rater label outside it is an error.
    """
    _check_raters(raters)
    if n_labels is None:
        n_labels = max(int(r.data.max()) for r in raters) + 1
    L = int(n_labels)
    K = len(raters)
    kern = _backend.kernels if backend is None else _backend.get(backend)
    threads = _backend.num_threads()
    first = raters[0]
    votes = _stack_votes(raters, L)
    N = votes.shape[1]

    if config.prior == "vote-frequency":
        prior = np.bincount(_majority(votes, L), minlength=L).astype(np.float64) / N
    else:
        present = np.zeros(L, dtype=bool)
        for row in votes:
            present[np.unique(row)] = True
        prior = present / present.sum()
    active = np.flatnonzero(prior > 0).astype(np.intp)
    log_prior = _log(prior)

    if K == 1:
        # a single rater carries no agreement information; EM would only drift
        # towards the prior, so the input is returned as its own consensus
        theta = np.eye(L)[None]
        return _finish(kern, votes, log_prior, theta, active, prior, first, 0, True, [],
                       return_posteriors, return_max_posterior, threads)

    theta = initial_theta(K, L, config.init_diagonal)

    grouped = _group_patterns(votes, L) if config.group_patterns else None
    if grouped is not None:
        sweep_votes, sweep_weights, inverse = grouped
    history = []
    converged = False
    it = 0
    for it in range(1, config.max_iters + 1):
        log_theta_t = np.ascontiguousarray(np.transpose(_log(theta), (0, 2, 1)))
        if grouped is not None:
            acc, ll = kern.staple_sweep_weighted(sweep_votes, sweep_weights, log_prior, log_theta_t, active, threads)
        else:
            acc, ll = kern.staple_sweep(votes, log_prior, log_theta_t, active, threads)
        history.append(float(ll))
        new = _m_step(acc, theta)
        delta = float(np.max(np.abs(new - theta)))
        theta = new
        log.debug("staple iter %d loglik %.6f max|dtheta| %.3g", it, ll, delta)
        if delta < config.tol:
            converged = True
            break
    if grouped is not None:
        return _finish(kern, sweep_votes, log_prior, theta, active, prior, first, it, converged, history,
                       return_posteriors, return_max_posterior, threads, inverse)
    return _finish(kern, votes, log_prior, theta, active, prior, first, it, converged, history,
                   return_posteriors, return_max_posterior, threads)


def _group_patterns(votes, n_labels):
    """Collapse voxels with identical vote tuples into weighted columns.

    Every voxel of a group has the same posterior, so EM over the groups with
    their multiplicities is EM over all voxels (up to summation order).
    Returns ``(patterns (K, P), counts (P,), inverse (N,))``, or ``None`` when
    a tuple does not pack into 64 bits.
    """
    K = votes.shape[0]
    bits = max(1, int(n_labels - 1).bit_length())
    if K * bits > 64:
        return None
    key = np.zeros(votes.shape[1], dtype=np.uint64)
    for row in votes:
        key <<= np.uint64(bits)
        key |= row.astype(np.uint64)
    uniq, inverse, counts = np.unique(key, return_inverse=True, return_counts=True)
    del key
    patterns = np.empty((K, uniq.size), dtype=np.uint16)
    mask = np.uint64((1 << bits) - 1)
    for j in range(K - 1, -1, -1):
        patterns[j] = (uniq & mask).astype(np.uint16)
        uniq >>= np.uint64(bits)
    return patterns, counts.astype(np.float64), inverse.ravel()


def _finish(kern, votes, log_prior, theta, active, prior, first, iterations, converged, history,
            want_post, want_maxp, threads, inverse=None):
    L = log_prior.shape[0]
    n = votes.shape[1]
    log_theta_t = np.ascontiguousarray(np.transpose(_log(theta), (0, 2, 1)))
    labels = np.empty(n, dtype=np.uint16)
    post = np.zeros((n, L)) if want_post else np.zeros((1, L))
    maxp = np.empty(n) if want_maxp else np.zeros(1)
    kern.staple_decide(votes, log_prior, log_theta_t, active, labels, post, maxp,
                       bool(want_post), bool(want_maxp), threads)
    if inverse is not None:
        labels = labels[inverse]
        post = post[inverse] if want_post else post
        maxp = maxp[inverse] if want_maxp else maxp
    dims = first.dims
    consensus = first.with_data(labels.reshape(dims, order="F"))
    posteriors = post.reshape(dims + (L,), order="F") if want_post else None
    max_posterior = maxp.reshape(dims, order="F") if want_maxp else None
    return FusionResult(
        consensus=consensus,
        raters=RaterModel(theta=theta, prior=prior),
        iterations=iterations,
        converged=converged,
        loglik=history,
        posteriors=posteriors,
        max_posterior=max_posterior,
    )
