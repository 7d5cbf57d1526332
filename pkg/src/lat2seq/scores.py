"""Lattice score normalization: marginals, backward normalization, peakiness."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .lattice import Lattice, LatticeError

EPS = 1e-10


def safe_log(w) -> np.ndarray:
    """ln(max(w, EPS)); underflowed scores must never reach a log."""
    return np.log(np.maximum(np.asarray(w, dtype=np.float64), EPS))


def segment_logsumexp(x: np.ndarray, starts: np.ndarray) -> np.ndarray:
    """logsumexp over contiguous row groups ``x[starts[g]:starts[g+1]]``.

    ``x`` may be 1-d or 2-d (rows grouped, columns independent).  All groups
    must be non-empty.
    """
    m = np.maximum.reduceat(x, starts, axis=0)
    counts = np.diff(np.append(starts, len(x)))
    mm = np.repeat(m, counts, axis=0)
    return m + np.log(np.add.reduceat(np.exp(x - mm), starts, axis=0))


@dataclass(frozen=True)
class NodeScores:
    """Scores of one lattice.

    ``wf`` and ``wm`` are per node.  ``wb`` is per edge, aligned with
    ``lat.edges``: ``wb[e]`` for edge (k, i) is the weight of predecessor k as
    seen from node i, so the entries of every predecessor group sum to one.
    """

    wf: np.ndarray
    wm: np.ndarray
    wb: np.ndarray
    log_wm: np.ndarray
    log_wb: np.ndarray


def compute_marginals(lat: Lattice, log: bool = False) -> np.ndarray:
    """Forward algorithm: total probability of the paths through each node."""
    log_wf = safe_log(lat.wf)
    lm = np.empty(lat.num_nodes)
    lm[0] = log_wf[0]
    ptr, src = lat.pred_ptr, lat.edges[:, 0]
    for i in range(1, lat.num_nodes):
        preds = lm[src[ptr[i]:ptr[i + 1]]]
        top = preds.max()
        lm[i] = log_wf[i] + top + np.log(np.exp(preds - top).sum())
    return lm if log else np.exp(lm)


def backward_normalize(lat: Lattice, wm: np.ndarray, log: bool = False) -> np.ndarray:
    """Per-edge predecessor weights ``wm[k] / sum(wm[k'] for k' in C(i))``."""
    wm = np.asarray(wm, dtype=np.float64)
    if np.any(wm <= 0):
        raise LatticeError(f"node {int(np.nonzero(wm <= 0)[0][0])} has zero marginal probability")
    lw = np.log(wm)[lat.edges[:, 0]]
    starts = lat.pred_ptr[1:-1]
    z = segment_logsumexp(lw, starts)
    counts = np.diff(lat.pred_ptr)[1:]
    out = lw - np.repeat(z, counts)
    return out if log else np.exp(out)


def node_scores(lat: Lattice) -> NodeScores:
    log_wm = compute_marginals(lat, log=True)
    wm = np.exp(log_wm)
    log_wb = backward_normalize(lat, wm, log=True)
    return NodeScores(lat.wf.copy(), wm, np.exp(log_wb), log_wm, log_wb)


def apply_peakiness(weights, S=1.0) -> np.ndarray:
    """``w**S / sum(w**S)`` for one group of weights, computed in log space.

    ``S`` is a scalar, or a vector of per-unit exponents; in the latter case
    the result has shape (len(weights), len(S)) and every column sums to one.
    """
    lw = safe_log(weights)
    S = np.asarray(S, dtype=np.float64)
    if S.ndim == 1:
        x = lw[:, None] * S[None, :]
    else:
        x = lw * S
    x = x - x.max(axis=0)
    e = np.exp(x)
    return e / e.sum(axis=0)
