"""BLEU, WER, lattice oracle WER, perplexity and decoder entropy."""

from __future__ import annotations

import math
from collections import Counter
from typing import Mapping, Sequence

import numpy as np

from .autodiff import Graph
from .lattice import Lattice
from .scores import safe_log
from .training import corpus_nll, perplexity  # noqa: F401  (re-exported)

MAX_ORDER = 4


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[k:k + n]) for k in range(len(tokens) - n + 1))


def bleu_stats(hypotheses, references):
    """Clipped n-gram matches, totals, hypothesis and closest-reference length."""
    if len(hypotheses) == 0:
        raise ValueError("empty hypothesis set")
    if len(hypotheses) != len(references):
        raise ValueError("hypothesis and reference counts differ")
    match = np.zeros(MAX_ORDER)
    total = np.zeros(MAX_ORDER)
    hyp_len = ref_len = 0
    for hyp, refs in zip(hypotheses, references):
        if refs and isinstance(refs[0], (str, int, np.integer)):
            refs = [refs]
        if not refs:
            raise ValueError("segment without references")
        hyp = list(hyp)
        hyp_len += len(hyp)
        # closest reference length, shorter one on ties
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, MAX_ORDER + 1):
            counts = _ngrams(hyp, n)
            max_ref = Counter()
            for r in refs:
                for g, c in _ngrams(list(r), n).items():
                    max_ref[g] = max(max_ref[g], c)
            match[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    return match, total, hyp_len, ref_len


def bleu(hypotheses, references) -> float:
    """Corpus-level 4-gram BLEU on a 0..100 scale, without smoothing.

    ``references[k]`` is either one token list or a list of alternatives.
    Any n-gram order without matches gives 0.
    """
    match, total, hyp_len, ref_len = bleu_stats(hypotheses, references)
    if np.any(match == 0):
        return 0.0
    log_prec = np.mean(np.log(match / total))
    bp = 1.0 if hyp_len > ref_len else math.exp(1.0 - ref_len / hyp_len)
    return 100.0 * bp * math.exp(log_prec)


def edit_distance(hyp: Sequence, ref: Sequence) -> int:
    """Levenshtein distance with unit costs."""
    prev = list(range(len(ref) + 1))
    for i, h in enumerate(hyp, 1):
        cur = [i] + [0] * len(ref)
        for j, r in enumerate(ref, 1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (h != r))
        prev = cur
    return prev[-1]


def wer(hyp: Sequence, ref: Sequence) -> float:
    if len(ref) == 0:
        raise ValueError("empty reference")
    return 100.0 * edit_distance(list(hyp), list(ref)) / len(ref)


def lattice_oracle(lat: Lattice, ref: Sequence) -> tuple[list[int], float]:
    """Lattice path with the lowest edit distance to ``ref``.

    Dynamic program over (node, reference position).  Among equal-cost paths
    the more probable one wins, then the lexicographically smaller node-id
    sequence.  Returns the path's words (bos/eos excluded) and its WER.
    """
    ref = list(ref)
    if not ref:
        raise ValueError("empty reference")
    M = len(ref)
    n = lat.num_nodes
    logw = safe_log(lat.wf)
    # best[i][j] = (cost, -log prob, node path) for paths ending at node i
    # that have consumed ref[:j]
    best: list[list[tuple] | None] = [None] * n
    best[0] = [(j, 0.0, (0,)) for j in range(M + 1)]
    for i in range(1, n):
        preds = lat.predecessors(i)
        row = []
        is_eos = i == n - 1
        word = None if is_eos else lat.words[i]
        for j in range(M + 1):
            cand = None
            for k in preds:
                for cost, nlp, path in _extend(best[k], j, word, ref):
                    item = (cost, nlp - (0.0 if is_eos else logw[i]), path + (i,))
                    if cand is None or item < cand:
                        cand = item
            # reference word deleted after this node
            if j > 0 and not is_eos:
                prev = row[j - 1]
                item = (prev[0] + 1, prev[1], prev[2])
                if item < cand:
                    cand = item
            row.append(cand)
        best[i] = row
    cost, _, path = best[n - 1][M]
    words = [int(lat.words[v]) for v in path[1:-1]]
    return words, 100.0 * cost / M


def _extend(row, j, word, ref):
    if word is None:
        # eos consumes nothing
        yield row[j]
        return
    cost, nlp, path = row[j]
    yield cost + 1, nlp, path  # inserted lattice word
    if j > 0:
        cost, nlp, path = row[j - 1]
        yield cost + (word != ref[j - 1]), nlp, path


def one_best(lat: Lattice) -> list[int]:
    """Most probable path (product of w_f), bos/eos excluded."""
    n = lat.num_nodes
    score = np.full(n, -np.inf)
    back = np.zeros(n, dtype=np.int64)
    score[0] = 0.0
    logw = safe_log(lat.wf)
    for i in range(1, n):
        preds = lat.predecessors(i)
        k = preds[int(np.argmax(score[preds]))]
        back[i] = k
        score[i] = score[k] + logw[i]
    path = []
    v = back[n - 1]
    while v != 0:
        path.append(int(lat.words[v]))
        v = back[v]
    return path[::-1]


def entropy(dists: np.ndarray) -> float:
    """Mean Shannon entropy (nats) of the distributions along the last axis."""
    p = np.asarray(dists, dtype=np.float64)
    terms = np.where(p > 0, -p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return float(terms.sum(axis=-1).mean())


def decoder_entropy(model, examples, n_sentences: int = 100) -> float:
    """Mean teacher-forced entropy of the decoder softmax over all steps of
    the first ``n_sentences`` examples."""
    acc, steps = 0.0, 0
    for src, trg in list(examples)[:n_sentences]:
        g = Graph()
        enc = model.encode(g, src)
        dists = model.decoder(g).step_distributions(enc, trg)
        ent = dists.shape[0] * dists.shape[1]
        acc += entropy(dists) * ent
        steps += ent
    return acc / steps


def assign_bins(values: Sequence[float], edges: Sequence[float]) -> np.ndarray:
    """Bin index of each value for half-open bins [e_k, e_k+1); the last bin
    is closed.  Values outside the edges get -1."""
    edges = np.asarray(edges, dtype=np.float64)
    v = np.asarray(values, dtype=np.float64)
    idx = np.searchsorted(edges, v, side="right") - 1
    idx[v == edges[-1]] = len(edges) - 2
    idx[(v < edges[0]) | (v > edges[-1])] = -1
    return idx


def wer_binned_bleu(outputs: Mapping[str, Sequence], references, one_best_wer: Sequence[float],
                    edges: Sequence[float], sample_size: int, seed: int = 0) -> dict[str, list[float | None]]:
    """Per-bin BLEU for each system, binning sentences by 1-best WER.

    Each bin is subsampled (without replacement) to at most ``sample_size``
    sentences so bins have comparable sizes; an empty bin is ``None``.
    """
    bins = assign_bins(one_best_wer, edges)
    rng = np.random.default_rng(seed)
    chosen = []
    for b in range(len(edges) - 1):
        members = np.flatnonzero(bins == b)
        if len(members) > sample_size:
            members = np.sort(rng.choice(members, sample_size, replace=False))
        chosen.append(members)
    table = {}
    for name, hyps in outputs.items():
        row = []
        for members in chosen:
            if len(members) == 0:
                row.append(None)
            else:
                row.append(bleu([hyps[k] for k in members], [references[k] for k in members]))
        table[name] = row
    return table
