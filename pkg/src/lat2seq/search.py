"""Beam search decoding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Graph
from .lattice import Lattice, Vocabulary
from .model import Seq2Seq


@dataclass
class Hypothesis:
    tokens: list[int]
    logprob: float
    row: int = -1  # row of the decoder state batch holding this prefix
    finished: bool = False
    steps: list[float] = field(default_factory=list)


def _log_softmax(x):
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def beam_search(model: Seq2Seq, source, beam_size: int = 5, max_len: int | None = None,
                return_all: bool = False):
    """Highest-scoring output sequence (without eos) under total log-probability.

    No length normalization.  Hypotheses ending in eos leave the beam for the
    finished pool; search stops when no live hypothesis can still beat the
    best finished one, or at ``max_len`` (default: 3x the source node count).
    """
    g = Graph()
    enc = model.encode(g, source)
    n_src = enc.num_nodes
    if max_len is None:
        max_len = 3 * n_src
    dec = model.decoder(g)
    dec.prepare(enc)
    V = model.config.trg_vocab
    state = dec.initial_state(enc, 1)
    W, _, b = dec.layers[0]
    live = [Hypothesis([], 0.0, 0)]
    finished: list[Hypothesis] = []
    eos = Vocabulary.eos_id
    for t in range(max_len):
        prev = np.array([h.tokens[-1] if h.tokens else Vocabulary.bos_id for h in live])
        px = ad.affine(ad.lookup(dec.emb, prev), W, b)
        state, logits, _ = dec.step_logits(px, state, enc)
        lp = _log_softmax(logits.value)  # (K, V)
        total = np.array([h.logprob for h in live])[:, None] + lp
        flat = total.reshape(-1)
        # stable sort: ties go to the lower (row, token) index, as argmax does
        best = np.argsort(-flat, kind="stable")[:beam_size]
        new_live = []
        for idx in best:
            r, tok = divmod(int(idx), V)
            hyp = Hypothesis(live[r].tokens + [tok], float(flat[idx]), r,
                             steps=live[r].steps + [float(lp[r, tok])])
            if tok == eos:
                hyp.finished = True
                finished.append(hyp)
            else:
                new_live.append(hyp)
        live = new_live
        if not live:
            break
        if finished and max(h.logprob for h in finished) >= live[0].logprob:
            break
        rows = np.array([h.row for h in live])
        state = [(ad.index(h, rows), ad.index(c, rows)) for h, c in state]
        for k, h in enumerate(live):
            h.row = k
    pool = finished or live
    pool = sorted(pool, key=lambda h: -h.logprob)
    if return_all:
        return pool
    best_h = pool[0]
    toks = best_h.tokens[:-1] if best_h.finished else best_h.tokens
    return toks


def greedy_decode(model: Seq2Seq, source, max_len: int | None = None) -> list[int]:
    """Argmax decoding, independent of :func:`beam_search`."""
    g = Graph()
    enc = model.encode(g, source)
    if max_len is None:
        max_len = 3 * enc.num_nodes
    dec = model.decoder(g)
    dec.prepare(enc)
    state = dec.initial_state(enc, 1)
    y = Vocabulary.bos_id
    out = []
    for _ in range(max_len):
        state, probs = dec.decode_step([y], state, enc)
        y = int(np.argmax(probs.value[0]))
        if y == Vocabulary.eos_id:
            break
        out.append(y)
    return out


def sequence_logprob(model: Seq2Seq, source, tokens) -> float:
    """Model log-probability of ``tokens`` followed by eos."""
    trg = np.append(np.asarray(tokens, dtype=np.int64), Vocabulary.eos_id)
    return -model.nll(source, trg)
