"""Attentional LSTM decoder with the lattice-score attention bias."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .encoder import EncodedSource, init_lstm_params, lstm_cell
from .lattice import Vocabulary


@dataclass
class DecoderConfig:
    num_layers: int = 2
    hidden: int = 512  # must equal 2 * encoder hidden (initialized from encoder states)
    embed: int = 512
    attention: int = 512


def init_decoder_params(store, cfg: DecoderConfig, enc_hidden: int, trg_vocab: int, rng) -> None:
    ctx = 2 * enc_hidden
    store.add("trg_emb", ad.glorot(rng, (trg_vocab, cfg.embed)))
    for layer in range(cfg.num_layers):
        init_lstm_params(store, f"dec{layer}", cfg.embed if layer == 0 else cfg.hidden, cfg.hidden, rng)
    store.add("att.W_s", ad.glorot(rng, (cfg.attention, cfg.hidden)))
    store.add("att.W_h", ad.glorot(rng, (cfg.attention, ctx)))
    store.add("att.b", np.zeros(cfg.attention))
    store.add("att.v", ad.glorot(rng, (cfg.attention,)))
    store.add("W_hs", ad.glorot(rng, (cfg.hidden, cfg.hidden + ctx)))
    store.add("b_hs", np.zeros(cfg.hidden))
    store.add("W_so", ad.glorot(rng, (trg_vocab, cfg.hidden)))
    store.add("b_so", np.zeros(trg_vocab))


class Decoder:
    """Binds decoder parameters of one graph; cheap to construct per example."""

    def __init__(self, graph: Graph, store, cfg: DecoderConfig, batt: bool = False, S_a=1.0):
        self.graph = graph
        self.cfg = cfg
        p = lambda name: graph.param(store, name)  # noqa: E731
        self.emb = p("trg_emb")
        self.layers = [(p(f"dec{l}.W"), p(f"dec{l}.U"), p(f"dec{l}.b")) for l in range(cfg.num_layers)]
        self.W_s, self.W_h, self.b_a, self.v = p("att.W_s"), p("att.W_h"), p("att.b"), p("att.v")
        self.W_hs, self.b_hs, self.W_so, self.b_so = p("W_hs"), p("b_hs"), p("W_so"), p("b_so")
        self.batt = batt
        self.S_a = S_a  # float for fixed peakiness, Tensor when learned

    def prepare(self, enc: EncodedSource) -> EncodedSource:
        if enc.keys is None:
            enc.keys = ad.affine(enc.states, self.W_h)
        return enc

    def attend(self, enc: EncodedSource, s_prev: Tensor) -> tuple[Tensor, Tensor]:
        """Context vectors (B, 2H) and attention weights (N, B) over all nodes.

        Logits are ``v . tanh(W_s s + W_h h_i + b)``, plus ``S_a ln w_m(i)`` when
        the attention bias is enabled; the softmax runs over nodes.
        """
        q = ad.affine(s_prev, self.W_s, self.b_a)
        logits = ad.matmul(ad.tanh(enc.keys + q), self.v)  # (N, B)
        if self.batt and enc.log_wm is not None:
            if isinstance(self.S_a, Tensor):
                logits = logits + self.S_a * self.graph.constant(enc.log_wm)
            elif self.S_a != 0.0:
                logits = logits + self.graph.constant(self.S_a * enc.log_wm)
        alpha = ad.softmax(logits, axis=0)
        N, B = alpha.shape
        ctx = ad.reduce_sum(ad.reshape(alpha, (N, B, 1)) * enc.states, axis=0)
        return ctx, alpha

    def initial_state(self, enc: EncodedSource, batch: int | None = None) -> list[tuple[Tensor, Tensor]]:
        state = list(enc.init)
        if batch is not None and state[0][0].shape[0] != batch:
            rows = np.zeros(batch, dtype=np.int64)
            state = [(ad.index(h, rows), ad.index(c, rows)) for h, c in state]
        return state

    def step_logits(self, px_first: Tensor, state, enc: EncodedSource):
        """One decoder step given the first layer's input projection.

        Returns the new state and unnormalized output scores (B, V).
        """
        ctx, alpha = self.attend(enc, state[-1][0])
        new_state = []
        x = None
        for layer, ((W, U, b), (h, c)) in enumerate(zip(self.layers, state)):
            a = (px_first if layer == 0 else ad.affine(x, W, b)) + ad.affine(h, U)
            hc = lstm_cell(a, c)
            h, c = ad.index(hc, 0), ad.index(hc, 1)
            new_state.append((h, c))
            x = h
        s_tilde = ad.tanh(ad.affine(ad.concat([x, ctx], axis=-1), self.W_hs, self.b_hs))
        logits = ad.affine(s_tilde, self.W_so, self.b_so)
        return new_state, logits, alpha

    def decode_step(self, y_prev, state, enc: EncodedSource):
        """Feed previous tokens ``y_prev`` (B,) and return (state, probabilities)."""
        W, _, b = self.layers[0]
        px = ad.affine(ad.lookup(self.emb, np.asarray(y_prev)), W, b)
        new_state, logits, _ = self.step_logits(px, state, enc)
        return new_state, ad.softmax(logits, axis=-1)

    def sequence_loss(self, enc: EncodedSource, targets: np.ndarray) -> Tensor:
        """Teacher-forced negative log-likelihood summed over the batch.

        ``targets`` is (B, M) and every row must end with eos.
        """
        targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        B, M = targets.shape
        if M == 0:
            raise ValueError("empty target")
        if np.any(targets[:, -1] != Vocabulary.eos_id):
            raise ValueError("targets must end with eos")
        self.prepare(enc)
        inputs = np.concatenate([np.full((B, 1), Vocabulary.bos_id), targets[:, :-1]], axis=1)
        W, _, b = self.layers[0]
        px_all = ad.affine(ad.lookup(self.emb, inputs.T), W, b)  # (M, B, 4D)
        state = self.initial_state(enc, B)
        losses = []
        for t in range(M):
            state, logits, _ = self.step_logits(ad.index(px_all, t), state, enc)
            losses.append(ad.pick_neg_log_softmax(logits, targets[:, t]))
        return ad.sum_nodes(losses)

    def step_distributions(self, enc: EncodedSource, targets: np.ndarray) -> np.ndarray:
        """Teacher-forced output distributions (M, B, V), values only."""
        targets = np.atleast_2d(np.asarray(targets, dtype=np.int64))
        B, M = targets.shape
        self.prepare(enc)
        inputs = np.concatenate([np.full((B, 1), Vocabulary.bos_id), targets[:, :-1]], axis=1)
        W, _, b = self.layers[0]
        px_all = ad.affine(ad.lookup(self.emb, inputs.T), W, b)
        state = self.initial_state(enc, B)
        out = []
        for t in range(M):
            state, logits, _ = self.step_logits(ad.index(px_all, t), state, enc)
            out.append(ad.softmax_value(logits.value, axis=-1))
        return np.stack(out)
