"""Sequential, child-sum TreeLSTM and score-aware LatticeLSTM encoders.

All recurrences share one parameter set per layer and direction
(``W`` (4H, in), ``U`` (4H, H), ``b`` (4H,), gate order i, f, o, u), so a
model pre-trained on sequences runs unchanged on lattices.

Two routes compute lattice layers: :func:`lattice_lstm_step` composes graph
primitives node by node (the reference), while :func:`lattice_lstm_layer`
runs the whole layer as one fused graph operation backed by
:mod:`lat2seq.kernels`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import Graph, Tensor
from .lattice import Lattice
from .scores import NodeScores, safe_log, segment_logsumexp

PEAKINESS_MODES = ("fixed0", "fixed1", "learned")


@dataclass
class EncoderConfig:
    num_layers: int = 2
    hidden: int = 256  # per direction
    embed: int = 512
    mode: str = "lattice"  # "sequential" encodes lattices as a plain TreeLSTM
    wcs: bool = True
    bfg: bool = True
    batt: bool = True
    peak_wcs: str = "learned"
    peak_bfg: str = "learned"
    peak_batt: str = "learned"

    def __post_init__(self):
        if self.mode not in ("sequential", "lattice"):
            raise ValueError(f"unknown encoder mode {self.mode!r}")
        for name in ("peak_wcs", "peak_bfg", "peak_batt"):
            if getattr(self, name) not in PEAKINESS_MODES:
                raise ValueError(f"{name} must be one of {PEAKINESS_MODES}")

    @property
    def flags(self) -> dict[str, bool]:
        on = self.mode == "lattice"
        return {"wcs": on and self.wcs, "bfg": on and self.bfg, "batt": on and self.batt}


def init_lstm_params(store, prefix: str, in_dim: int, hidden: int, rng) -> None:
    store.add(f"{prefix}.W", ad.glorot(rng, (4 * hidden, in_dim)))
    store.add(f"{prefix}.U", ad.glorot(rng, (4 * hidden, hidden)))
    b = np.zeros(4 * hidden)
    b[hidden:2 * hidden] = 1.0  # forget gate
    store.add(f"{prefix}.b", b)


def init_encoder_params(store, cfg: EncoderConfig, src_vocab: int, rng) -> None:
    store.add("src_emb_fwd", ad.glorot(rng, (src_vocab, cfg.embed)))
    store.add("src_emb_bwd", ad.glorot(rng, (src_vocab, cfg.embed)))
    for layer in range(cfg.num_layers):
        in_dim = cfg.embed if layer == 0 else cfg.hidden
        for d in ("fwd", "bwd"):
            init_lstm_params(store, f"enc{layer}.{d}", in_dim, cfg.hidden, rng)
        store.add(f"enc{layer}.S_h", np.ones(cfg.hidden))
        store.add(f"enc{layer}.S_f", np.ones(cfg.hidden))
    store.add("S_a", np.array(1.0))


# ---------------------------------------------------------------------------
# single steps (graph primitives only)


def _gates(a: Tensor, H: int):
    ai, af, ao, au = ad.split_last(a, 4)
    return ad.sigmoid(ai), ad.sigmoid(af), ad.sigmoid(ao), ad.tanh(au)


def lstm_step(x: Tensor, h_prev: Tensor | None, c_prev: Tensor | None,
              W: Tensor, U: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Sequential LSTM cell; ``None`` previous state means the zero state."""
    H = U.shape[1]
    a = ad.affine(x, W, b)
    if h_prev is not None:
        a = a + ad.affine(h_prev, U)
    i, f, o, u = _gates(a, H)
    c = i * u
    if c_prev is not None:
        c = c + f * c_prev
    return o * ad.tanh(c), c


def peaky_log_weights(log_w: np.ndarray, S) -> Tensor | np.ndarray:
    """Log of ``w**S / sum(w**S)`` over one predecessor group.

    ``log_w`` is (K,); ``S`` a per-unit vector (array or Tensor of shape (H,)).
    Returns (K, H).
    """
    if isinstance(S, Tensor):
        x = ad.mul(S.graph.constant(log_w[:, None]), S)
        return ad.log_softmax(x, axis=0)
    x = log_w[:, None] * np.asarray(S)[None, :]
    z = segment_logsumexp(x, np.array([0]))
    return x - z


def lattice_lstm_step(x: Tensor, preds: list[tuple[Tensor, Tensor]], weights, W: Tensor,
                      U: Tensor, b: Tensor, wcs: bool = True, bfg: bool = True,
                      S_h=1.0, S_f=1.0) -> tuple[Tensor, Tensor]:
    """One LatticeLSTM node update from its predecessors ``(h_k, c_k)``.

    ``weights`` are the predecessors' normalized lattice scores.  With ``wcs``
    the recurrent input is the peaky-weighted child-sum, otherwise the plain
    TreeLSTM sum; with ``bfg`` each forget gate receives the log of the
    peaky-normalized weight as an extra bias.  ``S_h``/``S_f`` are floats,
    arrays or Tensors of shape (H,).
    """
    if not preds:
        raise ValueError("lattice_lstm_step needs at least one predecessor")
    g = x.graph
    H = U.shape[1]
    log_w = safe_log(np.asarray(weights, dtype=np.float64))

    def per_unit(S):
        return S if isinstance(S, Tensor) else np.broadcast_to(np.asarray(S, dtype=np.float64), (H,))

    hs = [h for h, _ in preds]
    if wcs:
        lw = peaky_log_weights(log_w, per_unit(S_h))
        if isinstance(lw, Tensor):
            wts = ad.exp(lw)
            htil = ad.sum_nodes([ad.index(wts, k) * h for k, h in enumerate(hs)])
        else:
            wts = np.exp(lw)
            htil = ad.sum_nodes([h * g.constant(wts[k]) for k, h in enumerate(hs)])
    else:
        htil = ad.sum_nodes(hs) if len(hs) > 1 else hs[0]
    px = ad.affine(x, W, b)
    a_iou = px + ad.affine(htil, U)
    ai, _, ao, au = ad.split_last(a_iou, 4)
    i, o, u = ad.sigmoid(ai), ad.sigmoid(ao), ad.tanh(au)
    px_f = ad.slice_last(px, H, 2 * H)
    U_f = ad.index(U, slice(H, 2 * H))
    bias = peaky_log_weights(log_w, per_unit(S_f)) if bfg else None
    terms = [i * u]
    for k, (h_k, c_k) in enumerate(preds):
        a_f = px_f + ad.affine(h_k, U_f)
        if bias is not None:
            a_f = a_f + (ad.index(bias, k) if isinstance(bias, Tensor) else g.constant(bias[k]))
        terms.append(ad.sigmoid(a_f) * c_k)
    c = ad.sum_nodes(terms)
    return o * ad.tanh(c), c


# ---------------------------------------------------------------------------
# fused operations


def lstm_cell(a: Tensor, c_prev: Tensor | None) -> Tensor:
    """Fused LSTM cell on pre-activations ``a`` (B, 4H).

    Returns a tensor of shape (2, B, H) stacking ``h`` and ``c``.
    """
    av = a.value
    H = av.shape[-1] // 4
    i = ad.sigmoid_value(av[..., :H])
    f = ad.sigmoid_value(av[..., H:2 * H])
    o = ad.sigmoid_value(av[..., 2 * H:3 * H])
    u = np.tanh(av[..., 3 * H:])
    cp = c_prev.value if c_prev is not None else None
    c = i * u if cp is None else i * u + f * cp
    tc = np.tanh(c)
    h = o * tc

    def backward(gy):
        gh, gc = gy[0], gy[1]
        dc = gc + gh * o * (1.0 - tc * tc)
        da = np.empty_like(av)
        da[..., :H] = dc * u * i * (1.0 - i)
        da[..., H:2 * H] = 0.0 if cp is None else dc * cp * f * (1.0 - f)
        da[..., 2 * H:3 * H] = gh * tc * o * (1.0 - o)
        da[..., 3 * H:] = dc * i * (1.0 - u * u)
        if cp is None:
            return (da,)
        return da, dc * f

    inputs = (a,) if c_prev is None else (a, c_prev)
    return a.graph.op("lstm_cell", np.stack([h, c]), inputs, backward)


def lattice_lstm_layer(px: Tensor, U: Tensor, wh: Tensor, bf: Tensor,
                       ptr: np.ndarray, pred: np.ndarray) -> Tensor:
    """Whole LatticeLSTM layer as one operation.

    ``px`` (N, B, 4H) input projections, ``U`` (4H, H), ``wh``/``bf`` (E, H)
    per-edge child-sum weights and forget biases.  Returns (2, N, B, H)
    stacking hidden and cell states in processing order.
    """
    h, c, cache = kernels.lattice_lstm_forward(px.value, U.value, ptr, pred, wh.value, bf.value)
    whv = wh.value

    def backward(gy):
        dpx, dU, dwh, dbf = kernels.lattice_lstm_backward(gy[0], gy[1], cache, ptr, pred, whv)
        return dpx, dU, dwh, dbf

    return px.graph.op("lattice_lstm", np.stack([h, c]), (px, U, wh, bf), backward)


# ---------------------------------------------------------------------------
# whole-source encoding


@dataclass
class DirectionPlan:
    """Processing order for one direction of a lattice.

    ``order[p]`` is the lattice node processed at step p; predecessor lists
    (``ptr``, ``pred``) are in processing positions; ``log_w`` holds the
    per-edge log score of each predecessor as seen from its consumer.
    """

    order: np.ndarray
    ptr: np.ndarray
    pred: np.ndarray
    log_w: np.ndarray


def plan_directions(lat: Lattice, scores: NodeScores) -> tuple[DirectionPlan, DirectionPlan]:
    n = lat.num_nodes
    src, dst = lat.edges[:, 0], lat.edges[:, 1]
    # forward: predecessors with backward-normalized (per-edge) scores
    fwd = DirectionPlan(np.arange(n), lat.pred_ptr.copy(), src.copy(), scores.log_wb.copy())
    # backward: successors act as predecessors, weighted by their forward score
    pos = n - 1 - np.arange(n)
    consumer, producer = pos[src], pos[dst]
    order = np.lexsort((producer, consumer))
    ptr = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(np.bincount(consumer, minlength=n), out=ptr[1:])
    bwd = DirectionPlan(pos.copy(), ptr, producer[order], safe_log(lat.wf)[dst][order])
    return fwd, bwd


@dataclass
class EncodedSource:
    states: Tensor  # (N, B, 2H): forward | backward top-layer states per node
    log_wm: np.ndarray | None  # (N, 1) floored log marginals, None for sequences
    init: list[tuple[Tensor, Tensor]] = field(default_factory=list)  # decoder (h0, c0) per layer
    keys: Tensor | None = None  # attention projections of ``states``

    @property
    def num_nodes(self) -> int:
        return self.states.shape[0]


def _peakiness(graph: Graph, store, name: str, mode: str):
    if mode == "fixed0":
        return 0.0
    if mode == "fixed1":
        return 1.0
    return graph.param(store, name)


def edge_weights(graph: Graph, log_w: np.ndarray, starts: np.ndarray, H: int, S) -> Tensor:
    """Per-edge (E, H) log peaky weights normalized within predecessor groups."""
    if isinstance(S, Tensor):
        x = ad.mul(graph.constant(log_w[:, None]), S)
        return ad.segment_log_softmax(x, starts)
    x = np.repeat((log_w * S)[:, None], H, axis=1)
    counts = np.diff(np.append(starts, len(x)))
    return graph.constant(x - np.repeat(segment_logsumexp(x, starts), counts, axis=0))


def encode_lattice(graph: Graph, store, cfg: EncoderConfig, lat: Lattice,
                   scores: NodeScores, route: str = "fused") -> EncodedSource:
    flags = cfg.flags
    H = cfg.hidden
    plans = plan_directions(lat, scores)
    tops, init = [], [[] for _ in range(cfg.num_layers)]
    for d, plan, emb in (("fwd", plans[0], "src_emb_fwd"), ("bwd", plans[1], "src_emb_bwd")):
        x = ad.lookup(graph.param(store, emb), lat.words[plan.order][:, None])  # (N, 1, E)
        starts = plan.ptr[1:-1]
        for layer in range(cfg.num_layers):
            W, U, b = (graph.param(store, f"enc{layer}.{d}.{p}") for p in "WUb")
            S_h = _peakiness(graph, store, f"enc{layer}.S_h", cfg.peak_wcs) if flags["wcs"] else None
            S_f = _peakiness(graph, store, f"enc{layer}.S_f", cfg.peak_bfg) if flags["bfg"] else None
            if route == "fused":
                E = len(plan.pred)
                wh = (ad.exp(edge_weights(graph, plan.log_w, starts, H, S_h)) if flags["wcs"]
                      else graph.constant(np.ones((E, H))))
                bf = (edge_weights(graph, plan.log_w, starts, H, S_f) if flags["bfg"]
                      else graph.constant(np.zeros((E, H))))
                hc = lattice_lstm_layer(ad.affine(x, W, b), U, wh, bf, plan.ptr, plan.pred)
                h, c = ad.index(hc, 0), ad.index(hc, 1)
                last_h, last_c = ad.index(h, -1), ad.index(c, -1)
            else:
                hs, cs = _composed_layer(graph, x, W, U, b, plan, flags, S_h, S_f)
                h = ad.stack(hs)
                last_h, last_c = hs[-1], cs[-1]
            init[layer].append((last_h, last_c))
            x = h
        tops.append(x)
    n = lat.num_nodes
    bwd_by_node = ad.index(tops[1], n - 1 - np.arange(n))
    states = ad.concat([tops[0], bwd_by_node], axis=-1)
    init_states = [(ad.concat([f[0], b_[0]]), ad.concat([f[1], b_[1]])) for f, b_ in init]
    log_wm = None
    if flags["batt"]:
        log_wm = np.maximum(scores.log_wm, np.log(1e-10))[:, None]
    return EncodedSource(states, log_wm, init_states)


def _composed_layer(graph, x, W, U, b, plan, flags, S_h, S_f):
    hs, cs = [], []
    n = len(plan.order)
    for p in range(n):
        xp = ad.index(x, p)
        s, t = plan.ptr[p], plan.ptr[p + 1]
        if t == s:
            h, c = lstm_step(xp, None, None, W, U, b)
        else:
            preds = [(hs[k], cs[k]) for k in plan.pred[s:t]]
            w = np.exp(plan.log_w[s:t])
            h, c = lattice_lstm_step(
                xp, preds, w, W, U, b, wcs=flags["wcs"], bfg=flags["bfg"],
                S_h=S_h if S_h is not None else 1.0, S_f=S_f if S_f is not None else 1.0)
        hs.append(h)
        cs.append(c)
    return hs, cs


def encode_sequences(graph: Graph, store, cfg: EncoderConfig, tokens: np.ndarray) -> EncodedSource:
    """Bidirectional sequential encoder over a batch (B, T) of equal-length
    sequences that already include bos/eos."""
    tokens = np.asarray(tokens, dtype=np.int64)
    B, T = tokens.shape
    tops, init = [], [[] for _ in range(cfg.num_layers)]
    for d, emb, ids in (("fwd", "src_emb_fwd", tokens.T), ("bwd", "src_emb_bwd", tokens.T[::-1])):
        x = ad.lookup(graph.param(store, emb), ids)  # (T, B, E) in processing order
        for layer in range(cfg.num_layers):
            W, U, b = (graph.param(store, f"enc{layer}.{d}.{p}") for p in "WUb")
            px = ad.affine(x, W, b)
            h = c = None
            hs = []
            for t in range(T):
                a = ad.index(px, t)
                if h is not None:
                    a = a + ad.affine(h, U)
                hc = lstm_cell(a, c)
                h, c = ad.index(hc, 0), ad.index(hc, 1)
                hs.append(h)
            init[layer].append((h, c))
            x = ad.stack(hs)
        tops.append(x)
    bwd_by_pos = ad.index(tops[1], np.arange(T)[::-1].copy())
    states = ad.concat([tops[0], bwd_by_pos], axis=-1)
    init_states = [(ad.concat([f[0], b_[0]]), ad.concat([f[1], b_[1]])) for f, b_ in init]
    return EncodedSource(states, None, init_states)
