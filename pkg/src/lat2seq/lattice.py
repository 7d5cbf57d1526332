"""Word lattices: data model, PLF parsing, line-graph conversion and path oracles.

Lattices are node-labeled DAGs.  Node ids are dense and topologically sorted,
node 0 is the start-of-sequence node and node ``n - 1`` the end node.  Every
node carries a word id and a forward-normalized score ``wf`` (probability of
the node given its predecessor); the ``wf`` of all successors of a node sum to
one.
"""

from __future__ import annotations

import ast
import json
import math
import heapq
import warnings
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

UNK, BOS, EOS = "<unk>", "<s>", "</s>"
SCORE_TOL = 1e-6


class LatticeError(ValueError):
    """Raised for structurally invalid lattices."""


class PLFSyntaxError(LatticeError):
    def __init__(self, message: str, position: int | None = None):
        self.position = position
        where = f" at column {position}" if position is not None else ""
        super().__init__(f"{message}{where}")


class Vocabulary:
    """Token <-> index map with reserved unk/bos/eos entries at 0, 1, 2."""

    unk_id, bos_id, eos_id = 0, 1, 2

    def __init__(self, tokens: Iterable[str] = ()):
        self._itos = [UNK, BOS, EOS]
        self._stoi = {t: i for i, t in enumerate(self._itos)}
        for tok in tokens:
            self.add(tok)

    def add(self, token: str) -> int:
        if token not in self._stoi:
            self._stoi[token] = len(self._itos)
            self._itos.append(token)
        return self._stoi[token]

    @classmethod
    def from_corpus(cls, lines: Iterable[Sequence[str]], min_count: int = 2) -> "Vocabulary":
        counts = Counter(tok for line in lines for tok in line)
        if not counts:
            raise ValueError("cannot build a vocabulary from an empty corpus")
        # first-seen order keeps indices stable across runs
        keep = [t for t in counts if counts[t] >= min_count and t not in (UNK, BOS, EOS)]
        return cls(keep)

    def __len__(self) -> int:
        return len(self._itos)

    def __contains__(self, token: str) -> bool:
        return token in self._stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocabulary) and self._itos == other._itos

    def index(self, token: str) -> int:
        return self._stoi.get(token, self.unk_id)

    def token(self, index: int) -> str:
        return self._itos[index]

    def encode(self, tokens: Iterable[str]) -> list[int]:
        return [self.index(t) for t in tokens]

    def decode(self, ids: Iterable[int], strip: bool = True) -> list[str]:
        out = [self._itos[i] for i in ids]
        if strip:
            out = [t for t in out if t not in (BOS, EOS)]
        return out

    @property
    def tokens(self) -> list[str]:
        return list(self._itos)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for tok in self._itos:
                f.write(tok + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            toks = [line.rstrip("\n") for line in f if line.strip()]
        if toks[:3] != [UNK, BOS, EOS]:
            raise ValueError(f"{path}: vocabulary must start with {UNK}, {BOS}, {EOS}")
        return cls(toks[3:])


# ---------------------------------------------------------------------------
# edge-labeled lattices (PLF)


@dataclass(frozen=True)
class Arc:
    src: int
    dst: int
    token: str
    score: float
    word_id: int = Vocabulary.unk_id


@dataclass(frozen=True)
class EdgeLabeledLattice:
    num_nodes: int
    arcs: tuple[Arc, ...]

    @property
    def source(self) -> int:
        return 0

    @property
    def sink(self) -> int:
        return self.num_nodes - 1


def _check_out_sums(groups: dict[int, list[float]], strict: bool, what: str) -> dict[int, float]:
    """Return per-group renormalization factors; raise in strict mode."""
    factors = {}
    for key, scores in groups.items():
        total = math.fsum(scores)
        if abs(total - 1.0) > SCORE_TOL:
            if strict:
                raise LatticeError(f"{what} {key}: outgoing scores sum to {total!r}, expected 1")
            warnings.warn(f"{what} {key}: renormalizing outgoing scores (sum {total!r})")
            factors[key] = total
    return factors


def parse_plf(text: str, vocab: Vocabulary | None = None, strict: bool = True) -> EdgeLabeledLattice:
    """Parse one lattice in Python Lattice Format.

    ``text`` is a tuple of positions, each a tuple of ``(word, score, span)``
    arcs; an arc at position ``p`` with span ``d`` connects node ``p`` to node
    ``p + d``.  A final sink node is appended after the last position.
    """
    text = text.strip()
    if not text:
        raise PLFSyntaxError("empty input", 0)
    try:
        value = ast.literal_eval(text)
    except (SyntaxError, ValueError) as exc:
        pos = getattr(exc, "offset", None)
        raise PLFSyntaxError(f"malformed PLF: {exc.msg if isinstance(exc, SyntaxError) else exc}",
                             pos) from None
    if not isinstance(value, tuple):
        raise PLFSyntaxError("top level must be a tuple of positions", 0)
    num_pos = len(value)
    arcs = []
    for p, position in enumerate(value):
        if not isinstance(position, tuple) or not position:
            raise PLFSyntaxError(f"position {p} must be a non-empty tuple of arcs")
        for arc in position:
            if (not isinstance(arc, tuple) or len(arc) != 3 or not isinstance(arc[0], str)
                    or isinstance(arc[1], bool) or not isinstance(arc[1], (int, float))
                    or not isinstance(arc[2], int)):
                raise PLFSyntaxError(f"position {p}: arc {arc!r} is not (word, score, span)")
            word, score, span = arc
            if span < 1 or p + span > num_pos:
                raise LatticeError(f"position {p}: span {span} escapes the lattice")
            if not score > 0:
                raise LatticeError(f"position {p}: non-positive score {score!r}")
            wid = vocab.index(word) if vocab is not None else Vocabulary.unk_id
            arcs.append(Arc(p, p + span, word, float(score), wid))
    ell = EdgeLabeledLattice(num_pos + 1, tuple(arcs))
    return validate_edge_labeled(ell, strict=strict)


def validate_edge_labeled(ell: EdgeLabeledLattice, strict: bool = True) -> EdgeLabeledLattice:
    if not ell.arcs:
        raise LatticeError("lattice has no edges")
    n = ell.num_nodes
    out = [[] for _ in range(n)]
    inc = [[] for _ in range(n)]
    for a in ell.arcs:
        if not 0 <= a.src < a.dst < n:
            raise LatticeError(f"arc {a.src}->{a.dst} violates topological node order")
        out[a.src].append(a)
        inc[a.dst].append(a)
    for v in range(n):
        if v != ell.source and not inc[v]:
            raise LatticeError(f"node {v} is unreachable (no incoming arcs)")
        if v != ell.sink and not out[v]:
            raise LatticeError(f"node {v} is a dead end (no outgoing arcs)")
    groups = {v: [a.score for a in out[v]] for v in range(n) if out[v]}
    factors = _check_out_sums(groups, strict, "node")
    if factors:
        ell = EdgeLabeledLattice(n, tuple(
            Arc(a.src, a.dst, a.token, a.score / factors[a.src], a.word_id) if a.src in factors else a
            for a in ell.arcs))
    return ell


def _quote(word: str) -> str:
    return "'" + word.replace("\\", "\\\\").replace("'", "\\'") + "'"


def serialize_plf(ell: EdgeLabeledLattice) -> str:
    positions = [[] for _ in range(ell.num_nodes - 1)]
    for a in ell.arcs:
        positions[a.src].append(f"({_quote(a.token)},{a.score!r},{a.dst - a.src}),")
    return "(" + "".join("(" + "".join(p) + ")," for p in positions) + ")"


# ---------------------------------------------------------------------------
# node-labeled lattices


@dataclass(frozen=True, eq=False)
class Lattice:
    words: np.ndarray
    wf: np.ndarray
    edges: np.ndarray  # (E, 2) int, sorted by (dst, src)
    check_scores: bool = field(default=True, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "words", np.asarray(self.words, dtype=np.int64))
        object.__setattr__(self, "wf", np.asarray(self.wf, dtype=np.float64))
        e = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        order = np.lexsort((e[:, 0], e[:, 1]))
        e = e[order]
        e.setflags(write=False)
        object.__setattr__(self, "edges", e)
        self.words.setflags(write=False)
        self.wf.setflags(write=False)
        self._validate()

    @property
    def num_nodes(self) -> int:
        return len(self.words)

    @property
    def num_edges(self) -> int:
        return len(self.edges)

    @property
    def bos(self) -> int:
        return 0

    @property
    def eos(self) -> int:
        return self.num_nodes - 1

    def _validate(self) -> None:
        n = self.num_nodes
        if n < 2:
            raise LatticeError("a lattice needs at least bos and eos nodes")
        if len(self.wf) != n:
            raise LatticeError("one score per node required")
        src, dst = self.edges[:, 0], self.edges[:, 1]
        if len(src) and (src.min() < 0 or dst.max() >= n):
            raise LatticeError("edge endpoint out of range")
        bad = np.nonzero(src >= dst)[0]
        if len(bad):
            k, i = self.edges[bad[0]]
            raise LatticeError(f"edge ({k}, {i}) violates the topological node order")
        if len(self.edges) > 1:
            dup = np.all(self.edges[1:] == self.edges[:-1], axis=1)
            if dup.any():
                k, i = self.edges[1:][dup][0]
                raise LatticeError(f"duplicate edge ({k}, {i})")
        indeg = np.bincount(dst, minlength=n)
        outdeg = np.bincount(src, minlength=n)
        if indeg[0] != 0 or outdeg[n - 1] != 0:
            raise LatticeError("bos must have no incoming and eos no outgoing edges")
        if np.any(indeg[1:] == 0):
            raise LatticeError(f"node {int(np.nonzero(indeg[1:] == 0)[0][0]) + 1} has no predecessor")
        if np.any(outdeg[:-1] == 0):
            raise LatticeError(f"node {int(np.nonzero(outdeg[:-1] == 0)[0][0])} has no successor")
        # with topological ids, nonzero in/out degree puts every node on a bos->eos path
        if np.any(self.wf < 0) or np.any(self.wf > 1 + SCORE_TOL):
            raise LatticeError("scores must lie in [0, 1]")
        if self.check_scores:
            sums = np.zeros(n)
            np.add.at(sums, src, self.wf[dst])
            bad = np.nonzero(np.abs(sums[:-1] - 1.0) > SCORE_TOL)[0]
            if len(bad):
                raise LatticeError(f"node {int(bad[0])}: successor scores sum to {sums[bad[0]]!r}, expected 1")

    @cached_property
    def pred_ptr(self) -> np.ndarray:
        """CSR offsets into ``edges``: predecessors of node i are
        ``edges[pred_ptr[i]:pred_ptr[i+1], 0]``."""
        ptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(self.edges[:, 1], minlength=self.num_nodes), out=ptr[1:])
        return ptr

    def predecessors(self, i: int) -> np.ndarray:
        return self.edges[self.pred_ptr[i]:self.pred_ptr[i + 1], 0]

    @cached_property
    def _succ(self) -> list[np.ndarray]:
        order = np.lexsort((self.edges[:, 1], self.edges[:, 0]))
        e = self.edges[order]
        ptr = np.zeros(self.num_nodes + 1, dtype=np.int64)
        np.cumsum(np.bincount(e[:, 0], minlength=self.num_nodes), out=ptr[1:])
        return [e[ptr[i]:ptr[i + 1], 1] for i in range(self.num_nodes)]

    def successors(self, i: int) -> np.ndarray:
        return self._succ[i]

    def __eq__(self, other) -> bool:
        return (isinstance(other, Lattice) and np.array_equal(self.words, other.words)
                and np.array_equal(self.wf, other.wf) and np.array_equal(self.edges, other.edges))

    __hash__ = None


def from_token_sequence(tokens: Sequence[int]) -> Lattice:
    """Chain lattice bos -> t1 -> ... -> tn -> eos with all scores 1."""
    if len(tokens) == 0:
        raise LatticeError("cannot build a lattice from an empty sequence")
    words = [Vocabulary.bos_id, *tokens, Vocabulary.eos_id]
    n = len(words)
    return Lattice(words, np.ones(n), [(i, i + 1) for i in range(n - 1)])


def to_node_labeled(ell: EdgeLabeledLattice) -> Lattice:
    """Line-graph conversion: one node per arc, plus fresh bos and eos nodes."""
    if not ell.arcs:
        raise LatticeError("lattice has no edges")
    arcs = sorted(range(len(ell.arcs)), key=lambda j: (ell.arcs[j].src, ell.arcs[j].dst, j))
    node_of = {j: k + 1 for k, j in enumerate(arcs)}
    n = len(arcs) + 2
    words = [Vocabulary.bos_id] + [ell.arcs[j].word_id for j in arcs] + [Vocabulary.eos_id]
    wf = [1.0] + [ell.arcs[j].score for j in arcs] + [1.0]
    leaving = {}
    for j in arcs:
        leaving.setdefault(ell.arcs[j].src, []).append(j)
    edges = []
    for j in arcs:
        a = ell.arcs[j]
        if a.src == ell.source:
            edges.append((0, node_of[j]))
        if a.dst == ell.sink:
            edges.append((node_of[j], n - 1))
        else:
            edges.extend((node_of[j], node_of[nxt]) for nxt in leaving[a.dst])
    return Lattice(words, wf, edges)


def topological_order(graph: "Lattice | int", edges: Iterable[tuple[int, int]] | None = None) -> list[int]:
    """Kahn's algorithm with smallest-id-first tie breaking.

    Accepts a :class:`Lattice` or a node count plus an edge list (the latter
    may contain cycles, which are reported).
    """
    if isinstance(graph, Lattice):
        num_nodes, edges = graph.num_nodes, [tuple(e) for e in graph.edges.tolist()]
    else:
        num_nodes = graph
    succ = [[] for _ in range(num_nodes)]
    indeg = [0] * num_nodes
    edge_list = list(edges)
    for k, i in edge_list:
        succ[k].append(i)
        indeg[i] += 1
    heap = [v for v in range(num_nodes) if indeg[v] == 0]
    heapq.heapify(heap)
    order = []
    while heap:
        v = heapq.heappop(heap)
        order.append(v)
        for w in succ[v]:
            indeg[w] -= 1
            if indeg[w] == 0:
                heapq.heappush(heap, w)
    if len(order) < num_nodes:
        done = set(order)
        k, i = next((k, i) for k, i in edge_list if k not in done and i not in done)
        raise LatticeError(f"cycle detected through edge ({k}, {i})")
    return order


def reverse(lat: Lattice) -> tuple[Lattice, np.ndarray]:
    """Reverse all edges; returns the reversed lattice and ``old_id -> new_id``.

    Node attributes (word, score) travel with their node.  The reversed lattice
    is only forward-normalized when the original's predecessor sets share
    scores (chains, confusion networks), so score sums are not checked.
    """
    n = lat.num_nodes
    # v -> n-1-v is topological for the reversed graph and is what the
    # smallest-id-first rule yields, so no re-sort is needed
    mapping = n - 1 - np.arange(n)
    words = np.empty(n, dtype=np.int64)
    wf = np.empty(n)
    words[mapping] = lat.words
    wf[mapping] = lat.wf
    edges = np.stack([mapping[lat.edges[:, 1]], mapping[lat.edges[:, 0]]], axis=1)
    return Lattice(words, wf, edges, check_scores=False), mapping


def enumerate_paths(lat: Lattice, max_paths: int = 10_000) -> list[tuple[tuple[int, ...], float]]:
    """All bos->eos paths as (word ids excluding bos/eos, product of wf)."""
    paths: list[tuple[tuple[int, ...], float]] = []

    def walk(v, words, prob):
        if v == lat.eos:
            if len(paths) >= max_paths:
                raise LatticeError(f"more than {max_paths} paths")
            paths.append((tuple(words), prob))
            return
        for w in lat.successors(v):
            w = int(w)
            walk(w, words + [int(lat.words[w])] if w != lat.eos else words, prob * lat.wf[w])

    walk(lat.bos, [], float(lat.wf[lat.bos]))
    return paths


def enumerate_node_paths(lat: Lattice, max_paths: int = 10_000) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []
    stack = [(lat.bos, (lat.bos,))]
    while stack:
        v, path = stack.pop()
        if v == lat.eos:
            out.append(path)
            if len(out) > max_paths:
                raise LatticeError(f"more than {max_paths} paths")
            continue
        for w in reversed(lat.successors(v)):
            stack.append((int(w), path + (int(w),)))
    return out


# ---------------------------------------------------------------------------
# JSON


def to_json(lat: Lattice, vocab: Vocabulary, extra_node_fields: dict | None = None,
            extra_fields: dict | None = None) -> str:
    nodes = []
    for i in range(lat.num_nodes):
        node = {"id": i, "word": vocab.token(int(lat.words[i])), "wf": float(lat.wf[i])}
        for key, values in (extra_node_fields or {}).items():
            node[key] = float(values[i])
        nodes.append(node)
    doc = {"nodes": nodes, "edges": [[int(k), int(i)] for k, i in lat.edges]}
    doc.update(extra_fields or {})
    # json writes floats via repr, which round-trips bit-exactly
    return json.dumps(doc, ensure_ascii=False)


def from_json(text: str | dict, vocab: Vocabulary, strict: bool = True) -> Lattice:
    doc = json.loads(text) if isinstance(text, str) else text
    nodes = sorted(doc["nodes"], key=lambda d: d["id"])
    if [d["id"] for d in nodes] != list(range(len(nodes))):
        raise LatticeError("node ids must be dense 0..n-1")
    words = [vocab.index(d["word"]) for d in nodes]
    wf = np.array([float(d["wf"]) for d in nodes])
    edges = [tuple(e) for e in doc["edges"]]
    if not strict:
        wf = _renormalize_wf(len(nodes), edges, wf)
    return Lattice(words, wf, edges)


def _renormalize_wf(n, edges, wf):
    succ: dict[int, list[int]] = {}
    for k, i in edges:
        succ.setdefault(k, []).append(i)
    wf = wf.copy()
    groups = {k: [wf[i] for i in v] for k, v in succ.items()}
    for k, total in _check_out_sums(groups, strict=False, what="node").items():
        for i in succ[k]:
            wf[i] /= total
    return wf


def random_edge_lattice(rng: np.random.Generator, num_states: int = 4, vocab_size: int = 10,
                        max_extra_arcs: int = 2, first_word: int = 3) -> EdgeLabeledLattice:
    """Random valid edge-labeled lattice over ``num_states`` states.

    Used for property tests and gradient checks.  Words are drawn from
    ``first_word .. vocab_size - 1`` (skipping the reserved ids).
    """
    if num_states < 2:
        raise ValueError("need at least two states")
    pairs = [(v, v + 1) for v in range(num_states - 1)]  # backbone keeps every state on a path
    for _ in range(int(rng.integers(0, max_extra_arcs + 1)) * (num_states - 1)):
        u = int(rng.integers(0, num_states - 1))
        v = int(rng.integers(u + 1, num_states))
        pairs.append((u, v))
    arcs = []
    by_src: dict[int, list[tuple[int, int]]] = {}
    for u, v in pairs:
        by_src.setdefault(u, []).append((u, v))
    for u in sorted(by_src):
        probs = rng.dirichlet(np.ones(len(by_src[u])))
        for (a, b), p in zip(by_src[u], probs):
            w = int(rng.integers(first_word, vocab_size))
            arcs.append(Arc(a, b, f"w{w}", float(p), w))
    return EdgeLabeledLattice(num_states, tuple(arcs))


def random_lattice(rng: np.random.Generator, num_states: int = 4, vocab_size: int = 10,
                   max_extra_arcs: int = 2) -> Lattice:
    return to_node_labeled(random_edge_lattice(rng, num_states, vocab_size, max_extra_arcs))
