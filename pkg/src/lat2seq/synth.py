"""Synthetic speech-translation corpus with simulated recognition lattices.

Source sentences come from a sparse random Markov chain over ``s*`` tokens,
targets are their token-wise image under a fixed bijection onto ``t*``
tokens.  Each source position becomes a confusion set (the true token plus
``distractors`` members of its confusion class) whose scores play the role
of recognizer posteriors; the lattice is the resulting sausage.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .lattice import Arc, EdgeLabeledLattice, Lattice, Vocabulary, to_node_labeled


@dataclass
class SynthConfig:
    src_vocab: int = 50
    trg_vocab: int = 50
    min_len: int = 5
    max_len: int = 10
    n_train: int = 2000
    n_dev: int = 200
    n_test: int = 200
    p_correct: float = 0.7
    distractors: int = 2
    score_noise: float = 0.0  # std of log-normal noise on the masses, 0 = none
    branching: int = 3  # successor classes per token in the source Markov chain
    context_alpha: float = 0.07  # Dirichlet concentration of member choice
    seed: int = 0

    def __post_init__(self):
        if min(self.src_vocab, self.trg_vocab, self.n_train, self.n_dev, self.n_test) <= 0:
            raise ValueError("vocabulary and corpus sizes must be positive")
        if self.src_vocab != self.trg_vocab:
            raise ValueError("the toy lexicon is a bijection: src_vocab must equal trg_vocab")
        if not 1 <= self.min_len <= self.max_len:
            raise ValueError("need 1 <= min_len <= max_len")
        if not 0.0 < self.p_correct <= 1.0:
            raise ValueError("p_correct must lie in (0, 1]")
        if self.distractors < 0 or self.distractors + 1 > self.src_vocab:
            raise ValueError("distractors must be in [0, src_vocab - 1]")
        if self.distractors == 0 and self.p_correct != 1.0:
            raise ValueError("without distractors p_correct must be 1")
        if self.distractors > 0 and self.p_correct == 1.0 and self.score_noise == 0.0:
            raise ValueError("distractors need positive mass: p_correct must be < 1")
        if not 1 <= self.branching <= self.src_vocab:
            raise ValueError("branching must be in [1, src_vocab]")
        if self.context_alpha <= 0:
            raise ValueError("context_alpha must be positive")

    def masses(self) -> np.ndarray:
        """Base masses: the correct token first, distractors sharing the rest."""
        d = self.distractors
        if d == 0:
            return np.ones(1)
        return np.array([self.p_correct] + [(1.0 - self.p_correct) / d] * d)


@dataclass
class Split:
    source: list[list[str]]
    target: list[list[str]]
    lattices: list[EdgeLabeledLattice]
    one_best: list[list[str]]


@dataclass
class SynthCorpus:
    config: SynthConfig
    train: Split
    dev: Split
    test: Split
    lexicon: dict[str, str] = field(default_factory=dict)
    report: dict[str, float] = field(default_factory=dict)

    def splits(self):
        return {"train": self.train, "dev": self.dev, "test": self.test}


class SourceModel:
    """First-order Markov chain whose transitions factor through the
    confusion classes.

    A token moves to one of ``branching`` successor classes with class-level
    probabilities (shared by class-mates, so the next class says nothing
    about which member came before) and then to a member of that class drawn
    from a token-specific Dirichlet(``context_alpha``) distribution.  Small
    alpha makes the member predictable from its neighbours.
    """

    def __init__(self, cfg: "SynthConfig", classes: np.ndarray, rng: np.random.Generator):
        V = cfg.src_vocab
        n_cls = int(classes.max()) + 1
        members = [np.flatnonzero(classes == c) for c in range(n_cls)]
        b = min(cfg.branching, n_cls)
        succ = [rng.choice(n_cls, b, replace=False) for _ in range(n_cls)]
        prob = [rng.dirichlet(np.ones(b)) for _ in range(n_cls)]
        T = np.zeros((V, V))
        for w in range(V):
            c = classes[w]
            for c2, p in zip(succ[c], prob[c]):
                m = members[c2]
                T[w, m] = p * rng.dirichlet(np.full(len(m), cfg.context_alpha))
        self.transitions = T / T.sum(axis=1, keepdims=True)
        self.cdf = np.cumsum(self.transitions, axis=1)

    def sample(self, length: int, rng: np.random.Generator) -> list[int]:
        V = len(self.transitions)
        w = int(rng.integers(V))
        out = [w]
        for _ in range(length - 1):
            w = min(int(np.searchsorted(self.cdf[w], rng.random(), side="right")), V - 1)
            out.append(w)
        return out


def confusion_classes(V: int, size: int, rng: np.random.Generator) -> np.ndarray:
    """Class id per token: a random partition into groups of ``size``
    (a short last group is merged into the previous one)."""
    perm = rng.permutation(V)
    cls = np.empty(V, dtype=np.int64)
    n_groups = max(1, V // size)
    for k, tok in enumerate(perm):
        cls[tok] = min(k // size, n_groups - 1)
    return cls


def position_scores(cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Masses for one position (correct token first), with optional noise."""
    m = cfg.masses()
    if cfg.score_noise > 0.0:
        m = m * np.exp(cfg.score_noise * rng.standard_normal(len(m)))
        m = m / m.sum()
    return m


def expected_flip_rate(cfg: SynthConfig, n: int = 200_000, seed: int = 12345) -> float:
    """Monte Carlo estimate (percent) of the chance the correct token is not
    the highest-scoring one at a position."""
    if cfg.distractors == 0:
        return 0.0
    rng = np.random.default_rng(seed)
    m = cfg.masses()
    if cfg.score_noise > 0.0:
        m = m * np.exp(cfg.score_noise * rng.standard_normal((n, len(m))))
    else:
        m = np.broadcast_to(m, (n, len(m)))
    return 100.0 * float(np.mean(np.argmax(m, axis=1) != 0))


def sausage(tokens: list[str], options: list[list[str]], scores: list[np.ndarray]) -> EdgeLabeledLattice:
    """Edge-labeled sausage with one state per position boundary."""
    arcs = []
    for t, (words, s) in enumerate(zip(options, scores)):
        for w, p in zip(words, s):
            arcs.append(Arc(t, t + 1, w, float(p)))
    return EdgeLabeledLattice(len(tokens) + 1, tuple(arcs))


def with_vocab(ell: EdgeLabeledLattice, vocab: Vocabulary) -> EdgeLabeledLattice:
    arcs = tuple(Arc(a.src, a.dst, a.token, a.score, vocab.index(a.token)) for a in ell.arcs)
    return EdgeLabeledLattice(ell.num_nodes, arcs)


def node_lattice(ell: EdgeLabeledLattice, vocab: Vocabulary) -> Lattice:
    return to_node_labeled(with_vocab(ell, vocab))


def _make_split(n, cfg, chain, classes, lexicon, rng) -> Split:
    members = {c: np.flatnonzero(classes == c) for c in np.unique(classes)}
    src, trg, lats, best = [], [], [], []
    for _ in range(n):
        length = int(rng.integers(cfg.min_len, cfg.max_len + 1))
        sent = chain.sample(length, rng)
        options, scores, top = [], [], []
        for w in sent:
            pool = [int(u) for u in members[classes[w]] if u != w]
            if len(pool) < cfg.distractors:
                extra = [u for u in range(cfg.src_vocab) if u != w and u not in pool]
                pool += [int(u) for u in rng.choice(extra, cfg.distractors - len(pool), replace=False)]
            distr = [int(u) for u in rng.choice(pool, cfg.distractors, replace=False)] if cfg.distractors else []
            words = [w] + distr
            m = position_scores(cfg, rng)
            top.append(words[int(np.argmax(m))])
            order = rng.permutation(len(words))
            options.append([f"s{words[k]}" for k in order])
            scores.append(m[order])
        tokens = [f"s{w}" for w in sent]
        src.append(tokens)
        trg.append([lexicon[t] for t in tokens])
        lats.append(sausage(tokens, options, scores))
        best.append([f"s{w}" for w in top])
    return Split(src, trg, lats, best)


def synth_corpus(cfg: SynthConfig) -> SynthCorpus:
    """Generate train/dev/test splits and a summary report.

    The report gives the realized corpus 1-best WER of the test split (and
    of all splits), the simulated expectation, and the lattice-to-reference
    word ratio.
    """
    from .metrics import edit_distance

    rng = np.random.default_rng(cfg.seed)
    classes = confusion_classes(cfg.src_vocab, cfg.distractors + 1, rng)
    chain = SourceModel(cfg, classes, rng)
    perm = rng.permutation(cfg.trg_vocab)
    lexicon = {f"s{k}": f"t{perm[k]}" for k in range(cfg.src_vocab)}
    train = _make_split(cfg.n_train, cfg, chain, classes, lexicon, rng)
    dev = _make_split(cfg.n_dev, cfg, chain, classes, lexicon, rng)
    test = _make_split(cfg.n_test, cfg, chain, classes, lexicon, rng)
    corpus = SynthCorpus(cfg, train, dev, test, lexicon)
    errs = words = lat_words = 0
    for split in (train, dev, test):
        for ref, hyp, ell in zip(split.source, split.one_best, split.lattices):
            errs += edit_distance(hyp, ref)
            words += len(ref)
            lat_words += len(ell.arcs)
    test_errs = sum(edit_distance(h, r) for r, h in zip(test.source, test.one_best))
    corpus.report = {
        "one_best_wer": 100.0 * errs / words,
        "test_one_best_wer": 100.0 * test_errs / sum(len(r) for r in test.source),
        "expected_wer": expected_flip_rate(cfg),
        "word_ratio": lat_words / words,
    }
    return corpus


def config_dict(cfg: SynthConfig) -> dict:
    return asdict(cfg)
