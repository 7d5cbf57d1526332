"""Optimization: Adam, learning-rate halving, sequence pre-training and
lattice fine-tuning with gradient accumulation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Graph, ParamStore
from .lattice import Lattice, Vocabulary
from .model import Seq2Seq

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    lr_pretrain: float = 0.001
    lr_finetune: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_words: int = 1000  # pre-training minibatch size in target words
    group_size: int = 20  # fine-tuning sentences per update
    max_epochs: int = 30  # pre-training cap
    patience: int = 3
    finetune_epochs: int = 2
    clip_norm: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.lr_pretrain <= 0 or self.lr_finetune <= 0:
            raise ValueError("learning rates must be positive")
        if self.group_size < 1 or self.batch_words < 1:
            raise ValueError("batch and group sizes must be >= 1")

    def save(self, path) -> None:
        with open(path, "w") as f:
            for k, v in asdict(self).items():
                f.write(f"{k} = {v}\n")

    @classmethod
    def load(cls, path) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        with open(path) as f:
            for lineno, line in enumerate(f, 1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                if "=" not in line:
                    raise ValueError(f"{path}:{lineno}: expected 'key = value'")
                key, value = (s.strip() for s in line.split("=", 1))
                if key not in types:
                    raise ValueError(f"{path}:{lineno}: unknown key {key!r}")
                kw[key] = int(value) if types[key] in (int, "int") else float(value)
        return cls(**kw)


def build_vocab(lines: Iterable[Sequence[str]]) -> Vocabulary:
    """Vocabulary of all tokens seen at least twice; singletons map to unk."""
    return Vocabulary.from_corpus(lines, min_count=2)


class Adam:
    """Adam with bias correction over every parameter of a store."""

    def __init__(self, store: ParamStore, beta1=0.9, beta2=0.999, eps=1e-8):
        self.store = store
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(v) for n, v in store.values.items()}
        self.v = {n: np.zeros_like(v) for n, v in store.values.items()}

    def step(self, lr: float, scale: float = 1.0, clip_norm: float | None = None) -> float:
        """Apply one update from the accumulated gradients times ``scale``.

        Returns the (scaled, pre-clipping) global gradient norm.
        """
        grads = self.store.grads
        norm = self.store.grad_norm() * abs(scale)
        if clip_norm is not None and norm > clip_norm:
            scale = scale * clip_norm / norm
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, value in self.store.values.items():
            g = grads[name] if scale == 1.0 else grads[name] * scale
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            value -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return norm

    def state(self) -> dict[str, np.ndarray]:
        out = {"__t__": np.array(float(self.t))}
        for n in self.m:
            out[f"m:{n}"] = self.m[n]
            out[f"v:{n}"] = self.v[n]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["__t__"])
        for n in self.m:
            self.m[n][...] = state[f"m:{n}"]
            self.v[n][...] = state[f"v:{n}"]


def adam_step(opt: Adam, lr: float, **kw) -> float:
    return opt.step(lr, **kw)


def lr_schedule(dev_ppl: Sequence[float], lr0: float) -> float:
    """Halve the learning rate each time dev perplexity got worse than the
    previous epoch's."""
    lr = lr0
    for prev, cur in zip(dev_ppl, dev_ppl[1:]):
        if cur > prev:
            lr *= 0.5
    return lr


# ---------------------------------------------------------------------------
# data handling

Example = tuple  # (source: Lattice | int array, target ids ending in eos)


def make_batches(examples: Sequence[Example], batch_words: int, rng: np.random.Generator) -> list[list[int]]:
    """Length-bucketed minibatches of sequence examples (indices).

    Examples with identical (source length, target length) share a bucket so
    batches need no padding; buckets are chunked to about ``batch_words``
    target tokens and the batch order is shuffled.
    """
    buckets: dict[tuple[int, int], list[int]] = {}
    for j, (src, trg) in enumerate(examples):
        buckets.setdefault((len(src), len(trg)), []).append(j)
    batches = []
    for key in sorted(buckets):
        idx = list(buckets[key])
        rng.shuffle(idx)
        per = max(1, batch_words // key[1])
        batches.extend(idx[k:k + per] for k in range(0, len(idx), per))
    order = rng.permutation(len(batches))
    return [batches[k] for k in order]


def corpus_nll(model: Seq2Seq, examples: Sequence[Example], batch_words: int = 2000) -> tuple[float, int]:
    """Total NLL and target-token count (batched for sequence sources)."""
    total, words = 0.0, 0
    seqs = [j for j, (s, _) in enumerate(examples) if not isinstance(s, Lattice)]
    lats = [j for j, (s, _) in enumerate(examples) if isinstance(s, Lattice)]
    if seqs:
        sub = [examples[j] for j in seqs]
        batches = make_batches(sub, batch_words, np.random.default_rng(0))
        # fixed summation order keeps the result independent of batching seed
        for batch in sorted(batches):
            src = np.stack([np.asarray(sub[j][0]) for j in batch])
            trg = np.stack([np.asarray(sub[j][1]) for j in batch])
            total += model.nll(src, trg)
            words += trg.size
    for j in lats:
        src, trg = examples[j]
        total += model.nll(src, trg)
        words += len(trg)
    return total, words


def perplexity(model: Seq2Seq, examples: Sequence[Example]) -> float:
    total, words = corpus_nll(model, examples)
    return math.exp(total / words)


@dataclass
class EpochLog:
    epoch: int
    split: str
    perplexity: float
    lr: float
    seconds: float

    def tsv(self) -> str:
        return f"{self.epoch}\t{self.split}\t{self.perplexity:.6f}\t{self.lr:.8g}\t{self.seconds:.2f}"


def _update(model: Seq2Seq, opt: Adam, lr: float, examples, batch: list[int], clip: float,
            batched: bool) -> float:
    """Accumulate gradients over ``batch`` and apply one Adam step; the
    update uses the per-target-token mean loss.  Returns the summed loss."""
    store = model.store
    store.zero_grad()
    total, words = 0.0, 0
    if batched:
        src = np.stack([np.asarray(examples[j][0]) for j in batch])
        trg = np.stack([np.asarray(examples[j][1]) for j in batch])
        g = Graph()
        loss = model.loss(g, src, trg)
        g.backward(loss)
        total, words = float(loss.value), trg.size
    else:
        for j in batch:
            src, trg = examples[j]
            g = Graph()
            loss = model.loss(g, src, trg)
            g.backward(loss)
            total += float(loss.value)
            words += len(trg)
    opt.step(lr, scale=1.0 / words, clip_norm=clip)
    return total


def pretrain(model: Seq2Seq, train: Sequence[Example], dev: Sequence[Example], cfg: TrainConfig,
             on_epoch: Callable[[EpochLog], None] | None = None) -> tuple[Seq2Seq, list[EpochLog]]:
    """Minibatched training on sequence pairs until dev perplexity stops
    improving for ``cfg.patience`` epochs (or ``cfg.max_epochs``).

    Returns the best-dev model (the input model object, with best weights
    restored) and the epoch log.
    """
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(model.store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list[EpochLog] = []
    ppls: list[float] = []
    best, best_vals, since = math.inf, None, 0
    for epoch in range(1, cfg.max_epochs + 1):
        lr = lr_schedule(ppls, cfg.lr_pretrain)
        t0 = time.perf_counter()
        tot, words = 0.0, 0
        for batch in make_batches(train, cfg.batch_words, rng):
            tot += _update(model, opt, lr, train, batch, cfg.clip_norm, batched=True)
            words += sum(len(train[j][1]) for j in batch)
        secs = time.perf_counter() - t0
        entries = [EpochLog(epoch, "train", math.exp(tot / words), lr, secs)]
        ppl = perplexity(model, dev)
        ppls.append(ppl)
        entries.append(EpochLog(epoch, "dev", ppl, lr, time.perf_counter() - t0))
        for e in entries:
            history.append(e)
            log.info("pretrain %s", e.tsv())
            if on_epoch:
                on_epoch(e)
        if ppl < best:
            best, since = ppl, 0
            best_vals = {n: v.copy() for n, v in model.store.values.items()}
        else:
            since += 1
            if since >= cfg.patience:
                break
    if best_vals is not None:
        for n, v in best_vals.items():
            model.store.values[n][...] = v
    model.optimizer_state = opt.state()
    return model, history


def finetune(model: Seq2Seq, train: Sequence[Example], dev: Sequence[Example], cfg: TrainConfig,
             on_epoch: Callable[[EpochLog], None] | None = None,
             on_step: Callable[[float], None] | None = None) -> tuple[Seq2Seq, list[EpochLog]]:
    """Per-example training (lattice or sequence sources) with one Adam update
    per ``cfg.group_size`` examples, for ``cfg.finetune_epochs`` epochs."""
    rng = np.random.default_rng(cfg.seed + 1)
    opt = Adam(model.store, cfg.beta1, cfg.beta2, cfg.adam_eps)
    history: list[EpochLog] = []
    ppls: list[float] = []
    for epoch in range(1, cfg.finetune_epochs + 1):
        lr = lr_schedule(ppls, cfg.lr_finetune)
        t0 = time.perf_counter()
        order = rng.permutation(len(train))
        tot, words = 0.0, 0
        for k in range(0, len(order), cfg.group_size):
            group = [int(j) for j in order[k:k + cfg.group_size]]
            loss = _update(model, opt, lr, train, group, cfg.clip_norm, batched=False)
            if on_step:
                on_step(loss)
            tot += loss
            words += sum(len(train[j][1]) for j in group)
        entries = [EpochLog(epoch, "train", math.exp(tot / words), lr, time.perf_counter() - t0)]
        ppl = perplexity(model, dev)
        ppls.append(ppl)
        entries.append(EpochLog(epoch, "dev", ppl, lr, time.perf_counter() - t0))
        for e in entries:
            history.append(e)
            log.info("finetune %s", e.tsv())
            if on_epoch:
                on_epoch(e)
    model.optimizer_state = opt.state()
    return model, history
