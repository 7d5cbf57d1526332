"""Training regimes on the synthetic corpus.

R: pre-trained on reference transcripts only.  R+1: R fine-tuned on
1-best sources.  R+L: R fine-tuned on lattices with every peakiness fixed
to 0 (scores ignored).  R+L+S: R fine-tuned on lattices with learned
peakiness.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import ParamStore
from .lattice import Vocabulary
from .metrics import bleu, decoder_entropy, perplexity
from .model import ModelConfig, Seq2Seq, with_eos
from .search import beam_search
from .synth import Split, SynthConfig, SynthCorpus, node_lattice, synth_corpus
from .training import TrainConfig, build_vocab, finetune, pretrain

log = logging.getLogger(__name__)

REGIMES = ("R", "R+1", "R+L", "R+L+S")
IGNORE_SCORES = dict(peak_wcs="fixed0", peak_bfg="fixed0", peak_batt="fixed0")
LEARN_SCORES = dict(peak_wcs="learned", peak_bfg="learned", peak_batt="learned")


@dataclass
class ExperimentConfig:
    synth: SynthConfig = field(default_factory=lambda: SynthConfig(score_noise=1.0))
    train: TrainConfig = field(default_factory=lambda: TrainConfig(lr_finetune=2e-3, batch_words=200))
    hidden: int = 64
    embed: int = 64
    layers: int = 1
    beam: int = 5
    entropy_sentences: int = 100


@dataclass
class Data:
    src_vocab: Vocabulary
    trg_vocab: Vocabulary
    reference: dict  # split -> [(src ids, trg ids)]
    one_best: dict
    lattice: dict


def prepare(corpus: SynthCorpus) -> Data:
    sv = build_vocab(corpus.train.source)
    tv = build_vocab(corpus.train.target)

    def seqs(split: Split, side):
        return [(np.array(sv.encode(s), dtype=np.int64), with_eos(tv.encode(t)))
                for s, t in zip(side, split.target)]

    ref, best, lat = {}, {}, {}
    for name, split in corpus.splits().items():
        ref[name] = seqs(split, split.source)
        best[name] = seqs(split, split.one_best)
        lat[name] = [(node_lattice(e, sv), with_eos(tv.encode(t)))
                     for e, t in zip(split.lattices, split.target)]
    return Data(sv, tv, ref, best, lat)


def derive(model: Seq2Seq, **encoder_kw) -> Seq2Seq:
    """Independent copy of ``model`` with changed encoder settings."""
    cfg = model.config.with_encoder(**encoder_kw)
    store = ParamStore()
    for name, value in model.store.values.items():
        store.add(name, value.copy())
    return Seq2Seq(cfg, store)


def translate_all(model: Seq2Seq, examples, beam: int) -> list[list[int]]:
    return [beam_search(model, src, beam_size=beam) for src, _ in examples]


def evaluate_bleu(model: Seq2Seq, examples, beam: int) -> float:
    hyps = translate_all(model, examples, beam)
    refs = [list(t[:-1]) for _, t in examples]
    return bleu(hyps, refs)


def run_seed(cfg: ExperimentConfig, seed: int, corpus: SynthCorpus | None = None,
             data: Data | None = None) -> dict[str, float]:
    """Train all regimes for one seed and evaluate them on the test split."""
    t0 = time.perf_counter()
    if corpus is None:
        corpus = synth_corpus(cfg.synth)
    if data is None:
        data = prepare(corpus)
    tcfg = replace(cfg.train, seed=seed)
    mcfg = ModelConfig.small(len(data.src_vocab), len(data.trg_vocab), hidden=cfg.hidden,
                             embed=cfg.embed, layers=cfg.layers, **LEARN_SCORES)
    base = Seq2Seq(mcfg, seed=seed)
    pretrain(base, data.reference["train"], data.reference["dev"], tcfg)
    out: dict[str, float] = {"seed": seed}
    out["bleu R/1best"] = evaluate_bleu(base, data.one_best["test"], cfg.beam)

    r1 = derive(base)
    finetune(r1, data.one_best["train"], data.one_best["dev"], tcfg)
    out["bleu R+1/1best"] = evaluate_bleu(r1, data.one_best["test"], cfg.beam)

    for name, kw in (("R+L", IGNORE_SCORES), ("R+L+S", LEARN_SCORES)):
        m = derive(base, **kw)
        out[f"dev ppl {name} before"] = perplexity(m, data.lattice["dev"])
        finetune(m, data.lattice["train"], data.lattice["dev"], tcfg)
        out[f"dev ppl {name} after"] = perplexity(m, data.lattice["dev"])
        out[f"bleu {name}/lattice"] = evaluate_bleu(m, data.lattice["test"], cfg.beam)
        out[f"entropy {name}"] = decoder_entropy(m, data.lattice["test"], cfg.entropy_sentences)
        if name == "R+L+S":
            out["S_a"] = float(m.store["S_a"])
    out["seconds"] = time.perf_counter() - t0
    log.info("seed %d: %s", seed, out)
    return out


def run(cfg: ExperimentConfig, seeds=(0, 1, 2)) -> tuple[list[dict], dict[str, float]]:
    """Run every seed on one corpus; returns per-seed rows and their means."""
    corpus = synth_corpus(cfg.synth)
    data = prepare(corpus)
    rows = [run_seed(cfg, s, corpus, data) for s in seeds]
    keys = [k for k in rows[0] if k != "seed"]
    means = {k: float(np.mean([r[k] for r in rows])) for k in keys}
    means["one_best_wer"] = corpus.report["test_one_best_wer"]
    return rows, means
