"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, fields
from pathlib import Path

import numpy as np

from .lattice import Lattice, LatticeError, Vocabulary, from_json, parse_plf, serialize_plf, to_json, \
    to_node_labeled
from .metrics import bleu, decoder_entropy, lattice_oracle, one_best, perplexity, wer, wer_binned_bleu
from .model import ModelConfig, Seq2Seq, with_eos
from .scores import node_scores
from .search import beam_search
from .synth import SynthConfig, synth_corpus
from .training import TrainConfig, build_vocab, finetune, pretrain

log = logging.getLogger("lat2seq")

PEAK = {"0": "fixed0", "1": "fixed1", "learn": "learned"}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ---------------------------------------------------------------------------
# file helpers


def read_lines(path) -> list[list[str]]:
    with open(path, encoding="utf-8") as f:
        return [line.lower().split() for line in f]


def write_lines(path, lines) -> None:
    text = "".join(" ".join(toks) + "\n" for toks in lines)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def read_lattices(path, vocab: Vocabulary, strict: bool = True) -> list[Lattice]:
    """One lattice per line, PLF or JSON (detected per line)."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                if line.startswith("{"):
                    out.append(from_json(line, vocab, strict=strict))
                else:
                    out.append(to_node_labeled(parse_plf(line, vocab, strict=strict)))
            except LatticeError as exc:
                raise LatticeError(f"{path}:{lineno}: {exc}") from exc
    return out


def write_tsv(path, rows) -> None:
    text = "".join("\t".join(str(x) for x in row) + "\n" for row in rows)
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        Path(path).write_text(text, encoding="utf-8")


def load_model(path, src_vocab=None, trg_vocab=None):
    model, opt, extra = Seq2Seq.load(path)
    sv = Vocabulary(extra["src_vocab"][3:])
    tv = Vocabulary(extra["trg_vocab"][3:])
    for given, stored, side in ((src_vocab, sv, "source"), (trg_vocab, tv, "target")):
        if given is not None and Vocabulary.load(given) != stored:
            raise LatticeError(f"{side} vocabulary does not match the model")
    return model, opt, sv, tv


def save_model(path, model: Seq2Seq, sv: Vocabulary, tv: Vocabulary, opt=None) -> None:
    model.save(path, opt, {"src_vocab": sv.tokens, "trg_vocab": tv.tokens})


def sources(args, sv: Vocabulary):
    if args.input == "lattices":
        return read_lattices(args.src, sv)
    return [np.array(sv.encode(t), dtype=np.int64) for t in read_lines(args.src)]


def parallel(args, sv, tv, src=None, trg=None):
    args_src = argparse.Namespace(input=args.input, src=src or args.src)
    srcs = sources(args_src, sv)
    trgs = [with_eos(tv.encode(t)) for t in read_lines(trg or args.trg)]
    if len(srcs) != len(trgs):
        raise LatticeError(f"{len(srcs)} sources but {len(trgs)} targets")
    return list(zip(srcs, trgs))


# ---------------------------------------------------------------------------
# option groups


def add_train_flags(p) -> None:
    g = p.add_argument_group("training")
    g.add_argument("--config", help="TrainConfig file (key = value)")
    for f in fields(TrainConfig):
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name,
                       type=int if f.type in (int, "int") else float, default=None)
    g.add_argument("--log", help="tab-separated training log (default stderr only)")


def train_config(args) -> TrainConfig:
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    kw = {f.name: getattr(args, f.name) for f in fields(TrainConfig) if getattr(args, f.name) is not None}
    return TrainConfig(**{**asdict(cfg), **kw})


def add_encoder_flags(p) -> None:
    g = p.add_argument_group("encoder")
    for m in ("wcs", "bfg", "batt"):
        g.add_argument(f"--{m}", action=argparse.BooleanOptionalAction, default=None)
    g.add_argument("--peakiness", nargs="+", choices=sorted(PEAK), metavar="{0,1,learn}",
                   help="one value for all mechanisms or three (wcs bfg batt)")
    g.add_argument("--encoder-mode", choices=("lattice", "sequential"), default=None)


def encoder_overrides(args) -> dict:
    kw = {}
    for m in ("wcs", "bfg", "batt"):
        if getattr(args, m) is not None:
            kw[m] = getattr(args, m)
    if args.peakiness:
        vals = args.peakiness
        if len(vals) == 1:
            vals = vals * 3
        if len(vals) != 3:
            raise UsageError("--peakiness takes one or three values")
        kw.update(peak_wcs=PEAK[vals[0]], peak_bfg=PEAK[vals[1]], peak_batt=PEAK[vals[2]])
    if args.encoder_mode:
        kw["mode"] = args.encoder_mode
    return kw


def add_model_flags(p) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--layers", type=int, default=2)
    g.add_argument("--hidden", type=int, default=256, help="encoder units per direction")
    g.add_argument("--embed", type=int, default=512)
    g.add_argument("--attention", type=int, default=None, help="default: 2 x hidden")
    g.add_argument("--init-seed", type=int, default=0, help="parameter initialization seed")


def _epoch_logger(path, phase):
    rows = []

    def on_epoch(e):
        rows.append(e)
        print(f"{phase}\t{e.tsv()}", file=sys.stderr)
        if path:
            with open(path, "a", encoding="utf-8") as f:
                f.write(e.tsv() + "\n")
    return on_epoch


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> None:
    kw = {f.name: getattr(args, f.name) for f in fields(SynthConfig) if getattr(args, f.name, None) is not None}
    cfg = SynthConfig(**kw)
    corpus = synth_corpus(cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for name, split in corpus.splits().items():
        write_lines(out / f"{name}.src", split.source)
        write_lines(out / f"{name}.trg", split.target)
        write_lines(out / f"{name}.1best", split.one_best)
        (out / f"{name}.plf").write_text("".join(serialize_plf(e) + "\n" for e in split.lattices))
    write_tsv(out / "report.tsv", sorted(corpus.report.items()))
    (out / "config.json").write_text(json.dumps(asdict(cfg), indent=1))
    write_tsv(None, sorted(corpus.report.items()))


def cmd_vocab(args) -> None:
    lines = read_lines(args.input)
    if not lines or not any(lines):
        raise LatticeError("empty corpus")
    build_vocab(lines).save(args.output)


def cmd_pretrain(args) -> None:
    sv, tv = Vocabulary.load(args.src_vocab), Vocabulary.load(args.trg_vocab)
    args.input = "sequences"
    train = parallel(args, sv, tv)
    dev = parallel(args, sv, tv, args.dev_src, args.dev_trg)
    cfg = ModelConfig.small(len(sv), len(tv), hidden=args.hidden, embed=args.embed, layers=args.layers,
                            **encoder_overrides(args))
    if args.attention:
        cfg.decoder.attention = args.attention
    model = Seq2Seq(cfg, seed=args.init_seed)
    pretrain(model, train, dev, train_config(args), on_epoch=_epoch_logger(args.log, "pretrain"))
    save_model(args.out, model, sv, tv, model.optimizer_state)


def cmd_finetune(args) -> None:
    model, _, sv, tv = load_model(args.init, args.src_vocab, args.trg_vocab)
    kw = encoder_overrides(args)
    if kw:
        model = Seq2Seq(model.config.with_encoder(**kw), model.store)
    train = parallel(args, sv, tv)
    dev = parallel(args, sv, tv, args.dev_src, args.dev_trg)
    finetune(model, train, dev, train_config(args), on_epoch=_epoch_logger(args.log, "finetune"))
    save_model(args.out, model, sv, tv, model.optimizer_state)


def cmd_translate(args) -> None:
    model, _, sv, tv = load_model(args.model, args.src_vocab, args.trg_vocab)
    out = []
    for src in sources(args, sv):
        out.append(tv.decode(beam_search(model, src, beam_size=args.beam, max_len=args.max_len)))
    write_lines(args.output, out)


def cmd_score_latt(args) -> None:
    # without --vocab every word is kept verbatim (open vocabulary)
    vocab = Vocabulary.load(args.vocab) if args.vocab else Vocabulary()
    strict = not args.lenient
    out = []
    with open(args.input, encoding="utf-8") as f:
        for lineno, raw in enumerate(f, 1):
            raw = raw.strip()
            if not raw:
                continue
            if not args.vocab:
                for tok in _plf_tokens(raw):
                    vocab.add(tok)
            try:
                if raw.startswith("{"):
                    lat = from_json(raw, vocab, strict=strict)
                else:
                    lat = to_node_labeled(parse_plf(raw, vocab, strict=strict))
            except LatticeError as exc:
                raise LatticeError(f"{args.input}:{lineno}: {exc}") from exc
            sc = node_scores(lat)
            out.append(to_json(lat, vocab, {"wm": sc.wm}, {"wb": [float(x) for x in sc.wb]}))
    write_lines(args.output, [[s] for s in out])


def cmd_oracle(args) -> None:
    refs = read_lines(args.ref)
    vocab = Vocabulary()
    for r in refs:
        for t in r:
            vocab.add(t)
    with open(args.lattices, encoding="utf-8") as f:
        for line in f:
            for tok in _plf_tokens(line):
                vocab.add(tok)
    lats = read_lattices(args.lattices, vocab)
    if len(lats) != len(refs):
        raise LatticeError(f"{len(lats)} lattices but {len(refs)} references")
    rows, errs, words, best_errs = [], 0.0, 0, 0.0
    for k, (lat, ref) in enumerate(zip(lats, refs)):
        ids = vocab.encode(ref)
        path, w = lattice_oracle(lat, ids)
        b = wer(one_best(lat), ids)
        rows.append((k, f"{w:.4f}", f"{b:.4f}", " ".join(vocab.decode(path))))
        errs += w * len(ref) / 100.0
        best_errs += b * len(ref) / 100.0
        words += len(ref)
    rows.append(("corpus", f"{100.0 * errs / words:.4f}", f"{100.0 * best_errs / words:.4f}", ""))
    write_tsv(args.output, [("sentence", "oracle_wer", "one_best_wer", "oracle_path")] + rows)


def _plf_tokens(line: str):
    line = line.strip()
    if not line:
        return []
    if line.startswith("{"):
        return [d["word"] for d in json.loads(line)["nodes"]]
    return [a.token for a in parse_plf(line, strict=False).arcs]


def cmd_eval(args) -> None:
    rows = []
    split = args.split
    refs = read_lines(args.trg)
    if args.hyp:
        hyps = read_lines(args.hyp)
        if len(hyps) != len(refs):
            raise LatticeError(f"{len(hyps)} hypotheses but {len(refs)} references")
        rows.append(("bleu", split, f"{bleu(hyps, refs):.4f}"))
        errs = sum(wer(h, r) * len(r) / 100.0 for h, r in zip(hyps, refs))
        rows.append(("wer", split, f"{100.0 * errs / sum(len(r) for r in refs):.4f}"))
    if args.model:
        model, _, sv, tv = load_model(args.model, args.src_vocab, args.trg_vocab)
        data = parallel(args, sv, tv)
        rows.append(("perplexity", split, f"{perplexity(model, data):.6f}"))
        rows.append(("entropy", split, f"{decoder_entropy(model, data, args.entropy_sentences):.6f}"))
    if not rows:
        raise UsageError("nothing to evaluate: give --hyp and/or --model")
    write_tsv(args.output, rows)


def cmd_bins(args) -> None:
    refs = read_lines(args.ref)
    wers = [wer(h, r) for h, r in zip(read_lines(args.one_best), read_lines(args.src_ref))]
    outputs = {}
    for spec in args.hyp:
        if "=" not in spec:
            raise UsageError("--hyp takes NAME=FILE")
        name, path = spec.split("=", 1)
        outputs[name] = read_lines(path)
        if len(outputs[name]) != len(refs):
            raise LatticeError(f"{path}: {len(outputs[name])} lines, expected {len(refs)}")
    edges = [float(x) for x in args.edges]
    table = wer_binned_bleu(outputs, refs, wers, edges, args.sample_size, args.seed)
    rows = [("system",) + tuple(f"{a:g}-{b:g}" for a, b in zip(edges, edges[1:]))]
    for name, vals in table.items():
        rows.append((name,) + tuple("NA" if v is None else f"{v:.4f}" for v in vals))
    write_tsv(args.output, rows)


def cmd_gradcheck(args) -> None:
    from .gradcheck import check_all, check_setting, describe

    if args.all_flags:
        results = check_all(args.examples, args.seed, mode=args.mode)
    else:
        kw = {"mode": args.mode or "lattice"}
        if kw["mode"] == "lattice":
            kw.update(encoder_overrides(args))
        results = [check_setting(kw, args.examples, args.seed)]
    ok = True
    for r in results:
        status = "ok" if r["passed"] else "FAIL"
        ok &= r["passed"]
        print(f"{status}\t{r['max_error']:.3e}\t{describe(r['setting'])}")
    if not ok:
        raise SystemExit(2)


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = Parser(prog="lat2seq", description="Lattice-to-sequence translation toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="write a synthetic corpus")
    s.add_argument("--out", required=True)
    for f in fields(SynthConfig):
        s.add_argument("--" + f.name.replace("_", "-"), dest=f.name,
                       type=int if f.type in (int, "int") else float, default=None)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("vocab", help="build a vocabulary (count >= 2)")
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_vocab)

    s = sub.add_parser("pretrain", help="train on sequence pairs")
    for name in ("--src", "--trg", "--dev-src", "--dev-trg", "--src-vocab", "--trg-vocab", "--out"):
        s.add_argument(name, required=True)
    add_model_flags(s)
    add_encoder_flags(s)
    add_train_flags(s)
    s.set_defaults(func=cmd_pretrain)

    s = sub.add_parser("finetune", help="continue training, typically on lattices")
    for name in ("--init", "--src", "--trg", "--dev-src", "--dev-trg", "--out"):
        s.add_argument(name, required=True)
    s.add_argument("--input", choices=("sequences", "lattices"), default="lattices")
    s.add_argument("--src-vocab")
    s.add_argument("--trg-vocab")
    add_encoder_flags(s)
    add_train_flags(s)
    s.set_defaults(func=cmd_finetune)

    s = sub.add_parser("translate", help="beam-search decode")
    s.add_argument("--model", required=True)
    s.add_argument("--src", required=True)
    s.add_argument("--input", choices=("sequences", "lattices"), default="sequences")
    s.add_argument("--beam", type=int, default=5)
    s.add_argument("--max-len", type=int, default=None)
    s.add_argument("--output", default="-")
    s.add_argument("--src-vocab")
    s.add_argument("--trg-vocab")
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("score-latt", aliases=["scores"], help="add marginal and backward-normalized scores")
    s.add_argument("--input", required=True)
    s.add_argument("--output")
    s.add_argument("--vocab")
    s.add_argument("--lenient", action="store_true", help="renormalize instead of rejecting bad sums")
    s.set_defaults(func=cmd_score_latt)

    s = sub.add_parser("oracle", help="lattice oracle WER")
    s.add_argument("--lattices", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--output", default="-")
    s.set_defaults(func=cmd_oracle)

    s = sub.add_parser("eval", help="BLEU/WER of a hypothesis file, perplexity/entropy of a model")
    s.add_argument("--trg", required=True)
    s.add_argument("--hyp")
    s.add_argument("--model")
    s.add_argument("--src")
    s.add_argument("--input", choices=("sequences", "lattices"), default="sequences")
    s.add_argument("--split", default="test")
    s.add_argument("--entropy-sentences", type=int, default=100)
    s.add_argument("--src-vocab")
    s.add_argument("--trg-vocab")
    s.add_argument("--output", default="-")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bins", help="BLEU per 1-best-WER bin")
    s.add_argument("--ref", required=True, help="target references")
    s.add_argument("--src-ref", required=True, help="source reference transcripts")
    s.add_argument("--one-best", required=True)
    s.add_argument("--hyp", action="append", required=True, metavar="NAME=FILE")
    s.add_argument("--edges", nargs="+", default=["0", "20", "40", "60", "100"])
    s.add_argument("--sample-size", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", default="-")
    s.set_defaults(func=cmd_bins)

    s = sub.add_parser("gradcheck", help="finite-difference gradient check")
    s.add_argument("--mode", choices=("lattice", "sequential"), default=None,
                   help="default: lattice, or every setting with --all-flags")
    s.add_argument("--all-flags", action="store_true")
    s.add_argument("--examples", type=int, default=5)
    s.add_argument("--seed", type=int, default=0)
    add_encoder_flags(s)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "eval" and args.model and not args.src:
            raise UsageError("eval --model needs --src")
        args.func(args)
    except UsageError as exc:
        print(f"lat2seq: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, ValueError, KeyError) as exc:
        print(f"lat2seq: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
