import math

import numpy as np
import pytest

from lat2seq.autodiff import Graph, ParamStore
from lat2seq.lattice import Vocabulary, from_token_sequence, random_lattice
from lat2seq.model import ModelConfig, Seq2Seq, with_eos
from lat2seq.training import (Adam, TrainConfig, corpus_nll, finetune, lr_schedule, make_batches,
                              perplexity, pretrain)


def tiny_model(seed=0, vocab=9, **kw):
    return Seq2Seq(ModelConfig.small(vocab, vocab, hidden=4, embed=5, layers=1, **kw), seed=seed)


def toy_pairs(rng, n, vocab=9):
    """Copy task over raw ids: target = source + eos."""
    out = []
    for _ in range(n):
        src = rng.integers(3, vocab, size=int(rng.integers(1, 4)))
        out.append((src, with_eos(src)))
    return out


# decoder


def test_zero_model_loss_is_uniform():
    model = tiny_model()
    for v in model.store.values.values():
        v[...] = 0.0
    target = with_eos([3, 4, 5, 6])
    assert model.nll(np.array([3, 4]), target) == pytest.approx(5 * math.log(9), rel=0, abs=1e-12)
    lat = random_lattice(np.random.default_rng(0), 4, 9)
    assert model.nll(lat, target) == pytest.approx(5 * math.log(9), rel=0, abs=1e-12)


def test_targets_must_end_with_eos():
    model = tiny_model()
    with pytest.raises(ValueError, match="eos"):
        model.nll(np.array([3]), np.array([4, 5]))
    with pytest.raises(ValueError):
        model.nll(np.array([3]), np.zeros(0, dtype=int))


def test_attention_is_a_distribution_over_nodes():
    rng = np.random.default_rng(1)
    model = tiny_model(mode="lattice")
    lat = random_lattice(rng, 5, 9)
    g = Graph()
    enc = model.encode(g, lat)
    dec = model.decoder(g)
    dec.prepare(enc)
    _, alpha = dec.attend(enc, dec.initial_state(enc)[-1][0])
    assert alpha.shape == (lat.num_nodes, 1)
    assert abs(alpha.value.sum() - 1.0) < 1e-12 and np.all(alpha.value > 0)


def test_attention_bias_favours_likely_nodes():
    rng = np.random.default_rng(2)
    model = tiny_model(mode="lattice", peak_batt="fixed1")
    flat = Seq2Seq(model.config.with_encoder(peak_batt="fixed0"), model.store)
    lat = random_lattice(rng, 5, 9)
    from lat2seq.scores import node_scores
    wm = node_scores(lat).wm

    def alpha(m):
        g = Graph()
        enc = m.encode(g, lat)
        dec = m.decoder(g)
        dec.prepare(enc)
        return dec.attend(enc, dec.initial_state(enc)[-1][0])[1].value[:, 0]

    a1, a0 = alpha(model), alpha(flat)
    assert np.allclose(a1, a0 * wm / np.sum(a0 * wm), atol=1e-14)


def test_batched_loss_is_sum_of_rows():
    rng = np.random.default_rng(3)
    model = tiny_model()
    src = rng.integers(3, 9, size=(3, 4))
    trg = np.stack([with_eos(rng.integers(3, 9, size=2)) for _ in range(3)])
    total = model.nll(src, trg)
    parts = sum(model.nll(src[k], trg[k]) for k in range(3))
    assert total == pytest.approx(parts, rel=1e-13)


def test_chain_lattice_with_batt_equals_without():
    rng = np.random.default_rng(4)
    model = tiny_model(mode="lattice")
    off = Seq2Seq(model.config.with_encoder(batt=False), model.store)
    lat = from_token_sequence([3, 5, 7])
    target = with_eos([4, 4])
    assert model.nll(lat, target) == off.nll(lat, target)


def test_model_overfits_three_pairs():
    rng = np.random.default_rng(5)
    model = tiny_model(seed=1)
    data = toy_pairs(rng, 3)
    opt = Adam(model.store)
    for _ in range(300):
        model.store.zero_grad()
        words = 0
        for src, trg in data:
            g = Graph()
            g.backward(model.loss(g, src, trg))
            words += len(trg)
        opt.step(0.02, scale=1.0 / words)
    assert sum(model.nll(s, t) for s, t in data) < 0.05


# optimizer


def test_adam_first_step_moves_by_lr_times_sign():
    store = ParamStore()
    store.add("p", np.array([1.0, -2.0, 0.5]))
    store.grads["p"][...] = [0.3, -4.0, 0.0]
    Adam(store, eps=1e-8).step(0.1)
    want = np.array([1.0, -2.0, 0.5]) - 0.1 * np.array([0.3 / (0.3 + 1e-8), -4.0 / (4.0 + 1e-8), 0.0])
    assert np.allclose(store["p"], want, rtol=0, atol=1e-15)


def test_adam_second_step_against_hand_computation():
    store = ParamStore()
    store.add("p", np.array([0.0]))
    opt = Adam(store, beta1=0.9, beta2=0.999, eps=1e-8)
    store.grads["p"][...] = 1.0
    opt.step(0.01)
    store.grads["p"][...] = -3.0
    opt.step(0.01)
    m = 0.9 * 0.1 * 1.0 + 0.1 * -3.0
    v = 0.999 * 0.001 * 1.0 + 0.001 * 9.0
    step2 = 0.01 * (m / (1 - 0.9 ** 2)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
    assert store["p"][0] == pytest.approx(-0.01 * 1 / (1 + 1e-8) - step2, abs=1e-15)


def test_adam_zero_gradient_is_a_no_op():
    store = ParamStore()
    store.add("p", np.array([1.0, 2.0]))
    Adam(store).step(0.5)
    assert store["p"].tolist() == [1.0, 2.0]


def test_adam_clips_global_norm():
    a, b = ParamStore(), ParamStore()
    for s in (a, b):
        s.add("p", np.zeros(2))
    a.grads["p"][...] = [30.0, 40.0]  # norm 50
    b.grads["p"][...] = [3.0, 4.0]  # the clipped gradient
    na = Adam(a).step(0.1, clip_norm=5.0)
    Adam(b).step(0.1)
    assert na == 50.0
    assert np.allclose(a["p"], b["p"], atol=1e-15)


def test_adam_state_roundtrip():
    store = ParamStore()
    store.add("p", np.array([1.0, 2.0]))
    opt = Adam(store)
    store.grads["p"][...] = [1.0, -1.0]
    opt.step(0.1)
    other = Adam(store)
    other.load_state(opt.state())
    assert other.t == 1 and np.array_equal(other.m["p"], opt.m["p"])


def test_gradient_accumulation_is_bitwise_sum():
    rng = np.random.default_rng(6)
    model = tiny_model(mode="lattice")
    examples = [(random_lattice(rng, 4, 9), with_eos([3, 4])) for _ in range(3)]
    single = []
    for src, trg in examples:
        model.store.zero_grad()
        g = Graph()
        g.backward(model.loss(g, src, trg))
        single.append({k: v.copy() for k, v in model.store.grads.items()})
    model.store.zero_grad()
    for src, trg in examples:
        g = Graph()
        g.backward(model.loss(g, src, trg))
    for k in single[0]:
        assert np.array_equal(model.store.grads[k], (single[0][k] + single[1][k]) + single[2][k])


def test_lr_schedule_halves_on_worse_dev():
    assert lr_schedule([], 1e-3) == 1e-3
    assert lr_schedule([10.0, 9.0, 9.5, 9.4, 9.6], 1e-3) == 2.5e-4
    assert lr_schedule([5.0, 5.0], 1.0) == 1.0


# data and loops


def test_make_batches_cover_everything_once():
    rng = np.random.default_rng(7)
    data = toy_pairs(rng, 60)
    batches = make_batches(data, 6, np.random.default_rng(0))
    flat = sorted(j for b in batches for j in b)
    assert flat == list(range(60))
    for b in batches:
        assert len({(len(data[j][0]), len(data[j][1])) for j in b}) == 1
        assert len(b) == 1 or sum(len(data[j][1]) for j in b) <= 6


def test_corpus_nll_matches_per_example_sum():
    rng = np.random.default_rng(8)
    model = tiny_model()
    data = toy_pairs(rng, 20) + [(random_lattice(rng, 3, 9), with_eos([5]))]
    total, words = corpus_nll(model, data)
    assert words == sum(len(t) for _, t in data)
    assert total == pytest.approx(sum(model.nll(s, t) for s, t in data), rel=1e-12)
    assert perplexity(model, data) == pytest.approx(math.exp(total / words), rel=1e-14)


def test_train_config_file_roundtrip(tmp_path):
    cfg = TrainConfig(lr_pretrain=0.002, group_size=7, max_epochs=3)
    cfg.save(tmp_path / "t.cfg")
    assert TrainConfig.load(tmp_path / "t.cfg") == cfg
    (tmp_path / "bad.cfg").write_text("learning_rate = 1\n")
    with pytest.raises(ValueError, match="unknown key"):
        TrainConfig.load(tmp_path / "bad.cfg")
    with pytest.raises(ValueError):
        TrainConfig(lr_finetune=0.0)


def _short_run(seed=0):
    rng = np.random.default_rng(9)
    train, dev = toy_pairs(rng, 40), toy_pairs(rng, 10)
    model = tiny_model(seed=seed)
    cfg = TrainConfig(lr_pretrain=0.01, batch_words=12, max_epochs=3, finetune_epochs=1, group_size=5)
    logs = []
    pretrain(model, train, dev, cfg, on_epoch=logs.append)
    lat_train = [(from_token_sequence(s), t) for s, t in train[:10]]
    finetune(Seq2Seq(model.config.with_encoder(mode="lattice"), model.store), lat_train, dev, cfg)
    return model, logs, dev


def test_training_is_deterministic():
    m1, logs1, _ = _short_run()
    m2, logs2, _ = _short_run()
    for k in m1.store.values:
        assert np.array_equal(m1.store[k], m2.store[k]), k
    assert [e.perplexity for e in logs1] == [e.perplexity for e in logs2]


def test_pretraining_improves_dev_and_logs_epochs():
    model, logs, dev = _short_run()
    devs = [e for e in logs if e.split == "dev"]
    assert len(devs) == 3 and [e.epoch for e in devs] == [1, 2, 3]
    assert min(e.perplexity for e in devs) < 9.0  # below the uniform model
    assert devs[0].tsv().count("\t") == 4


def test_checkpoint_preserves_dev_perplexity(tmp_path):
    model, _, dev = _short_run()
    before = perplexity(model, dev)
    model.save(tmp_path / "m.ckpt", model.optimizer_state, {"note": "x"})
    back, opt, extra = Seq2Seq.load(tmp_path / "m.ckpt")
    assert perplexity(back, dev) == before
    assert extra == {"note": "x"} and "__t__" in opt
    assert back.config == model.config


def test_vocab_ids_are_reserved_for_specials():
    assert (Vocabulary.unk_id, Vocabulary.bos_id, Vocabulary.eos_id) == (0, 1, 2)
