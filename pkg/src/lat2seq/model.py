"""Encoder-decoder model: configuration, parameters, loss."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ParamStore, Tensor
from .decoder import Decoder, DecoderConfig, init_decoder_params
from .encoder import (EncodedSource, EncoderConfig, encode_lattice, encode_sequences,
                      init_encoder_params)
from .lattice import Lattice, Vocabulary
from .scores import node_scores


@dataclass
class ModelConfig:
    src_vocab: int
    trg_vocab: int
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    route: str = "fused"  # lattice layers: "fused" kernel or "composed" primitives

    def __post_init__(self):
        if isinstance(self.encoder, dict):
            self.encoder = EncoderConfig(**self.encoder)
        if isinstance(self.decoder, dict):
            self.decoder = DecoderConfig(**self.decoder)
        if self.decoder.hidden != 2 * self.encoder.hidden:
            raise ValueError("decoder hidden size must be twice the encoder's per-direction size")
        if self.decoder.num_layers != self.encoder.num_layers:
            raise ValueError("decoder layers are initialized from encoder layers; counts must match")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)

    @classmethod
    def small(cls, src_vocab: int, trg_vocab: int, hidden: int = 32, embed: int = 32,
              layers: int = 1, **encoder_kw) -> "ModelConfig":
        return cls(src_vocab, trg_vocab,
                   EncoderConfig(num_layers=layers, hidden=hidden, embed=embed, **encoder_kw),
                   DecoderConfig(num_layers=layers, hidden=2 * hidden, embed=embed, attention=2 * hidden))

    def with_encoder(self, **kw) -> "ModelConfig":
        return replace(self, encoder=replace(self.encoder, **kw))


Source = Lattice | np.ndarray


class Seq2Seq:
    def __init__(self, config: ModelConfig, store: ParamStore | None = None, seed: int = 0):
        self.config = config
        if store is None:
            store = ParamStore()
            rng = np.random.default_rng(seed)
            init_encoder_params(store, config.encoder, config.src_vocab, rng)
            init_decoder_params(store, config.decoder, config.encoder.hidden, config.trg_vocab, rng)
        self.store = store
        self._scores = {}
        self.optimizer_state = None

    def scores_for(self, lat: Lattice):
        key = id(lat)
        hit = self._scores.get(key)
        if hit is None or hit[0] is not lat:
            if len(self._scores) > 100_000:
                self._scores.clear()
            hit = (lat, node_scores(lat))
            self._scores[key] = hit
        return hit[1]

    def encode(self, graph: Graph, source: Source) -> EncodedSource:
        """Encode a lattice (batch 1) or a (B, T) array of token ids.

        Token arrays hold raw tokens; bos/eos are added here.
        """
        cfg = self.config.encoder
        if isinstance(source, Lattice):
            return encode_lattice(graph, self.store, cfg, source, self.scores_for(source),
                                  route=self.config.route)
        tokens = np.atleast_2d(np.asarray(source, dtype=np.int64))
        B = tokens.shape[0]
        tokens = np.concatenate([np.full((B, 1), Vocabulary.bos_id), tokens,
                                 np.full((B, 1), Vocabulary.eos_id)], axis=1)
        return encode_sequences(graph, self.store, cfg, tokens)

    def decoder(self, graph: Graph) -> Decoder:
        cfg = self.config.encoder
        batt = cfg.flags["batt"]
        S_a = 1.0
        if batt:
            S_a = {"fixed0": 0.0, "fixed1": 1.0}.get(cfg.peak_batt)
            if S_a is None:
                S_a = graph.param(self.store, "S_a")
        return Decoder(graph, self.store, self.config.decoder, batt=batt, S_a=S_a)

    def loss(self, graph: Graph, source: Source, targets) -> Tensor:
        """Summed NLL of ``targets`` (B, M) or (M,) ending in eos."""
        enc = self.encode(graph, source)
        return self.decoder(graph).sequence_loss(enc, targets)

    def nll(self, source: Source, targets) -> float:
        return float(self.loss(Graph(), source, targets).value)

    def peakiness(self) -> dict[str, float | np.ndarray]:
        out = {"S_a": float(self.store["S_a"])}
        for layer in range(self.config.encoder.num_layers):
            out[f"S_h{layer}"] = self.store[f"enc{layer}.S_h"].copy()
            out[f"S_f{layer}"] = self.store[f"enc{layer}.S_f"].copy()
        return out

    def save(self, path, optimizer_state=None, extra=None) -> None:
        ad.save_checkpoint(path, self.store, self.config.to_dict(), optimizer_state, extra)

    @classmethod
    def load(cls, path) -> tuple["Seq2Seq", dict, dict]:
        store, config, opt, extra = ad.load_checkpoint(path)
        return cls(ModelConfig.from_dict(config), store), opt, extra


def with_eos(tokens) -> np.ndarray:
    return np.append(np.asarray(tokens, dtype=np.int64), Vocabulary.eos_id)
