"""Finite-difference checks of whole-model gradients."""

from __future__ import annotations

import itertools
import time

import numpy as np

from . import autodiff as ad
from .encoder import PEAKINESS_MODES
from .lattice import random_lattice
from .model import ModelConfig, Seq2Seq, with_eos

MECHANISMS = ("wcs", "bfg", "batt")


def flag_grid() -> list[dict]:
    """Every encoder setting to check: the sequential encoder, then each
    subset of mechanisms with each peakiness mode per enabled mechanism."""
    grid = [dict(mode="sequential")]
    for on in itertools.product((False, True), repeat=3):
        active = [m for m, f in zip(MECHANISMS, on) if f]
        for modes in itertools.product(PEAKINESS_MODES, repeat=len(active)):
            kw = dict(mode="lattice", **dict(zip(MECHANISMS, on)))
            kw.update({f"peak_{m}": p for m, p in zip(active, modes)})
            grid.append(kw)
    return grid


def randomize(model: Seq2Seq, rng: np.random.Generator) -> None:
    """Move parameters to a random point with O(1) gradients; peakiness
    coefficients stay positive."""
    for name, value in model.store.values.items():
        if name == "S_a" or ".S_" in name:
            value[...] = rng.uniform(0.5, 1.5, value.shape)
        else:
            value[...] = rng.normal(0.0, 0.7, value.shape)


def check_setting(encoder_kw: dict, n_examples: int = 5, seed: int = 0, layers: int = 2,
                  hidden: int = 3, embed: int = 4, vocab: int = 10, max_entries: int | None = 4,
                  tolerance: float = 1e-4) -> dict:
    """Gradient check of the full model loss on ``n_examples`` random sources.

    Returns the worst relative error and the per-example reports.
    """
    rng = np.random.default_rng(seed)
    cfg = ModelConfig.small(vocab, vocab, hidden=hidden, embed=embed, layers=layers, **encoder_kw)
    worst, reports = 0.0, []
    for k in range(n_examples):
        model = Seq2Seq(cfg, seed=seed + k)
        randomize(model, rng)
        if encoder_kw.get("mode") == "sequential":
            source = rng.integers(3, vocab, size=int(rng.integers(2, 5)))
        else:
            source = random_lattice(rng, int(rng.integers(3, 5)), vocab)
        target = with_eos(rng.integers(3, vocab, size=int(rng.integers(1, 4))))
        rep = ad.gradient_check(lambda g: model.loss(g, source, target), model.store,
                                max_entries=max_entries, tolerance=tolerance, rng=rng)
        reports.append(rep)
        worst = max(worst, rep["max_error"])
    return {"setting": encoder_kw, "max_error": worst, "passed": worst < tolerance, "reports": reports}


def check_all(n_examples: int = 5, seed: int = 0, mode: str | None = None, **kw) -> list[dict]:
    out = []
    for j, setting in enumerate(flag_grid()):
        if mode is not None and setting["mode"] != mode:
            continue
        t0 = time.perf_counter()
        res = check_setting(setting, n_examples, seed + 100 * j, **kw)
        res["seconds"] = time.perf_counter() - t0
        out.append(res)
    return out


def describe(setting: dict) -> str:
    if setting.get("mode") == "sequential":
        return "sequential"
    parts = [f"{m}:{setting.get('peak_' + m, 'learned')}" for m in MECHANISMS if setting.get(m)]
    return "lattice " + (" ".join(parts) if parts else "(no mechanisms)")
