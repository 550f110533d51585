"""Synthetic-corpus experiments: context sensitivity and previous-sentence ablation."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .corpus import SyntheticSpec, context_blind_floor, generate_synthetic, split
from .taco_lite import ModelConfig, TacoLite, TrainConfig, prepare_utterances, train
from .text_context import EmbeddingCache, StubBackend, WhitespaceTokenizer

log = logging.getLogger(__name__)


@dataclass
class SyntheticSetup:
    spec: SyntheticSpec
    corpus: object
    train_keys: list
    val_keys: list
    test_keys: list
    backend: StubBackend
    cache: EmbeddingCache
    inventory: object

    @property
    def floor(self):
        return context_blind_floor(self.spec)

    def utterances(self, keys, cu_mode, L=2):
        return prepare_utterances(self.corpus, keys, self.spec.lexicon, self.inventory,
                                  cu_mode, L, self.backend, self.cache)


def synthetic_setup(n_classes=2, noise_sigma=0.05, paragraphs=200, data_seed=0, split_seed=0,
                    embedding_dim=32):
    spec = SyntheticSpec.default(n_classes=n_classes, noise_sigma=noise_sigma, seed=data_seed)
    corpus = generate_synthetic(spec, paragraphs, seed=data_seed)
    tr, va, te = split(corpus, split_seed)
    backend = StubBackend(dim=embedding_dim, tokenizer=WhitespaceTokenizer(spec.lexicon.entries))
    return SyntheticSetup(spec, corpus, tr, va, te, backend, EmbeddingCache(embedding_dim), spec.inventory())


@dataclass
class RunResult:
    cu_mode: str
    seed: int
    floor: float
    trace: list
    model: TacoLite = field(repr=False, default=None)
    seconds: float = 0.0

    @property
    def val_curve(self):
        return [(r["step"], r["val_free_mse"]) for r in self.trace if "val_free_mse" in r]

    @property
    def best_ratio(self):
        return min(m for _, m in self.val_curve) / self.floor


def run_context_sensitivity(setup, cu_mode, seed, steps=5000, stop_ratio=None, val_every=250,
                            batch_size=16, lr=1e-3, L=2, model_overrides=None):
    """Train a toy model on ``setup`` and track free-running validation MSE.

    With ``stop_ratio`` training ends as soon as validation MSE falls to
    ``stop_ratio * floor``.
    """
    torch.manual_seed(seed)
    cfg = ModelConfig.toy(len(setup.inventory), cu_mode=cu_mode, context_width=L,
                          embedding_dim=setup.backend.dim, **(model_overrides or {}))
    model = TacoLite(cfg)
    tr = setup.utterances(setup.train_keys, cu_mode, L)
    va = setup.utterances(setup.val_keys, cu_mode, L)
    floor = setup.floor

    def cb(step, row):
        return stop_ratio is not None and "val_free_mse" in row and row["val_free_mse"] <= stop_ratio * floor

    t0 = time.perf_counter()
    _, trace = train(model, tr, TrainConfig(steps=steps, batch_size=batch_size, lr=lr, seed=seed,
                                            val_every=val_every), val_utts=va, callback=cb)
    return RunResult(cu_mode, seed, floor, trace, model, time.perf_counter() - t0)
