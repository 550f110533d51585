import numpy as np
import pytest
import torch

from cuprosody.cu_encoder import AttentionConfig
from cuprosody.taco_lite import ModelConfig, TacoLite, Utterance


def micro_config(cu_mode="pse", n_mels=6, **kw):
    """Smallest complete model: used for finite-difference checks."""
    base = dict(
        phoneme_embedding_dim=4, encoder_conv_channels=6, encoder_dim=8, encoder_kernel=3,
        prenet_dim=6, attention_rnn_dim=8, decoder_rnn_dim=8, attention_dim=5,
        location_filters=3, location_kernel=3, postnet_channels=6, postnet_zero_init=False,
        n_mels=n_mels, cu_mode=cu_mode, context_width=2, embedding_dim=6,
        attention=AttentionConfig(heads=2, d_k=4, d_v=4, context_dim=5),
    )
    base.update(kw)
    return ModelConfig.toy(n_symbols=10, **base)


def random_utterances(n, cfg, seed=0, min_len=2, max_len=5, frames=(3, 9)):
    rng = np.random.default_rng(seed)
    L = cfg.context_width
    out = []
    for i in range(n):
        T = int(rng.integers(min_len, max_len + 1))
        kw = {}
        if cfg.cu_mode == "pse":
            mask = rng.random(2 * L) < 0.75
            mask[rng.integers(2 * L)] = True
            kw = dict(pse=(rng.uniform(-1, 1, (2 * L, cfg.embedding_dim)) * mask[:, None]).astype(np.float32),
                      pse_mask=mask)
        elif cfg.cu_mode == "cse":
            kw = dict(cse_past=rng.uniform(-1, 1, cfg.embedding_dim).astype(np.float32),
                      cse_future=rng.uniform(-1, 1, cfg.embedding_dim).astype(np.float32))
        out.append(Utterance(("r", i), rng.integers(1, cfg.n_symbols, T).astype(np.int64),
                             rng.standard_normal((int(rng.integers(*frames)), cfg.n_mels)).astype(np.float32),
                             **kw))
    return out


@pytest.fixture
def toy_model():
    torch.manual_seed(0)
    cfg = ModelConfig.toy(n_symbols=12, cu_mode="pse", postnet_zero_init=False)
    return TacoLite(cfg).eval()
