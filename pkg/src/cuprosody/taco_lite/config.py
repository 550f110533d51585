from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace

from ..cu_encoder import AttentionConfig
from ..errors import ConfigurationError

CU_MODES = ("none", "cse", "pse")


@dataclass
class ModelConfig:
    n_symbols: int
    phoneme_embedding_dim: int = 256
    encoder_conv_layers: int = 3
    encoder_conv_channels: int = 512
    encoder_kernel: int = 5
    encoder_dim: int = 512            # d_f; also the fused decoder-input width
    encoder_dropout: float = 0.5
    prenet_dim: int = 256
    prenet_dropout: float = 0.5
    attention_rnn_dim: int = 1024
    decoder_rnn_dim: int = 1024
    attention_dim: int = 128
    location_filters: int = 32
    location_kernel: int = 31
    attention_dropout: float = 0.1
    decoder_dropout: float = 0.1
    postnet_channels: int = 512
    postnet_kernel: int = 5
    postnet_layers: int = 5
    postnet_dropout: float = 0.5
    postnet_zero_init: bool = False
    n_mels: int = 80
    reduction: int = 2
    stop_threshold: float = 0.5
    dropout_at_inference: bool = False
    cu_mode: str = "pse"
    context_width: int = 2            # L
    embedding_dim: int = 768          # d_e
    attention: AttentionConfig = field(default_factory=AttentionConfig)

    def __post_init__(self):
        if isinstance(self.attention, dict):
            self.attention = AttentionConfig(**self.attention)
        if self.reduction < 1:
            raise ConfigurationError("reduction factor must be >= 1")
        if self.cu_mode not in CU_MODES:
            raise ConfigurationError(f"cu_mode must be one of {CU_MODES}")
        if self.cu_mode == "pse" and self.context_width < 1:
            raise ConfigurationError("PSE mode needs context_width >= 1")
        if self.encoder_dim % 2:
            raise ConfigurationError("encoder_dim must be even (bi-directional LSTM halves)")
        if self.cu_mode == "pse" and self.attention.max_pairs < 2 * self.context_width:
            self.attention = replace(self.attention, max_pairs=2 * self.context_width)

    @classmethod
    def full(cls, n_symbols, **overrides):
        """Full-size widths (256-d phoneme space, 512-d encoder, 768-d embeddings)."""
        return cls(n_symbols=n_symbols, **overrides)

    @classmethod
    def toy(cls, n_symbols, **overrides):
        """Widths small enough for CPU tests in minutes."""
        base = dict(
            phoneme_embedding_dim=32, encoder_conv_channels=64, encoder_dim=64,
            encoder_dropout=0.0, prenet_dim=32, prenet_dropout=0.5,
            attention_rnn_dim=64, decoder_rnn_dim=64, attention_dim=32,
            location_filters=8, location_kernel=7, attention_dropout=0.0,
            decoder_dropout=0.0, postnet_channels=32, postnet_dropout=0.0,
            postnet_zero_init=True, embedding_dim=32,
            attention=AttentionConfig(heads=2, d_k=16, d_v=16, context_dim=32),
        )
        base.update(overrides)
        return cls(n_symbols=n_symbols, **base)

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**d)

    def to_json(self):
        return json.dumps(self.to_dict(), sort_keys=True)


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 1e-3
    optimizer: str = "adam"           # or "momentum"
    momentum: float = 0.9
    weight_decay: float = 0.0
    grad_clip: float = 1.0
    val_every: int = 250
    log_every: int = 1
    seed: int = 0

    def to_dict(self):
        return asdict(self)
