"""Tacotron2-style spectrogram predictor with an optional cross-utterance encoder."""
from __future__ import annotations

from dataclasses import dataclass

import torch
from torch import nn
from torch.nn import functional as F
from torch.nn.utils.rnn import pack_padded_sequence, pad_packed_sequence

from ..cu_encoder import CUAttention, CUContext, FusionProjection, cse_context
from ..errors import InvalidInputError
from .config import ModelConfig


def length_mask(lengths, max_len):
    return torch.arange(max_len, device=lengths.device)[None, :] < lengths[:, None]


@dataclass
class Batch:
    phonemes: torch.Tensor                  # B x T long, 0 = pad
    phoneme_lengths: torch.Tensor           # B
    mels: torch.Tensor | None = None        # B x F x n_mels, F a multiple of r
    frame_lengths: torch.Tensor | None = None
    pse: torch.Tensor | None = None         # B x 2L x d_e
    pse_mask: torch.Tensor | None = None    # B x 2L bool
    cse_past: torch.Tensor | None = None    # B x d_e
    cse_future: torch.Tensor | None = None
    keys: tuple = ()

    def to(self, dtype):
        conv = lambda t: t.to(dtype) if t is not None and t.is_floating_point() else t  # noqa: E731
        return Batch(self.phonemes, self.phoneme_lengths, conv(self.mels), self.frame_lengths,
                     conv(self.pse), self.pse_mask, conv(self.cse_past), conv(self.cse_future), self.keys)


class PhonemeEncoder(nn.Module):
    """Embedding -> 3 conv layers -> bi-directional LSTM, giving F (B x T x d_f)."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.n_symbols = cfg.n_symbols
        self.embedding = nn.Embedding(cfg.n_symbols, cfg.phoneme_embedding_dim, padding_idx=0)
        pad = (cfg.encoder_kernel - 1) // 2
        chans = [cfg.phoneme_embedding_dim] + [cfg.encoder_conv_channels] * cfg.encoder_conv_layers
        self.convs = nn.ModuleList(
            nn.Conv1d(i, o, cfg.encoder_kernel, padding=pad) for i, o in zip(chans[:-1], chans[1:]))
        self.dropout = nn.Dropout(cfg.encoder_dropout)
        self.lstm = nn.LSTM(cfg.encoder_conv_channels, cfg.encoder_dim // 2,
                            batch_first=True, bidirectional=True)

    def conv_features(self, ids, lengths):
        """Output of the convolution stack, B x C x T."""
        if ids.numel() == 0 or bool((lengths < 1).any()):
            raise InvalidInputError("empty phoneme sequence")
        mask = length_mask(lengths, ids.shape[1])
        if bool(((ids < 1) | (ids >= self.n_symbols))[mask].any()):
            raise InvalidInputError("phoneme id outside inventory")
        m = mask.unsqueeze(1).to(self.embedding.weight.dtype)
        x = self.embedding(ids).transpose(1, 2) * m
        for conv in self.convs:
            # re-zero padding so each utterance sees the same borders as when unbatched
            x = self.dropout(F.relu(conv(x))) * m
        return x

    def forward(self, ids, lengths):
        x = self.conv_features(ids, lengths)
        packed = pack_padded_sequence(x.transpose(1, 2), lengths.cpu(), batch_first=True, enforce_sorted=False)
        out, _ = self.lstm(packed)
        out, _ = pad_packed_sequence(out, batch_first=True, total_length=ids.shape[1])
        return out


class Prenet(nn.Module):
    """Two ReLU bottleneck layers with dropout that can stay on at inference."""

    def __init__(self, in_dim, dim, p):
        super().__init__()
        self.layers = nn.ModuleList([nn.Linear(in_dim, dim), nn.Linear(dim, dim)])
        self.p = p

    def forward(self, x, dropout=False, generator=None):
        for layer in self.layers:
            x = F.relu(layer(x))
            if dropout and self.p > 0:
                keep = torch.full_like(x, 1.0 - self.p)
                x = x * torch.bernoulli(keep, generator=generator) / (1.0 - self.p)
        return x


class LocationSensitiveAttention(nn.Module):
    def __init__(self, query_dim, memory_dim, attn_dim, n_filters, kernel):
        super().__init__()
        self.query_layer = nn.Linear(query_dim, attn_dim, bias=False)
        self.memory_layer = nn.Linear(memory_dim, attn_dim, bias=False)
        self.location_conv = nn.Conv1d(2, n_filters, kernel, padding=(kernel - 1) // 2, bias=False)
        self.location_dense = nn.Linear(n_filters, attn_dim, bias=False)
        self.v = nn.Linear(attn_dim, 1, bias=False)

    def forward(self, query, memory, processed_memory, weights_cat, mask):
        loc = self.location_dense(self.location_conv(weights_cat).transpose(1, 2))
        energies = self.v(torch.tanh(self.query_layer(query).unsqueeze(1) + loc + processed_memory)).squeeze(-1)
        energies = energies.masked_fill(~mask, torch.finfo(energies.dtype).min)
        weights = torch.softmax(energies, dim=-1) * mask
        context = torch.bmm(weights.unsqueeze(1), memory).squeeze(1)
        return context, weights


@dataclass
class DecoderState:
    attn_h: torch.Tensor
    attn_c: torch.Tensor
    dec_h: torch.Tensor
    dec_c: torch.Tensor
    weights: torch.Tensor
    weights_cum: torch.Tensor
    context: torch.Tensor
    prev_frame: torch.Tensor


@dataclass
class Memory:
    values: torch.Tensor        # D, B x T x d
    processed: torch.Tensor
    mask: torch.Tensor


class Decoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.encoder_dim
        self.prenet = Prenet(cfg.n_mels, cfg.prenet_dim, cfg.prenet_dropout)
        self.attention_rnn = nn.LSTMCell(cfg.prenet_dim + d, cfg.attention_rnn_dim)
        self.attention = LocationSensitiveAttention(cfg.attention_rnn_dim, d, cfg.attention_dim,
                                                    cfg.location_filters, cfg.location_kernel)
        self.decoder_rnn = nn.LSTMCell(cfg.attention_rnn_dim + d, cfg.decoder_rnn_dim)
        self.frame_proj = nn.Linear(cfg.decoder_rnn_dim + d, cfg.n_mels * cfg.reduction)
        self.stop_proj = nn.Linear(cfg.decoder_rnn_dim + d, 1)

    def prepare(self, D, lengths):
        return Memory(D, self.attention.memory_layer(D), length_mask(lengths, D.shape[1]))

    def initial_state(self, memory):
        B, T, d = memory.values.shape
        z = lambda *s: memory.values.new_zeros(*s)  # noqa: E731
        return DecoderState(z(B, self.cfg.attention_rnn_dim), z(B, self.cfg.attention_rnn_dim),
                            z(B, self.cfg.decoder_rnn_dim), z(B, self.cfg.decoder_rnn_dim),
                            z(B, T), z(B, T), z(B, d), z(B, self.cfg.n_mels))

    def step(self, state, memory, prenet_dropout=False, generator=None):
        """One decoder step: returns (frames B x r x n_mels, stop_logit B, new state, alignment B x T)."""
        cfg = self.cfg
        x = self.prenet(state.prev_frame, prenet_dropout, generator)
        attn_h, attn_c = self.attention_rnn(torch.cat([x, state.context], -1), (state.attn_h, state.attn_c))
        attn_h = F.dropout(attn_h, cfg.attention_dropout, self.training)
        weights_cat = torch.stack([state.weights, state.weights_cum], dim=1)
        context, weights = self.attention(attn_h, memory.values, memory.processed, weights_cat, memory.mask)
        dec_h, dec_c = self.decoder_rnn(torch.cat([attn_h, context], -1), (state.dec_h, state.dec_c))
        dec_h = F.dropout(dec_h, cfg.decoder_dropout, self.training)
        out = torch.cat([dec_h, context], -1)
        frames = self.frame_proj(out).view(-1, cfg.reduction, cfg.n_mels)
        stop = self.stop_proj(out).squeeze(-1)
        new = DecoderState(attn_h, attn_c, dec_h, dec_c, weights, state.weights_cum + weights, context, frames[:, -1])
        return frames, stop, new, weights


class Postnet(nn.Module):
    """Five 1-d conv layers predicting a residual added to the decoder output."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        pad = (cfg.postnet_kernel - 1) // 2
        chans = [cfg.n_mels] + [cfg.postnet_channels] * (cfg.postnet_layers - 1) + [cfg.n_mels]
        self.convs = nn.ModuleList(
            nn.Conv1d(i, o, cfg.postnet_kernel, padding=pad) for i, o in zip(chans[:-1], chans[1:]))
        self.dropout = nn.Dropout(cfg.postnet_dropout)
        if cfg.postnet_zero_init:
            nn.init.zeros_(self.convs[-1].weight)
            nn.init.zeros_(self.convs[-1].bias)

    def forward(self, mel, frame_mask=None):
        m = None if frame_mask is None else frame_mask.unsqueeze(1).to(mel.dtype)
        x = mel.transpose(1, 2)
        if m is not None:
            x = x * m
        for i, conv in enumerate(self.convs):
            x = conv(x)
            if i < len(self.convs) - 1:
                x = self.dropout(torch.tanh(x))
            if m is not None:
                x = x * m
        return mel + x.transpose(1, 2)


@dataclass
class ForwardOutput:
    mel_pre: torch.Tensor
    mel_post: torch.Tensor
    stop_logits: torch.Tensor     # B x steps
    alignments: torch.Tensor      # B x steps x T
    cu_weights: torch.Tensor | None = None


class TacoLite(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        d_f = cfg.encoder_dim
        self.encoder = PhonemeEncoder(cfg)
        self.cu = None
        self.fusion = None
        if cfg.cu_mode == "pse":
            self.cu = CUAttention(d_f, cfg.embedding_dim, cfg.attention)
            self.fusion = FusionProjection(d_f, cfg.attention.context_dim, d_f)
        elif cfg.cu_mode == "cse":
            self.fusion = FusionProjection(d_f, 2 * cfg.embedding_dim, d_f)
        self.decoder = Decoder(cfg)
        self.postnet = Postnet(cfg)

    def encode(self, batch):
        """Phoneme encoding fused with CU context: returns (D, F, cu_weights)."""
        Fm = self.encoder(batch.phonemes, batch.phoneme_lengths)
        weights = None
        if self.cfg.cu_mode == "pse":
            mask = batch.pse_mask
            # windows with no real neighbour pair get a zero context instead of an undefined softmax
            has_any = mask.any(-1)
            safe = mask | ~has_any[:, None]
            C, weights = self.cu(Fm, batch.pse, safe)
            C = C * has_any[:, None, None].to(C.dtype)
            D = self.fusion(Fm, CUContext("pse", C))
        elif self.cfg.cu_mode == "cse":
            D = self.fusion(Fm, CUContext("cse", cse_context(batch.cse_past, batch.cse_future)))
        else:
            D = Fm
        D = D * length_mask(batch.phoneme_lengths, D.shape[1]).unsqueeze(-1).to(D.dtype)
        return D, Fm, weights

    def prenet_dropout_active(self):
        return self.training or self.cfg.dropout_at_inference

    def forward(self, batch, generator=None):
        """Teacher-forced pass over ``batch.mels``."""
        r, n_mels = self.cfg.reduction, self.cfg.n_mels
        D, _, cu_w = self.encode(batch)
        memory = self.decoder.prepare(D, batch.phoneme_lengths)
        state = self.decoder.initial_state(memory)
        B, n_frames, _ = batch.mels.shape
        steps = n_frames // r
        frames, stops, aligns = [], [], []
        for s in range(steps):
            if s > 0:
                state.prev_frame = batch.mels[:, s * r - 1]
            f, stop, state, w = self.decoder.step(state, memory, self.prenet_dropout_active(), generator)
            frames.append(f)
            stops.append(stop)
            aligns.append(w)
        mel_pre = torch.cat(frames, dim=1)
        frame_mask = length_mask(batch.frame_lengths, steps * r)
        mel_pre = mel_pre * frame_mask.unsqueeze(-1).to(mel_pre.dtype)
        mel_post = self.postnet(mel_pre, frame_mask)
        return ForwardOutput(mel_pre, mel_post, torch.stack(stops, 1), torch.stack(aligns, 1), cu_w)

    @torch.no_grad()
    def infer(self, batch, max_steps, use_stop=True, generator=None):
        """Free-running decode. Returns (mel_post B x S*r x n_mels, alignments, stop_steps).

        ``stop_steps[b]`` is the index of the step at which utterance b fired
        its stop token, or -1 if it never did. With ``use_stop`` the loop ends
        once every utterance has stopped.
        """
        D, _, _ = self.encode(batch)
        memory = self.decoder.prepare(D, batch.phoneme_lengths)
        state = self.decoder.initial_state(memory)
        B = D.shape[0]
        stop_steps = torch.full((B,), -1, dtype=torch.long)
        frames, aligns = [], []
        drop = self.prenet_dropout_active()
        for s in range(max_steps):
            f, stop, state, w = self.decoder.step(state, memory, drop, generator)
            frames.append(f)
            aligns.append(w)
            fired = (torch.sigmoid(stop) > self.cfg.stop_threshold) & (stop_steps < 0)
            stop_steps[fired] = s
            if use_stop and bool((stop_steps >= 0).all()):
                break
        mel = torch.cat(frames, dim=1)
        n = mel.shape[1]
        if use_stop:
            lengths = torch.where(stop_steps >= 0, (stop_steps + 1) * self.cfg.reduction, torch.tensor(n))
        else:
            lengths = torch.full((B,), n, dtype=torch.long)
        frame_mask = length_mask(lengths, n)
        mel = mel * frame_mask.unsqueeze(-1).to(mel.dtype)
        return self.postnet(mel, frame_mask), torch.stack(aligns, 1), stop_steps


def stop_targets(frame_lengths, steps, r):
    """1 for the step holding the final real frame and every later step."""
    last_step = (frame_lengths - 1) // r
    return (torch.arange(steps)[None, :] >= last_step[:, None]).float()


@dataclass
class LossComponents:
    total: torch.Tensor
    mel_pre: torch.Tensor
    mel_post: torch.Tensor
    stop: torch.Tensor

    def as_dict(self):
        return {k: getattr(self, k).item() for k in ("total", "mel_pre", "mel_post", "stop")}


def tacotron_loss(out, batch, r):
    """MSE(pre) + MSE(post) + BCE(stop), all masked to real frames / real steps."""
    n_frames = out.mel_pre.shape[1]
    steps = out.stop_logits.shape[1]
    fmask = length_mask(batch.frame_lengths, n_frames).unsqueeze(-1).to(out.mel_pre.dtype)
    denom = fmask.sum() * out.mel_pre.shape[-1]
    mse_pre = (((out.mel_pre - batch.mels) ** 2) * fmask).sum() / denom
    mse_post = (((out.mel_post - batch.mels) ** 2) * fmask).sum() / denom
    real_steps = ((batch.frame_lengths + r - 1) // r)
    smask = length_mask(real_steps, steps).to(out.stop_logits.dtype)
    target = stop_targets(batch.frame_lengths, steps, r).to(out.stop_logits.dtype)
    bce = F.binary_cross_entropy_with_logits(out.stop_logits, target, reduction="none")
    bce = (bce * smask).sum() / smask.sum()
    return LossComponents(mse_pre + mse_post + bce, mse_pre, mse_post, bce)
