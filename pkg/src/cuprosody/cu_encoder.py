"""Cross-utterance fusion: CSE concatenation and PSE multi-head attention.

All functions accept arbitrary leading batch dimensions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .errors import ConfigurationError, InvalidInputError


def cse_context(e_past, e_future):
    """c = [e(u_P); e(u_N)] along the last dimension."""
    if e_past.shape != e_future.shape:
        raise InvalidInputError(f"dimension mismatch {tuple(e_past.shape)} vs {tuple(e_future.shape)}")
    return torch.cat([e_past, e_future], dim=-1)


def add_sentence_index_embeddings(E, position_table, start_index=0):
    n = E.shape[-2]
    if start_index < 0 or start_index + n > position_table.shape[0]:
        raise ConfigurationError(
            f"{n} sentence pairs from index {start_index} exceed position table of {position_table.shape[0]}")
    return E + position_table[start_index:start_index + n]


def scaled_dot_attention(Q, K, V, key_mask=None):
    """Softmax(Q K^T / sqrt(d_K)) V with masked keys at exactly zero weight.

    ``key_mask`` is boolean over the key axis (broadcast over queries); True
    means the key is visible. Masked logits are set to the most negative
    finite value, and the weights are multiplied by the mask afterwards.
    Raises InvalidInputError if some query row has no visible key.
    """
    d_k = Q.shape[-1]
    logits = Q @ K.transpose(-1, -2) / math.sqrt(d_k)
    if key_mask is None:
        weights = torch.softmax(logits, dim=-1)
        return weights @ V, weights
    mask = key_mask.unsqueeze(-2)
    if not bool(mask.any(dim=-1).all()):
        raise InvalidInputError("all keys masked: attention is undefined")
    logits = logits.masked_fill(~mask, torch.finfo(logits.dtype).min)
    weights = torch.softmax(logits, dim=-1) * mask
    return weights @ V, weights


@dataclass
class AttentionConfig:
    heads: int = 8
    d_k: int = 64
    d_v: int = 64
    context_dim: int = 256
    max_pairs: int = 4
    position_std: float = 0.02


class CUAttention(nn.Module):
    """Parameters of the PSE encoder: per-head query/key/value maps, output map
    and the learned sentence-index table. Projections carry no bias."""

    def __init__(self, d_f, d_e, cfg: AttentionConfig):
        super().__init__()
        if cfg.heads < 1 or cfg.d_k < 1 or cfg.d_v < 1:
            raise ConfigurationError("heads, d_k and d_v must be >= 1")
        self.cfg = cfg
        self.d_f, self.d_e = d_f, d_e
        H = cfg.heads
        self.W_q = nn.Parameter(torch.empty(H, d_f, cfg.d_k))
        self.W_k = nn.Parameter(torch.empty(H, d_e, cfg.d_k))
        self.W_v = nn.Parameter(torch.empty(H, d_e, cfg.d_v))
        self.W_o = nn.Parameter(torch.empty(H * cfg.d_v, cfg.context_dim))
        self.position_table = nn.Parameter(torch.empty(cfg.max_pairs, d_e))
        self.reset_parameters()

    def reset_parameters(self):
        for w, fan_in in ((self.W_q, self.d_f), (self.W_k, self.d_e), (self.W_v, self.d_e),
                          (self.W_o, self.W_o.shape[0])):
            bound = 1.0 / math.sqrt(fan_in)
            nn.init.uniform_(w, -bound, bound)
        nn.init.normal_(self.position_table, 0.0, self.cfg.position_std)

    @property
    def context_dim(self):
        return self.cfg.context_dim

    def forward(self, F, E, key_mask, start_index=0):
        E = add_sentence_index_embeddings(E, self.position_table, start_index)
        return multi_head_cu_attention(F, E, key_mask, self)


def multi_head_cu_attention(F, E, key_mask, params):
    """C = Concat_h(Attention(F Wq_h, E Wk_h, E Wv_h)) Wo.

    F: (..., T, d_f); E: (..., n, d_e), already position-augmented;
    key_mask: (..., n). Returns C (..., T, d_c) and weights (..., H, T, n).
    """
    Q = torch.einsum("...tf,hfk->...htk", F, params.W_q)
    K = torch.einsum("...nf,hfk->...hnk", E, params.W_k)
    V = torch.einsum("...nf,hfk->...hnk", E, params.W_v)
    mask = None if key_mask is None else key_mask.unsqueeze(-2)
    G, weights = scaled_dot_attention(Q, K, V, mask)
    G = G.transpose(-3, -2).reshape(*G.shape[:-3], G.shape[-2], -1)
    return G @ params.W_o, weights


@dataclass
class CUContext:
    """``mode="cse"``: tensor (..., 2 d_e); ``mode="pse"``: tensor (..., T, d_c)."""

    mode: str
    tensor: torch.Tensor


class FusionProjection(nn.Module):
    """Linear map [f(p_t); c_t] -> decoder input width, with bias."""

    def __init__(self, d_f, context_dim, out_dim=512):
        super().__init__()
        self.d_f, self.context_dim = d_f, context_dim
        self.linear = nn.Linear(d_f + context_dim, out_dim)

    @property
    def out_dim(self):
        return self.linear.out_features

    def forward(self, F, context):
        return fuse_and_project(F, context, self)


def fuse_and_project(F, context, proj):
    ctx = context.tensor
    if F.shape[-1] != proj.d_f or ctx.shape[-1] != proj.context_dim:
        raise ConfigurationError(
            f"fusion expects widths ({proj.d_f}, {proj.context_dim}), got ({F.shape[-1]}, {ctx.shape[-1]})")
    if context.mode == "cse":
        ctx = ctx.unsqueeze(-2).expand(*F.shape[:-1], ctx.shape[-1])
    elif context.mode != "pse":
        raise ConfigurationError(f"unknown context mode {context.mode!r}")
    return proj.linear(torch.cat([F, ctx], dim=-1))
