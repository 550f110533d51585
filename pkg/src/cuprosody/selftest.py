"""Fast internal consistency checks, runnable from the CLI (``cuprosody selftest``).

Each check returns ``(ok, detail)``. None of them touch the network or disk
beyond a temporary directory.
"""
from __future__ import annotations

import math

import numpy as np
import torch

from .cu_encoder import AttentionConfig, CUAttention
from .taco_lite import ModelConfig, TacoLite, Utterance, collate, tacotron_loss


def micro_model_config(cu_mode="pse"):
    """The smallest config exercising every parameter group of the model."""
    return ModelConfig.toy(
        n_symbols=10, phoneme_embedding_dim=4, encoder_conv_channels=6, encoder_dim=8,
        encoder_kernel=3, prenet_dim=6, attention_rnn_dim=8, decoder_rnn_dim=8, attention_dim=5,
        location_filters=3, location_kernel=3, postnet_channels=6, postnet_zero_init=False,
        n_mels=6, cu_mode=cu_mode, context_width=2, embedding_dim=6,
        attention=AttentionConfig(heads=2, d_k=4, d_v=4, context_dim=5),
    )


def micro_batch(cfg, seed=0, n=2):
    rng = np.random.default_rng(seed)
    utts = []
    for i in range(n):
        T = 3 + i
        kw = {}
        if cfg.cu_mode == "pse":
            mask = np.array([True, False, True, True][: 2 * cfg.context_width])
            kw = dict(pse=(rng.uniform(-1, 1, (len(mask), cfg.embedding_dim)) * mask[:, None]), pse_mask=mask)
        elif cfg.cu_mode == "cse":
            kw = dict(cse_past=rng.uniform(-1, 1, cfg.embedding_dim), cse_future=rng.uniform(-1, 1, cfg.embedding_dim))
        utts.append(Utterance(("g", i), rng.integers(1, cfg.n_symbols, T),
                              rng.standard_normal((5 + i, cfg.n_mels)), **kw))
    return collate(utts, cfg.reduction, torch.float64)


def gradient_check(cfg=None, seed=0, per_group=20, eps=1e-3, abs_floor=1e-6):
    """Compare autograd against central differences on the whole model, float64.

    Every named parameter tensor is a group; ``per_group`` coordinates are
    sampled from each (all of them for smaller tensors). The prenet dropout
    mask is replayed from a fixed seed so the loss is a deterministic function
    of the parameters. Returns ``{group: worst relative error}``.
    """
    cfg = cfg or micro_model_config()
    torch.manual_seed(seed)
    model = TacoLite(cfg).double().train()
    batch = micro_batch(cfg, seed)

    def loss():
        out = model(batch, generator=torch.Generator().manual_seed(seed))
        return tacotron_loss(out, batch, cfg.reduction).total

    model.zero_grad()
    loss().backward()
    rng = np.random.default_rng(seed)
    worst = {}
    for name, p in model.named_parameters():
        grad = p.grad.detach().clone().reshape(-1)
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if flat.numel() > per_group:
            idx = rng.choice(flat.numel(), per_group, replace=False)
        err = 0.0
        with torch.no_grad():
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                fp = loss().item()
                flat[i] = orig - eps
                fm = loss().item()
                flat[i] = orig
                num = (fp - fm) / (2 * eps)
                ana = grad[i].item()
                err = max(err, abs(ana - num) / max(abs(ana), abs(num), abs_floor))
        worst[name] = err
    return worst


def _brute_attention(F, E, mask, Wq, Wk, Wv, Wo):
    H, _, d_k = Wq.shape
    d_v = Wv.shape[2]
    G = np.zeros((F.shape[0], H * d_v))
    for h in range(H):
        for t in range(F.shape[0]):
            q = F[t] @ Wq[h]
            logits = {j: float(q @ (E[j] @ Wk[h])) / math.sqrt(d_k) for j in range(len(E)) if mask[j]}
            m = max(logits.values())
            z = sum(math.exp(v - m) for v in logits.values())
            for j, v in logits.items():
                G[t, h * d_v:(h + 1) * d_v] += math.exp(v - m) / z * (E[j] @ Wv[h])
    return G @ Wo


def check_attention(trials=5, tol=1e-10):
    from .cu_encoder import multi_head_cu_attention
    rng = np.random.default_rng(0)
    worst = 0.0
    for s in range(trials):
        torch.manual_seed(s)
        att = CUAttention(8, 6, AttentionConfig(heads=2, d_k=4, d_v=4, context_dim=5)).double()
        F = rng.standard_normal((3, 8))
        E = rng.standard_normal((4, 6))
        mask = rng.random(4) < 0.7
        mask[s % 4] = True
        C, _ = multi_head_cu_attention(torch.from_numpy(F), torch.from_numpy(E), torch.from_numpy(mask), att)
        ref = _brute_attention(F, E, mask, *(w.detach().numpy() for w in (att.W_q, att.W_k, att.W_v, att.W_o)))
        worst = max(worst, float(np.abs(C.detach().numpy() - ref).max()))
    return worst <= tol, f"max |diff| {worst:.2e}"


def check_gradients(tol=1e-3):
    worst = {}
    for mode in ("pse", "cse"):
        for k, v in gradient_check(micro_model_config(mode)).items():
            worst[f"{mode}:{k}"] = v
    name = max(worst, key=worst.get)
    return worst[name] < tol, f"{len(worst)} groups, worst {worst[name]:.2e} ({name})"


def check_layouts():
    from .corpus import Corpus, ManifestRecord
    from .text_context import WhitespaceTokenizer, build_cse_chunks, build_pse_pairs, build_window
    texts = ["alpha one", "beta two", "gamma three"]
    corpus = Corpus([ManifestRecord("p", i, t) for i, t in enumerate(texts)])
    tok = WhitespaceTokenizer(" ".join(texts).split())
    CLS, SEP = tok.cls_id, tok.sep_id
    ids = {t: tuple(tok.encode(t)) for t in texts}
    w = build_window(corpus, "p", 1, 1)
    past, future = build_cse_chunks(w, tok)
    pairs = build_pse_pairs(w, tok)
    problems = []
    if past.token_ids != (CLS, *ids["alpha one"], SEP, *ids["beta two"]):
        problems.append("cse past chunk")
    if future.token_ids != (CLS, *ids["beta two"], SEP, *ids["gamma three"]):
        problems.append("cse future chunk")
    if any(any(c.segment_ids) for c in (past, future)):
        problems.append("cse segments")
    if len(pairs) != 2 or pairs[0].token_ids != (CLS, *ids["alpha one"], SEP, *ids["beta two"]):
        problems.append("pse pairs")
    elif pairs[0].segment_ids != (0, 0, 0, 0, 1, 1):
        problems.append("pse segments")
    return not problems, ", ".join(problems) or "cse/pse layouts ok"


def check_frame_counts():
    from .features import AudioClip, mel_spectrogram
    rng = np.random.default_rng(0)
    bad = []
    for n in [800, 801, 999, 1000, 16000, *rng.integers(800, 20000, 10)]:
        got = mel_spectrogram(AudioClip(np.zeros(int(n), np.float32))).n_frames
        if got != 1 + (int(n) - 800) // 200:
            bad.append(int(n))
    return not bad, f"mismatched lengths {bad}" if bad else "1 + (N - 800) // 200 holds"


CHECKS = {
    "attention_oracle": check_attention,
    "gradients": check_gradients,
    "chunk_layouts": check_layouts,
    "frame_counts": check_frame_counts,
}


def run_all(report=print):
    ok = True
    for name, fn in CHECKS.items():
        passed, detail = fn()
        ok &= passed
        report(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    return ok
