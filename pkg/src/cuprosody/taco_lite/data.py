"""Utterance preparation (G2P + context embeddings) and batch collation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..corpus import g2p
from ..text_context import build_window, embed_window_cse, embed_window_pse
from .model import Batch


@dataclass
class Utterance:
    key: tuple
    phonemes: np.ndarray                  # int ids
    mel: np.ndarray | None = None         # frames x n_mels
    pse: np.ndarray | None = None         # 2L x d_e
    pse_mask: np.ndarray | None = None
    cse_past: np.ndarray | None = None
    cse_future: np.ndarray | None = None


def context_arrays(window, cu_mode, backend, cache=None):
    """Embeddings a model in ``cu_mode`` consumes for ``window``, as a kwargs dict."""
    if cu_mode == "pse":
        E, mask = embed_window_pse(window, backend, cache)
        return {"pse": E, "pse_mask": mask}
    if cu_mode == "cse":
        e_p, e_n = embed_window_cse(window, backend, cache)
        return {"cse_past": e_p.vector, "cse_future": e_n.vector}
    return {}


def make_utterance(key, text, lexicon, inventory, window=None, cu_mode="none",
                   backend=None, cache=None, mel=None, language=None):
    ids = np.asarray(inventory.encode(g2p(text, lexicon, language)), dtype=np.int64)
    ctx = context_arrays(window, cu_mode, backend, cache) if cu_mode != "none" else {}
    return Utterance(key, ids, mel, **ctx)


def prepare_utterances(corpus, keys, lexicon, inventory, cu_mode, L, backend=None, cache=None):
    out = []
    for pid, idx in keys:
        rec = corpus.record(pid, idx)
        window = build_window(corpus, pid, idx, L) if cu_mode != "none" else None
        out.append(make_utterance((pid, idx), rec.text, lexicon, inventory, window, cu_mode,
                                  backend, cache, corpus.targets.get((pid, idx)), rec.language))
    return out


def collate(utts, reduction, dtype=torch.float32, extra_frames=0):
    """Pad phonemes with 0 and mels with zeros up to a multiple of ``reduction``.

    ``extra_frames`` appends further all-padding frames (rounded up to whole steps).
    """
    B = len(utts)
    T = max(len(u.phonemes) for u in utts)
    phon = torch.zeros(B, T, dtype=torch.long)
    for i, u in enumerate(utts):
        phon[i, :len(u.phonemes)] = torch.from_numpy(u.phonemes)
    kw = {}
    if utts[0].mel is not None:
        lengths = [u.mel.shape[0] for u in utts]
        n = max(lengths) + extra_frames
        n = -(-n // reduction) * reduction
        mels = torch.zeros(B, n, utts[0].mel.shape[1], dtype=dtype)
        for i, u in enumerate(utts):
            mels[i, :lengths[i]] = torch.from_numpy(np.asarray(u.mel)).to(dtype)
        kw.update(mels=mels, frame_lengths=torch.tensor(lengths))
    if utts[0].pse is not None:
        kw.update(pse=torch.from_numpy(np.stack([u.pse for u in utts])).to(dtype),
                  pse_mask=torch.from_numpy(np.stack([u.pse_mask for u in utts])))
    if utts[0].cse_past is not None:
        kw.update(cse_past=torch.from_numpy(np.stack([u.cse_past for u in utts])).to(dtype),
                  cse_future=torch.from_numpy(np.stack([u.cse_future for u in utts])).to(dtype))
    return Batch(phon, torch.tensor([len(u.phonemes) for u in utts]), keys=tuple(u.key for u in utts), **kw)
