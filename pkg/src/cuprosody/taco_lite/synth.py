from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import collate


@dataclass
class SynthesisResult:
    mel: np.ndarray               # frames x n_mels (post-net)
    alignments: np.ndarray        # steps x T
    stop_step: int | None         # None -> "no-stop": max_steps reached

    @property
    def stopped(self):
        return self.stop_step is not None


def default_max_steps(n_phonemes=None, target_frames=None, reduction=2):
    """4x the target length in steps when known, otherwise 10 steps per phoneme."""
    if target_frames is not None:
        return 4 * -(-target_frames // reduction)
    return 10 * n_phonemes


def synthesize(model, utt, max_steps=None, generator=None):
    """Free-running synthesis of one utterance until the stop token fires.

    Deterministic for a fixed model and utterance unless the model config
    enables dropout at inference, in which case ``generator`` seeds the masks.
    """
    model.eval()
    r = model.cfg.reduction
    if max_steps is None:
        max_steps = default_max_steps(len(utt.phonemes), None if utt.mel is None else len(utt.mel), r)
    dtype = next(model.parameters()).dtype
    batch = collate([utt], r, dtype)
    mel, align, stop_steps = model.infer(batch, max_steps, use_stop=True, generator=generator)
    s = int(stop_steps[0])
    n = (s + 1) * r if s >= 0 else mel.shape[1]
    return SynthesisResult(mel[0, :n].cpu().numpy(), align[0, :n // r].cpu().numpy(), s if s >= 0 else None)
