"""Teacher-forced training and objective evaluation."""
from __future__ import annotations

import logging
import math
import time

import numpy as np
import torch

from ..errors import ConfigurationError, TrainingDivergenceError
from .config import TrainConfig
from .data import collate
from .model import tacotron_loss

log = logging.getLogger(__name__)


def make_optimizer(model, tcfg: TrainConfig):
    if tcfg.optimizer == "adam":
        return torch.optim.Adam(model.parameters(), lr=tcfg.lr, weight_decay=tcfg.weight_decay)
    if tcfg.optimizer == "momentum":
        return torch.optim.SGD(model.parameters(), lr=tcfg.lr, momentum=tcfg.momentum,
                               weight_decay=tcfg.weight_decay)
    raise ConfigurationError(f"unknown optimizer {tcfg.optimizer!r}")


@torch.no_grad()
def evaluate(model, utts, batch_size=64):
    """Teacher-forced loss and free-running mel MSE over ``utts``.

    Free-running decoding ignores the stop token and runs for exactly as many
    steps as the target needs; the MSE covers real frames of the post-net output.
    """
    was_training = model.training
    model.eval()
    r = model.cfg.reduction
    dtype = next(model.parameters()).dtype
    tf_sum = tf_n = 0.0
    sq = count = 0.0
    try:
        for i in range(0, len(utts), batch_size):
            chunk = utts[i:i + batch_size]
            batch = collate(chunk, r, dtype)
            comp = tacotron_loss(model(batch), batch, r)
            tf_sum += float(comp.total) * len(chunk)
            tf_n += len(chunk)
            steps = batch.mels.shape[1] // r
            mel, _, _ = model.infer(batch, steps, use_stop=False)
            for b, n in enumerate(batch.frame_lengths.tolist()):
                diff = mel[b, :n].double() - batch.mels[b, :n].double()
                sq += float((diff ** 2).sum())
                count += n * diff.shape[1]
    finally:
        model.train(was_training)
    return {"val_tf_loss": tf_sum / tf_n, "val_free_mse": sq / count}


def train(model, train_utts, tcfg: TrainConfig, val_utts=None, optimizer=None, start_step=0,
          callback=None, dtype=torch.float32):
    """Run ``tcfg.steps`` optimisation steps; returns ``(optimizer, trace)``.

    Each trace row holds the step and its loss components; every
    ``val_every`` steps (and at the last step) validation metrics are added.
    ``callback(step, row)`` returning True stops early.
    """
    torch.manual_seed(tcfg.seed)
    rng = np.random.default_rng(tcfg.seed)
    optimizer = optimizer or make_optimizer(model, tcfg)
    r = model.cfg.reduction
    trace = []
    model.train()
    bs = min(tcfg.batch_size, len(train_utts))
    t0 = time.perf_counter()
    for step in range(start_step + 1, start_step + tcfg.steps + 1):
        idx = rng.choice(len(train_utts), size=bs, replace=False)
        batch = collate([train_utts[i] for i in idx], r, dtype)
        comp = tacotron_loss(model(batch), batch, r)
        if not math.isfinite(comp.total.item()):
            raise TrainingDivergenceError(
                f"non-finite loss at step {step}",
                {"step": step, **comp.as_dict(), "keys": [list(k) for k in batch.keys]})
        optimizer.zero_grad()
        comp.total.backward()
        if tcfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(model.parameters(), tcfg.grad_clip)
        optimizer.step()
        row = {"step": step, **{k: v for k, v in comp.as_dict().items()}}
        last = step == start_step + tcfg.steps
        if val_utts and (step % tcfg.val_every == 0 or last):
            row.update(evaluate(model, val_utts))
            log.info("step %d loss %.4f val_free_mse %.4f (%.1fs)", step, row["total"],
                     row["val_free_mse"], time.perf_counter() - t0)
        trace.append(row)
        if callback is not None and callback(step, row):
            break
    return optimizer, trace
