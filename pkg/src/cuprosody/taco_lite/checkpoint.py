"""Checkpoint container.

A checkpoint is an uncompressed NumPy ``.npz`` archive with these members:

``format``            uint8 bytes of the string ``cuprosody-checkpoint/1``
``config.json``       uint8 bytes of the ModelConfig as JSON
``meta.json``         uint8 bytes of a JSON object: step, seed, optimizer name and
                      param groups, plus free-form extras (inventory symbols,
                      lexicon, backend id)
``param/<name>``      every model parameter, float32, named as in ``named_parameters()``
``optim/<name>/<k>``  per-parameter optimizer state tensors (e.g. ``exp_avg``)

Readers ignore unknown members; new fields are only ever added.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from ..errors import InvalidInputError
from .config import ModelConfig, TrainConfig
from .model import TacoLite
from .train import make_optimizer

FORMAT = "cuprosody-checkpoint/1"


def _b(s):
    return np.frombuffer(s.encode("utf-8"), dtype=np.uint8)


def _s(a):
    return a.tobytes().decode("utf-8")


@dataclass
class Checkpoint:
    model: TacoLite
    config: ModelConfig
    step: int = 0
    seed: int = 0
    optimizer: torch.optim.Optimizer | None = None
    meta: dict = field(default_factory=dict)


def save_checkpoint(path, model, optimizer=None, step=0, seed=0, meta=None):
    names = [n for n, _ in model.named_parameters()]
    arrays = {
        "format": _b(FORMAT),
        "config.json": _b(model.cfg.to_json()),
    }
    for n, p in model.named_parameters():
        arrays[f"param/{n}"] = p.detach().cpu().numpy().astype(np.float32)
    m = {"step": step, "seed": seed, "extra": meta or {}}
    if optimizer is not None:
        sd = optimizer.state_dict()
        m["optimizer"] = type(optimizer).__name__
        m["param_groups"] = [{k: v for k, v in g.items() if k != "params"} for g in sd["param_groups"]]
        for idx, st in sd["state"].items():
            for k, v in st.items():
                arrays[f"optim/{names[idx]}/{k}"] = torch.as_tensor(v).detach().cpu().numpy().astype(np.float32)
    arrays["meta.json"] = _b(json.dumps(m, sort_keys=True))
    path = Path(path)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())


def load_checkpoint(path, with_optimizer=True):
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise InvalidInputError(f"cannot read checkpoint {path}: {exc}") from exc
    with z:
        if "format" not in z.files or _s(z["format"]) != FORMAT:
            raise InvalidInputError(f"{path}: not a {FORMAT} file")
        cfg = ModelConfig.from_dict(json.loads(_s(z["config.json"])))
        meta = json.loads(_s(z["meta.json"]))
        model = TacoLite(cfg)
        state = {n: torch.from_numpy(z[f"param/{n}"].copy()) for n, _ in model.named_parameters()}
        model.load_state_dict(state, strict=False)
        optimizer = None
        if with_optimizer and "optimizer" in meta:
            names = [n for n, _ in model.named_parameters()]
            kind = "adam" if meta["optimizer"] == "Adam" else "momentum"
            optimizer = make_optimizer(model, TrainConfig(optimizer=kind))
            opt_state = {}
            for i, n in enumerate(names):
                prefix = f"optim/{n}/"
                st = {k[len(prefix):]: torch.from_numpy(z[k].copy()) for k in z.files if k.startswith(prefix)}
                if st:
                    opt_state[i] = st
            groups = [dict(g, params=list(range(len(names)))) for g in meta["param_groups"]]
            optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    model.eval()
    return Checkpoint(model, cfg, meta["step"], meta["seed"], optimizer, meta.get("extra", {}))
