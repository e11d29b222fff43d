"""Portable checkpoints: a JSON manifest plus one raw little-endian file per tensor.

Layout::

    ckpt/
      manifest.json     names, shapes, dtypes, step, configs, vocab + sha256
      vocab.txt
      tensors/00000.bin ...
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import Vocab

FORMAT = "diffhand-checkpoint/1"


@dataclass
class Checkpoint:
    params: dict[str, torch.Tensor]
    model_config: dict
    train_config: dict = field(default_factory=dict)
    vocab: Vocab | None = None
    step: int = 0
    optimizer: dict | None = None  # torch optimizer state_dict
    extra: dict = field(default_factory=dict)  # data_scale, points_per_char, rng_state, ...


def _write_tensor(t: torch.Tensor, path: Path) -> dict:
    arr = t.detach().cpu().numpy()
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    path.write_bytes(np.ascontiguousarray(le).tobytes())
    return {"dtype": le.dtype.str, "shape": list(arr.shape)}


def _read_tensor(path: Path, dtype: str, shape) -> torch.Tensor:
    arr = np.frombuffer(path.read_bytes(), dtype=np.dtype(dtype)).reshape(shape)
    return torch.from_numpy(arr.astype(arr.dtype.newbyteorder("="), copy=True))


def save(ckpt: Checkpoint, directory: str | Path):
    directory = Path(directory)
    (directory / "tensors").mkdir(parents=True, exist_ok=True)
    entries = []

    def add(name, tensor, kind):
        fname = f"tensors/{len(entries):05d}.bin"
        info = _write_tensor(tensor, directory / fname)
        entries.append({"name": name, "kind": kind, "file": fname, **info})

    for name, t in ckpt.params.items():
        add(name, t, "param")
    groups = None
    if ckpt.optimizer is not None:
        for idx, st in ckpt.optimizer["state"].items():
            for key, val in st.items():
                add(f"{idx}.{key}", torch.as_tensor(val), "optim")
        groups = ckpt.optimizer["param_groups"]
    manifest = {
        "format": FORMAT,
        "step": ckpt.step,
        "model_config": ckpt.model_config,
        "train_config": ckpt.train_config,
        "vocab_sha256": ckpt.vocab.digest() if ckpt.vocab else None,
        "optimizer_param_groups": groups,
        "extra": ckpt.extra,
        "tensors": entries,
    }
    if ckpt.vocab is not None:
        ckpt.vocab.save(directory / "vocab.txt")
    tmp = directory / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=1, default=_jsonable), encoding="utf-8")
    tmp.replace(directory / "manifest.json")


def _jsonable(obj):
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def load(directory: str | Path) -> Checkpoint:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    if manifest.get("format") != FORMAT:
        raise ValueError(f"{directory}: unknown checkpoint format {manifest.get('format')!r}")
    params, state = {}, {}
    for e in manifest["tensors"]:
        t = _read_tensor(directory / e["file"], e["dtype"], e["shape"])
        if e["kind"] == "param":
            params[e["name"]] = t
        else:
            idx, key = e["name"].split(".", 1)
            state.setdefault(int(idx), {})[key] = t
    vocab = None
    if (directory / "vocab.txt").exists():
        vocab = Vocab.load(directory / "vocab.txt")
        if manifest["vocab_sha256"] and vocab.digest() != manifest["vocab_sha256"]:
            raise ValueError(f"{directory}: vocabulary hash mismatch")
    groups = manifest.get("optimizer_param_groups")
    optimizer = {"state": state, "param_groups": groups} if groups is not None else None
    return Checkpoint(
        params=params,
        model_config=manifest["model_config"],
        train_config=manifest["train_config"],
        vocab=vocab,
        step=manifest["step"],
        optimizer=optimizer,
        extra=manifest.get("extra", {}),
    )
