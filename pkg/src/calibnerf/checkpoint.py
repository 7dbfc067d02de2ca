"""Single-file checkpoints.

Layout::

    b"CNRFCKPT" | u64 little-endian manifest length | UTF-8 JSON manifest | payload

The manifest records the configs, iteration, seed and, for every array,
its name, shape, dtype and byte offset/length into the payload.  Arrays are
stored as little-endian IEEE-754.  Adam moments are stored as arrays named
``optim/<param index>/<key>``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CNRFCKPT"
_DTYPES = {"float32": "<f4", "float64": "<f8", "int64": "<i8"}


class CheckpointError(ValueError):
    pass


def _pack(arrays: dict):
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        kind = str(a.dtype)
        if kind not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {kind}")
        raw = a.astype(_DTYPES[kind]).tobytes()
        entries.append({"name": name, "shape": list(a.shape), "dtype": kind, "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return entries, b"".join(chunks)


def save_checkpoint(path, state, configs: dict) -> None:
    """Write model parameters, optimizer moments and configs of a :class:`TrainState`."""
    arrays = {f"param/{k}": v.detach().cpu().numpy() for k, v in state.model.state_dict().items()}
    opt = state.optimizer.state_dict()
    for idx, st in opt["state"].items():
        for key, val in st.items():
            arrays[f"optim/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
    groups = [{k: v for k, v in g.items() if k != "params"} | {"params": list(g["params"])} for g in opt["param_groups"]]
    entries, payload = _pack(arrays)
    manifest = {
        "format": 1,
        "iteration": state.iteration,
        "configs": {k: (asdict(v) if hasattr(v, "__dataclass_fields__") else v) for k, v in configs.items()},
        "param_groups": groups,
        "arrays": entries,
    }
    head = json.dumps(manifest).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        fh.write(payload)


def read_checkpoint(path):
    """Return ``(manifest, arrays)`` with arrays as numpy in native byte order."""
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    (n,) = struct.unpack("<Q", raw[8:16])
    manifest = json.loads(raw[16 : 16 + n].decode("utf-8"))
    base = 16 + n
    arrays = {}
    for e in manifest["arrays"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        if len(buf) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated payload for {e['name']}")
        arr = np.frombuffer(buf, dtype=_DTYPES[e["dtype"]]).astype(e["dtype"]).reshape(e["shape"])
        arrays[e["name"]] = arr
    return manifest, arrays


def restore_state(state, manifest, arrays) -> None:
    """Load parameters, optimizer moments and iteration into an existing state."""
    params = {k[len("param/"):]: torch.from_numpy(v.copy()) for k, v in arrays.items() if k.startswith("param/")}
    missing = set(state.model.state_dict()) - set(params)
    if missing:
        raise CheckpointError(f"checkpoint lacks parameters: {sorted(missing)[:5]}")
    state.model.load_state_dict(params)
    opt_state = {}
    for k, v in arrays.items():
        if k.startswith("optim/"):
            _, idx, key = k.split("/", 2)
            opt_state.setdefault(int(idx), {})[key] = torch.from_numpy(v.copy())
    groups = manifest["param_groups"]
    state.optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
    state.iteration = int(manifest["iteration"])


def load_checkpoint(path, scenes=None):
    """Rebuild a :class:`TrainState` from ``path``; returns ``(state, configs)``."""
    from .config import RunConfig
    from .train import new_state

    manifest, arrays = read_checkpoint(path)
    cfg = RunConfig.from_dict(manifest["configs"])
    state = new_state(cfg.encoder, cfg.stack, cfg.train)
    restore_state(state, manifest, arrays)
    return state, cfg
