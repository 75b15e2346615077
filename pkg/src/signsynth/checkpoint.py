"""Checkpoints as flat ``.npz`` archives of named parameter arrays.

Every archive carries a ``__meta__`` JSON entry with the config hash and any
extra scalars (e.g. the progressive stage of the styled generator).
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Mapping

import numpy as np
import torch.nn as nn

META_KEY = "__meta__"


def save_checkpoint(path: str | Path, modules: Mapping[str, nn.Module], config_hash: str = "",
                    extra: Mapping[str, Any] | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    for prefix, module in modules.items():
        for name, tensor in module.state_dict().items():
            arrays[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    meta = {"config_hash": config_hash, **(extra or {})}
    arrays[META_KEY] = np.frombuffer(json.dumps(meta, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path: str | Path, modules: Mapping[str, nn.Module]) -> dict[str, Any]:
    """Load parameters into ``modules`` in place; returns the metadata dict."""
    import torch

    with np.load(path) as data:
        meta = json.loads(bytes(data[META_KEY]).decode("utf-8"))
        for prefix, module in modules.items():
            state = {}
            for name in module.state_dict():
                key = f"{prefix}/{name}"
                if key not in data.files:
                    raise KeyError(f"checkpoint {path} lacks {key}")
                state[name] = torch.from_numpy(np.array(data[key]))
            module.load_state_dict(state)
    return meta
