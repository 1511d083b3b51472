"""Checkpoint container: a versioned JSON header plus named float arrays.

Stored as an ``.npz`` archive.  The header (key ``__header__``) records the
format version, the originating config hash and any extra metadata such as the
physics template; every other entry is ``<store>/<param>`` with dtype and shape
carried by the array itself (row-major).
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .params import ParameterStore

FORMAT_VERSION = 1
HEADER_KEY = "__header__"


def save_checkpoint(path, stores: dict[str, ParameterStore], config_hash: str, meta: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": "metaimagine-checkpoint",
        "version": FORMAT_VERSION,
        "config_hash": config_hash,
        "stores": {k: s.names() for k, s in stores.items()},
        "meta": meta or {},
    }
    arrays = {HEADER_KEY: np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for key, store in stores.items():
        for name, arr in store.state_dict().items():
            arrays[f"{key}/{name}"] = np.ascontiguousarray(arr)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def read_checkpoint(path) -> tuple[dict, dict[str, dict[str, np.ndarray]]]:
    """Return ``(header, {store_key: {param_name: array}})``."""
    with np.load(Path(path)) as data:
        if HEADER_KEY not in data:
            raise ValueError(f"{path} is not a checkpoint (missing header)")
        header = json.loads(bytes(data[HEADER_KEY]).decode())
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        arrays: dict[str, dict[str, np.ndarray]] = {}
        for key in data.files:
            if key == HEADER_KEY:
                continue
            store, name = key.split("/", 1)
            arrays.setdefault(store, {})[name] = data[key]
    return header, arrays


def load_into(path, stores: dict[str, ParameterStore]) -> dict:
    header, arrays = read_checkpoint(path)
    for key, store in stores.items():
        store.load_state_dict(arrays[key])
    return header
