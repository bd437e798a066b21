"""Single-file parameter archives.

An ``.npz`` archive holding ``param/<name>`` arrays, optional
``optim/<name>`` momentum buffers and a JSON manifest (config hash,
iteration, RNG states). Writes go to a temp file that is renamed into place.
"""

from __future__ import annotations

import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MANIFEST_KEY = "__manifest__"


class CheckpointMismatchError(ValueError):
    pass


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    manifest: dict
    optim: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def iteration(self) -> int:
        return int(self.manifest.get("iteration", 0))

    @property
    def config_hash(self) -> str:
        return self.manifest["config_hash"]


def save_checkpoint(path: str | Path, params: dict[str, np.ndarray], manifest: dict,
                    optim: dict[str, np.ndarray] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"param/{k}": np.asarray(v) for k, v in params.items()}
    arrays.update({f"optim/{k}": np.asarray(v) for k, v in (optim or {}).items()})
    arrays[MANIFEST_KEY] = np.frombuffer(json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".npz")
    try:
        with os.fdopen(fd, "wb") as fh:
            np.savez(fh, **arrays)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def load_checkpoint(path: str | Path, expected_hash: str | None = None) -> Checkpoint:
    with np.load(path, allow_pickle=False) as data:
        manifest = json.loads(bytes(data[MANIFEST_KEY]).decode())
        if expected_hash is not None and manifest.get("config_hash") != expected_hash:
            raise CheckpointMismatchError(
                f"checkpoint {path} was written for config {manifest.get('config_hash')}, "
                f"current config is {expected_hash}")
        params = {k[6:]: data[k] for k in data.files if k.startswith("param/")}
        optim = {k[6:]: data[k] for k in data.files if k.startswith("optim/")}
    return Checkpoint(params, manifest, optim)


def latest_checkpoint(directory: str | Path) -> Path | None:
    files = sorted(Path(directory).glob("ckpt_*.npz"))
    return files[-1] if files else None
