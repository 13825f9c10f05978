"""Checkpoint container: a ``.npz`` with one array per parameter plus JSON metadata."""

from __future__ import annotations

import io
import json
from pathlib import Path

import numpy as np

from ..numerics import Tensor

FORMAT = "seqrec-checkpoint"
VERSION = 1
_META_KEY = "__meta__"
_PREFIX = "param::"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, kind: str, config: dict, params: dict[str, Tensor],
                    extra: dict | None = None) -> Path:
    meta = {"format": FORMAT, "version": VERSION, "kind": kind, "config": config, "extra": extra or {}}
    arrays = {_PREFIX + name: t.data for name, t in sorted(params.items())}
    arrays[_META_KEY] = np.array(json.dumps(meta, sort_keys=True))
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path: str | Path, expect_kind: str | None = None) -> tuple[dict, dict[str, Tensor]]:
    """Returns ``(meta, params)``; raises CheckpointError on anything unreadable."""
    try:
        with np.load(path, allow_pickle=False) as z:
            if _META_KEY not in z.files:
                raise CheckpointError(f"{path}: missing metadata")
            meta = json.loads(str(z[_META_KEY]))
            params = {k[len(_PREFIX):]: Tensor(z[k].copy(), requires_grad=True, name=k[len(_PREFIX):])
                      for k in z.files if k.startswith(_PREFIX)}
    except CheckpointError:
        raise
    except Exception as exc:  # zip, json and numpy errors all mean a corrupt file
        raise CheckpointError(f"{path}: unreadable checkpoint ({exc})") from exc
    if meta.get("format") != FORMAT or meta.get("version") != VERSION:
        raise CheckpointError(f"{path}: not a {FORMAT} v{VERSION} file")
    if expect_kind is not None and meta.get("kind") != expect_kind:
        raise CheckpointError(f"{path}: expected a {expect_kind} checkpoint, found {meta.get('kind')!r}")
    for name, t in params.items():
        if not np.all(np.isfinite(t.data)):
            raise CheckpointError(f"{path}: parameter {name} holds non-finite values")
    return meta, params
