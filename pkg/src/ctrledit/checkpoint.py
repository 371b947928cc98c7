"""Named float32 array archives.

An archive is a zip file holding one ``<name>.npy`` member per array
(little-endian ``<f4``, shape in the npy header) and a ``__meta__.json``
member. Member timestamps are pinned so identical contents give identical
bytes.
"""

from __future__ import annotations

import io
import json
import os
import tempfile
import zipfile
from pathlib import Path
from typing import Mapping

import numpy as np

META_MEMBER = "__meta__.json"
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    return info


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o644)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def archive_bytes(arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> bytes:
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        for name in sorted(arrays):
            if name == META_MEMBER[:-5]:
                raise ValueError(f"reserved array name {name!r}")
            arr = np.ascontiguousarray(np.asarray(arrays[name], dtype="<f4"))
            member = io.BytesIO()
            np.lib.format.write_array(member, arr, allow_pickle=False)
            zf.writestr(_member(f"{name}.npy"), member.getvalue())
        zf.writestr(_member(META_MEMBER), json.dumps(dict(meta or {}), sort_keys=True, indent=1))
    return buf.getvalue()


def save_archive(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping | None = None) -> None:
    atomic_write_bytes(path, archive_bytes(arrays, meta))


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    meta: dict = {}
    with zipfile.ZipFile(path) as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == META_MEMBER:
                meta = json.loads(data)
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return arrays, meta
