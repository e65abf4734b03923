"""Named parameter collections and their on-disk format.

A ParamSet maps parameter paths to float64 arrays and always iterates in
lexicographic path order, so every consumer (optimizer, serializer, hashing)
sees the same deterministic ordering.

Serialized form: a text manifest with one `path dtype dims` line per
parameter, plus a single little-endian binary blob of the float32-cast
values concatenated in manifest order. Loading upcasts back to float64, so
save -> load -> save is byte-stable.
"""

from __future__ import annotations

import io
from typing import Iterator, Mapping

import numpy as np

from .tape import Tape, TensorNode, as_tensor

MANIFEST_NAME = "params.manifest"
BLOB_NAME = "params.bin"


class ParamSet(Mapping):
    """Immutable-by-convention mapping of parameter path -> float64 array."""

    def __init__(self, entries: Mapping[str, np.ndarray]):
        items = {}
        for path, value in entries.items():
            if path in items:
                raise ValueError(f"duplicate parameter path {path!r}")
            items[path] = as_tensor(value)
        self._items = {k: items[k] for k in sorted(items)}

    def __getitem__(self, path: str) -> np.ndarray:
        return self._items[path]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self._items.items()})

    def replace(self, updates: Mapping[str, np.ndarray]) -> "ParamSet":
        """New ParamSet with some paths replaced; unknown paths rejected."""
        for path in updates:
            if path not in self._items:
                raise KeyError(f"unknown parameter path {path!r}")
        merged = dict(self._items)
        merged.update(updates)
        return ParamSet(merged)


def param_nodes(tape: Tape, params: ParamSet) -> dict[str, TensorNode]:
    """Record every parameter as a differentiable leaf, in path order."""
    return {path: tape.leaf(value, needs_grad=True) for path, value in params.items()}


def dump_params(params: ParamSet) -> tuple[str, bytes]:
    """Serialize to (manifest text, little-endian float32 blob)."""
    lines = []
    buf = io.BytesIO()
    for path, value in params.items():
        dims = ",".join(str(d) for d in value.shape)
        lines.append(f"{path} float32 {dims}")
        buf.write(np.ascontiguousarray(value, dtype="<f4").tobytes())
    return "".join(line + "\n" for line in lines), buf.getvalue()


def parse_params(manifest: str, blob: bytes) -> ParamSet:
    """Inverse of dump_params; values come back as float64."""
    entries = {}
    offset = 0
    for lineno, raw in enumerate(manifest.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 3):
            raise ValueError(f"manifest line {lineno}: malformed entry {raw!r}")
        path, dtype = parts[0], parts[1]
        if dtype != "float32":
            raise ValueError(f"manifest line {lineno}: unsupported dtype {dtype!r}")
        dims = tuple(int(d) for d in parts[2].split(",")) if len(parts) == 3 else ()
        count = int(np.prod(dims, dtype=np.int64)) if dims else 1
        nbytes = count * 4
        chunk = blob[offset : offset + nbytes]
        if len(chunk) != nbytes:
            raise ValueError(f"blob truncated at parameter {path!r}")
        offset += nbytes
        entries[path] = np.frombuffer(chunk, dtype="<f4").reshape(dims).astype(np.float64)
    if offset != len(blob):
        raise ValueError(f"blob has {len(blob) - offset} trailing bytes")
    return ParamSet(entries)


def save_params(params: ParamSet, directory) -> None:
    from pathlib import Path

    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    manifest, blob = dump_params(params)
    (d / MANIFEST_NAME).write_text(manifest, encoding="utf-8")
    (d / BLOB_NAME).write_bytes(blob)


def load_params(directory) -> ParamSet:
    from pathlib import Path

    d = Path(directory)
    manifest = (d / MANIFEST_NAME).read_text(encoding="utf-8")
    blob = (d / BLOB_NAME).read_bytes()
    return parse_params(manifest, blob)
