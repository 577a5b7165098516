"""Shared on-disk tensor conventions: float32 little-endian blobs plus JSON sidecars.

Every persistent artifact in this package (datasets, checkpoints, embedding
tables) is a pair of files: a raw blob of concatenated float32 little-endian
row-major tensors, and a JSON sidecar describing offsets and shapes. JSON is
always written with sorted keys and a trailing newline so identical content
gives identical bytes.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

FORMAT_VERSION = 1

# Canonical on-disk scalar type. Offsets count float32 elements, not bytes.
_DTYPE = np.dtype("<f4")


class FormatError(ValueError):
    """Raised when a blob or sidecar violates the on-disk contract."""


def dump_json(path: str | Path, obj: Any) -> None:
    """Write JSON deterministically: sorted keys, fixed separators, newline."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ": "), indent=1)
    Path(path).write_text(text + "\n", encoding="utf-8")


def json_line(obj: Any) -> str:
    """One deterministic newline-terminated JSON record (for .ndjson logs)."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def load_json(path: str | Path) -> Any:
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"corrupt JSON sidecar {path}: {exc}") from exc


def write_blob(path: str | Path, arrays: Iterable[np.ndarray]) -> list[dict[str, Any]]:
    """Concatenate arrays into a float32 LE blob; return per-array entries.

    Each entry is {"offset": int, "shape": [..]} with the offset in float32
    elements from the start of the file.
    """
    entries: list[dict[str, Any]] = []
    offset = 0
    with open(path, "wb") as fh:
        for arr in arrays:
            a = np.ascontiguousarray(arr, dtype=_DTYPE)
            fh.write(a.tobytes(order="C"))
            entries.append({"offset": offset, "shape": list(a.shape)})
            offset += int(a.size)
    return entries


def read_blob(path: str | Path, entries: Sequence[dict[str, Any]]) -> list[np.ndarray]:
    """Read arrays back from a blob according to sidecar entries.

    Validates that the declared shapes exactly tile the file; a trailing or
    missing float is a shape-mismatch error, not silent truncation.
    """
    raw = np.fromfile(path, dtype=_DTYPE)
    out = []
    total = 0
    for ent in entries:
        shape = tuple(int(s) for s in ent["shape"])
        size = int(np.prod(shape)) if shape else 1
        offset = int(ent["offset"])
        if offset + size > raw.size:
            raise FormatError(
                f"blob {path} too short: entry needs [{offset}, {offset + size}) "
                f"but file holds {raw.size} floats"
            )
        out.append(raw[offset : offset + size].reshape(shape).copy())
        total = max(total, offset + size)
    if total != raw.size:
        raise FormatError(
            f"blob {path} has {raw.size} floats but sidecar accounts for {total}"
        )
    return out


def write_named_blob(
    dir_path: str | Path,
    arrays: dict[str, np.ndarray],
    header_extra: dict[str, Any],
    blob_name: str = "weights.bin",
    header_name: str = "checkpoint.json",
) -> None:
    """Write named tensors plus a JSON header listing their order.

    The header records the tensor order explicitly ("tensors" array) so the
    blob layout never depends on dict iteration details of the reader.
    """
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    names = list(arrays.keys())
    entries = write_blob(dir_path / blob_name, (arrays[n] for n in names))
    for name, ent in zip(names, entries):
        ent["name"] = name
    header = dict(header_extra)
    header["format_version"] = FORMAT_VERSION
    header["tensors"] = entries
    dump_json(dir_path / header_name, header)


def read_named_blob(
    dir_path: str | Path,
    blob_name: str = "weights.bin",
    header_name: str = "checkpoint.json",
) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    """Inverse of write_named_blob: returns (tensors by name, full header)."""
    dir_path = Path(dir_path)
    header = load_json(dir_path / header_name)
    if not isinstance(header, dict) or "tensors" not in header:
        raise FormatError(f"{dir_path / header_name}: missing 'tensors' entry")
    version = header.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unknown format version {version!r} (expected {FORMAT_VERSION})")
    entries = header["tensors"]
    arrays = read_blob(dir_path / blob_name, entries)
    named = {}
    for ent, arr in zip(entries, arrays):
        name = ent.get("name")
        if not isinstance(name, str) or name in named:
            raise FormatError(f"bad or duplicate tensor name {name!r}")
        named[name] = arr
    return named, header
