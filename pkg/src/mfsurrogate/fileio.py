"""Binary container used by every on-disk artifact.

Layout: one line of compact JSON (the header) terminated by ``\\n``, followed by
the raw little-endian array payloads concatenated in the order listed under
``header["arrays"]``.
"""
from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

_ALLOWED = {"<u1", "<f8", "<i8"}


def write_blob(path: str | Path, header: Mapping, arrays: Sequence[tuple[str, np.ndarray, str]]) -> None:
    """Write ``header`` plus named arrays.

    ``arrays`` holds ``(name, array, dtype)`` triples; ``dtype`` is one of
    ``<u1``, ``<f8``, ``<i8``. Arrays are written in C order of the given
    array, so callers pass them already flattened in the documented order.
    """
    head = dict(header)
    specs = []
    payloads = []
    for name, arr, dtype in arrays:
        if dtype not in _ALLOWED:
            raise ValueError(f"unsupported dtype {dtype!r}")
        a = np.ascontiguousarray(arr, dtype=np.dtype(dtype))
        specs.append({"name": name, "dtype": dtype, "shape": list(a.shape)})
        payloads.append(a.tobytes(order="C"))
    head["arrays"] = specs
    line = json.dumps(head, sort_keys=True, separators=(",", ":"))
    if "\n" in line:
        raise ValueError("header must serialize to a single line")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(b"\n")
        for p in payloads:
            fh.write(p)


def read_blob(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    data = Path(path).read_bytes()
    nl = data.index(b"\n")
    header = json.loads(data[:nl].decode("utf-8"))
    offset = nl + 1
    arrays = {}
    for spec in header["arrays"]:
        dt = np.dtype(spec["dtype"])
        count = int(np.prod(spec["shape"], dtype=np.int64))
        nbytes = count * dt.itemsize
        buf = data[offset : offset + nbytes]
        if len(buf) != nbytes:
            raise ValueError(f"{path}: truncated array {spec['name']!r}")
        arrays[spec["name"]] = np.frombuffer(buf, dtype=dt).reshape(spec["shape"]).copy()
        offset += nbytes
    if offset != len(data):
        raise ValueError(f"{path}: {len(data) - offset} trailing bytes")
    return header, arrays


def write_csv(path: str | Path, columns: Sequence[str], rows: Iterable[Sequence]) -> None:
    """CSV writer that formats floats with ``repr`` so values round-trip exactly."""
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for row in rows:
            w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])


def read_csv(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def write_json(path: str | Path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def file_digest(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
