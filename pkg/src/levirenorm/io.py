"""Binary array dumps with a plain-text header, CSV tables and content hashes.

A dump starts with ``key=value`` lines (values JSON-encoded) terminated by
a line ``END``; the payload that follows is little-endian float64 in C
order with the shape recorded under ``shape``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

MAGIC = "levirenorm-array 1"


def write_array(path, values, header: dict | None = None) -> None:
    values = np.ascontiguousarray(values, dtype="<f8")
    head = dict(header or {})
    head["shape"] = list(values.shape)
    lines = [MAGIC] + [f"{k}={json.dumps(v, sort_keys=True)}" for k, v in head.items()] + ["END"]
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        fh.write(values.tobytes())


def read_array(path):
    """Return ``(values, header)``."""
    with open(path, "rb") as fh:
        first = fh.readline().decode().rstrip("\n")
        if first != MAGIC:
            raise ValueError(f"{path}: not a levirenorm array dump")
        header = {}
        for raw in fh:
            line = raw.decode().rstrip("\n")
            if line == "END":
                break
            key, _, val = line.partition("=")
            header[key] = json.loads(val)
        else:
            raise ValueError(f"{path}: header not terminated")
        payload = fh.read()
    values = np.frombuffer(payload, dtype="<f8").reshape(header["shape"]).copy()
    return values, header


def write_csv(path, rows: list[dict], columns: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = columns or (list(rows[0]) if rows else [])
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns)
        w.writeheader()
        for r in rows:
            w.writerow({k: _fmt(r.get(k, "")) for k in columns})


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    if isinstance(v, np.bool_):
        return bool(v)
    return v


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def file_hash(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def text_hash(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()
