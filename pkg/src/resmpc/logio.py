"""Binary trajectory logs and their CSV export.

Layout (little-endian)::

    8 bytes   magic  b"RMPCLOG\\0"
    u16       format version
    u16       reserved (0)
    u32       header length in bytes
    header    UTF-8 JSON: {"fields": [[name, width], ...], "meta": {...}}
    records   float64 rows of sum(widths) values each

A file cut short mid-record is read up to the last complete record.
"""
from __future__ import annotations

import csv
import json
import struct
from dataclasses import dataclass

import numpy as np

from .sim import REWARD_TERMS

MAGIC = b"RMPCLOG\0"
VERSION = 1
_PREFIX = struct.Struct("<8sHHI")

DEFAULT_FIELDS = (
    ("time", 1), ("env", 1), ("q", 9), ("qd", 9), ("tau_mpc", 6), ("tau_res", 6),
    ("F_contact", 8), ("phase", 4), ("cmd", 2),
    ("rewards", len(REWARD_TERMS) + 1),
    ("flags", 3),  # terminated, self-collision, MPC failed
)


class LogFormatError(ValueError):
    pass


class TrajectoryWriter:
    def __init__(self, path, fields=DEFAULT_FIELDS, meta=None):
        self.fields = tuple((str(n), int(w)) for n, w in fields)
        if len({n for n, _ in self.fields}) != len(self.fields):
            raise ValueError("duplicate field names")
        self.width = sum(w for _, w in self.fields)
        self._offsets = {}
        off = 0
        for n, w in self.fields:
            self._offsets[n] = (off, w)
            off += w
        header = json.dumps({"fields": self.fields, "meta": meta or {}}, sort_keys=True).encode()
        self._fh = open(path, "wb")
        self._fh.write(_PREFIX.pack(MAGIC, VERSION, 0, len(header)))
        self._fh.write(header)
        self.count = 0

    def write(self, **values):
        """One record; fields left out are written as NaN."""
        row = np.full(self.width, np.nan)
        for name, val in values.items():
            try:
                off, w = self._offsets[name]
            except KeyError:
                raise KeyError(f"unknown log field {name!r}") from None
            row[off:off + w] = np.asarray(val, dtype=float).ravel()
        self._fh.write(row.astype("<f8").tobytes())
        self.count += 1

    def write_rows(self, rows):
        rows = np.asarray(rows, dtype="<f8")
        if rows.ndim != 2 or rows.shape[1] != self.width:
            raise ValueError(f"rows must have {self.width} columns")
        self._fh.write(rows.tobytes())
        self.count += len(rows)

    def close(self):
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


@dataclass
class TrajectoryLog:
    fields: tuple
    meta: dict
    data: np.ndarray  # (records, width)

    def __len__(self):
        return len(self.data)

    def __getitem__(self, name):
        off = 0
        for n, w in self.fields:
            if n == name:
                return self.data[:, off:off + w]
            off += w
        raise KeyError(name)

    def column_names(self):
        out = []
        for n, w in self.fields:
            out += [n] if w == 1 else [f"{n}_{i}" for i in range(w)]
        return out


def read_log(path) -> TrajectoryLog:
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _PREFIX.size:
        raise LogFormatError("file too short for a log header")
    magic, version, _, hlen = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise LogFormatError("not a trajectory log (bad magic)")
    if version != VERSION:
        raise LogFormatError(f"unsupported log version {version}")
    try:
        header = json.loads(raw[_PREFIX.size:_PREFIX.size + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise LogFormatError("corrupt log header") from exc
    fields = tuple((n, int(w)) for n, w in header["fields"])
    width = sum(w for _, w in fields)
    body = raw[_PREFIX.size + hlen:]
    n = len(body) // (8 * width) if width else 0
    data = np.frombuffer(body[:n * 8 * width], dtype="<f8").reshape(n, width).astype(float)
    return TrajectoryLog(fields, header.get("meta", {}), data)


def export_csv(log: TrajectoryLog, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(log.column_names())
        for row in log.data:
            w.writerow([repr(float(v)) for v in row])
