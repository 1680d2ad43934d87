"""Stable on-disk formats: metrics CSV, embeddings CSV, run manifest, model file.

Metrics CSV columns: ``iter,split,base_loss,incay_loss,total_loss,accuracy,mean_feature_norm``.
Embeddings CSV columns: ``iter,index,label,f0,f1,norm``.
Reals are written with 6 significant digits, LF line endings.

The model file is little-endian::

    b"INCAYMDL" | u32 version | u32 meta_len | meta (UTF-8 key=value lines)
    u32 tensor_count, then per tensor:
    u32 name_len | name | u32 ndim | u32 dims[ndim] | float64 data
"""

from __future__ import annotations

import math
import struct
from typing import Iterable, TextIO

import numpy as np

from .numerics import l2_norm
from .trainer import MetricsRecord

METRICS_HEADER = "iter,split,base_loss,incay_loss,total_loss,accuracy,mean_feature_norm"
EMBEDDINGS_HEADER = "iter,index,label,f0,f1,norm"
MODEL_MAGIC = b"INCAYMDL"
MODEL_VERSION = 1


def fmt(x: float) -> str:
    return f"{x:.6g}"


def metrics_row(r: MetricsRecord) -> str:
    return ",".join([str(r.iter), r.split] + [fmt(v) for v in (
        r.base_loss, r.incay_loss, r.total_loss, r.accuracy, r.mean_feature_norm)])


class MetricsWriter:
    """Streams metrics rows to ``path``, flushing after each one."""

    def __init__(self, path):
        self._fh: TextIO = open(path, "w", newline="\n", encoding="utf-8")
        self._fh.write(METRICS_HEADER + "\n")
        self._fh.flush()

    def write(self, record: MetricsRecord) -> None:
        self._fh.write(metrics_row(record) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def emit_metrics_csv(records: Iterable[MetricsRecord], path) -> None:
    with MetricsWriter(path) as w:
        for r in records:
            w.write(r)


def read_metrics_csv(path) -> list:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\n")
        if header != METRICS_HEADER:
            raise ValueError(f"unexpected metrics header {header!r}")
        out = []
        for line in fh:
            it, split, *vals = line.rstrip("\n").split(",")
            out.append(MetricsRecord(int(it), split, *(float(v) for v in vals)))
    return out


def emit_embeddings(features, labels, iteration: int, path, append: bool = False) -> None:
    """Write 2-D features as CSV rows; with ``append`` the header is skipped."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != 2:
        dim = features.shape[1] if features.ndim == 2 else features.shape
        raise ValueError(f"embeddings need 2-D features, got dimension {dim}")
    labels = np.asarray(labels)
    with open(path, "a" if append else "w", newline="\n", encoding="utf-8") as fh:
        if not append:
            fh.write(EMBEDDINGS_HEADER + "\n")
        for i, (f, lab) in enumerate(zip(features, labels)):
            fh.write(f"{iteration},{i},{int(lab)},{fmt(f[0])},{fmt(f[1])},{fmt(l2_norm(f))}\n")


# --------------------------------------------------------------------------
# manifest


def write_manifest(entries: dict, path) -> None:
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        for key, value in entries.items():
            if "\n" in str(value) or "=" in key:
                raise ValueError(f"manifest entry {key!r} cannot be stored on one line")
            fh.write(f"{key}={value}\n")


def read_manifest(path) -> dict:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.rstrip("\n")
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"malformed manifest line {line!r}")
            out[key] = value
    return out


# --------------------------------------------------------------------------
# model file


def save_model(path, tensors: dict, meta: dict) -> None:
    meta_blob = "".join(f"{k}={v}\n" for k, v in meta.items()).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<II", MODEL_VERSION, len(meta_blob)))
        fh.write(meta_blob)
        fh.write(struct.pack("<I", len(tensors)))
        for name, t in tensors.items():
            t = np.ascontiguousarray(t, dtype="<f8")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw)
            fh.write(struct.pack(f"<I{t.ndim}I", t.ndim, *t.shape))
            fh.write(t.tobytes())


def load_model(path):
    """Return ``(tensors, meta)`` from a model file."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != MODEL_MAGIC:
        raise ValueError(f"{path}: not a model file")
    pos = 8

    def take(fmt_: str):
        nonlocal pos
        size = struct.calcsize(fmt_)
        if pos + size > len(raw):
            raise ValueError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt_, raw, pos)
        pos += size
        return vals

    version, meta_len = take("<II")
    if version != MODEL_VERSION:
        raise ValueError(f"{path}: unsupported model version {version}")
    meta = {}
    for line in raw[pos:pos + meta_len].decode("utf-8").splitlines():
        k, _, v = line.partition("=")
        meta[k] = v
    pos += meta_len
    (count,) = take("<I")
    tensors = {}
    for _ in range(count):
        (name_len,) = take("<I")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I")
        n = math.prod(shape)
        if pos + 8 * n > len(raw):
            raise ValueError(f"{path}: truncated tensor {name!r}")
        tensors[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * n
    return tensors, meta
