"""On-disk formats for embeddings, matrices and encoder parameters.

EMB1 binary layout (little-endian)::

    b"EMB1" | u32 n | u32 d | u32 has_labels | f32[n*d] row-major | u32[n] labels?

CSV layout: header ``label,e0,...,e{d-1}`` (the label column may be
absent), one row per embedding.

ENC1 binary layout for a linear encoder (little-endian)::

    b"ENC1" | u32 d_in | u32 d_out | f64[d_in*d_out] weight | f64[d_out] bias
"""

from __future__ import annotations

import csv
import io
import json
import struct
from pathlib import Path

import numpy as np

from .episodes import LabeledEmbeddingSet
from .errors import FormatError

EMB_MAGIC = b"EMB1"
ENC_MAGIC = b"ENC1"
_HEADER = struct.Struct("<4sIII")
_ENC_HEADER = struct.Struct("<4sII")


def encode_embeddings(data: LabeledEmbeddingSet) -> bytes:
    n, d = data.embeddings.shape
    flag = 1 if data.labeled else 0
    parts = [_HEADER.pack(EMB_MAGIC, n, d, flag), data.embeddings.astype("<f4").tobytes()]
    if flag:
        if np.any(data.labels > np.iinfo(np.uint32).max):
            raise ValueError("labels do not fit in 32 bits")
        parts.append(data.labels.astype("<u4").tobytes())
    return b"".join(parts)


def decode_embeddings(blob: bytes) -> LabeledEmbeddingSet:
    """Parse an EMB1 blob.  Every inconsistency is a :class:`FormatError`."""
    if len(blob) < 4:
        raise FormatError("file too short for magic bytes", len(blob))
    if blob[:4] != EMB_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {EMB_MAGIC!r}", 0)
    if len(blob) < _HEADER.size:
        raise FormatError("truncated header", len(blob))
    _, n, d, flag = _HEADER.unpack_from(blob)
    if flag not in (0, 1):
        raise FormatError(f"label flag must be 0 or 1, got {flag}", 12)
    if d == 0 and n > 0:
        raise FormatError("zero dimension with nonzero row count", 8)
    payload_end = _HEADER.size + 4 * n * d
    expected = payload_end + (4 * n if flag else 0)
    if len(blob) < payload_end:
        raise FormatError(f"truncated payload: header declares {n}x{d}", len(blob))
    if len(blob) < expected:
        raise FormatError(f"truncated label block: expected {n} labels", len(blob))
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} trailing bytes after declared content", expected)
    x = np.frombuffer(blob, dtype="<f4", count=n * d, offset=_HEADER.size).reshape(n, d)
    labels = None
    if flag:
        labels = np.frombuffer(blob, dtype="<u4", count=n, offset=payload_end).astype(np.int64)
    return LabeledEmbeddingSet(x.astype(np.float64), labels)


def _csv_text(data: LabeledEmbeddingSet) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    d = data.dim
    cols = [f"e{j}" for j in range(d)]
    w.writerow((["label"] if data.labeled else []) + cols)
    x = data.embeddings.astype(np.float32)
    for i in range(len(data)):
        vals = [repr(float(v)) for v in x[i]]
        w.writerow(([str(int(data.labels[i]))] if data.labeled else []) + vals)
    return buf.getvalue()


def _parse_csv(text: str) -> LabeledEmbeddingSet:
    lines = text.splitlines(keepends=True)
    if not lines:
        raise FormatError("empty CSV", 0)
    header = [h.strip() for h in next(csv.reader([lines[0]]))]
    labeled = bool(header) and header[0] == "label"
    cols = header[1:] if labeled else header
    if not cols or cols != [f"e{j}" for j in range(len(cols))]:
        raise FormatError("header must be 'label,e0,...,e{d-1}' or 'e0,...,e{d-1}'", 0)
    offset = len(lines[0].encode())
    emb, labels = [], []
    for line_no, line in enumerate(lines[1:], start=2):
        row = next(csv.reader([line]), [])
        if row:
            if len(row) != len(header):
                raise FormatError(f"line {line_no} has {len(row)} fields, header implies {len(header)}", offset)
            try:
                if labeled:
                    labels.append(int(row[0]))
                    row = row[1:]
                emb.append([float(v) for v in row])
            except ValueError as e:
                raise FormatError(f"line {line_no}: {e}", offset) from e
        offset += len(line.encode())
    x = np.asarray(emb, dtype=np.float64).reshape(len(emb), len(cols))
    return LabeledEmbeddingSet(x, np.asarray(labels, dtype=np.int64) if labeled else None)


def _is_csv(path: Path) -> bool:
    return path.suffix.lower() in (".csv", ".txt")


def write_embeddings(data: LabeledEmbeddingSet, path) -> None:
    path = Path(path)
    if _is_csv(path):
        path.write_text(_csv_text(data))
    else:
        path.write_bytes(encode_embeddings(data))


def read_embeddings(path) -> LabeledEmbeddingSet:
    """Read EMB1 or CSV, chosen by magic bytes (CSV otherwise)."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == EMB_MAGIC or not _is_csv(path):
        return decode_embeddings(blob)
    try:
        text = blob.decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("CSV file is not valid UTF-8", e.start) from e
    return _parse_csv(text)


def read_matrix(path) -> np.ndarray:
    """Numeric array from JSON (nested lists), EMB1 or whitespace/comma text."""
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] == EMB_MAGIC:
        return decode_embeddings(blob).embeddings
    text = blob.decode("utf-8", errors="replace").strip()
    if text.startswith("[") or path.suffix.lower() == ".json":
        try:
            return np.asarray(json.loads(text), dtype=np.float64)
        except (json.JSONDecodeError, ValueError) as e:
            raise FormatError(f"invalid JSON matrix: {e}", getattr(e, "pos", 0)) from e
    rows = []
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            try:
                rows.append([float(v) for v in line.replace(",", " ").split()])
            except ValueError as e:
                raise FormatError(f"non-numeric entry: {e}", 0) from e
    if len({len(r) for r in rows}) > 1:
        raise FormatError("ragged matrix rows", 0)
    out = np.asarray(rows, dtype=np.float64)
    return out.ravel() if out.ndim == 2 and out.shape[0] == 1 else out


def encode_encoder(weight, bias) -> bytes:
    weight = np.asarray(weight, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64).ravel()
    d_in, d_out = weight.shape
    if bias.shape != (d_out,):
        raise ValueError("bias length must equal the output dimension")
    return _ENC_HEADER.pack(ENC_MAGIC, d_in, d_out) + weight.astype("<f8").tobytes() + bias.astype("<f8").tobytes()


def decode_encoder(blob: bytes):
    """``(weight, bias)`` from an ENC1 blob."""
    if len(blob) < 4 or blob[:4] != ENC_MAGIC:
        raise FormatError(f"bad magic {blob[:4]!r}, expected {ENC_MAGIC!r}", 0)
    if len(blob) < _ENC_HEADER.size:
        raise FormatError("truncated header", len(blob))
    _, d_in, d_out = _ENC_HEADER.unpack_from(blob)
    expected = _ENC_HEADER.size + 8 * (d_in * d_out + d_out)
    if len(blob) != expected:
        raise FormatError(f"expected {expected} bytes for a {d_in}x{d_out} encoder", min(len(blob), expected))
    w = np.frombuffer(blob, dtype="<f8", count=d_in * d_out, offset=_ENC_HEADER.size).reshape(d_in, d_out)
    b = np.frombuffer(blob, dtype="<f8", count=d_out, offset=_ENC_HEADER.size + 8 * d_in * d_out)
    return w.copy(), b.copy()
