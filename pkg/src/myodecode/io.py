"""On-disk formats.

Matrix files (``MDM1``)
    Binary: ``<4s`` magic, ``<Q`` rows, ``<Q`` cols, ``<d`` sample rate (NaN when
    absent), then ``rows*cols`` little-endian float64 in row-major order.
    CSV: a header line ``MDM1,rows,cols,sample_rate`` then one line per row.

Spike files (``MSP1``)
    Binary: ``<4s`` magic, ``<I`` channel count, ``<d`` sample rate, ``<q``
    recording length in samples (-1 if unknown), ``<Q`` record count, then
    ``(<u4 channel, <i8 sample)`` records sorted by channel then sample.
    CSV: ``MSP1,channel_count,sample_rate,n_samples`` then ``channel,sample`` and
    one record per line.

Binary and CSV variants share the magic. On read a file is taken as binary when
its header-declared size matches the file length, otherwise as CSV. Every real
is written so that write -> read -> write reproduces the same bytes.
"""

from __future__ import annotations

import csv
import json
import math
import struct
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

from .decode import ProjectionModel
from .errors import FormatError
from .sim import SpikeTrainSet

MATRIX_MAGIC = b"MDM1"
SPIKE_MAGIC = b"MSP1"
_MATRIX_HEADER = struct.Struct("<4sQQd")
_SPIKE_HEADER = struct.Struct("<4sIdqQ")
_RECORD = np.dtype([("channel", "<u4"), ("sample", "<i8")])

EXTENSIONS = {"bin": {"matrix": ".mdm", "spikes": ".msp"}, "csv": {"matrix": ".csv", "spikes": ".csv"}}


def _fmt(x: float) -> str:
    return repr(float(x))


def write_matrix(path: str | Path, matrix: np.ndarray, sample_rate: float | None = None,
                 fmt: str = "bin") -> Path:
    path = Path(path)
    m = np.ascontiguousarray(np.atleast_2d(np.asarray(matrix, dtype="<f8")))
    rows, cols = m.shape
    if fmt == "bin":
        rate = float("nan") if sample_rate is None else float(sample_rate)
        with path.open("wb") as fh:
            fh.write(_MATRIX_HEADER.pack(MATRIX_MAGIC, rows, cols, rate))
            fh.write(m.tobytes(order="C"))
    elif fmt == "csv":
        rate = "" if sample_rate is None else _fmt(sample_rate)
        with path.open("w", newline="") as fh:
            fh.write(f"MDM1,{rows},{cols},{rate}\n")
            for row in m:
                fh.write(",".join(map(_fmt, row.tolist())) + "\n")
    else:
        raise FormatError(f"unknown format {fmt!r}")
    return path


def read_matrix(path: str | Path) -> tuple[np.ndarray, float | None]:
    """Return ``(matrix, sample_rate)``; the rate is ``None`` when the file has none."""
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if raw[:4] != MATRIX_MAGIC:
        raise FormatError(f"{path}: not a matrix file (bad magic)")
    if len(raw) >= _MATRIX_HEADER.size:
        _, rows, cols, rate = _MATRIX_HEADER.unpack_from(raw)
        payload = raw[_MATRIX_HEADER.size:]
        if len(payload) == rows * cols * 8:
            m = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(float)
            return m, None if math.isnan(rate) else rate
    if raw[4:5] == b",":
        return _read_matrix_csv(path, raw)
    raise FormatError(f"{path}: binary payload size does not match the header")


def _read_matrix_csv(path: Path, raw: bytes) -> tuple[np.ndarray, float | None]:
    try:
        lines = raw.decode("ascii").splitlines()
    except UnicodeDecodeError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    head = lines[0].split(",")
    if len(head) != 4:
        raise FormatError(f"{path}: malformed header {lines[0]!r}")
    try:
        rows, cols = int(head[1]), int(head[2])
        rate = float(head[3]) if head[3] else None
        body = [[float(v) for v in line.split(",")] for line in lines[1:] if line]
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if len(body) != rows or any(len(r) != cols for r in body):
        raise FormatError(f"{path}: header says {rows}x{cols}, body disagrees")
    m = np.array(body, dtype=float).reshape(rows, cols)
    return m, rate


def _records(spikes: SpikeTrainSet) -> np.ndarray:
    parts = []
    for c, train in enumerate(spikes.trains):
        rec = np.empty(train.size, dtype=_RECORD)
        rec["channel"] = c
        rec["sample"] = train
        parts.append(rec)
    return np.concatenate(parts) if parts else np.empty(0, dtype=_RECORD)


def write_spikes(path: str | Path, spikes: SpikeTrainSet, fmt: str = "bin") -> Path:
    path = Path(path)
    rec = _records(spikes)
    n_samples = -1 if spikes.n_samples is None else int(spikes.n_samples)
    if fmt == "bin":
        with path.open("wb") as fh:
            fh.write(_SPIKE_HEADER.pack(SPIKE_MAGIC, len(spikes), float(spikes.sample_rate), n_samples, rec.size))
            fh.write(rec.tobytes())
    elif fmt == "csv":
        with path.open("w", newline="") as fh:
            fh.write(f"MSP1,{len(spikes)},{_fmt(spikes.sample_rate)},{n_samples}\n")
            fh.write("channel,sample\n")
            for c, s in zip(rec["channel"].tolist(), rec["sample"].tolist()):
                fh.write(f"{c},{s}\n")
    else:
        raise FormatError(f"unknown format {fmt!r}")
    return path


def read_spikes(path: str | Path) -> SpikeTrainSet:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    if raw[:4] != SPIKE_MAGIC:
        raise FormatError(f"{path}: not a spike file (bad magic)")
    binary = False
    if len(raw) >= _SPIKE_HEADER.size:
        _, count, rate, n_samples, n_rec = _SPIKE_HEADER.unpack_from(raw)
        binary = len(raw) - _SPIKE_HEADER.size == n_rec * _RECORD.itemsize
    if binary:
        rec = np.frombuffer(raw[_SPIKE_HEADER.size:], dtype=_RECORD)
        channels, samples = rec["channel"].astype(np.int64), rec["sample"].astype(np.int64)
    elif raw[4:5] == b",":
        try:
            lines = raw.decode("ascii").splitlines()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        head = lines[0].split(",")
        if len(head) != 4 or len(lines) < 2 or lines[1].strip() != "channel,sample":
            raise FormatError(f"{path}: malformed spike CSV header")
        try:
            count, rate, n_samples = int(head[1]), float(head[2]), int(head[3])
            pairs = [tuple(int(v) for v in line.split(",")) for line in lines[2:] if line]
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        arr = np.array(pairs, dtype=np.int64).reshape(-1, 2)
        channels, samples = arr[:, 0], arr[:, 1]
    else:
        raise FormatError(f"{path}: binary record count does not match the payload size")
    if channels.size and (channels.min() < 0 or channels.max() >= count):
        raise FormatError(f"{path}: channel index out of range")
    order_ok = np.all((np.diff(channels) > 0) | ((np.diff(channels) == 0) & (np.diff(samples) > 0)))
    if not order_ok:
        raise FormatError(f"{path}: records must be sorted by channel, strictly increasing in sample")
    bounds = np.searchsorted(channels, np.arange(count + 1))
    trains = [samples[bounds[c]:bounds[c + 1]].copy() for c in range(count)]
    return SpikeTrainSet(trains, rate, [], None if n_samples < 0 else int(n_samples))


def model_to_dict(model: ProjectionModel, config_hash: str = "") -> dict[str, Any]:
    return {
        "format": "myodecode-projection-model/1",
        "config_hash": config_hash,
        "bin_ms": model.bin_ms,
        "cutoff_hz": model.cutoff_hz,
        "n_train": model.n_train,
        "column_labels": list(model.column_labels),
        "column_means": model.column_means.tolist(),
        "singular_values": model.singular_values.tolist(),
        "loadings": model.loadings.tolist(),
        "rotation": model.rotation.tolist(),
        "dof_labels": list(model.dof_labels),
        "assignment": [[int(c), int(s)] for c, s in model.assignment],
        "gains": [float(g) for g in model.gains],
        "offsets": [float(o) for o in model.offsets],
    }


def model_from_dict(data: dict[str, Any]) -> ProjectionModel:
    try:
        return ProjectionModel(
            loadings=np.array(data["loadings"], dtype=float),
            singular_values=np.array(data["singular_values"], dtype=float),
            column_means=np.array(data["column_means"], dtype=float),
            column_labels=list(data["column_labels"]),
            n_train=int(data["n_train"]),
            rotation=np.array(data["rotation"], dtype=float),
            dof_labels=list(data["dof_labels"]),
            assignment=[(int(c), int(s)) for c, s in data["assignment"]],
            gains=[float(g) for g in data["gains"]],
            offsets=[float(o) for o in data["offsets"]],
            bin_ms=float(data["bin_ms"]),
            cutoff_hz=float(data["cutoff_hz"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid model document: {exc}") from exc


def save_model(path: str | Path, model: ProjectionModel, config_hash: str = "") -> Path:
    path = Path(path)
    path.write_text(json.dumps(model_to_dict(model, config_hash), indent=1, sort_keys=True) + "\n")
    return path


def load_model(path: str | Path) -> ProjectionModel:
    path = Path(path)
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model_from_dict(data)


def write_csv(path: str | Path, rows: Sequence[dict[str, Any]], fieldnames: Iterable[str] | None = None) -> Path:
    path = Path(path)
    names = list(fieldnames) if fieldnames is not None else (list(rows[0]) if rows else [])
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=names, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (_fmt(v) if isinstance(v, float) else v) for k, v in row.items()})
    return path


def write_json(path: str | Path, data: Any) -> Path:
    path = Path(path)
    path.write_text(json.dumps(data, indent=1, sort_keys=True) + "\n")
    return path
