"""Dataset and result files.

Datasets are CSV tables preceded by ``# key: <json>`` metadata lines. Floats are
written with ``repr`` so reading a file and writing it back reproduces it byte
for byte. Fit results are JSON records with sorted keys. All writes go through
a temporary file that is renamed into place.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .domain import CoherenceCurve, DomainError, NoiseSpectrum, TauSweep
from .sequences import SequenceSpec

__all__ = [
    "SCHEMA_VERSION",
    "MAGIC",
    "DataError",
    "Dataset",
    "atomic_write",
    "write_dataset",
    "read_dataset",
    "dump_dataset",
    "parse_dataset",
    "write_result",
    "read_result",
    "curve_dataset",
    "sweep_dataset",
    "spectrum_dataset",
    "dataset_curve",
    "dataset_sweep",
    "dataset_spectrum",
]

SCHEMA_VERSION = 1
MAGIC = "# spinbath-dataset"

COLUMNS = {
    "coherence_curve": ("time_us", "coherence"),
    "tau_sweep": ("tau_us", "coherence"),
    "dip_spectrum": ("freq_mhz", "coherence"),
    "noise_spectrum": ("omega_rad_per_us", "S_rad2_per_us"),
}


class DataError(ValueError):
    """A dataset or result file does not match its schema."""


@dataclass
class Dataset:
    kind: str
    header: dict
    columns: tuple
    data: np.ndarray = field(repr=False)

    def column(self, name: str) -> np.ndarray:
        try:
            return self.data[:, self.columns.index(name)]
        except ValueError:
            raise DataError(f"dataset has no column {name!r}; columns are {list(self.columns)}") from None

    def has(self, name: str) -> bool:
        return name in self.columns


def atomic_write(path, text: str):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(x: float) -> str:
    return repr(float(x))


def dump_dataset(ds: Dataset) -> str:
    """Serialise ``ds``; keys ``schema_version``, ``artifact_version`` and ``kind`` lead the header."""
    head = {"schema_version": SCHEMA_VERSION, "artifact_version": __version__, "kind": ds.kind}
    head.update({k: v for k, v in ds.header.items() if k not in head})
    lines = [MAGIC]
    for k, v in head.items():
        lines.append(f"# {k}: {json.dumps(v, sort_keys=True)}")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(ds.columns)
    for row in np.asarray(ds.data, dtype=float):
        w.writerow([_fmt(x) for x in row])
    return "\n".join(lines) + "\n" + buf.getvalue()


def write_dataset(path, ds: Dataset):
    atomic_write(path, dump_dataset(ds))


def parse_dataset(text: str, source: str = "<dataset>") -> Dataset:
    lines = text.splitlines()
    if not lines or lines[0] != MAGIC:
        raise DataError(f"{source}: not a spinbath dataset (missing {MAGIC!r} line)")
    header = {}
    i = 1
    while i < len(lines) and lines[i].startswith("#"):
        key, sep, value = lines[i][1:].strip().partition(":")
        if not sep:
            raise DataError(f"{source}:{i + 1}: malformed header line")
        try:
            header[key.strip()] = json.loads(value)
        except json.JSONDecodeError as exc:
            raise DataError(f"{source}:{i + 1}: header value for {key.strip()!r} is not JSON: {exc.msg}") from None
        i += 1
    for key in ("schema_version", "kind"):
        if key not in header:
            raise DataError(f"{source}: header lacks {key!r}")
    if header["schema_version"] != SCHEMA_VERSION:
        raise DataError(f"{source}: schema version {header['schema_version']} is not supported (expected {SCHEMA_VERSION})")
    kind = header.pop("kind")
    header.pop("schema_version")
    header.pop("artifact_version", None)
    rows = list(csv.reader(lines[i:]))
    if not rows:
        raise DataError(f"{source}: missing column header row")
    columns = tuple(rows[0])
    req = COLUMNS.get(kind, ())
    missing = [c for c in req if c not in columns]
    if missing:
        raise DataError(f"{source}: a {kind} dataset needs columns {list(req)}, missing {missing}")
    try:
        data = np.array([[float(x) for x in r] for r in rows[1:]], dtype=float).reshape(-1, len(columns))
    except ValueError as exc:
        raise DataError(f"{source}: non-numeric or ragged data rows ({exc})") from None
    return Dataset(kind, header, columns, data)


def read_dataset(path) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from None
    return parse_dataset(text, str(path))


def file_sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_result(path, record: dict):
    rec = {"schema_version": SCHEMA_VERSION, "artifact_version": __version__}
    rec.update(record)
    atomic_write(path, json.dumps(rec, sort_keys=True, indent=2) + "\n")


def read_result(path) -> dict:
    path = Path(path)
    try:
        rec = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read result {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}:{exc.lineno}: invalid JSON: {exc.msg}") from None
    if not isinstance(rec, dict) or "pipeline" not in rec or "schema_version" not in rec:
        raise DataError(f"{path}: not a spinbath fit result")
    return rec


# conversions between datasets and domain objects


def _with_stderr(columns, arrays, unc):
    if unc is not None:
        return columns + ("stderr",), arrays + [np.asarray(unc, float)]
    return columns, arrays


def curve_dataset(curve: CoherenceCurve, header: dict) -> Dataset:
    spec = curve.sequence
    head = {"sequence": spec.label, "family": spec.family, "n_pulses": spec.n_pulses,
            "tau_offset_us": spec.tau_offset, "tau_fraction": spec.tau_fraction}
    head.update(header)
    cols, arrs = _with_stderr(COLUMNS["coherence_curve"], [curve.times, curve.values], curve.uncertainty)
    return Dataset("coherence_curve", head, cols, np.column_stack(arrs))


def sweep_dataset(sweep: TauSweep, header: dict) -> Dataset:
    head = {"sequence": "DEER-echo", "total_time_us": sweep.total_time}
    head.update(header)
    cols, arrs = _with_stderr(COLUMNS["tau_sweep"], [sweep.taus, sweep.values], sweep.uncertainty)
    return Dataset("tau_sweep", head, cols, np.column_stack(arrs))


def spectrum_dataset(spec: NoiseSpectrum, header: dict) -> Dataset:
    head = {"provenance": spec.provenance, "dropped_points": spec.dropped}
    head.update(header)
    cols, arrs = _with_stderr(COLUMNS["noise_spectrum"], [spec.omegas, spec.amplitudes], spec.uncertainty)
    return Dataset("noise_spectrum", head, cols, np.column_stack(arrs))


def _expect(ds: Dataset, kind: str, source: str):
    if ds.kind != kind:
        raise DataError(f"{source}: expected a {kind} dataset, got {ds.kind}")


def _stderr(ds: Dataset) -> Optional[np.ndarray]:
    return ds.column("stderr") if ds.has("stderr") else None


def dataset_curve(ds: Dataset, source: str = "<dataset>") -> CoherenceCurve:
    _expect(ds, "coherence_curve", source)
    h = ds.header
    try:
        spec = SequenceSpec(h.get("family", h.get("sequence")), h.get("n_pulses"),
                            h.get("tau_offset_us"), h.get("tau_fraction"))
        return CoherenceCurve(ds.column("time_us"), ds.column("coherence"), spec, _stderr(ds), h.get("seed"))
    except DomainError as exc:
        raise DataError(f"{source}: {exc}") from None


def dataset_sweep(ds: Dataset, source: str = "<dataset>") -> TauSweep:
    _expect(ds, "tau_sweep", source)
    if "total_time_us" not in ds.header:
        raise DataError(f"{source}: tau_sweep header lacks total_time_us")
    try:
        return TauSweep(ds.column("tau_us"), ds.column("coherence"), ds.header["total_time_us"],
                        _stderr(ds), ds.header.get("seed"))
    except DomainError as exc:
        raise DataError(f"{source}: {exc}") from None


def dataset_spectrum(ds: Dataset, source: str = "<dataset>") -> NoiseSpectrum:
    _expect(ds, "noise_spectrum", source)
    try:
        return NoiseSpectrum(ds.column("omega_rad_per_us"), ds.column("S_rad2_per_us"),
                             ds.header.get("provenance", "reconstructed"), _stderr(ds),
                             ds.header.get("dropped_points", 0))
    except DomainError as exc:
        raise DataError(f"{source}: {exc}") from None
