"""EDF ingestion and the neutral trial store.

The store is a directory holding ``manifest.json`` plus one raw little-endian
float32 file per tensor (``<name>.f32``) with its shape in
``<name>.shape.json``. Everything downstream reads recordings through it.
"""
from __future__ import annotations

import csv
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

STORE_FORMAT_VERSION = 1
ANNOTATION_LABEL = "EDF Annotations"
SLEEP_STAGES = ("W", "REM", "N1", "N2", "N3")


class EdfError(ValueError):
    pass


class MalformedHeader(EdfError):
    pass


class MixedSamplingRates(EdfError):
    pass


class TruncatedRecord(EdfError):
    pass


class StoreError(ValueError):
    pass


class VersionMismatch(StoreError):
    pass


class ChecksumMismatch(StoreError):
    pass


class MissingChannel(KeyError):
    def __init__(self, name):
        super().__init__(name)
        self.name = name


@dataclass
class RecordingBuffer:
    """Multichannel signal with its sampling rate and channel labels."""

    samples: np.ndarray
    fs: float
    channel_names: list[str]
    subject_id: str = ""
    reference: str = "unknown"
    unit: str = "uV"

    def __post_init__(self):
        self.samples = np.asarray(self.samples)
        self.channel_names = list(self.channel_names)
        if self.samples.ndim != 2:
            raise ValueError(f"samples must be 2-D, got shape {self.samples.shape}")
        if self.samples.shape[0] != len(self.channel_names):
            raise ValueError(
                f"{self.samples.shape[0]} channels but {len(self.channel_names)} names"
            )
        if not self.fs > 0:
            raise ValueError(f"fs must be positive, got {self.fs}")

    @property
    def n_channels(self) -> int:
        return self.samples.shape[0]

    @property
    def n_times(self) -> int:
        return self.samples.shape[1]


@dataclass
class Trial:
    recording: str
    start: int
    length: int
    subject_id: str
    valid_start: int = 0
    valid_end: int | None = None
    condition: str = ""

    def __post_init__(self):
        if self.valid_end is None:
            self.valid_end = self.length
        if not 0 <= self.valid_start < self.valid_end <= self.length:
            raise ValueError(
                f"valid span ({self.valid_start}, {self.valid_end}) outside [0, {self.length}]"
            )


@dataclass
class TrialTable:
    dataset_id: str
    trial_seconds: float
    trials: list[Trial] = field(default_factory=list)

    def subjects(self) -> list[str]:
        return sorted({t.subject_id for t in self.trials})


@dataclass
class DatasetManifest:
    """Store-level metadata: one entry per dataset plus provenance notes."""

    datasets: dict[str, dict]
    recordings: dict[str, dict] = field(default_factory=dict)
    notes: str = ""
    format_version: int = STORE_FORMAT_VERSION

    def common_electrodes(self) -> list[str]:
        """Electrodes present in every dataset, in the order of the first one."""
        sets = [d["electrodes"] for d in self.datasets.values()]
        if not sets:
            return []
        rest = [set(s) for s in sets[1:]]
        return [e for e in sets[0] if all(e in s for s in rest)]


@dataclass
class EdfSignalHeader:
    label: str
    transducer: str
    physical_dimension: str
    physical_min: float
    physical_max: float
    digital_min: int
    digital_max: int
    prefilter: str
    samples_per_record: int
    reserved: str

    @property
    def gain(self) -> float:
        return (self.physical_max - self.physical_min) / (self.digital_max - self.digital_min)

    def to_physical(self, digital: np.ndarray) -> np.ndarray:
        return (digital.astype(np.float64) - self.digital_min) * self.gain + self.physical_min


@dataclass
class EdfRaw:
    """Parsed EDF file before calibration; digital samples per signal."""

    header: dict
    signals: list[EdfSignalHeader]
    digital: list[np.ndarray]
    n_records: int
    record_duration: float

    def sampling_rate(self, index: int) -> float:
        return self.signals[index].samples_per_record / self.record_duration


# (name, width) of the fixed 256-byte header and of each per-signal field
_HEADER_FIELDS = [
    ("version", 8),
    ("patient", 80),
    ("recording", 80),
    ("startdate", 8),
    ("starttime", 8),
    ("header_bytes", 8),
    ("reserved", 44),
    ("n_records", 8),
    ("record_duration", 8),
    ("n_signals", 4),
]
_SIGNAL_FIELDS = [
    ("label", 16),
    ("transducer", 80),
    ("physical_dimension", 8),
    ("physical_min", 8),
    ("physical_max", 8),
    ("digital_min", 8),
    ("digital_max", 8),
    ("prefilter", 80),
    ("samples_per_record", 8),
    ("reserved", 32),
]


def _ascii(raw: bytes, name: str) -> str:
    try:
        return raw.decode("ascii").strip()
    except UnicodeDecodeError as exc:
        raise MalformedHeader(f"non-ASCII bytes in header field {name!r}") from exc


def _number(text: str, name: str, kind=float):
    try:
        return kind(text)
    except ValueError as exc:
        raise MalformedHeader(f"header field {name!r} is not numeric: {text!r}") from exc


def parse_edf_header(data: bytes) -> tuple[dict, list[EdfSignalHeader]]:
    if len(data) < 256:
        raise MalformedHeader(f"file has {len(data)} bytes, fixed header needs 256")
    header = {}
    pos = 0
    for name, width in _HEADER_FIELDS:
        header[name] = _ascii(data[pos:pos + width], name)
        pos += width
    if header["version"] != "0":
        raise MalformedHeader(f"version field must be '0', got {header['version']!r}")
    ns = _number(header["n_signals"], "n_signals", int)
    if ns < 1:
        raise MalformedHeader(f"number of signals must be positive, got {ns}")
    header["n_signals"] = ns
    header["header_bytes"] = _number(header["header_bytes"], "header_bytes", int)
    header["n_records"] = _number(header["n_records"], "n_records", int)
    header["record_duration"] = _number(header["record_duration"], "record_duration")
    expected = 256 * (ns + 1)
    if header["header_bytes"] != expected:
        raise MalformedHeader(
            f"header_bytes field says {header['header_bytes']}, {ns} signals need {expected}"
        )
    if len(data) < expected:
        raise MalformedHeader(f"signal headers truncated ({len(data)} < {expected} bytes)")

    columns: dict[str, list[str]] = {}
    for name, width in _SIGNAL_FIELDS:
        columns[name] = [
            _ascii(data[pos + i * width:pos + (i + 1) * width], name) for i in range(ns)
        ]
        pos += width * ns

    signals = []
    for i in range(ns):
        sig = EdfSignalHeader(
            label=columns["label"][i],
            transducer=columns["transducer"][i],
            physical_dimension=columns["physical_dimension"][i],
            physical_min=_number(columns["physical_min"][i], "physical_min"),
            physical_max=_number(columns["physical_max"][i], "physical_max"),
            digital_min=_number(columns["digital_min"][i], "digital_min", int),
            digital_max=_number(columns["digital_max"][i], "digital_max", int),
            prefilter=columns["prefilter"][i],
            samples_per_record=_number(columns["samples_per_record"][i], "samples_per_record", int),
            reserved=columns["reserved"][i],
        )
        if sig.digital_max <= sig.digital_min:
            raise MalformedHeader(f"signal {sig.label!r}: digital_max <= digital_min")
        if sig.samples_per_record < 1:
            raise MalformedHeader(f"signal {sig.label!r}: samples_per_record < 1")
        signals.append(sig)
    return header, signals


def read_edf_raw(path) -> EdfRaw:
    """Parse an EDF/EDF+ file into header fields and digital sample arrays."""
    data = Path(path).read_bytes()
    header, signals = parse_edf_header(data)
    offset = header["header_bytes"]
    record_samples = sum(s.samples_per_record for s in signals)
    record_bytes = 2 * record_samples
    available = (len(data) - offset) // record_bytes
    n_records = header["n_records"]
    if n_records == -1:
        n_records = available
    elif n_records > available:
        raise TruncatedRecord(
            f"header declares {n_records} data records, file holds {available}"
        )
    elif n_records < 0:
        raise MalformedHeader(f"invalid number of data records: {n_records}")

    payload = np.frombuffer(data, dtype="<i2", count=n_records * record_samples, offset=offset)
    payload = payload.reshape(n_records, record_samples)
    digital = []
    col = 0
    for sig in signals:
        digital.append(payload[:, col:col + sig.samples_per_record].reshape(-1).copy())
        col += sig.samples_per_record
    return EdfRaw(header, signals, digital, n_records, header["record_duration"])


def pack_records(raw: EdfRaw) -> bytes:
    """Re-interleave digital samples into the EDF data-record payload."""
    blocks = [
        d.reshape(raw.n_records, s.samples_per_record)
        for d, s in zip(raw.digital, raw.signals)
    ]
    return np.concatenate(blocks, axis=1).astype("<i2").tobytes()


def read_edf(path, resample: bool = False, subject_id: str = "", reference: str = "unknown") -> RecordingBuffer:
    """Read an EDF file into physical units, skipping annotation signals.

    If the data signals disagree on sampling rate, raise ``MixedSamplingRates``
    unless ``resample`` is set, in which case every signal is FFT-resampled
    down to the lowest rate.
    """
    raw = read_edf_raw(path)
    keep = [i for i, s in enumerate(raw.signals) if s.label != ANNOTATION_LABEL]
    if not keep:
        raise MalformedHeader("file contains no data signals")
    rates = [raw.sampling_rate(i) for i in keep]
    fs = min(rates)
    rows = []
    for i in keep:
        x = raw.signals[i].to_physical(raw.digital[i])
        if raw.sampling_rate(i) != fs:
            if not resample:
                raise MixedSamplingRates(f"signal rates differ: {sorted(set(rates))}")
            from eegd3.dsp import resample_array

            x = resample_array(x, raw.sampling_rate(i), fs)
        rows.append(x)
    samples = np.vstack(rows)
    if not np.all(np.isfinite(samples)):
        raise EdfError("non-finite samples after calibration")
    return RecordingBuffer(
        samples=samples,
        fs=fs,
        channel_names=[raw.signals[i].label for i in keep],
        subject_id=subject_id,
        reference=reference,
    )


def read_stage_labels(path) -> list[tuple[int, str]]:
    """Read the ``epoch_index,stage`` sidecar CSV used for sleep labels."""
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            stage = row["stage"].strip()
            if stage not in SLEEP_STAGES:
                raise ValueError(f"unknown sleep stage {stage!r}")
            out.append((int(row["epoch_index"]), stage))
    return out


def select_channels(rec: RecordingBuffer, names: Sequence[str]) -> RecordingBuffer:
    index = {n: i for i, n in enumerate(rec.channel_names)}
    rows = []
    for n in names:
        if n not in index:
            raise MissingChannel(n)
        rows.append(index[n])
    return RecordingBuffer(
        samples=rec.samples[rows],
        fs=rec.fs,
        channel_names=list(names),
        subject_id=rec.subject_id,
        reference=rec.reference,
        unit=rec.unit,
    )


def write_tensor(directory, name: str, array: np.ndarray) -> str:
    """Write one float32 tensor; returns the sha256 of its payload."""
    directory = Path(directory)
    arr = np.ascontiguousarray(array, dtype="<f4")
    payload = arr.tobytes()
    (directory / f"{name}.f32").write_bytes(payload)
    (directory / f"{name}.shape.json").write_text(json.dumps({"shape": list(arr.shape), "dtype": "<f4"}))
    return hashlib.sha256(payload).hexdigest()


def read_tensor(directory, name: str, sha256: str | None = None) -> np.ndarray:
    directory = Path(directory)
    meta = json.loads((directory / f"{name}.shape.json").read_text())
    payload = (directory / f"{name}.f32").read_bytes()
    if sha256 is not None and hashlib.sha256(payload).hexdigest() != sha256:
        raise ChecksumMismatch(f"tensor {name!r} does not match its recorded checksum")
    arr = np.frombuffer(payload, dtype=meta.get("dtype", "<f4"))
    shape = tuple(meta["shape"])
    if arr.size != int(np.prod(shape)):
        raise StoreError(f"tensor {name!r} has {arr.size} values, shape says {shape}")
    return arr.reshape(shape).copy()


def write_store(directory, tables: Iterable[TrialTable], buffers: dict[str, RecordingBuffer],
                datasets: dict[str, dict] | None = None, notes: str = "") -> Path:
    """Persist trial tables and their recordings as a neutral store.

    ``datasets`` may carry extra per-dataset metadata (exclusions, condition
    weights, units); electrode set, fs and trial length are filled in from the
    tables and buffers.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    tables = list(tables)
    datasets = {k: dict(v) for k, v in (datasets or {}).items()}

    recordings = {}
    for name in sorted(buffers):
        buf = buffers[name]
        if not np.all(np.isfinite(buf.samples)):
            raise StoreError(f"recording {name!r} has non-finite samples")
        digest = write_tensor(directory, name, buf.samples)
        recordings[name] = {
            "subject_id": buf.subject_id,
            "fs": float(buf.fs),
            "channel_names": buf.channel_names,
            "reference": buf.reference,
            "unit": buf.unit,
            "sha256": digest,
        }

    trials = []
    for table in tables:
        meta = datasets.setdefault(table.dataset_id, {})
        files = sorted({t.recording for t in table.trials})
        first = buffers[files[0]] if files else None
        meta.setdefault("electrodes", first.channel_names if first else [])
        meta.setdefault("fs", float(first.fs) if first else 0.0)
        meta.setdefault("unit", first.unit if first else "unitless")
        meta["trial_seconds"] = float(table.trial_seconds)
        meta["files"] = files
        for t in table.trials:
            if t.recording not in buffers:
                raise StoreError(f"trial references unknown recording {t.recording!r}")
            trials.append({
                "dataset_id": table.dataset_id,
                "recording": t.recording,
                "start": int(t.start),
                "length": int(t.length),
                "subject_id": t.subject_id,
                "valid_start": int(t.valid_start),
                "valid_end": int(t.valid_end),
                "condition": t.condition,
            })

    manifest = {
        "format_version": STORE_FORMAT_VERSION,
        "datasets": {k: datasets[k] for k in sorted(datasets)},
        "recordings": recordings,
        "trials": trials,
        "notes": notes,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return directory


def read_store(directory, verify: bool = True):
    """Load a store; returns ``(manifest, tables, buffers)``.

    ``tables`` maps dataset id to its ``TrialTable``.
    """
    directory = Path(directory)
    doc = json.loads((directory / "manifest.json").read_text())
    version = doc.get("format_version")
    if version != STORE_FORMAT_VERSION:
        raise VersionMismatch(f"store format {version!r}, supported: {STORE_FORMAT_VERSION}")
    manifest = DatasetManifest(
        datasets=doc["datasets"],
        recordings=doc["recordings"],
        notes=doc.get("notes", ""),
        format_version=version,
    )
    buffers = {}
    for name, meta in doc["recordings"].items():
        samples = read_tensor(directory, name, meta["sha256"] if verify else None)
        buffers[name] = RecordingBuffer(
            samples=samples,
            fs=meta["fs"],
            channel_names=meta["channel_names"],
            subject_id=meta["subject_id"],
            reference=meta["reference"],
            unit=meta.get("unit", "uV"),
        )
    tables = {}
    for row in doc["trials"]:
        ds = row["dataset_id"]
        if ds not in manifest.datasets:
            raise StoreError(f"trial references dataset {ds!r} missing from manifest")
        if row["recording"] not in buffers:
            raise StoreError(f"trial references recording {row['recording']!r} missing from manifest")
        if ds not in tables:
            tables[ds] = TrialTable(ds, manifest.datasets[ds]["trial_seconds"])
        tables[ds].trials.append(Trial(
            recording=row["recording"],
            start=row["start"],
            length=row["length"],
            subject_id=row["subject_id"],
            valid_start=row["valid_start"],
            valid_end=row["valid_end"],
            condition=row.get("condition", ""),
        ))
    return manifest, tables, buffers


class Collection:
    """In-memory view of a store: manifest, trial tables and recordings."""

    def __init__(self, manifest: DatasetManifest, tables: dict[str, TrialTable],
                 buffers: dict[str, RecordingBuffer]):
        self.manifest = manifest
        self.tables = tables
        self.buffers = buffers

    @classmethod
    def load(cls, directory, verify: bool = True) -> "Collection":
        return cls(*read_store(directory, verify=verify))

    @property
    def dataset_ids(self) -> list[str]:
        return sorted(self.tables)

    def subjects(self) -> list[str]:
        return sorted({t.subject_id for tab in self.tables.values() for t in tab.trials})

    def fs(self, dataset_id: str) -> float:
        return float(self.manifest.datasets[dataset_id]["fs"])

    def trial_data(self, trial: Trial) -> np.ndarray:
        """Samples of one trial, zero-padded where it runs past the recording."""
        x = self.buffers[trial.recording].samples
        stop = trial.start + trial.length
        out = x[:, max(trial.start, 0):stop]
        if trial.start < 0 or stop > x.shape[1]:
            pad_left = max(-trial.start, 0)
            pad_right = trial.length - out.shape[1] - pad_left
            out = np.pad(out, ((0, 0), (pad_left, pad_right)))
        return out

    def restrict(self, subjects: Iterable[str]) -> "Collection":
        """View with only the trials of the given subjects (datasets kept if non-empty)."""
        keep = set(subjects)
        tables = {}
        for ds, tab in self.tables.items():
            trials = [t for t in tab.trials if t.subject_id in keep]
            if trials:
                tables[ds] = TrialTable(ds, tab.trial_seconds, trials)
        return Collection(self.manifest, tables, self.buffers)

