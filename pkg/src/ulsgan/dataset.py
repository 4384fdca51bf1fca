"""On-disk dataset layout.

A dataset is a directory::

    manifest.json        format_version, kind, sample_rate_hz, record_length, records[]
    records/000000.f32   little-endian float32 samples, one file per record

Each manifest record carries its file name, condition, rotation and
repetition indices, generator seed and the SHA-256 of the sample file.
The manifest is written last, so a directory without one is incomplete.
"""

from __future__ import annotations

import hashlib
import json
import os
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .conditions import Condition
from .errors import CorruptionError, FormatError, ParameterError, PersistenceError, VersionError

FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.json"
RECORD_DIR = "records"
KINDS = ("raw", "processed")
_DTYPE = np.dtype("<f4")


@dataclass(frozen=True)
class RecordInfo:
    file: str
    condition: Condition
    rotation: int = 0
    repetition: int = 0
    seed: int = 0

    def to_dict(self, sha256: str | None = None) -> dict:
        d = {
            "file": self.file,
            "condition": self.condition.to_dict(),
            "rotation": self.rotation,
            "repetition": self.repetition,
            "seed": self.seed,
        }
        if sha256 is not None:
            d["sha256"] = sha256
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "RecordInfo":
        return cls(d["file"], Condition.from_dict(d["condition"]), int(d["rotation"]),
                   int(d["repetition"]), int(d["seed"]))


def record_file_name(i: int) -> str:
    return f"{RECORD_DIR}/{i:06d}.f32"


@dataclass
class Dataset:
    kind: str
    sample_rate_hz: float
    record_length: int
    records: list[RecordInfo]
    samples: np.ndarray = field(repr=False)
    format_version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"dataset kind must be one of {KINDS}, got {self.kind!r}")
        self.samples = np.asarray(self.samples, dtype=np.float32).reshape(-1, self.record_length)
        if self.samples.shape[0] != len(self.records):
            raise ParameterError(
                f"{len(self.records)} records but {self.samples.shape[0]} sample rows"
            )

    def __len__(self):
        return len(self.records)

    @property
    def conditions(self) -> list[Condition]:
        return [r.condition for r in self.records]

    def groups(self) -> dict[Condition, np.ndarray]:
        """Records grouped by condition, in first-appearance order."""
        idx: dict[Condition, list[int]] = defaultdict(list)
        for i, r in enumerate(self.records):
            idx[r.condition].append(i)
        return {c: self.samples[rows] for c, rows in idx.items()}

    def equals(self, other: "Dataset") -> bool:
        return (
            self.kind == other.kind
            and self.sample_rate_hz == other.sample_rate_hz
            and self.record_length == other.record_length
            and self.records == other.records
            and self.samples.dtype == other.samples.dtype
            and np.array_equal(self.samples.view(np.uint32), other.samples.view(np.uint32))
        )


def _manifest_dict(kind, sample_rate_hz, record_length, entries) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "kind": kind,
        "sample_rate_hz": float(sample_rate_hz),
        "record_length": int(record_length),
        "records": entries,
    }


class DatasetWriter:
    """Streams records to disk, then writes the manifest on ``close``."""

    def __init__(self, path, kind: str, sample_rate_hz: float, record_length: int):
        if kind not in KINDS:
            raise ParameterError(f"dataset kind must be one of {KINDS}")
        self.path = Path(path)
        self.kind = kind
        self.sample_rate_hz = sample_rate_hz
        self.record_length = record_length
        self._entries: list[dict] = []
        try:
            (self.path / RECORD_DIR).mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise PersistenceError(f"cannot create dataset directory {self.path}: {exc}") from exc

    def add(self, info: RecordInfo, samples) -> None:
        data = np.asarray(samples, dtype=_DTYPE)
        if data.shape != (self.record_length,):
            raise ParameterError(f"record {info.file}: shape {data.shape}, expected ({self.record_length},)")
        blob = data.tobytes()
        try:
            with open(self.path / info.file, "wb") as fh:
                fh.write(blob)
        except OSError as exc:
            raise PersistenceError(f"cannot write {info.file}: {exc}") from exc
        self._entries.append(info.to_dict(hashlib.sha256(blob).hexdigest()))

    def close(self) -> Path:
        manifest = _manifest_dict(self.kind, self.sample_rate_hz, self.record_length, self._entries)
        target = self.path / MANIFEST_NAME
        tmp = target.with_suffix(".json.tmp")
        try:
            tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
            os.replace(tmp, target)
        except OSError as exc:
            raise PersistenceError(f"cannot write manifest {target}: {exc}") from exc
        return target


def write_dataset(ds: Dataset, path) -> Path:
    writer = DatasetWriter(path, ds.kind, ds.sample_rate_hz, ds.record_length)
    for info, row in zip(ds.records, ds.samples):
        writer.add(info, row)
    return writer.close()


def read_manifest(path) -> dict:
    path = Path(path)
    mpath = path / MANIFEST_NAME
    try:
        text = mpath.read_text()
    except FileNotFoundError:
        raise PersistenceError(f"no {MANIFEST_NAME} in {path}") from None
    except OSError as exc:
        raise PersistenceError(f"cannot read {mpath}: {exc}") from exc
    try:
        manifest = json.loads(text)
    except json.JSONDecodeError as exc:
        raise FormatError(f"{mpath}: invalid JSON ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise VersionError(f"{mpath}: unsupported format_version {version!r} (supported: {FORMAT_VERSION})")
    for key in ("kind", "sample_rate_hz", "record_length", "records"):
        if key not in manifest:
            raise FormatError(f"{mpath}: missing field {key!r}")
    if manifest["kind"] not in KINDS:
        raise FormatError(f"{mpath}: unknown kind {manifest['kind']!r}")
    return manifest


def iter_dataset(path) -> Iterator[tuple[RecordInfo, np.ndarray]]:
    """Yield (info, samples) per record, verifying length and checksum."""
    path = Path(path)
    manifest = read_manifest(path)
    n = int(manifest["record_length"])
    for entry in manifest["records"]:
        info = RecordInfo.from_dict(entry)
        try:
            blob = (path / info.file).read_bytes()
        except FileNotFoundError:
            raise CorruptionError(f"record {info.file} is missing") from None
        if len(blob) != n * _DTYPE.itemsize:
            raise CorruptionError(
                f"record {info.file}: {len(blob)} bytes, expected {n * _DTYPE.itemsize}"
            )
        expected = entry.get("sha256")
        if expected is not None and hashlib.sha256(blob).hexdigest() != expected:
            raise CorruptionError(f"record {info.file}: checksum mismatch")
        yield info, np.frombuffer(blob, dtype=_DTYPE).astype(np.float32)


def read_dataset(path) -> Dataset:
    manifest = read_manifest(path)
    infos, rows = [], []
    for info, samples in iter_dataset(path):
        infos.append(info)
        rows.append(samples)
    n = int(manifest["record_length"])
    samples = np.vstack(rows) if rows else np.zeros((0, n), dtype=np.float32)
    return Dataset(manifest["kind"], float(manifest["sample_rate_hz"]), n, infos, samples)
