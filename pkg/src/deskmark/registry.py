"""Fingerprint-bound provenance registry.

Each registered image binds its watermark UUID to a 64-bit perceptual
difference hash and an opaque manifest blob. Verification decodes the
watermark, looks the UUID up, and compares fingerprints: a transplanted
watermark decodes fine but points at a record whose fingerprint does not
match the carrier image, so the lookup is rejected.

The store is a single append-only JSONL file. Records are written with a
flush+fsync per register; a crash mid-write leaves at most one partial
trailing line, which readers skip. Writers serialize through a file lock.
"""

from __future__ import annotations

import base64
import json
import os
import time
import uuid as uuidlib
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
import torch
from filelock import FileLock

from . import imaging, payload
from .model import WatermarkModel

STORE_VERSION = 1
DEFAULT_HAMMING_THRESHOLD = 12

# difference hash geometry: 8 rows of 9 luma samples -> 64 horizontal gradients
_DHASH_ROWS = 8
_DHASH_COLS = 9


class DuplicateUuid(Exception):
    pass


def fingerprint(img: np.ndarray) -> int:
    """64-bit difference hash of the luma plane; stable under mild distortion."""
    imaging.validate_image(img)
    y = imaging.luma(img.astype(np.float32))
    t = torch.from_numpy(np.ascontiguousarray(y))[None, None]
    small = imaging.resize_tensor(t, _DHASH_ROWS, _DHASH_COLS)[0, 0].numpy()
    bits = small[:, :-1] > small[:, 1:]
    value = 0
    for b in bits.flatten():
        value = (value << 1) | int(b)
    return value


def hamming(a: int, b: int) -> int:
    return bin(a ^ b).count("1")


@dataclass(frozen=True)
class ManifestRecord:
    uuid: uuidlib.UUID
    fingerprint: int
    manifest: bytes
    created_at: str

    def to_line(self) -> str:
        return json.dumps({
            "uuid": str(self.uuid),
            "fingerprint": f"{self.fingerprint:016x}",
            "manifest": base64.b64encode(self.manifest).decode("ascii"),
            "created_at": self.created_at,
        })

    @classmethod
    def from_line(cls, line: str) -> "ManifestRecord":
        row = json.loads(line)
        return cls(
            uuid=uuidlib.UUID(row["uuid"]),
            fingerprint=int(row["fingerprint"], 16),
            manifest=base64.b64decode(row["manifest"]),
            created_at=row["created_at"],
        )


class ManifestStore:
    """Append-only single-file UUID -> (fingerprint, manifest) store."""

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self._lock = FileLock(str(self.path) + ".lock")
        self._records: dict[uuidlib.UUID, ManifestRecord] = {}
        if self.path.exists():
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self._lock, open(self.path, "w") as fh:
                fh.write(json.dumps({"format": "deskmark-registry",
                                     "version": STORE_VERSION}) + "\n")

    def _load(self):
        with open(self.path) as fh:
            header_line = fh.readline()
            try:
                header = json.loads(header_line)
            except json.JSONDecodeError as exc:
                raise IOError(f"{self.path} is not a registry store") from exc
            if header.get("format") != "deskmark-registry":
                raise IOError(f"{self.path} is not a registry store")
            if header.get("version") != STORE_VERSION:
                raise IOError(f"unsupported store version {header.get('version')}")
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = ManifestRecord.from_line(line)
                except (json.JSONDecodeError, KeyError, ValueError):
                    continue  # partial trailing line from an interrupted write
                self._records[rec.uuid] = rec

    def __len__(self) -> int:
        return len(self._records)

    def register(self, uid: uuidlib.UUID, img: np.ndarray, manifest: bytes) -> ManifestRecord:
        """Persists a new binding; raises DuplicateUuid if uid already exists."""
        with self._lock:
            if uid in self._records:
                raise DuplicateUuid(str(uid))
            rec = ManifestRecord(
                uuid=uid,
                fingerprint=fingerprint(img),
                manifest=manifest,
                created_at=time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            )
            with open(self.path, "a") as fh:
                fh.write(rec.to_line() + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            self._records[uid] = rec
        return rec

    def lookup(self, uid: uuidlib.UUID) -> ManifestRecord | None:
        return self._records.get(uid)

    def compact(self):
        """Rewrites the file, dropping any unreadable partial lines."""
        with self._lock:
            tmp = self.path.with_name(self.path.name + ".tmp")
            with open(tmp, "w") as fh:
                fh.write(json.dumps({"format": "deskmark-registry",
                                     "version": STORE_VERSION}) + "\n")
                for rec in self._records.values():
                    fh.write(rec.to_line() + "\n")
                fh.flush()
                os.fsync(fh.fileno())
            os.replace(tmp, self.path)


class VerifyStatus(Enum):
    AUTHENTIC = "authentic"
    FINGERPRINT_MISMATCH = "fingerprint_mismatch"
    NOT_FOUND = "not_found"
    DECODE_FAILED = "decode_failed"


@dataclass
class VerifyResult:
    status: VerifyStatus
    record: ManifestRecord | None = None
    payload_uuid: uuidlib.UUID | None = None
    corrected: int | None = None
    fingerprint_distance: int | None = None


def verify(img: np.ndarray, model: WatermarkModel, store: ManifestStore,
           threshold: int = DEFAULT_HAMMING_THRESHOLD,
           ecc: payload.EccConfig | None = None) -> VerifyResult:
    """Watermark decode -> error correction -> lookup -> fingerprint check."""
    ecc = ecc or payload.EccConfig()
    soft = model.extract(img)
    hard = (soft > 0.5).astype(np.uint8)
    decoded = payload.decode_uuid(hard, ecc)
    if decoded is None:
        return VerifyResult(status=VerifyStatus.DECODE_FAILED)
    rec = store.lookup(decoded.payload)
    if rec is None:
        return VerifyResult(status=VerifyStatus.NOT_FOUND,
                            payload_uuid=decoded.payload, corrected=decoded.corrected)
    dist = hamming(fingerprint(img), rec.fingerprint)
    status = VerifyStatus.AUTHENTIC if dist <= threshold else VerifyStatus.FINGERPRINT_MISMATCH
    return VerifyResult(status=status, record=rec, payload_uuid=decoded.payload,
                        corrected=decoded.corrected, fingerprint_distance=dist)
