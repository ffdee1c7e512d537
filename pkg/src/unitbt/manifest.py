"""JSON-Lines manifests and raw float32 audio files."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .errors import DataError

PROVENANCES = ("real", "synthetic")
_OPTIONAL = ("z", "z_reduced", "durations", "audio", "speaker", "score")


@dataclass
class Row:
    id: str
    y: str
    provenance: str
    z: list[int] | None = None
    z_reduced: list[int] | None = None
    durations: list[int] | None = None
    audio: str | None = None
    speaker: int | None = None
    score: float | None = None
    extra: dict = field(default_factory=dict, repr=False)

    @property
    def tokens(self) -> list[str]:
        return self.y.split()

    def to_json(self) -> dict:
        out: dict = {"id": self.id, "y": self.y}
        for k in _OPTIONAL:
            v = getattr(self, k)
            if v is not None:
                out[k] = v
        out["provenance"] = self.provenance
        return out

    def validate(self) -> None:
        if self.provenance not in PROVENANCES:
            raise DataError(f"row {self.id}: provenance must be one of {PROVENANCES}")
        zr = self.z_reduced
        if zr is not None and any(a == b for a, b in zip(zr, zr[1:])):
            raise DataError(f"row {self.id}: z_reduced has adjacent duplicates")
        if self.durations is not None:
            if zr is None or len(zr) != len(self.durations):
                raise DataError(f"row {self.id}: durations do not align with z_reduced")
            if any(d < 1 for d in self.durations):
                raise DataError(f"row {self.id}: durations must be >= 1")


def row_from_json(obj: dict) -> Row:
    if "id" not in obj or "y" not in obj:
        raise DataError(f"manifest row lacks id/y: {obj!r}")
    if "provenance" not in obj:
        raise DataError(f"row {obj['id']}: provenance is mandatory")
    known = {"id", "y", "provenance", *_OPTIONAL}
    row = Row(
        id=str(obj["id"]),
        y=str(obj["y"]),
        provenance=obj["provenance"],
        **{k: obj.get(k) for k in _OPTIONAL},
        extra={k: v for k, v in obj.items() if k not in known},
    )
    row.validate()
    return row


def write_manifest(path, rows: Iterable[Row]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    seen: set[str] = set()
    lines = []
    for r in rows:
        if r.id in seen:
            raise DataError(f"duplicate id {r.id} in {path}")
        seen.add(r.id)
        r.validate()
        lines.append(json.dumps(r.to_json(), ensure_ascii=False, separators=(",", ":")))
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_manifest(path) -> list[Row]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    rows = []
    seen: set[str] = set()
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DataError(f"{path}:{lineno}: invalid JSON ({exc})") from None
        row = row_from_json(obj)
        if row.id in seen:
            raise DataError(f"{path}:{lineno}: duplicate id {row.id}")
        seen.add(row.id)
        rows.append(row)
    return rows


def write_audio(path, wave) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.asarray(wave, dtype="<f4").tobytes())


def read_audio(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) % 4:
        raise DataError(f"{path}: size is not a multiple of 4 bytes")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def load_row_audio(row: Row, base_dir) -> np.ndarray:
    if row.audio is None:
        raise DataError(f"row {row.id}: no audio path")
    p = Path(base_dir) / row.audio
    if not p.exists():
        raise DataError(f"row {row.id}: audio file missing ({p})")
    return read_audio(p)


def file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
