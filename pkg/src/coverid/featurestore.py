"""Binary interchange for frame features and teacher vectors, plus the track manifest.

File layout (little-endian throughout):

    magic   4 bytes   b"LIVF" (frame features) or b"LIVT" (teacher vectors)
    version uint16    currently 1
    count   uint32    number of records
    record  int32 segment_index, uint32 n_frames (1 for teacher vectors),
            uint32 dim, then n_frames * dim IEEE-754 binary32 values,
            row-major

The payload stays binary32 for bit-exact interchange; consumers upcast
internally as needed.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

MAGIC_FEATURES = b"LIVF"
MAGIC_TEACHER = b"LIVT"
FORMAT_VERSION = 1

# Manifest vocalness scores are one per non-overlapping window of this length.
VOCALNESS_WINDOW_S = 3.0

SPLITS = frozenset({"train", "val", "test", "eval-only"})

_FILE_HEADER = struct.Struct("<4sHI")
_RECORD_HEADER = struct.Struct("<iII")


class FeatureStoreError(Exception):
    """Base error for feature-file and manifest problems."""


class BadMagicError(FeatureStoreError):
    """File does not start with a known magic."""


class VersionMismatchError(FeatureStoreError):
    """File carries an unsupported format version."""


class TruncatedFileError(FeatureStoreError):
    """File ends before the declared records are complete."""


class ManifestError(FeatureStoreError):
    """Manifest document violates the schema or an invariant."""


@dataclass
class FrameFeatures:
    """Per-frame hidden states for one fixed-length segment.

    ``data`` is an (n_frames, dim) float32 matrix, row-major.
    """

    segment_index: int
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 2:
            raise ValueError(f"frame features must be 2-D, got shape {self.data.shape}")
        if self.n_frames <= 0 or self.dim <= 0:
            raise ValueError(f"frame features need positive shape, got {self.data.shape}")

    @property
    def n_frames(self) -> int:
        return self.data.shape[0]

    @property
    def dim(self) -> int:
        return self.data.shape[1]


@dataclass
class TeacherEmbedding:
    """Fixed target-space vector for one segment (or one whole track)."""

    segment_index: int
    data: np.ndarray

    def __post_init__(self) -> None:
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 1:
            raise ValueError(f"teacher embedding must be 1-D, got shape {self.data.shape}")
        if self.dim <= 0:
            raise ValueError("teacher embedding needs positive dim")

    @property
    def dim(self) -> int:
        return self.data.shape[0]


Record = FrameFeatures | TeacherEmbedding


def write_feature_file(path: str | Path, records: list[FrameFeatures] | list[TeacherEmbedding]) -> None:
    """Write records to ``path``. The magic is picked from the record type.

    Teacher records must all share one dim; feature records may vary.
    """
    if not records:
        raise ValueError("record list is empty")
    kinds = {type(r) for r in records}
    if len(kinds) != 1:
        raise ValueError("cannot mix frame features and teacher vectors in one file")
    is_teacher = isinstance(records[0], TeacherEmbedding)
    if is_teacher:
        dims = {r.dim for r in records}
        if len(dims) != 1:
            raise ValueError(f"inconsistent teacher dims in one file: {sorted(dims)}")
        if any(not np.any(r.data) for r in records):
            raise ValueError("teacher embedding is the zero vector")
    magic = MAGIC_TEACHER if is_teacher else MAGIC_FEATURES

    out = bytearray()
    out += _FILE_HEADER.pack(magic, FORMAT_VERSION, len(records))
    for rec in records:
        if is_teacher:
            n_frames, dim = 1, rec.dim
        else:
            n_frames, dim = rec.n_frames, rec.dim
        out += _RECORD_HEADER.pack(rec.segment_index, n_frames, dim)
        out += rec.data.astype("<f4", copy=False).tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def read_feature_file(path: str | Path) -> list[FrameFeatures] | list[TeacherEmbedding]:
    """Exact inverse of :func:`write_feature_file`.

    Raises :class:`BadMagicError`, :class:`VersionMismatchError`, or
    :class:`TruncatedFileError` for the respective corruptions.
    """
    blob = Path(path).read_bytes()
    if len(blob) < _FILE_HEADER.size:
        raise TruncatedFileError(f"{path}: file shorter than the {_FILE_HEADER.size}-byte header")
    magic, version, count = _FILE_HEADER.unpack_from(blob, 0)
    if magic not in (MAGIC_FEATURES, MAGIC_TEACHER):
        raise BadMagicError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"{path}: unsupported version {version}, expected {FORMAT_VERSION}")
    is_teacher = magic == MAGIC_TEACHER

    records: list[Record] = []
    offset = _FILE_HEADER.size
    for i in range(count):
        if offset + _RECORD_HEADER.size > len(blob):
            raise TruncatedFileError(f"{path}: truncated in record {i} header")
        segment_index, n_frames, dim = _RECORD_HEADER.unpack_from(blob, offset)
        offset += _RECORD_HEADER.size
        if n_frames == 0 or dim == 0:
            raise FeatureStoreError(f"{path}: record {i} has zero shape {n_frames}x{dim}")
        nbytes = n_frames * dim * 4
        if offset + nbytes > len(blob):
            raise TruncatedFileError(f"{path}: truncated in record {i} payload")
        flat = np.frombuffer(blob, dtype="<f4", count=n_frames * dim, offset=offset)
        offset += nbytes
        if is_teacher:
            if n_frames != 1:
                raise FeatureStoreError(f"{path}: teacher record {i} has n_frames={n_frames}, expected 1")
            records.append(TeacherEmbedding(segment_index, flat.copy()))
        else:
            records.append(FrameFeatures(segment_index, flat.reshape(n_frames, dim).copy()))
    return records


def expected_file_size(shapes: list[tuple[int, int]]) -> int:
    """Exact file size in bytes for records with the given (n_frames, dim) shapes."""
    return _FILE_HEADER.size + sum(_RECORD_HEADER.size + n * d * 4 for n, d in shapes)


@dataclass
class TrackRecord:
    """One catalog entry: identity, version-group label, split, and score/feature paths."""

    track_id: str
    clique_id: str
    split: str
    duration_s: float
    vocalness: list[float]
    feature_path: str
    teacher_path: str | None = None
    editorial_lyrics: str | None = None

    def validate(self) -> None:
        if not self.track_id:
            raise ManifestError("track_id must be a nonempty string")
        if not self.clique_id:
            raise ManifestError(f"track {self.track_id!r}: clique_id must be nonempty")
        if self.split not in SPLITS:
            raise ManifestError(
                f"track {self.track_id!r}: unknown split {self.split!r}, expected one of {sorted(SPLITS)}"
            )
        if not (self.duration_s >= 0.0):
            raise ManifestError(f"track {self.track_id!r}: duration_s must be nonnegative")
        expected = math.ceil(self.duration_s / VOCALNESS_WINDOW_S)
        if len(self.vocalness) != expected:
            raise ManifestError(
                f"track {self.track_id!r}: vocalness length {len(self.vocalness)} "
                f"does not match ceil({self.duration_s}/{VOCALNESS_WINDOW_S:g}) = {expected}"
            )
        for v in self.vocalness:
            if not (0.0 <= v <= 1.0):
                raise ManifestError(f"track {self.track_id!r}: vocalness value {v} outside [0, 1]")
        if not self.feature_path:
            raise ManifestError(f"track {self.track_id!r}: feature_path must be nonempty")


@dataclass
class Manifest:
    """Validated catalog of tracks with clique labels and splits."""

    tracks: list[TrackRecord]
    format_version: int = FORMAT_VERSION
    base_dir: Path = field(default_factory=Path)

    def by_id(self) -> dict[str, TrackRecord]:
        return {t.track_id: t for t in self.tracks}

    def split(self, name: str) -> list[TrackRecord]:
        return [t for t in self.tracks if t.split == name]

    def cliques(self) -> dict[str, list[str]]:
        out: dict[str, list[str]] = {}
        for t in self.tracks:
            out.setdefault(t.clique_id, []).append(t.track_id)
        return out

    def resolve(self, path: str) -> Path:
        """Resolve a manifest-relative file path."""
        p = Path(path)
        return p if p.is_absolute() else self.base_dir / p


_TRACK_KEYS = {
    "track_id", "clique_id", "split", "duration_s", "vocalness",
    "feature_path", "teacher_path", "editorial_lyrics",
}


def load_manifest(path: str | Path) -> Manifest:
    """Load and eagerly validate a manifest JSON document.

    Every malformed input raises :class:`ManifestError`; a partially
    constructed manifest is never returned.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: manifest root must be a JSON object")
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ManifestError(f"{path}: unsupported manifest format_version {version!r}")
    raw_tracks = doc.get("tracks")
    if not isinstance(raw_tracks, list):
        raise ManifestError(f"{path}: 'tracks' must be a list")

    tracks: list[TrackRecord] = []
    seen: set[str] = set()
    for i, raw in enumerate(raw_tracks):
        if not isinstance(raw, dict):
            raise ManifestError(f"{path}: track entry {i} is not an object")
        unknown = set(raw) - _TRACK_KEYS
        if unknown:
            raise ManifestError(f"{path}: track entry {i} has unknown keys {sorted(unknown)}")
        try:
            rec = TrackRecord(
                track_id=raw["track_id"],
                clique_id=raw["clique_id"],
                split=raw["split"],
                duration_s=float(raw["duration_s"]),
                vocalness=[float(v) for v in raw["vocalness"]],
                feature_path=raw["feature_path"],
                teacher_path=raw.get("teacher_path"),
                editorial_lyrics=raw.get("editorial_lyrics"),
            )
        except KeyError as exc:
            raise ManifestError(f"{path}: track entry {i} is missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            raise ManifestError(f"{path}: track entry {i}: {exc}") from exc
        rec.validate()
        if rec.track_id in seen:
            raise ManifestError(f"{path}: duplicate track_id {rec.track_id!r}")
        seen.add(rec.track_id)
        tracks.append(rec)
    return Manifest(tracks=tracks, base_dir=path.parent)


def save_manifest(manifest: Manifest, path: str | Path) -> None:
    """Serialize a manifest to JSON (inverse of :func:`load_manifest`)."""
    doc = {
        "format_version": manifest.format_version,
        "tracks": [
            {
                "track_id": t.track_id,
                "clique_id": t.clique_id,
                "split": t.split,
                "duration_s": t.duration_s,
                "vocalness": t.vocalness,
                "feature_path": t.feature_path,
                **({"teacher_path": t.teacher_path} if t.teacher_path is not None else {}),
                **({"editorial_lyrics": t.editorial_lyrics} if t.editorial_lyrics is not None else {}),
            }
            for t in manifest.tracks
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
