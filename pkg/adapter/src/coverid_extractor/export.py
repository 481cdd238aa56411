"""Export real tracks into the coverid interchange format.

For every track the job either carries precomputed vocal segments or runs
in raw mode, tiling the duration into fixed windows. Each segment becomes
one FrameFeatures record; when the track has lyrics, each segment also gets
one TeacherEmbedding record holding the (shared) lyrics vector, so the
records pair up by segment index exactly as the trainer expects.

Per-track failures (undecodable audio, provider errors) are logged and
collected; the job continues and the emitted manifest lists only the tracks
that exported cleanly. Provider construction failures abort the job: no
track can succeed without the model.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from concurrent.futures.process import BrokenProcessPool
from dataclasses import dataclass, field
from pathlib import Path

from coverid.featurestore import (
    FrameFeatures, Manifest, TeacherEmbedding, TrackRecord, save_manifest,
    write_feature_file,
)

from .providers import (
    FeatureProvider, TextProvider, load_feature_provider, load_text_provider,
)

log = logging.getLogger("coverid_extractor")

VOCALNESS_WINDOW_S = 3.0


class ExportError(Exception):
    """The job as a whole could not produce a manifest."""


@dataclass
class AudioTrack:
    track_id: str
    clique_id: str
    split: str
    audio_path: str
    duration_s: float
    lyrics: str | None = None
    segments: list[tuple[float, float]] | None = None

    def __post_init__(self) -> None:
        if not self.track_id or not self.clique_id:
            raise ValueError("track_id and clique_id must be nonempty")
        if not (self.duration_s > 0.0):
            raise ValueError(f"track {self.track_id!r}: duration_s must be positive")
        if self.segments is not None:
            if not self.segments:
                raise ValueError(f"track {self.track_id!r}: empty segment list")
            self.segments = [(float(s), float(e)) for s, e in self.segments]
            for s, e in self.segments:
                if not (0.0 <= s < e <= self.duration_s + 1e-9):
                    raise ValueError(
                        f"track {self.track_id!r}: segment ({s}, {e}) outside "
                        f"[0, {self.duration_s}]")


@dataclass
class ExportJob:
    tracks: list[AudioTrack]
    out_dir: str | Path
    feature_model: str = "stub"
    text_model: str = "stub"
    raw_window_s: float = 30.0

    def __post_init__(self) -> None:
        if not self.tracks:
            raise ValueError("job has no tracks")
        ids = [t.track_id for t in self.tracks]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate track_id in job")
        if not (self.raw_window_s > 0.0):
            raise ValueError("raw_window_s must be positive")
        self.out_dir = Path(self.out_dir)


@dataclass
class ExportResult:
    manifest_path: Path
    exported: list[str]
    failed: dict[str, str] = field(default_factory=dict)


def _raw_segments(duration_s: float, window_s: float) -> list[tuple[float, float]]:
    n = math.ceil(duration_s / window_s)
    return [(i * window_s, min((i + 1) * window_s, duration_s)) for i in range(n)]


def _export_one(track: AudioTrack, out_dir: Path, raw_window_s: float,
                features: FeatureProvider, text: TextProvider) -> TrackRecord:
    spans = track.segments or _raw_segments(track.duration_s, raw_window_s)
    feature_path = f"features/{track.track_id}.livf"
    records = [FrameFeatures(i, features.segment_features(Path(track.audio_path), s, e))
               for i, (s, e) in enumerate(spans)]
    write_feature_file(out_dir / feature_path, records)

    teacher_path = None
    if track.lyrics is not None:
        vec = text.embed(track.lyrics)
        teacher_path = f"teachers/{track.track_id}.livt"
        write_feature_file(out_dir / teacher_path,
                           [TeacherEmbedding(i, vec) for i in range(len(spans))])

    n_windows = math.ceil(track.duration_s / VOCALNESS_WINDOW_S)
    return TrackRecord(
        track_id=track.track_id, clique_id=track.clique_id, split=track.split,
        duration_s=track.duration_s, vocalness=[1.0] * n_windows,
        feature_path=feature_path, teacher_path=teacher_path,
        editorial_lyrics=track.lyrics,
    )


_WORKER: dict = {}


def _init_worker(feature_model: str, text_model: str) -> None:
    _WORKER["features"] = load_feature_provider(feature_model)
    _WORKER["text"] = load_text_provider(text_model)


def _worker_export(track: AudioTrack, out_dir: Path,
                   raw_window_s: float) -> tuple[str, TrackRecord | None, str | None]:
    try:
        rec = _export_one(track, out_dir, raw_window_s,
                          _WORKER["features"], _WORKER["text"])
        return track.track_id, rec, None
    except Exception as exc:
        return track.track_id, None, f"{type(exc).__name__}: {exc}"


def export_features(job: ExportJob, workers: int = 1,
                    feature_provider: FeatureProvider | None = None,
                    text_provider: TextProvider | None = None) -> ExportResult:
    """Run the job and write manifest.json plus the per-track binary files.

    Explicit provider arguments override the job's model identifiers (they
    also force single-process mode, since live model handles do not cross
    process boundaries).
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    out_dir = Path(job.out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    (out_dir / "teachers").mkdir(parents=True, exist_ok=True)

    inline = workers == 1 or feature_provider is not None or text_provider is not None
    results: list[tuple[str, TrackRecord | None, str | None]] = []
    if inline:
        # a provider that cannot be built fails every track: abort here
        features = feature_provider or load_feature_provider(job.feature_model)
        text = text_provider or load_text_provider(job.text_model)
        for track in job.tracks:
            try:
                rec = _export_one(track, out_dir, job.raw_window_s, features, text)
                results.append((track.track_id, rec, None))
            except Exception as exc:
                results.append((track.track_id, None, f"{type(exc).__name__}: {exc}"))
    else:
        try:
            with ProcessPoolExecutor(max_workers=workers, initializer=_init_worker,
                                     initargs=(job.feature_model, job.text_model)) as pool:
                futures = [pool.submit(_worker_export, t, out_dir, job.raw_window_s)
                           for t in job.tracks]
                results = [f.result() for f in futures]
        except BrokenProcessPool as exc:
            raise ExportError(f"worker pool failed to start (bad model spec?): {exc}") from exc

    records: list[TrackRecord] = []
    failed: dict[str, str] = {}
    for track_id, rec, error in results:
        if rec is not None:
            records.append(rec)
        else:
            failed[track_id] = error or "unknown error"
            log.error("track %s failed: %s", track_id, error)

    if not records:
        raise ExportError(f"every track failed: {failed}")

    manifest_path = out_dir / "manifest.json"
    save_manifest(Manifest(tracks=records), manifest_path)
    log.info("exported %d/%d tracks to %s", len(records), len(job.tracks), out_dir)
    return ExportResult(manifest_path=manifest_path,
                        exported=[r.track_id for r in records], failed=failed)
