"""Vocalness filtering and vocal-segment extraction.

Per-window vocalness scores are inputs (no inference here). A track whose
mean score falls strictly below the exclusion threshold is dropped; otherwise
windows at or above the keep threshold are merged into contiguous regions,
symmetrically extended by real audio up to the pad length, merged again when
they overlap or touch, and finally truncated to the target segment length.
Segments shorter than the target are flagged for zero-padding at feature
time; zeros are appended on the right.
"""

from __future__ import annotations

from dataclasses import dataclass

from .featurestore import TrackRecord


@dataclass
class SegmenterConfig:
    window_s: float = 3.0
    keep_threshold: float = 0.5
    # Track-level exclusion threshold; the source experiments never pin this,
    # 0.3 keeps sparse-vocal tracks while dropping instrumentals.
    lambda_: float = 0.3
    pad_s: float = 10.0
    target_s: float = 30.0
    # Off by default: split over-long regions into consecutive target_s
    # chunks instead of keeping only the first.
    chunking: bool = False

    def __post_init__(self) -> None:
        if not (0.0 <= self.lambda_ <= 1.0):
            raise ValueError(f"lambda must be in [0, 1], got {self.lambda_}")
        if self.window_s <= 0:
            raise ValueError("window_s must be positive")
        if self.target_s < self.window_s:
            raise ValueError("target_s must be at least window_s")
        if self.pad_s < 0:
            raise ValueError("pad_s must be nonnegative")


@dataclass
class VocalSegment:
    """A contiguous vocal region, at most ``target_s`` long after truncation.

    ``pad_right`` marks segments shorter than the target; zeros are appended
    at feature time. ``pad_left`` is reserved (left zero-padding is never
    produced by this extractor).
    """

    start_s: float
    end_s: float
    pad_left: bool = False
    pad_right: bool = False


@dataclass
class Excluded:
    """Marker result for tracks filtered out at the track level."""

    global_score: float


def global_vocalness(scores: list[float]) -> float:
    """Arithmetic mean of the per-window scores."""
    if not scores:
        raise ValueError("score list is empty")
    return sum(scores) / len(scores)


def extract_segments(track: TrackRecord, cfg: SegmenterConfig | None = None) -> list[VocalSegment] | Excluded:
    """Turn per-window scores into vocal segments, or exclude the track.

    Tracks with no windows at all are treated as excluded.
    """
    cfg = cfg or SegmenterConfig()
    scores = track.vocalness
    if not scores:
        return Excluded(0.0)
    score = global_vocalness(scores)
    if score < cfg.lambda_:
        return Excluded(score)

    duration = track.duration_s
    regions = _merge_marked_windows(scores, cfg, duration)
    regions = [(max(0.0, s - cfg.pad_s), min(duration, e + cfg.pad_s)) for s, e in regions]
    regions = _merge_overlapping(regions)

    segments: list[VocalSegment] = []
    for start, end in regions:
        if cfg.chunking:
            pos = start
            while pos < end:
                seg_end = min(pos + cfg.target_s, end)
                segments.append(VocalSegment(pos, seg_end, pad_right=seg_end - pos < cfg.target_s))
                pos = seg_end
        else:
            seg_end = min(start + cfg.target_s, end)
            segments.append(VocalSegment(start, seg_end, pad_right=seg_end - start < cfg.target_s))
    return segments


def _merge_marked_windows(scores: list[float], cfg: SegmenterConfig, duration: float) -> list[tuple[float, float]]:
    """Contiguous regions covered by consecutive windows with score >= keep_threshold."""
    regions: list[tuple[float, float]] = []
    run_start: int | None = None
    for i, v in enumerate(scores):
        if v >= cfg.keep_threshold:
            if run_start is None:
                run_start = i
        elif run_start is not None:
            regions.append((run_start * cfg.window_s, min(i * cfg.window_s, duration)))
            run_start = None
    if run_start is not None:
        regions.append((run_start * cfg.window_s, min(len(scores) * cfg.window_s, duration)))
    return regions


def _merge_overlapping(regions: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """Merge regions that overlap or touch; input is already sorted by start."""
    merged: list[tuple[float, float]] = []
    for start, end in regions:
        if merged and start <= merged[-1][1]:
            merged[-1] = (merged[-1][0], max(merged[-1][1], end))
        else:
            merged.append((start, end))
    return merged


def segment_manifest(tracks: list[TrackRecord], cfg: SegmenterConfig | None = None) -> dict[str, list[VocalSegment] | Excluded]:
    """Run :func:`extract_segments` over every track, keyed by track id."""
    cfg = cfg or SegmenterConfig()
    return {t.track_id: extract_segments(t, cfg) for t in tracks}
