"""Vocal segmentation: hand-traced golden fixtures and invariants."""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from coverid.featurestore import TrackRecord
from coverid.preprocess import (
    Excluded, SegmenterConfig, VocalSegment, extract_segments, global_vocalness,
    segment_manifest,
)


def _track(scores: list[float], duration: float | None = None, track_id: str = "t") -> TrackRecord:
    duration = duration if duration is not None else 3.0 * len(scores)
    return TrackRecord(track_id=track_id, clique_id="c", split="train",
                       duration_s=duration, vocalness=scores, feature_path="x")


def _spans(result) -> list[tuple[float, float]]:
    assert not isinstance(result, Excluded)
    return [(s.start_s, s.end_s) for s in result]


class TestGlobalVocalness:
    def test_all_ones(self):
        assert global_vocalness([1.0, 1.0, 1.0]) == 1.0

    def test_symmetric_pair(self):
        assert global_vocalness([0.2, 0.8]) == 0.5

    def test_hand_mean(self):
        assert global_vocalness([0.0, 0.0, 0.9]) == pytest.approx(0.3)

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            global_vocalness([])


class TestGoldenFixtures:
    def test_f1_two_vocal_bursts_120s(self):
        # 120 s track, windows 2-4 and 30-32 vocal: regions [6,15] and [90,99],
        # padded to [0,25] and [80,109], both shorter than 30 s.
        scores = [0.0] * 40
        for i in (2, 3, 4, 30, 31, 32):
            scores[i] = 1.0
        result = extract_segments(_track(scores), SegmenterConfig(lambda_=0.1))
        assert _spans(result) == [(0.0, 25.0), (80.0, 109.0)]
        assert [s.pad_right for s in result] == [True, True]
        assert [s.pad_left for s in result] == [False, False]

    def test_f2_all_zero_excluded(self):
        result = extract_segments(_track([0.0] * 10), SegmenterConfig(lambda_=0.5))
        assert isinstance(result, Excluded)
        assert result.global_score == 0.0

    def test_f3_single_window_track(self):
        result = extract_segments(_track([1.0], duration=3.0), SegmenterConfig())
        assert _spans(result) == [(0.0, 3.0)]
        assert result[0].pad_right is True

    def test_f4_interior_burst_pads_both_sides(self):
        # 60 s track, windows 5-6 vocal: region [15,21] padded to [5,31].
        scores = [0.0] * 20
        scores[5] = scores[6] = 1.0
        result = extract_segments(_track(scores), SegmenterConfig(lambda_=0.1))
        assert _spans(result) == [(5.0, 31.0)]
        assert result[0].pad_right is True

    def test_f5_padded_regions_overlap_and_merge(self):
        # Regions [0,6] and [21,27] pad to [0,16] and [11,37]: one merged
        # region, truncated to the 30 s target.
        scores = [0.0] * 20
        for i in (0, 1, 7, 8):
            scores[i] = 1.0
        result = extract_segments(_track(scores), SegmenterConfig(lambda_=0.1))
        assert _spans(result) == [(0.0, 30.0)]
        assert result[0].pad_right is False

    def test_f6_touching_regions_merge(self):
        # pad_s=9: [0,3]->[0,12] and [21,24]->[12,33] touch at 12 exactly.
        scores = [0.0] * 20
        scores[0] = scores[7] = 1.0
        result = extract_segments(_track(scores), SegmenterConfig(lambda_=0.1, pad_s=9.0))
        assert _spans(result) == [(0.0, 30.0)]

    def test_f7_global_score_exactly_lambda_included(self):
        # Mean is exactly 0.3; exclusion is strictly below the threshold.
        scores = [0.0] * 30
        for i in range(15, 24):
            scores[i] = 1.0
        result = extract_segments(_track(scores), SegmenterConfig(lambda_=0.3))
        assert _spans(result) == [(35.0, 65.0)]
        assert result[0].pad_right is False

    def test_f8_window_exactly_at_keep_threshold(self):
        scores = [0.5, 0.5, 0.5, 0.5]
        result = extract_segments(_track(scores), SegmenterConfig())
        assert _spans(result) == [(0.0, 12.0)]

    def test_f9_sparse_vocals_below_lambda_excluded(self):
        result = extract_segments(_track([0.4, 0.4, 0.0, 0.0]), SegmenterConfig())
        assert isinstance(result, Excluded)
        assert result.global_score == pytest.approx(0.2)

    def test_f10_two_disjoint_segments(self):
        scores = [0.0] * 40
        scores[0] = scores[20] = 1.0
        result = extract_segments(_track(scores), SegmenterConfig(lambda_=0.0))
        assert _spans(result) == [(0.0, 13.0), (50.0, 73.0)]
        assert all(s.pad_right for s in result)

    def test_f11_duration_not_multiple_of_window(self):
        # ceil(10/3) = 4 windows; the last window is clipped to the duration.
        result = extract_segments(_track([1.0] * 4, duration=10.0), SegmenterConfig())
        assert _spans(result) == [(0.0, 10.0)]
        assert result[0].pad_right is True

    def test_f12_chunking_mode_tiles_long_region(self):
        scores = [1.0] * 34
        result = extract_segments(_track(scores, duration=100.0),
                                  SegmenterConfig(chunking=True))
        assert _spans(result) == [(0.0, 30.0), (30.0, 60.0), (60.0, 90.0), (90.0, 100.0)]
        assert [s.pad_right for s in result] == [False, False, False, True]

    def test_truncation_without_chunking_keeps_first_30s(self):
        scores = [1.0] * 34
        result = extract_segments(_track(scores, duration=100.0), SegmenterConfig())
        assert _spans(result) == [(0.0, 30.0)]


class TestConfigValidation:
    def test_lambda_range(self):
        with pytest.raises(ValueError):
            SegmenterConfig(lambda_=1.5)

    def test_window_positive(self):
        with pytest.raises(ValueError):
            SegmenterConfig(window_s=0.0)

    def test_target_at_least_window(self):
        with pytest.raises(ValueError):
            SegmenterConfig(window_s=5.0, target_s=3.0)

    def test_pad_nonnegative(self):
        with pytest.raises(ValueError):
            SegmenterConfig(pad_s=-1.0)


def _random_track(rng: np.random.Generator, track_id: str = "t") -> TrackRecord:
    n = int(rng.integers(1, 60))
    scores = rng.uniform(0.0, 1.0, size=n).round(3).tolist()
    duration = 3.0 * n - float(rng.uniform(0.0, 2.99))
    if math.ceil(duration / 3.0) != n:
        duration = 3.0 * n
    return _track(scores, duration=duration, track_id=track_id)


class TestInvariants:
    def test_lambda_monotonicity_1000_profiles(self):
        rng = np.random.default_rng(11)
        grid = [0.0, 0.1, 0.3, 0.5, 0.7, 0.9, 1.0]
        for _ in range(1000):
            track = _random_track(rng)
            included = [not isinstance(extract_segments(track, SegmenterConfig(lambda_=lam)),
                                       Excluded) for lam in grid]
            # once a track drops out at some lambda it stays out at higher ones
            for lo, hi in zip(included[1:], included[:-1]):
                assert (not hi) <= (not lo)

    @settings(max_examples=200, deadline=None)
    @given(data=st.data())
    def test_segments_sorted_disjoint_bounded(self, data):
        n = data.draw(st.integers(1, 50))
        scores = data.draw(st.lists(st.floats(0.0, 1.0), min_size=n, max_size=n))
        chunking = data.draw(st.booleans())
        track = _track(scores)
        result = extract_segments(track, SegmenterConfig(lambda_=0.0, chunking=chunking))
        if isinstance(result, Excluded):
            return
        prev_end = 0.0
        for seg in result:
            assert 0.0 <= seg.start_s < seg.end_s <= track.duration_s
            assert seg.end_s - seg.start_s <= 30.0 + 1e-9
            assert seg.start_s >= prev_end - 1e-12
            prev_end = seg.end_s

    def test_marked_windows_covered_with_chunking(self):
        rng = np.random.default_rng(7)
        cfg = SegmenterConfig(lambda_=0.0, chunking=True)
        for _ in range(200):
            track = _random_track(rng)
            result = extract_segments(track, cfg)
            if isinstance(result, Excluded):
                continue
            for i, v in enumerate(track.vocalness):
                if v < cfg.keep_threshold:
                    continue
                w_start = i * 3.0
                w_end = min(w_start + 3.0, track.duration_s)
                covered = sum(max(0.0, min(seg.end_s, w_end) - max(seg.start_s, w_start))
                              for seg in result)
                assert covered == pytest.approx(w_end - w_start, abs=1e-9)

    def test_idempotence(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            track = _random_track(rng)
            first = extract_segments(track, SegmenterConfig())
            second = extract_segments(track, SegmenterConfig())
            assert first == second

    def test_segment_manifest_keys(self):
        tracks = [_track([1.0] * 4, track_id="a"), _track([0.0] * 4, track_id="b")]
        out = segment_manifest(tracks, SegmenterConfig())
        assert set(out) == {"a", "b"}
        assert isinstance(out["b"], Excluded)
        assert isinstance(out["a"], list)
        assert out["a"] == [VocalSegment(0.0, 12.0, pad_right=True)]
