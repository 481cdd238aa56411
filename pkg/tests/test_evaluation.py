"""Retrieval metrics, alignment stats, transcript metrics, and significance tests."""

from __future__ import annotations

import math
from fractions import Fraction
from itertools import product

import numpy as np
import pytest

from coverid.evaluation import (
    MetricReport, QueryJudgment, alignment_stats, hallucination_count,
    holm_bonferroni, judgments_from_manifest, load_metric_report, mcnemar,
    retrieval_metrics, save_metric_report, significance_report, tokenize,
    wer, wilcoxon_signed_rank,
)
from coverid.featurestore import Manifest, TrackRecord
from coverid.retrieval import RankedList, TrackEmbedding


def _judgment(qid: str, ranked: list[str], relevant: set[str]) -> QueryJudgment:
    scores = [1.0 - 0.01 * i for i in range(len(ranked))]
    return QueryJudgment(query_id=qid, relevant_ids=frozenset(relevant),
                         ranked=RankedList(qid, ranked, scores))


def oracle_metrics(judgments: list[QueryJudgment]) -> tuple[float, float, float]:
    """Loop-by-the-definition reference for MR1, HR@1, MAP@10."""
    firsts, hits, aps = [], [], []
    for j in judgments:
        first = None
        for rank, tid in enumerate(j.ranked.track_ids, start=1):
            if tid in j.relevant_ids:
                first = rank
                break
        firsts.append(first)
        hits.append(1.0 if first == 1 else 0.0)
        seen = 0
        ap = 0.0
        for rank, tid in enumerate(j.ranked.track_ids[:10], start=1):
            if tid in j.relevant_ids:
                seen += 1
                ap += seen / rank
        aps.append(ap / min(len(j.relevant_ids), 10))
    return (sum(firsts) / len(firsts), sum(hits) / len(hits), sum(aps) / len(aps))


class TestRetrievalMetrics:
    def test_worked_example(self):
        # q1: relevant at positions 1 and 3; q2: single relevant at position 2
        j1 = _judgment("q1", ["t1", "t2", "t3"], {"t1", "t3"})
        j2 = _judgment("q2", ["t1", "t2", "t3"], {"t2"})
        report = retrieval_metrics([j1, j2])
        assert report.mr1 == pytest.approx(1.5, abs=1e-9)
        assert report.hr1 == pytest.approx(0.5, abs=1e-9)
        # AP(q1) = (1/2)(1/1 + 2/3) = 5/6, AP(q2) = 1/2 -> mean 2/3
        assert report.map10 == pytest.approx(2.0 / 3.0, abs=1e-9)
        assert report.n_queries == 2
        assert report.first_ranks == [1, 2]
        assert report.hits == [1, 0]

    def test_perfect_ranking_hits_ceiling(self):
        judgments = [_judgment(f"q{i}", [f"r{i}", "x", "y"], {f"r{i}"})
                     for i in range(5)]
        report = retrieval_metrics(judgments)
        assert report.mr1 == 1.0
        assert report.hr1 == 1.0
        assert report.map10 == 1.0

    def test_matches_oracle_on_random_judgments(self):
        rng = np.random.default_rng(0)
        for _ in range(500):
            n_catalog = int(rng.integers(3, 30))
            ids = [f"t{i}" for i in range(n_catalog)]
            judgments = []
            for q in range(int(rng.integers(1, 8))):
                ranked = list(rng.permutation(ids))
                n_rel = int(rng.integers(1, n_catalog))
                relevant = set(rng.choice(ids, size=n_rel, replace=False))
                judgments.append(_judgment(f"q{q}", ranked, relevant))
            report = retrieval_metrics(judgments)
            mr1, hr1, map10 = oracle_metrics(judgments)
            assert report.mr1 == pytest.approx(mr1, abs=1e-12)
            assert report.hr1 == pytest.approx(hr1, abs=1e-12)
            assert report.map10 == pytest.approx(map10, abs=1e-12)

    def test_empty_judgments_rejected(self):
        with pytest.raises(ValueError):
            retrieval_metrics([])

    def test_judgment_validation(self):
        with pytest.raises(ValueError, match="empty relevant"):
            _judgment("q", ["a"], set())
        with pytest.raises(ValueError, match="itself"):
            _judgment("q", ["q", "a"], {"q"})
        with pytest.raises(ValueError, match="absent"):
            _judgment("q", ["a"], {"b"})

    def test_report_roundtrip(self, tmp_path):
        j = _judgment("q1", ["a", "b"], {"b"})
        report = retrieval_metrics([j])
        save_metric_report(tmp_path / "r.json", report)
        loaded = load_metric_report(tmp_path / "r.json")
        assert loaded == report


class TestJudgmentsFromManifest:
    def _manifest(self) -> Manifest:
        def rec(tid, clique, split):
            return TrackRecord(tid, clique, split, 30.0, [1.0] * 10, f"f/{tid}.livf", None)
        return Manifest(tracks=[
            rec("a1", "cl_a", "test"), rec("a2", "cl_a", "test"),
            rec("b1", "cl_b", "train"), rec("solo", "cl_solo", "test"),
        ])

    def _rankings(self, ids: list[str]) -> list[RankedList]:
        return [RankedList(q, [t for t in ids if t != q],
                           [0.5] * (len(ids) - 1)) for q in ids]

    def test_singleton_cliques_dropped(self):
        m = self._manifest()
        judgments = judgments_from_manifest(m, self._rankings(["a1", "a2", "solo"]))
        assert [j.query_id for j in judgments] == ["a1", "a2"]
        assert judgments[0].relevant_ids == frozenset({"a2"})

    def test_split_filter(self):
        m = self._manifest()
        rankings = self._rankings(["a1", "a2", "b1", "solo"])
        judgments = judgments_from_manifest(m, rankings, split="test")
        assert [j.query_id for j in judgments] == ["a1", "a2"]

    def test_unknown_query_rejected(self):
        m = self._manifest()
        with pytest.raises(ValueError, match="unknown"):
            judgments_from_manifest(m, [RankedList("ghost", ["a1"], [0.1])])


class TestAlignment:
    def test_identical_pairs(self):
        v = np.array([0.2, -0.7, 1.0])
        mean, std = alignment_stats([(v, v.copy()), (2 * v, v.copy())])
        assert mean == pytest.approx(1.0, rel=1e-12)
        assert std == pytest.approx(0.0, abs=1e-12)

    def test_mixed_cosines_population_std(self):
        e1, e2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
        mean, std = alignment_stats([(e1, e1.copy()), (e1, e2)])
        assert mean == pytest.approx(0.5, rel=1e-12)
        assert std == pytest.approx(0.5, rel=1e-12)

    def test_track_level_equals_segment_level_for_single_segments(self):
        rng = np.random.default_rng(1)
        pairs = [(TrackEmbedding(f"t{i}", rng.normal(size=4)), rng.normal(size=4))
                 for i in range(6)]
        assert alignment_stats(pairs, "segment") == pytest.approx(
            alignment_stats(pairs, "track"), rel=1e-12)

    def test_track_level_averages_segments_first(self):
        teacher = np.array([1.0, 0.0])
        pairs = [
            (TrackEmbedding("t", np.array([1.0, 0.0])), teacher),
            (TrackEmbedding("t", np.array([0.0, 1.0])), teacher),
        ]
        mean, std = alignment_stats(pairs, "track")
        # mean student [0.5, 0.5] against teacher [1, 0]
        assert mean == pytest.approx(1.0 / np.sqrt(2.0), rel=1e-12)
        assert std == pytest.approx(0.0, abs=1e-12)

    def test_validation(self):
        with pytest.raises(ValueError):
            alignment_stats([])
        with pytest.raises(ValueError):
            alignment_stats([(np.ones(2), np.ones(2))], level="album")


class TestTranscriptMetrics:
    def test_tokenize_strips_punctuation_and_case(self):
        assert tokenize("Hello, World!") == ["hello", "world"]
        assert tokenize("don't stop") == ["dont", "stop"]
        assert tokenize("  ") == []

    def test_wer_identical_zero(self):
        assert wer("one two three", "one two three") == 0.0

    def test_wer_one_substitution(self):
        assert wer("a b c", "a x c") == pytest.approx(1.0 / 3.0, rel=1e-12)

    def test_wer_empty_hypothesis(self):
        assert wer("a b", "") == 1.0

    def test_wer_insertion_can_exceed_one(self):
        assert wer("a", "x y z") == 3.0

    def test_wer_token_list_inputs(self):
        assert wer(["a", "b"], ["a", "c"]) == 0.5

    def test_wer_empty_reference_rejected(self):
        with pytest.raises(ValueError):
            wer("", "something")

    def test_hallucination_defaults(self):
        assert hallucination_count("Thank you for watching the music") == 2
        assert hallucination_count("") == 0
        assert hallucination_count("Music music MUSIC") == 3

    def test_hallucination_word_boundaries(self):
        assert hallucination_count("musical musicians musicality") == 0

    def test_hallucination_custom_phrases(self):
        assert hallucination_count("la la la", phrases=("la",)) == 3
        with pytest.raises(ValueError):
            hallucination_count("x", phrases=())


def _independent_midranks(absd: list[float]) -> list[float]:
    out = []
    for v in absd:
        less = sum(1 for o in absd if o < v)
        equal = sum(1 for o in absd if o == v)
        out.append(less + (equal + 1) / 2.0)
    return out


def brute_wilcoxon_p(diffs: list[float]) -> tuple[float, float]:
    """Exact two-sided p by enumerating every sign assignment."""
    d = [x for x in diffs if x != 0.0]
    ranks = _independent_midranks([abs(x) for x in d])
    w_obs = sum(r for r, x in zip(ranks, d) if x > 0)
    ws = [sum(r for r, s in zip(ranks, signs) if s)
          for signs in product([0, 1], repeat=len(d))]
    total = len(ws)
    p_le = sum(1 for w in ws if w <= w_obs + 1e-12) / total
    p_ge = sum(1 for w in ws if w >= w_obs - 1e-12) / total
    return w_obs, min(1.0, 2.0 * min(p_le, p_ge))


class TestWilcoxon:
    def test_three_positive_diffs(self):
        result = wilcoxon_signed_rank([1.0, 2.0, 3.0])
        assert result.statistic == 6.0
        assert result.p_value == pytest.approx(0.25, abs=1e-12)
        assert result.exact and result.n == 3

    def test_zeros_dropped(self):
        with_zeros = wilcoxon_signed_rank([0.0, 1.0, 0.0, 2.0])
        without = wilcoxon_signed_rank([1.0, 2.0])
        assert with_zeros.p_value == without.p_value
        assert with_zeros.n == 2

    def test_all_zero_rejected(self):
        with pytest.raises(ValueError):
            wilcoxon_signed_rank([0.0, 0.0])

    def test_antisymmetry(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            d = rng.normal(size=int(rng.integers(2, 12)))
            a = wilcoxon_signed_rank(d)
            b = wilcoxon_signed_rank(-d)
            assert a.p_value == pytest.approx(b.p_value, abs=1e-12)
            assert a.statistic + b.statistic == pytest.approx(
                a.n * (a.n + 1) / 2.0, abs=1e-12)

    def test_exact_path_matches_enumeration(self):
        rng = np.random.default_rng(3)
        for _ in range(60):
            n = int(rng.integers(1, 11))
            d = np.round(rng.normal(size=n), 1)   # rounding forces ties and zeros
            if np.all(d == 0.0):
                continue
            result = wilcoxon_signed_rank(d)
            w_obs, p = brute_wilcoxon_p(list(d))
            assert result.statistic == pytest.approx(w_obs, abs=1e-12)
            assert result.p_value == pytest.approx(p, abs=1e-12)
            assert result.exact

    def test_tied_ranks_use_midranks(self):
        # |d| = [1, 1, 2, 2] -> midranks [1.5, 1.5, 3.5, 3.5]
        result = wilcoxon_signed_rank([1.0, -1.0, 2.0, 2.0])
        assert result.statistic == pytest.approx(1.5 + 3.5 + 3.5, abs=1e-12)
        w_obs, p = brute_wilcoxon_p([1.0, -1.0, 2.0, 2.0])
        assert result.p_value == pytest.approx(p, abs=1e-12)

    def test_approximation_close_to_exact_at_moderate_n(self):
        rng = np.random.default_rng(4)
        for _ in range(20):
            d = rng.normal(size=12)
            exact = wilcoxon_signed_rank(d)
            approx = wilcoxon_signed_rank(d, exact_max_n=5)
            assert exact.exact and not approx.exact
            assert approx.p_value == pytest.approx(exact.p_value, abs=0.02)

    def test_large_n_uses_approximation(self):
        rng = np.random.default_rng(5)
        result = wilcoxon_signed_rank(rng.normal(size=30))
        assert not result.exact
        assert 0.0 <= result.p_value <= 1.0


def mcnemar_oracle(b: int, c: int) -> float:
    n = b + c
    tail = sum(Fraction(math.comb(n, k), 2 ** n) for k in range(min(b, c) + 1))
    return float(min(Fraction(1), 2 * tail))


class TestMcNemar:
    def test_six_zero(self):
        result = mcnemar(6, 0)
        assert result.p_value == pytest.approx(0.03125, abs=1e-15)
        assert result.exact

    def test_balanced_counts_give_one(self):
        assert mcnemar(4, 4).p_value == 1.0

    def test_five_one(self):
        assert mcnemar(5, 1).p_value == pytest.approx(0.21875, abs=1e-15)

    def test_degenerate_zero_pairs(self):
        result = mcnemar(0, 0)
        assert result.p_value == 1.0
        assert result.degenerate

    def test_exhaustive_small_counts_match_binomial_tail(self):
        for b in range(13):
            for c in range(13 - b):
                if b + c == 0:
                    continue
                result = mcnemar(b, c)
                assert result.exact
                assert result.p_value == pytest.approx(mcnemar_oracle(b, c), abs=1e-12)

    def test_symmetry(self):
        assert mcnemar(7, 2).p_value == mcnemar(2, 7).p_value

    def test_large_counts_use_chi_square(self):
        result = mcnemar(30, 10)
        assert not result.exact
        # frozen from the continuity-corrected chi-square tail at x = 9.025
        assert result.p_value == pytest.approx(0.002663119259138554, rel=1e-12)

    def test_negative_counts_rejected(self):
        with pytest.raises(ValueError):
            mcnemar(-1, 3)


class TestHolmBonferroni:
    def test_worked_example(self):
        assert holm_bonferroni([0.01, 0.04, 0.03]) == [True, False, False]

    def test_stop_at_first_failure_in_sorted_order(self):
        assert holm_bonferroni([0.001, 0.5, 0.002]) == [True, False, True]

    def test_all_ones_reject_nothing(self):
        assert holm_bonferroni([1.0, 1.0, 1.0]) == [False, False, False]

    def test_single_test_plain_threshold(self):
        assert holm_bonferroni([0.04]) == [True]
        assert holm_bonferroni([0.06]) == [False]

    def test_rejection_downward_closed_in_p(self):
        rng = np.random.default_rng(6)
        for _ in range(100):
            ps = list(rng.uniform(size=int(rng.integers(1, 8))))
            flags = holm_bonferroni(ps)
            for i, fi in enumerate(flags):
                if fi:
                    assert all(flags[j] for j in range(len(ps)) if ps[j] <= ps[i])
                    assert ps[i] <= 0.05

    def test_validation(self):
        with pytest.raises(ValueError):
            holm_bonferroni([0.5], alpha=0.0)
        with pytest.raises(ValueError):
            holm_bonferroni([1.5])


def _report(first_ranks: list[int], hits: list[int], ap10s: list[float]) -> MetricReport:
    n = len(first_ranks)
    return MetricReport(
        mr1=float(np.mean(first_ranks)), hr1=float(np.mean(hits)),
        map10=float(np.mean(ap10s)), n_queries=n,
        query_ids=[f"q{i}" for i in range(n)],
        first_ranks=first_ranks, hits=hits, ap10s=ap10s,
    )


class TestSignificanceReport:
    def test_identical_systems_are_degenerate(self):
        a = _report([1, 2, 1], [1, 0, 1], [1.0, 0.5, 1.0])
        report = significance_report(a, _report([1, 2, 1], [1, 0, 1], [1.0, 0.5, 1.0]))
        assert [t.degenerate for t in report.tests] == [True, True, True]
        assert all(t.p_value == 1.0 for t in report.tests)
        assert report.rejected == [False, False, False]

    def test_clear_separation_rejects_all_three(self):
        a = _report([1] * 10, [1] * 10, [1.0] * 10)
        b = _report([2] * 10, [0] * 10, [0.5] * 10)
        report = significance_report(a, b)
        names = [t.name for t in report.tests]
        assert names == ["mr1_wilcoxon", "map10_wilcoxon", "hr1_mcnemar"]
        for t in report.tests:
            assert t.p_value == pytest.approx(2.0 / 1024.0, abs=1e-15)
        assert report.rejected == [True, True, True]

    def test_mismatched_query_sets_rejected(self):
        a = _report([1, 2], [1, 0], [1.0, 0.5])
        b = _report([1, 2], [1, 0], [1.0, 0.5])
        b.query_ids = ["other0", "other1"]
        with pytest.raises(ValueError, match="query sets"):
            significance_report(a, b)

    def test_to_dict_shape(self):
        a = _report([1, 1], [1, 1], [1.0, 1.0])
        doc = significance_report(a, _report([1, 1], [1, 1], [1.0, 1.0])).to_dict()
        assert doc["alpha"] == 0.05
        assert {t["name"] for t in doc["tests"]} == {
            "mr1_wilcoxon", "map10_wilcoxon", "hr1_mcnemar"}
        assert all(set(t) == {"name", "statistic", "p_value", "exact", "n",
                              "degenerate", "reject"} for t in doc["tests"])
