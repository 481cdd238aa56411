"""Retrieval metrics, transcription quality measures, and significance tests.

Metrics: MR1 (mean 1-based rank of the first relevant item), HR@1 (fraction
of queries with a relevant item ranked first), MAP@10 with AP normalized by
min(|relevant|, 10). Paired significance follows a fixed protocol: Wilcoxon
signed-rank on per-query values, McNemar on per-query hit indicators, and a
Holm-Bonferroni step-down over the family of p-values.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .featurestore import Manifest
from .retrieval import RankedList, TrackEmbedding, cosine_similarity

DEFAULT_HALLUCINATION_PHRASES = ("thank you", "music", "subtitle")


# --- retrieval metrics -------------------------------------------------------

@dataclass
class QueryJudgment:
    query_id: str
    relevant_ids: frozenset[str]
    ranked: RankedList

    def __post_init__(self) -> None:
        self.relevant_ids = frozenset(self.relevant_ids)
        if not self.relevant_ids:
            raise ValueError(f"query {self.query_id!r}: empty relevant set")
        if self.query_id in self.relevant_ids:
            raise ValueError(f"query {self.query_id!r} lists itself as relevant")
        missing = self.relevant_ids - set(self.ranked.track_ids)
        if missing:
            raise ValueError(
                f"query {self.query_id!r}: relevant ids absent from ranking: {sorted(missing)}")


@dataclass
class MetricReport:
    mr1: float
    hr1: float
    map10: float
    n_queries: int
    query_ids: list[str] = field(default_factory=list)
    first_ranks: list[int] = field(default_factory=list)
    hits: list[int] = field(default_factory=list)
    ap10s: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "mr1": self.mr1, "hr1": self.hr1, "map10": self.map10,
            "n_queries": self.n_queries, "query_ids": self.query_ids,
            "first_ranks": self.first_ranks, "hits": self.hits, "ap10s": self.ap10s,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "MetricReport":
        return cls(**doc)


def _ap_at_10(ranked_ids: list[str], relevant: frozenset[str]) -> float:
    hits = 0
    total = 0.0
    for k, tid in enumerate(ranked_ids[:10], start=1):
        if tid in relevant:
            hits += 1
            total += hits / k
    return total / min(len(relevant), 10)


def retrieval_metrics(judgments: list[QueryJudgment]) -> MetricReport:
    """MR1, HR@1 and MAP@10 over the judged queries, with per-query vectors."""
    if not judgments:
        raise ValueError("no judgments")
    query_ids, firsts, hits, aps = [], [], [], []
    for j in judgments:
        rank = next(k for k, tid in enumerate(j.ranked.track_ids, start=1)
                    if tid in j.relevant_ids)
        query_ids.append(j.query_id)
        firsts.append(rank)
        hits.append(1 if rank == 1 else 0)
        aps.append(_ap_at_10(j.ranked.track_ids, j.relevant_ids))
    return MetricReport(
        mr1=float(np.mean(firsts)), hr1=float(np.mean(hits)), map10=float(np.mean(aps)),
        n_queries=len(judgments), query_ids=query_ids, first_ranks=firsts,
        hits=hits, ap10s=aps,
    )


def judgments_from_manifest(manifest: Manifest, rankings: list[RankedList],
                            split: str | None = None) -> list[QueryJudgment]:
    """Pair each ranking with its clique mates; singleton cliques are dropped."""
    cliques = manifest.cliques()
    by_track = {t.track_id: t.clique_id for t in manifest.tracks}
    wanted = None
    if split is not None:
        wanted = {t.track_id for t in manifest.split(split)}
    out = []
    for r in rankings:
        if wanted is not None and r.query_id not in wanted:
            continue
        clique = by_track.get(r.query_id)
        if clique is None:
            raise ValueError(f"ranking for unknown track {r.query_id!r}")
        relevant = {tid for tid in cliques[clique] if tid != r.query_id}
        if not relevant:
            continue
        out.append(QueryJudgment(query_id=r.query_id,
                                 relevant_ids=frozenset(relevant), ranked=r))
    return out


# --- alignment ----------------------------------------------------------------

def alignment_stats(pairs: list[tuple], level: str = "segment") -> tuple[float, float]:
    """Mean and population std of student/teacher cosine similarities.

    Each pair is (AudioEmbedding, teacher vector). At track level the
    student segments of a track are averaged first; the teacher side is
    averaged too, which leaves a shared per-track teacher unchanged.
    """
    if not pairs:
        raise ValueError("no alignment pairs")
    if level not in ("segment", "track"):
        raise ValueError(f"unknown level {level!r}")

    def vec(x) -> np.ndarray:
        data = getattr(x, "data", x)
        return np.asarray(data, dtype=np.float64).reshape(-1)

    if level == "segment":
        cosines = [cosine_similarity(vec(a), vec(t)) for a, t in pairs]
    else:
        groups: dict[str, list[tuple[np.ndarray, np.ndarray]]] = {}
        for a, t in pairs:
            key = getattr(a, "track_id", "") or ""
            groups.setdefault(key, []).append((vec(a), vec(t)))
        cosines = []
        for members in groups.values():
            student = np.mean([m[0] for m in members], axis=0)
            teacher = np.mean([m[1] for m in members], axis=0)
            cosines.append(cosine_similarity(student, teacher))
    return float(np.mean(cosines)), float(np.std(cosines))


def alignment_from_embeddings(students: list[TrackEmbedding],
                              teachers: dict[str, np.ndarray]) -> tuple[float, float]:
    """Track-level alignment given aggregated student embeddings and per-track teachers."""
    cosines = [cosine_similarity(s.data, teachers[s.track_id]) for s in students]
    if not cosines:
        raise ValueError("no alignment pairs")
    return float(np.mean(cosines)), float(np.std(cosines))


# --- transcription quality ----------------------------------------------------

_PUNCT = re.compile(r"[^\w\s]", re.UNICODE)


def tokenize(text: str) -> list[str]:
    """Lowercase, strip punctuation, split on whitespace."""
    return _PUNCT.sub("", text.lower()).split()


def wer(reference: str | list[str], hypothesis: str | list[str]) -> float:
    """Word-level edit distance (substitutions+deletions+insertions) over |reference|."""
    ref = tokenize(reference) if isinstance(reference, str) else list(reference)
    hyp = tokenize(hypothesis) if isinstance(hypothesis, str) else list(hypothesis)
    if not ref:
        raise ValueError("empty reference")
    prev = list(range(len(hyp) + 1))
    for i, rtok in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, htok in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (rtok != htok))
        prev = cur
    return prev[-1] / len(ref)


def hallucination_count(transcript: str,
                        phrases: tuple[str, ...] = DEFAULT_HALLUCINATION_PHRASES) -> int:
    """Case-insensitive, word-boundary occurrences of any listed phrase."""
    if not phrases:
        raise ValueError("empty phrase list")
    total = 0
    for phrase in phrases:
        pattern = re.compile(r"\b" + re.escape(phrase) + r"\b", re.IGNORECASE)
        total += len(pattern.findall(transcript))
    return total


# --- significance tests --------------------------------------------------------

@dataclass
class TestResult:
    name: str
    statistic: float
    p_value: float
    exact: bool
    n: int
    degenerate: bool = False


def _midranks(values: np.ndarray) -> np.ndarray:
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return ranks


def _normal_sf(z: float) -> float:
    return 0.5 * math.erfc(z / math.sqrt(2.0))


def wilcoxon_signed_rank(diffs: np.ndarray | list[float], exact_max_n: int = 25) -> TestResult:
    """Two-sided signed-rank test on paired differences.

    Zeros are dropped (signed-rank convention); ties get midranks. For
    n <= exact_max_n the p-value is exact over all 2^n sign assignments,
    computed by convolving the doubled-rank distributions (each rank is
    independently present or absent, so the convolution counts exactly the
    sign patterns). Larger n uses the normal approximation with tie
    correction and a 0.5 continuity correction.
    """
    d = np.asarray(diffs, dtype=np.float64)
    d = d[d != 0.0]
    n = len(d)
    if n == 0:
        raise ValueError("all differences are zero")
    absd = np.abs(d)
    ranks = _midranks(absd)
    w_plus = float(ranks[d > 0.0].sum())

    if n <= exact_max_n:
        doubled = np.rint(2.0 * ranks).astype(np.int64)
        counts = np.zeros(int(doubled.sum()) + 1, dtype=np.float64)
        counts[0] = 1.0
        top = 0
        for r in doubled:
            nxt = counts.copy()
            nxt[r:top + r + 1] += counts[:top + 1]
            counts = nxt
            top += int(r)
        total = 2.0 ** n
        w2 = int(round(2.0 * w_plus))
        p_le = counts[:w2 + 1].sum() / total
        p_ge = counts[w2:].sum() / total
        p = min(1.0, 2.0 * min(p_le, p_ge))
        return TestResult("wilcoxon", w_plus, p, exact=True, n=n)

    mu = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, tie_counts = np.unique(absd, return_counts=True)
    var -= float(np.sum(tie_counts.astype(np.float64) ** 3 - tie_counts)) / 48.0
    if var <= 0.0:
        raise ValueError("zero variance: all absolute differences tied to one value")
    if w_plus > mu:
        z = (w_plus - mu - 0.5) / math.sqrt(var)
    elif w_plus < mu:
        z = (w_plus - mu + 0.5) / math.sqrt(var)
    else:
        z = 0.0
    p = min(1.0, 2.0 * _normal_sf(abs(z)))
    return TestResult("wilcoxon", w_plus, p, exact=False, n=n)


def mcnemar(b: int, c: int, exact_max_n: int = 25) -> TestResult:
    """Two-sided test on discordant pair counts b and c.

    Exact binomial tail for b + c <= exact_max_n; chi-square with continuity
    correction otherwise. b + c == 0 is degenerate: p = 1 with a flag.
    """
    if b < 0 or c < 0:
        raise ValueError(f"discordant counts must be non-negative, got ({b}, {c})")
    n = b + c
    if n == 0:
        return TestResult("mcnemar", 0.0, 1.0, exact=True, n=0, degenerate=True)
    if n <= exact_max_n:
        k_max = min(b, c)
        tail = sum(math.comb(n, k) for k in range(k_max + 1)) / 2.0 ** n
        p = min(1.0, 2.0 * tail)
        return TestResult("mcnemar", float(min(b, c)), p, exact=True, n=n)
    x = (abs(b - c) - 1.0) ** 2 / n
    p = math.erfc(math.sqrt(x / 2.0))
    return TestResult("mcnemar", x, p, exact=False, n=n)


def holm_bonferroni(p_values: list[float], alpha: float = 0.05) -> list[bool]:
    """Step-down correction; rejection flags in the original input order."""
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    if any(not 0.0 <= p <= 1.0 for p in p_values):
        raise ValueError("p-values must lie in [0, 1]")
    m = len(p_values)
    flags = [False] * m
    order = sorted(range(m), key=lambda i: p_values[i])
    for step, idx in enumerate(order):
        if p_values[idx] <= alpha / (m - step):
            flags[idx] = True
        else:
            break
    return flags


@dataclass
class SignificanceReport:
    tests: list[TestResult]
    rejected: list[bool]
    alpha: float

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "tests": [{
                "name": t.name, "statistic": t.statistic, "p_value": t.p_value,
                "exact": t.exact, "n": t.n, "degenerate": t.degenerate,
                "reject": r,
            } for t, r in zip(self.tests, self.rejected)],
        }


def significance_report(report_a: MetricReport, report_b: MetricReport,
                        alpha: float = 0.05) -> SignificanceReport:
    """Paired comparison of two systems over the same query set.

    Wilcoxon on per-query first ranks (MR1) and per-query AP@10 (MAP),
    McNemar on the rank-1 hit indicators (HR@1), then Holm-Bonferroni over
    the three p-values.
    """
    if report_a.query_ids != report_b.query_ids:
        raise ValueError("reports cover different query sets; pairing undefined")

    results = []
    rank_diffs = np.array(report_a.first_ranks, dtype=np.float64) - np.array(report_b.first_ranks)
    ap_diffs = np.array(report_a.ap10s, dtype=np.float64) - np.array(report_b.ap10s)
    for label, diffs in (("mr1_wilcoxon", rank_diffs), ("map10_wilcoxon", ap_diffs)):
        if np.all(diffs == 0.0):
            results.append(TestResult(label, 0.0, 1.0, exact=True,
                                      n=0, degenerate=True))
        else:
            t = wilcoxon_signed_rank(diffs)
            results.append(TestResult(label, t.statistic, t.p_value, t.exact, t.n))
    b = sum(1 for ha, hb in zip(report_a.hits, report_b.hits) if ha and not hb)
    c = sum(1 for ha, hb in zip(report_a.hits, report_b.hits) if hb and not ha)
    t = mcnemar(b, c)
    results.append(TestResult("hr1_mcnemar", t.statistic, t.p_value, t.exact, t.n, t.degenerate))

    flags = holm_bonferroni([t.p_value for t in results], alpha)
    return SignificanceReport(tests=results, rejected=flags, alpha=alpha)


def save_metric_report(path: str | Path, report: MetricReport) -> None:
    Path(path).write_text(json.dumps(report.to_dict(), indent=2) + "\n")


def load_metric_report(path: str | Path) -> MetricReport:
    return MetricReport.from_dict(json.loads(Path(path).read_text()))
