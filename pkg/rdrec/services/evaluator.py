"""
Evaluator
HR@k / NDCG@k over held-out interactions, multi-trial aggregation and
significance testing.
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Union

import numpy as np
import structlog
from scipy import stats

from ..exceptions import EvaluationError, MissingRankingError
from ..utils.jsonl import read_json, write_json
from .corpus import SplitSet
from .inference import RankedList

logger = structlog.get_logger()

DEFAULT_KS = (1, 5, 10)


def _check_k(k: int) -> None:
    if k < 1:
        raise EvaluationError(f"k must be >= 1, got {k}", code="BAD_K")


def hr_at_k(ranked: RankedList, positive: str, k: int) -> int:
    """1 iff the positive is in the top k"""
    _check_k(k)
    rank = ranked.rank_of(positive)
    return int(rank is not None and rank <= k)


def ndcg_at_k(ranked: RankedList, positive: str, k: int) -> float:
    """Single relevant item at rank r: 1 / log2(r + 1) inside the top k, else 0"""
    _check_k(k)
    rank = ranked.rank_of(positive)
    if rank is None or rank > k:
        return 0.0
    return 1.0 / math.log2(rank + 1)


@dataclass
class MetricReport:
    hr: Dict[int, float]
    ndcg: Dict[int, float]
    n_users: int
    n_excluded: int = 0
    n_absent: int = 0

    def metric(self, name: str) -> float:
        """Look up "HR@10" / "NDCG@5" style names"""
        family, _, k = name.partition("@")
        table = {"HR": self.hr, "NDCG": self.ndcg}.get(family.upper())
        if table is None or not k.isdigit() or int(k) not in table:
            raise EvaluationError(f"unknown metric {name!r}", code="UNKNOWN_METRIC")
        return table[int(k)]

    @property
    def metric_names(self) -> List[str]:
        return [f"HR@{k}" for k in sorted(self.hr)] + [f"NDCG@{k}" for k in sorted(self.ndcg)]

    def to_record(self) -> Dict[str, object]:
        record: Dict[str, object] = {name: self.metric(name) for name in self.metric_names}
        record.update(n_users=self.n_users, n_excluded=self.n_excluded, n_absent=self.n_absent)
        return record

    @classmethod
    def from_record(cls, record: Mapping[str, object]) -> "MetricReport":
        hr, ndcg = {}, {}
        for key, value in record.items():
            family, sep, k = key.partition("@")
            if sep and family == "HR":
                hr[int(k)] = float(value)
            elif sep and family == "NDCG":
                ndcg[int(k)] = float(value)
        return cls(hr=hr, ndcg=ndcg, n_users=int(record.get("n_users", 0)),
                   n_excluded=int(record.get("n_excluded", 0)), n_absent=int(record.get("n_absent", 0)))


def evaluate_labels(rankings: Mapping[str, RankedList], labels: Mapping[str, str],
                    ks: Sequence[int] = DEFAULT_KS, n_excluded: int = 0) -> MetricReport:
    """
    Average per-user metrics over every labelled user

    Users are reduced in sorted order with exact float summation, so the
    report does not depend on iteration order.

    Raises:
        MissingRankingError: a labelled user has no ranked list
    """
    ks = sorted(set(ks))
    for k in ks:
        _check_k(k)
    missing = [u for u in labels if u not in rankings]
    if missing:
        raise MissingRankingError(missing)
    users = sorted(labels)
    if not users:
        raise EvaluationError("no users to evaluate", code="EMPTY")

    absent = sum(1 for u in users if rankings[u].rank_of(labels[u]) is None)
    hr = {k: math.fsum(hr_at_k(rankings[u], labels[u], k) for u in users) / len(users) for k in ks}
    ndcg = {k: math.fsum(ndcg_at_k(rankings[u], labels[u], k) for u in users) / len(users) for k in ks}
    report = MetricReport(hr=hr, ndcg=ndcg, n_users=len(users), n_excluded=n_excluded, n_absent=absent)
    logger.info("Evaluation complete", **report.to_record())
    return report


def evaluate(rankings: Mapping[str, RankedList], splits: SplitSet, ks: Sequence[int] = DEFAULT_KS,
             split: str = "test") -> MetricReport:
    """Evaluate against the leave-one-out labels; users without a label are counted as excluded"""
    if split not in ("val", "test"):
        raise EvaluationError(f"unknown split {split!r}", code="BAD_SPLIT")
    labels = splits.seq_test if split == "test" else splits.seq_val
    return evaluate_labels(rankings, labels, ks, n_excluded=len(splits.excluded_users))


def write_report(report: MetricReport, path: Union[str, Path]) -> None:
    write_json(path, report.to_record())


def read_report(path: Union[str, Path]) -> MetricReport:
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"report not found: {path}", code="MISSING_FILE")
    return MetricReport.from_record(read_json(path))


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    p_value: float
    dof: float


def _degenerate(mean_diff: float, dof: float) -> TTestResult:
    # both groups constant
    if mean_diff == 0:
        return TTestResult(t_statistic=0.0, p_value=1.0, dof=dof)
    return TTestResult(t_statistic=math.copysign(math.inf, mean_diff), p_value=0.0, dof=dof)


def t_test(a: Sequence[float], b: Sequence[float], paired: bool = False) -> TTestResult:
    """
    Two-sided two-sample t-test

    Welch's unequal-variance test by default (Welch-Satterthwaite degrees
    of freedom); paired=True runs the paired test on matched trials.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if len(a) < 2 or len(b) < 2:
        raise EvaluationError("each group needs at least two trials", code="TOO_FEW_TRIALS")

    if paired:
        if len(a) != len(b):
            raise EvaluationError("paired test needs groups of equal size", code="UNPAIRED")
        diff = a - b
        dof = float(len(diff) - 1)
        if np.var(diff, ddof=1) == 0:
            return _degenerate(float(diff.mean()), dof)
        result = stats.ttest_rel(a, b)
        return TTestResult(float(result.statistic), float(result.pvalue), dof)

    va = np.var(a, ddof=1) / len(a)
    vb = np.var(b, ddof=1) / len(b)
    if va + vb == 0:
        return _degenerate(float(a.mean() - b.mean()), float(len(a) + len(b) - 2))
    dof = float((va + vb) ** 2 / (va ** 2 / (len(a) - 1) + vb ** 2 / (len(b) - 1)))
    result = stats.ttest_ind(a, b, equal_var=False)
    return TTestResult(float(result.statistic), float(result.pvalue), dof)


@dataclass
class TrialSet:
    """Metric values across independent trials (one per seed)"""

    values: Dict[str, List[float]] = field(default_factory=dict)
    seeds: List[int] = field(default_factory=list)

    @classmethod
    def from_reports(cls, reports: Iterable[MetricReport], seeds: Optional[Sequence[int]] = None) -> "TrialSet":
        reports = list(reports)
        values: Dict[str, List[float]] = {}
        for report in reports:
            for name in report.metric_names:
                values.setdefault(name, []).append(report.metric(name))
        return cls(values=values, seeds=list(seeds) if seeds is not None else list(range(len(reports))))

    def to_record(self) -> Dict[str, object]:
        return {"seeds": self.seeds, "values": self.values}

    @classmethod
    def from_record(cls, record: Mapping[str, object]) -> "TrialSet":
        return cls(values={k: [float(x) for x in v] for k, v in record["values"].items()},
                   seeds=list(record.get("seeds", [])))


@dataclass(frozen=True)
class TrialSummary:
    mean: float
    std: float
    n: int


def summarize_trials(trials: TrialSet) -> Dict[str, TrialSummary]:
    """Mean and sample standard deviation per metric"""
    summary = {}
    for name, values in trials.values.items():
        arr = np.asarray(values, dtype=np.float64)
        std = float(arr.std(ddof=1)) if len(arr) > 1 else 0.0
        summary[name] = TrialSummary(mean=float(arr.mean()), std=std, n=len(arr))
    return summary


def compare_trials(trials: TrialSet, baseline: TrialSet, paired: bool = False) -> Dict[str, TTestResult]:
    """Per-metric t-test of trials against a baseline trial set"""
    shared = [name for name in trials.values if name in baseline.values]
    if not shared:
        raise EvaluationError("trial sets share no metrics", code="NO_SHARED_METRICS")
    return {name: t_test(trials.values[name], baseline.values[name], paired) for name in shared}


def write_trials(trials: TrialSet, path: Union[str, Path]) -> None:
    write_json(path, trials.to_record())


def read_trials(path: Union[str, Path]) -> TrialSet:
    """Accepts a trial file or a single report (treated as one trial)"""
    path = Path(path)
    if not path.exists():
        raise EvaluationError(f"baseline file not found: {path}", code="MISSING_FILE")
    record = read_json(path)
    if "values" in record:
        return TrialSet.from_record(record)
    return TrialSet.from_reports([MetricReport.from_record(record)])
