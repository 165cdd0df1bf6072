"""Expected calibration error, reliability data and uncertainty reports."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.stats import rankdata

from . import dirichlet
from .exceptions import DomainError

__all__ = [
    "PredictionRecord",
    "BinStat",
    "CalibrationReport",
    "make_records",
    "bin_index",
    "bin_predictions",
    "ece",
    "reliability_data",
    "uncertainty_report",
    "auroc",
]

DEFAULT_BINS = 15
HIST_BINS = 32


@dataclass
class PredictionRecord:
    predictive: list[float]
    confidence: float
    predicted_class: int
    true_label: int | None = None
    correct: bool | None = None
    output_entropy: float = 0.0
    differential_entropy: float | None = None
    alpha: list[float] | None = None
    is_ood: bool = False

    def to_dict(self) -> dict:
        return asdict(self)


def make_records(probs, labels=None, alphas=None, is_ood=False) -> list[PredictionRecord]:
    """Build records from a probability matrix and, optionally, concentrations.

    Differential entropy is only filled in when ``alphas`` is given; the
    output entropy of a Dirichlet model is computed from ``alphas`` so both
    entropies come from the same parameters.
    """
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    n = p.shape[0]
    if alphas is not None:
        a = dirichlet.check_alpha(np.atleast_2d(alphas))
        h_out = dirichlet.output_entropy(a)
        h_diff = dirichlet.differential_entropy(a)
    else:
        a = None
        with np.errstate(divide="ignore", invalid="ignore"):
            h_out = np.sum(np.where(p > 0, -p * np.log(p), 0.0), axis=1)
        h_diff = None
    pred = np.argmax(p, axis=1)
    conf = p[np.arange(n), pred]
    out = []
    for i in range(n):
        y = None if labels is None else int(labels[i])
        out.append(
            PredictionRecord(
                predictive=p[i].tolist(),
                confidence=float(conf[i]),
                predicted_class=int(pred[i]),
                true_label=y,
                correct=None if y is None else bool(pred[i] == y),
                output_entropy=float(h_out[i]),
                differential_entropy=None if h_diff is None else float(h_diff[i]),
                alpha=None if a is None else a[i].tolist(),
                is_ood=bool(is_ood),
            )
        )
    return out


@dataclass
class BinStat:
    m: int
    lo: float
    hi: float
    count: int
    acc: float
    conf: float


@dataclass
class CalibrationReport:
    M: int
    bins: list[BinStat]
    ece: float
    n: int

    def to_dict(self) -> dict:
        return {"M": self.M, "bins": [asdict(b) for b in self.bins], "ece": self.ece, "n": self.n}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        d = json.loads(text)
        return cls(d["M"], [BinStat(**b) for b in d["bins"]], d["ece"], d["n"])

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["m", "lo", "hi", "count", "acc", "conf"])
        for b in self.bins:
            w.writerow([b.m, repr(b.lo), repr(b.hi), b.count, repr(b.acc), repr(b.conf)])
        return buf.getvalue()


def bin_index(confidence, M: int) -> np.ndarray:
    """1-based bin ``m`` with ``confidence`` in ``((m-1)/M, m/M]``; 0 maps to bin 1."""
    if M < 1:
        raise DomainError("need at least one bin")
    p = np.asarray(confidence, dtype=np.float64)
    m = np.clip(np.ceil(p * M).astype(np.int64), 1, M)
    # p * M can round across an edge; fix against the exact edges
    lower = (m - 1) / M
    upper = m / M
    m = np.where((p <= lower) & (m > 1), m - 1, m)
    m = np.where((p > upper) & (m < M), m + 1, m)
    return m


def _conf_correct(records):
    if not records:
        raise DomainError("no records to bin")
    conf = np.array([r.confidence for r in records], dtype=np.float64)
    if any(r.correct is None for r in records):
        raise DomainError("calibration needs labelled records")
    correct = np.array([r.correct for r in records], dtype=np.float64)
    return conf, correct


def _bins(conf, correct, M):
    m = bin_index(conf, M)
    out = []
    for b in range(1, M + 1):
        sel = m == b
        count = int(sel.sum())
        # fsum: correctly rounded, so independent of record order
        acc = math.fsum(correct[sel]) / count if count else 0.0
        cf = math.fsum(conf[sel]) / count if count else 0.0
        out.append(BinStat(b, (b - 1) / M, b / M, count, acc, cf))
    return out


def _ece(bins, n):
    return math.fsum(b.count * abs(b.acc - b.conf) for b in bins if b.count) / n


def bin_predictions(records, M: int = DEFAULT_BINS) -> list[BinStat]:
    if M < 1:
        raise DomainError("need at least one bin")
    return _bins(*_conf_correct(records), M)


def ece(records, M: int = DEFAULT_BINS) -> float:
    bins = bin_predictions(records, M)
    return _ece(bins, len(records))


def reliability_data(records, M: int = DEFAULT_BINS) -> CalibrationReport:
    bins = bin_predictions(records, M)
    return CalibrationReport(M, bins, _ece(bins, len(records)), len(records))


def auroc(scores, labels) -> float:
    """Area under the ROC curve with positives = ``labels`` true.

    Rank-sum form with midranks for ties.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DomainError("AUROC needs both positive and negative examples")
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def _summary(values, bins):
    v = np.asarray(values, dtype=np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi == lo:
        hi = lo + 1.0
    counts, edges = np.histogram(v, bins=bins, range=(lo, hi))
    return {
        "mean": float(v.mean()),
        "median": float(np.median(v)),
        "histogram": {"edges": edges.tolist(), "counts": counts.tolist()},
    }


@dataclass
class _Group:
    n: int
    output_entropy: dict
    differential_entropy: dict | None = None

    def to_dict(self):
        d = {"n": self.n, "output_entropy": self.output_entropy}
        if self.differential_entropy is not None:
            d["differential_entropy"] = self.differential_entropy
        return d


def _group(records, bins, with_diff):
    g = _Group(len(records), _summary([r.output_entropy for r in records], bins))
    if with_diff:
        g.differential_entropy = _summary([r.differential_entropy for r in records], bins)
    return g


def uncertainty_report(records_in_dist, records_ood=None, bins: int = HIST_BINS) -> dict:
    """Entropy statistics per group, and how well each entropy flags OOD.

    When any record lacks a differential entropy (softmax baselines) only
    output entropy is reported and ``warning`` is set.
    """
    if not records_in_dist:
        raise DomainError("no in-distribution records")
    everything = list(records_in_dist) + list(records_ood or [])
    with_diff = all(r.differential_entropy is not None for r in everything)
    report = {"in_dist": _group(records_in_dist, bins, with_diff).to_dict()}
    if not with_diff:
        report["warning"] = "differential entropy unavailable; output entropy only"
    if records_ood:
        report["ood"] = _group(records_ood, bins, with_diff).to_dict()
        labels = [False] * len(records_in_dist) + [True] * len(records_ood)
        sep = {"auroc_output_entropy": auroc([r.output_entropy for r in everything], labels)}
        if with_diff:
            sep["auroc_differential_entropy"] = auroc([r.differential_entropy for r in everything], labels)
        report["separation"] = sep
    return report
