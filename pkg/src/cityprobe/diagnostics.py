"""Signals that a model is guessing, plus the correlation statistics used in reports.

Standard deviations here are population (divide-by-n) throughout.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from typing import Mapping, Sequence

import numpy as np

from .errors import ConstantInput, Empty, NonPositiveBaseline, NoOverlap, TooFewRepeats, TooShort


def round_sig(x: float, digits: int = 6) -> float:
    return float(f"{x:.{digits}g}")


@dataclass
class GenericValueReport:
    n: int
    value_counts: dict[float, int]
    top_values: list[float]
    top_share: float
    flagged: bool
    threshold: float
    m: int = 2

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "value_counts": [[v, c] for v, c in self.value_counts.items()],
            "top_values": self.top_values,
            "top_share": self.top_share,
            "flagged": self.flagged,
            "threshold": self.threshold,
            "m": self.m,
        }


def detect_generic(values: Sequence[float], m: int = 2, threshold: float = 0.5) -> GenericValueReport:
    """Flag answer sets dominated by a few placeholder numbers.

    Values are bucketed after rounding to 6 significant digits; the share held
    by the ``m`` most frequent buckets is compared with ``threshold``.
    """
    vals = [round_sig(float(v)) for v in values]
    if not vals:
        raise Empty("no values to inspect")
    if m < 1:
        raise ValueError("m must be >= 1")
    counts = Counter(vals)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    top = ranked[:m]
    share = sum(c for _, c in top) / len(vals)
    return GenericValueReport(
        n=len(vals),
        value_counts=dict(ranked),
        top_values=[v for v, _ in top],
        top_share=share,
        flagged=share >= threshold,
        threshold=threshold,
        m=m,
    )


@dataclass
class SubjectSpread:
    mean: float
    std: float
    cv: float | None
    rescaled_deviation: list[float]


@dataclass
class VarianceReport:
    per_subject: dict
    flagged_subjects: set
    undefined_cv: set
    cv_threshold: float

    def to_dict(self) -> dict:
        return {
            "per_subject": {
                str(k): {"mean": s.mean, "std": s.std, "cv": s.cv, "rescaled_deviation": s.rescaled_deviation}
                for k, s in self.per_subject.items()
            },
            "flagged_subjects": sorted(str(k) for k in self.flagged_subjects),
            "undefined_cv": sorted(str(k) for k in self.undefined_cv),
            "cv_threshold": self.cv_threshold,
        }


def detect_variance(runs: Mapping[object, Sequence[float]], cv_threshold: float = 0.2) -> VarianceReport:
    per_subject = {}
    flagged, undefined = set(), set()
    for subject, answers in runs.items():
        x = np.asarray(answers, dtype=float)
        if x.size < 2:
            raise TooFewRepeats(f"{subject}: need at least 2 repeats, got {x.size}")
        mean = float(x.mean())
        std = float(x.std())
        if mean == 0:
            per_subject[subject] = SubjectSpread(mean, std, None, [])
            undefined.add(subject)
            continue
        cv = std / abs(mean)
        per_subject[subject] = SubjectSpread(mean, std, cv, ((x - mean) / abs(mean)).tolist())
        if cv > cv_threshold:
            flagged.add(subject)
    return VarianceReport(per_subject, flagged, undefined, cv_threshold)


@dataclass
class ScaleConsistency:
    per_place_std: dict
    fraction_below_1: float


def scale_consistency(v_small: Mapping, v_large: Mapping) -> ScaleConsistency:
    """Compare 0-10 scores with 0-100 scores divided by ten, place by place."""
    shared = [p for p in v_small if p in v_large]
    if not shared:
        raise NoOverlap("no place scored on both scales")
    stds = {p: float(np.std([float(v_small[p]), float(v_large[p]) / 10.0])) for p in shared}
    below = sum(1 for s in stds.values() if s < 1.0)
    return ScaleConsistency(stds, below / len(shared))


# ---------------------------------------------------------------- Student t tail


def _betacf(a: float, b: float, x: float, max_iter: int = 500, eps: float = 1e-16) -> float:
    # modified Lentz continued fraction for the incomplete beta function
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = tiny if abs(d) < tiny else d
        c = 1.0 + aa / c
        c = tiny if abs(c) < tiny else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            break
    return h


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with ``df`` degrees of freedom."""
    if math.isinf(t):
        return 0.0
    return betainc_regularized(df / 2.0, 0.5, df / (df + t * t))


@dataclass
class CorrelationRow:
    feature: str
    r: float
    p: float
    n: int


def pearson(x: Sequence[float], y: Sequence[float], feature: str = "") -> CorrelationRow:
    a = np.asarray(x, dtype=float)
    b = np.asarray(y, dtype=float)
    if a.shape != b.shape:
        raise ValueError(f"length mismatch: {a.size} vs {b.size}")
    n = a.size
    if n < 3:
        raise TooShort(f"pearson needs n >= 3, got {n}")
    da = a - a.mean()
    db = b - b.mean()
    sa = float(np.sum(da * da))
    sb = float(np.sum(db * db))
    if sa == 0 or sb == 0:
        raise ConstantInput("pearson is undefined for a constant input")
    r = float(np.sum(da * db) / math.sqrt(sa * sb))
    r = max(-1.0, min(1.0, r))
    df = n - 2
    if abs(r) >= 1.0:
        p = 0.0
    else:
        t = r * math.sqrt(df / (1.0 - r * r))
        p = min(1.0, max(0.0, t_two_sided_p(t, df)))
    return CorrelationRow(feature, r, p, n)


def average_ranks(x: Sequence[float]) -> np.ndarray:
    """1-based ranks, ties sharing the mean of the positions they occupy."""
    a = np.asarray(x, dtype=float)
    order = np.argsort(a, kind="mergesort")
    ranks = np.empty(a.size)
    i = 0
    while i < a.size:
        j = i
        while j + 1 < a.size and a[order[j + 1]] == a[order[i]]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rank(x: Sequence[float], y: Sequence[float]) -> float:
    if len(x) != len(y):
        raise ValueError(f"length mismatch: {len(x)} vs {len(y)}")
    if len(x) < 3:
        raise TooShort(f"spearman needs n >= 3, got {len(x)}")
    return pearson(average_ranks(x), average_ranks(y)).r


@dataclass(frozen=True)
class RelativeError:
    raw: float
    rounded: float

    @property
    def display(self) -> str:
        if self.rounded > 0:
            return f"+{self.rounded:.1f}%"
        return f"{self.rounded:.1f}%" if self.rounded < 0 else "0.0%"


def round_half_up(x: float, places: int = 1) -> float:
    q = Decimal(1).scaleb(-places)
    return float(Decimal(repr(x)).quantize(q, rounding=ROUND_HALF_UP))


def relative_error_table(baseline_rmse: float, others: Mapping[str, float]) -> dict[str, RelativeError]:
    """Percentage increase of each RMSE over ``baseline_rmse``."""
    if not baseline_rmse > 0:
        raise NonPositiveBaseline(f"baseline RMSE must be positive, got {baseline_rmse}")
    out = {}
    for name, value in others.items():
        raw = 100.0 * (float(value) - baseline_rmse) / baseline_rmse
        out[name] = RelativeError(raw, round_half_up(raw, 1))
    return out
