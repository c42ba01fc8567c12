"""Result statistics: relative improvement, cosine traces and t-tests.

The Student-t tail goes through the regularized incomplete beta function,
evaluated with a Lentz continued fraction, so no special-function library
is needed.
"""
from __future__ import annotations

import math
import statistics
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

__all__ = [
    "betainc_reg",
    "student_t_sf",
    "paired_ttest_one_sided",
    "two_sample_t",
    "delta_k",
    "ImprovementReport",
    "improvement_report",
    "cosine_trace",
]

_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAX_ITER = 10_000


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for I_x(a, b), modified Lentz."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = _CF_TINY if abs(d) < _CF_TINY else d
        c = 1.0 + aa / c
        c = _CF_TINY if abs(c) < _CF_TINY else c
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_reg(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta ``I_x(a, b)`` for ``a, b > 0`` and ``0 <= x <= 1``."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b) + a * math.log(x) + b * math.log1p(-x)
    front = math.exp(log_front)
    # the fraction converges fast on the side of the mean
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf(t: float, df: float) -> float:
    """Upper tail ``P(T > t)`` of Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    half = 0.5 * betainc_reg(0.5 * df, 0.5, df / (df + t * t))
    return half if t >= 0 else 1.0 - half


def paired_ttest_one_sided(a: Sequence[float], b: Sequence[float], alpha: float = 0.05) -> dict:
    """Test ``mean(a - b) > 0`` on seed-paired runs.

    Returns ``significant``, ``t``, ``p``, ``df`` and ``degenerate``.  When
    the differences have zero variance the statistic is undefined; the
    result is flagged ``degenerate`` and never reported as significant
    (``t`` is 0 for identical samples and signed infinity otherwise).
    """
    if len(a) != len(b):
        raise ValueError("paired samples must have equal length")
    n = len(a)
    if n < 2:
        raise ValueError("need at least two pairs")
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    diffs = [float(x) - float(y) for x, y in zip(a, b)]
    mean = math.fsum(diffs) / n
    var = math.fsum((d - mean) ** 2 for d in diffs) / (n - 1)
    df = n - 1
    if var == 0.0:
        t = 0.0 if mean == 0.0 else math.copysign(math.inf, mean)
        return {"significant": False, "t": t, "p": math.nan, "df": df, "degenerate": True}
    t = mean / math.sqrt(var / n)
    p = student_t_sf(t, df)
    return {"significant": p < alpha, "t": t, "p": p, "df": df, "degenerate": False}


def two_sample_t(a: Sequence[float], b: Sequence[float]) -> dict:
    """Pooled-variance two-sample t statistic for ``mean(a) - mean(b)``."""
    na, nb = len(a), len(b)
    if na < 2 or nb < 2:
        raise ValueError("each sample needs at least two values")
    ma, mb = math.fsum(a) / na, math.fsum(b) / nb
    ssa = math.fsum((x - ma) ** 2 for x in a)
    ssb = math.fsum((x - mb) ** 2 for x in b)
    df = na + nb - 2
    pooled = (ssa + ssb) / df
    if pooled == 0.0:
        raise ValueError("both samples are constant")
    t = (ma - mb) / math.sqrt(pooled * (1.0 / na + 1.0 / nb))
    return {"t": t, "df": df, "p_greater": student_t_sf(t, df)}


def delta_k(m: float, s: float, lower_is_better: bool) -> float:
    """Relative improvement in percent of a multitask metric ``m`` over a single-task ``s``.

    Positive means the multitask model is better.  The denominator is
    ``|s|`` so the sign stays meaningful for negative baselines.
    """
    if s == 0:
        raise ValueError("single-task baseline must be non-zero")
    sign = -1.0 if lower_is_better else 1.0
    return 100.0 * sign * (m - s) / abs(s)


@dataclass
class ImprovementReport:
    deltas: list[float]
    mean: float
    median: float
    max: float
    min: float
    std: float  # population std over tasks
    significant: list[bool | None] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "deltas": list(self.deltas),
            "mean": self.mean,
            "median": self.median,
            "max": self.max,
            "min": self.min,
            "std_over_tasks": self.std,
            "significant": list(self.significant),
        }


def improvement_report(
    metrics: Sequence[float],
    baselines: Sequence[float],
    lower_is_better: Sequence[bool],
    significant: Sequence[bool | None] | None = None,
) -> ImprovementReport:
    if not (len(metrics) == len(baselines) == len(lower_is_better)) or not metrics:
        raise ValueError("need one metric, baseline and direction per task")
    deltas = [delta_k(m, s, lib) for m, s, lib in zip(metrics, baselines, lower_is_better)]
    sig = list(significant) if significant is not None else [None] * len(deltas)
    return ImprovementReport(
        deltas=deltas,
        mean=statistics.fmean(deltas),
        median=statistics.median(deltas),
        max=max(deltas),
        min=min(deltas),
        std=statistics.pstdev(deltas),
        significant=sig,
    )


def cosine_trace(records: Iterable[Mapping]) -> list[float]:
    """Mean over tasks of cos(task gradient, applied update), one value per step record."""
    out = []
    for rec in records:
        if rec.get("kind", "step") != "step":
            continue
        cos = rec.get("update_cos")
        if not cos:
            raise ValueError(f"step record t={rec.get('t')!r} has no update cosines")
        vals = [float(c) for c in cos if c is not None and not math.isnan(float(c))]
        if not vals:
            out.append(math.nan)
            continue
        mean = math.fsum(vals) / len(vals)
        out.append(min(1.0, max(-1.0, mean)))
    return out
