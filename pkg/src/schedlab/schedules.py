"""Step-size schedules and numerical checks on their cumulative sums.

All schedules map a 1-based iteration index ``t`` to a step size
``eta_t = eta0 * base(t)``, where ``base`` depends only on the schedule
kind and its decay parameters.  Evaluation is pure: a ``ScheduleSpec`` is
immutable and freely shareable across threads.
"""

from __future__ import annotations

import math
import operator
from bisect import bisect_right
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterable, Sequence

from .errors import ValidationError


class ScheduleKind(str, Enum):
    """Supported decay rules.  Values double as the config-file names."""

    CONSTANT = "constant"
    INV_SQRT = "inv_sqrt"
    INV_T = "inv_t"
    COSINE = "cosine"
    LNSQRT_THEORY = "lnsqrt_theory"
    LNSQRT_PRACTICAL = "lnsqrt_practical"
    STAGEWISE = "stagewise"


@dataclass(frozen=True)
class ScheduleSpec:
    """A step-size schedule.

    eta0:        initial step size, > 0 (for ``lnsqrt_theory`` also <= 1,
                 the domain on which its summation bounds are stated).
    alpha:       decay coefficient, >= 0; ignored by kinds without one.
    horizon:     inner-loop length; required by ``cosine`` only.
    milestones:  strictly increasing iteration indices at which
                 ``stagewise`` multiplies the step by ``drop_factor``.
    drop_factor: multiplicative decay per milestone, in (0, 1).
    """

    kind: ScheduleKind
    eta0: float
    alpha: float = 0.0
    horizon: int | None = None
    milestones: tuple[int, ...] = ()
    drop_factor: float = 0.5

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", ScheduleKind(self.kind))
        object.__setattr__(self, "eta0", float(self.eta0))
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "milestones", tuple(int(m) for m in self.milestones))
        object.__setattr__(self, "drop_factor", float(self.drop_factor))
        if not math.isfinite(self.eta0) or self.eta0 <= 0.0:
            raise ValidationError(f"eta0 must be finite and positive, got {self.eta0}")
        if self.kind is ScheduleKind.LNSQRT_THEORY and self.eta0 > 1.0:
            raise ValidationError(
                f"lnsqrt_theory requires eta0 in (0, 1], got {self.eta0}"
            )
        if not math.isfinite(self.alpha) or self.alpha < 0.0:
            raise ValidationError(f"alpha must be finite and >= 0, got {self.alpha}")
        if self.kind is ScheduleKind.COSINE:
            if self.horizon is None or operator.index(self.horizon) < 1:
                raise ValidationError("cosine schedule requires horizon >= 1")
            object.__setattr__(self, "horizon", operator.index(self.horizon))
        if any(m < 1 for m in self.milestones):
            raise ValidationError(f"milestones must be >= 1, got {self.milestones}")
        if any(a >= b for a, b in zip(self.milestones, self.milestones[1:])):
            raise ValidationError(
                f"milestones must be strictly increasing, got {self.milestones}"
            )
        if not (0.0 < self.drop_factor < 1.0):
            raise ValidationError(
                f"drop_factor must lie in (0, 1), got {self.drop_factor}"
            )


def _base_fn(spec: ScheduleSpec) -> Callable[[int], float]:
    """Return ``t -> eta_t / eta0`` with kind dispatch done once."""
    kind = spec.kind
    if kind is ScheduleKind.CONSTANT:
        return lambda t: 1.0
    if kind is ScheduleKind.INV_SQRT:
        a = spec.alpha
        return lambda t: 1.0 / (1.0 + a * math.sqrt(t))
    if kind is ScheduleKind.INV_T:
        a = spec.alpha
        return lambda t: 1.0 / (1.0 + a * t)
    if kind is ScheduleKind.COSINE:
        horizon = spec.horizon
        return lambda t: 0.5 * (1.0 + math.cos(t * math.pi / horizon))
    if kind is ScheduleKind.LNSQRT_THEORY:
        return lambda t: 1.0 / (math.sqrt(t) + math.log(t))
    if kind is ScheduleKind.LNSQRT_PRACTICAL:
        a = spec.alpha
        return lambda t: 1.0 / (1.0 + a * (math.sqrt(t) + math.log(t)))
    if kind is ScheduleKind.STAGEWISE:
        milestones = spec.milestones
        factor = spec.drop_factor
        return lambda t: factor ** bisect_right(milestones, t)
    raise ValidationError(f"unknown schedule kind {kind!r}")


def _check_t(spec: ScheduleSpec, t: int) -> int:
    t = operator.index(t)
    if t < 1:
        raise ValidationError(f"iteration index must be >= 1, got {t}")
    if spec.kind is ScheduleKind.COSINE and t > spec.horizon:
        raise ValidationError(
            f"cosine schedule evaluated at t={t} beyond horizon={spec.horizon}"
        )
    return t


def eta(spec: ScheduleSpec, t: int) -> float:
    """Step size at iteration ``t`` (1-based).

    Strictly positive for every kind, except ``cosine`` at ``t == horizon``
    where it is exactly 0 (callers treat a zero step as a no-op update).
    """
    t = _check_t(spec, t)
    return spec.eta0 * _base_fn(spec)(t)


def partial_sums(spec: ScheduleSpec, T: int) -> tuple[float, float]:
    """``(sum_{t<=T} eta_t, sum_{t<=T} eta_t^2)`` by direct summation.

    Terms are accumulated in increasing ``t`` with Kahan-compensated
    summation so million-term sums keep >= 12 significant digits; the
    unit-eta0 sums are scaled by ``eta0`` at the end, which makes the
    results exactly equivariant in ``eta0``.
    """
    T = _check_t(spec, T)
    base = _base_fn(spec)
    s = c = 0.0
    s2 = c2 = 0.0
    for t in range(1, T + 1):
        b = base(t)
        y = b - c
        tmp = s + y
        c = (tmp - s) - y
        s = tmp
        y2 = b * b - c2
        tmp2 = s2 + y2
        c2 = (tmp2 - s2) - y2
        s2 = tmp2
    return spec.eta0 * s, spec.eta0 * spec.eta0 * s2


@dataclass(frozen=True)
class LemmaReport:
    """Outcome of one cumulative-sum inequality check at horizon ``T``.

    ``margin`` is the signed quantity (partial sum minus bound); ``holds``
    is true iff the margin has the sign the inequality requires.  The
    squared-sum check carries a second, corrected bound (``*_safe``
    fields) that adds the first term to the integral estimate.
    """

    T: int
    partial_sum: float
    partial_sum_sq: float
    bound: float
    holds: bool
    margin: float
    bound_safe: float | None = None
    holds_safe: bool | None = None
    margin_safe: float | None = None


def _check_lemma_args(eta0: float, T: int) -> int:
    if not (0.0 < eta0 <= 1.0) or not math.isfinite(eta0):
        raise ValidationError(f"eta0 must lie in (0, 1], got {eta0}")
    T = operator.index(T)
    if T < 1:
        raise ValidationError(f"T must be >= 1, got {T}")
    return T


def verify_lemma1(eta0: float, T: int) -> LemmaReport:
    """Check the lower bound ``sum eta_t >= eta0 * (sqrt(T) - 1)``.

    Applies to the ``lnsqrt_theory`` schedule only, which is why the kind
    is not a parameter.
    """
    T = _check_lemma_args(eta0, T)
    spec = ScheduleSpec(ScheduleKind.LNSQRT_THEORY, eta0)
    s, s2 = partial_sums(spec, T)
    bound = eta0 * (math.sqrt(T) - 1.0)
    margin = s - bound
    return LemmaReport(
        T=T, partial_sum=s, partial_sum_sq=s2, bound=bound,
        holds=margin >= 0.0, margin=margin,
    )


def verify_lemma2(eta0: float, T: int) -> LemmaReport:
    """Check the upper bound ``sum eta_t^2 <= eta0^2 * ln(T)``.

    The stated log bound is too tight at small ``T`` (the first term alone
    is ``eta0^2`` while ``ln 1 = 0``), so the report also carries the
    corrected bound ``eta0^2 * (1 + ln T)``, justified by
    ``sum_{t=2..T} 1/t <= integral_1^T dt/t``.  ``holds`` refers to the
    log bound, ``holds_safe`` to the corrected one.
    """
    T = _check_lemma_args(eta0, T)
    spec = ScheduleSpec(ScheduleKind.LNSQRT_THEORY, eta0)
    s, s2 = partial_sums(spec, T)
    bound = eta0 * eta0 * math.log(T)
    margin = s2 - bound
    bound_safe = eta0 * eta0 * (1.0 + math.log(T))
    margin_safe = s2 - bound_safe
    return LemmaReport(
        T=T, partial_sum=s, partial_sum_sq=s2, bound=bound,
        holds=margin <= 0.0, margin=margin,
        bound_safe=bound_safe, holds_safe=margin_safe <= 0.0,
        margin_safe=margin_safe,
    )


@dataclass(frozen=True)
class LemmaSweep:
    """Single-pass check of both summation bounds for every ``T <= t_max``.

    ``reports`` holds (lower-bound report, upper-bound report) pairs at the
    requested horizons; the remaining fields aggregate over *all* integer
    horizons up to ``t_max``.
    """

    eta0: float
    t_max: int
    reports: tuple[tuple[LemmaReport, LemmaReport], ...]
    lower_min_margin: float
    lower_holds_all: bool
    upper_failures: tuple[int, ...]
    upper_holds_all_safe: bool


def lemma_sweep(
    eta0: float,
    t_max: int,
    report_at: Iterable[int] | None = None,
) -> LemmaSweep:
    """Evaluate both bounds at every ``T`` in ``1..t_max`` in one pass.

    Margins are tracked at every integer horizon; full ``LemmaReport``
    pairs are materialized only at the horizons in ``report_at``
    (default: ``t_max`` alone).  Cost is O(t_max).
    """
    t_max = _check_lemma_args(eta0, t_max)
    wanted = {t_max} if report_at is None else {operator.index(t) for t in report_at}
    if any(t < 1 or t > t_max for t in wanted):
        raise ValidationError("report_at horizons must lie in 1..t_max")

    e2 = eta0 * eta0
    s = c = 0.0
    s2 = c2 = 0.0
    lower_min = math.inf
    failures: list[int] = []
    safe_all = True
    reports: list[tuple[LemmaReport, LemmaReport]] = []
    for t in range(1, t_max + 1):
        rt = math.sqrt(t)
        b = 1.0 / (rt + math.log(t))
        y = b - c
        tmp = s + y
        c = (tmp - s) - y
        s = tmp
        y2 = b * b - c2
        tmp2 = s2 + y2
        c2 = (tmp2 - s2) - y2
        s2 = tmp2

        lo_bound = eta0 * (rt - 1.0)
        lo_margin = eta0 * s - lo_bound
        if lo_margin < lower_min:
            lower_min = lo_margin
        up_bound = e2 * math.log(t)
        up_margin = e2 * s2 - up_bound
        if up_margin > 0.0:
            failures.append(t)
        up_bound_safe = e2 * (1.0 + math.log(t))
        up_margin_safe = e2 * s2 - up_bound_safe
        if up_margin_safe > 0.0:
            safe_all = False

        if t in wanted:
            reports.append((
                LemmaReport(
                    T=t, partial_sum=eta0 * s, partial_sum_sq=e2 * s2,
                    bound=lo_bound, holds=lo_margin >= 0.0, margin=lo_margin,
                ),
                LemmaReport(
                    T=t, partial_sum=eta0 * s, partial_sum_sq=e2 * s2,
                    bound=up_bound, holds=up_margin <= 0.0, margin=up_margin,
                    bound_safe=up_bound_safe, holds_safe=up_margin_safe <= 0.0,
                    margin_safe=up_margin_safe,
                ),
            ))
    return LemmaSweep(
        eta0=eta0,
        t_max=t_max,
        reports=tuple(reports),
        lower_min_margin=lower_min,
        lower_holds_all=lower_min >= 0.0,
        upper_failures=tuple(failures),
        upper_holds_all_safe=safe_all,
    )


def geometric_horizons(lo: int, hi: int, per_decade: int = 8) -> list[int]:
    """Distinct integer horizons, geometrically spaced over ``[lo, hi]``."""
    if lo < 1 or hi < lo:
        raise ValidationError(f"need 1 <= lo <= hi, got [{lo}, {hi}]")
    n = max(2, int(round(per_decade * math.log10(hi / lo))) + 1) if hi > lo else 1
    out: list[int] = []
    for i in range(n):
        v = int(round(lo * (hi / lo) ** (i / max(n - 1, 1)))) if hi > lo else lo
        if not out or v > out[-1]:
            out.append(v)
    return out
