"""
Closed-form attack success probabilities for the STS overshadowing
attack, with and without random time hopping.
"""

import logging
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import binom

from hopguard.sim import SPEED_OF_LIGHT

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class AnalyticParams:
    """
    Times are in seconds. [t_sfd, t_payload] is the offset window in which
    an attack STS is viable, [t_min, t_max] the time-of-flight offset
    support and [t_min_hop, t_max_hop] the hop delay support.
    """

    n: int
    theta: float
    x_t: float
    t_sfd: float
    t_payload: float
    t_min: float
    t_max: float
    t_min_hop: float
    t_max_hop: float
    pulse_gain: float = 1.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError(f"STS length must be >= 1, got {self.n}")
        if self.theta < 0:
            raise ValueError(f"Detection threshold must be non-negative, got {self.theta}")
        if self.x_t <= 0 or self.pulse_gain <= 0:
            raise ValueError("Attack amplitude and pulse gain must be positive")
        if self.t_payload <= self.t_sfd:
            raise ValueError("Viability window must end after it starts")
        if self.t_max <= self.t_min:
            raise ValueError("Time-of-flight support must end after it starts")
        if self.t_max_hop <= self.t_min_hop:
            raise ValueError("Hop support must end after it starts")
        if self.dt2 < self.dt1:
            log.warning(
                "hop spread %.3g s narrower than time-of-flight spread %.3g s; "
                "rectangle approximation does not hold",
                self.dt2,
                self.dt1,
            )

    @classmethod
    def from_geometry(
        cls,
        n: int,
        theta: float,
        x_t: float,
        t_sfd: float,
        t_payload: float,
        d_max_m: float,
        t_min_hop: float,
        t_max_hop: float,
        d_min_m: float = 0.0,
        pulse_gain: float = 1.0,
    ) -> "AnalyticParams":
        """Time-of-flight support from the operating distance range."""
        return cls(
            n=n,
            theta=theta,
            x_t=x_t,
            t_sfd=t_sfd,
            t_payload=t_payload,
            t_min=d_min_m / SPEED_OF_LIGHT,
            t_max=d_max_m / SPEED_OF_LIGHT,
            t_min_hop=t_min_hop,
            t_max_hop=t_max_hop,
            pulse_gain=pulse_gain,
        )

    @property
    def dt0(self) -> float:
        return self.t_payload - self.t_sfd

    @property
    def dt1(self) -> float:
        return self.t_max - self.t_min

    @property
    def dt2(self) -> float:
        return self.t_max_hop - self.t_min_hop

    @property
    def effective_x(self) -> float:
        return self.x_t * self.pulse_gain

    @property
    def theta_over_x(self) -> float:
        return self.theta / self.effective_x


def pulse_peak_gain(taps: np.ndarray) -> float:
    """|p(0)|^2 of the matched-filtered pulse; 1 for a unit-energy pulse."""
    return float(np.max(np.abs(np.convolve(taps, np.conj(taps[::-1])))))


def _clamped(value: float, name: str) -> float:
    if value > 1.0:
        log.info("%s %.3g clamped to 1", name, value)
        return 1.0
    return value


def p_success_exact(params: AnalyticParams) -> float:
    """2 P(X > theta/(2x) + N/2) for X ~ B(N, 1/2), strict on integers."""
    bound = 0.5 * params.theta_over_x + 0.5 * params.n
    first = math.floor(bound) + 1
    if first > params.n:
        return 0.0
    log_tail = logsumexp(binom.logpmf(np.arange(first, params.n + 1), params.n, 0.5))
    return _clamped(2.0 * math.exp(log_tail), "exact probability")


def p_success_hoeffding(params: AnalyticParams) -> float:
    x = params.effective_x
    return _clamped(2.0 * math.exp(-(params.theta**2) / (2.0 * x**2 * params.n)), "Hoeffding bound")


def p_success_windowed(params: AnalyticParams) -> float:
    if params.dt1 <= 0:
        raise ValueError("Time-of-flight spread must be positive")
    ratio = params.dt0 / params.dt1
    if ratio > 1:
        log.warning("viability window %.3g s wider than time-of-flight spread; clamping", params.dt0)
        ratio = 1.0
    return min(1.0, max(0.0, p_success_exact(params) * ratio))


def p_success_union(params: AnalyticParams, offsets: int) -> float:
    """Union bound over `offsets` independent correlation offsets of one attempt."""
    if offsets < 1:
        raise ValueError(f"Need at least one offset, got {offsets}")
    value = offsets * p_success_exact(params)
    if value > 1:
        log.warning("union bound %.3g clamped to 1", value)
    return min(1.0, value)


@dataclass(frozen=True)
class TrapezoidPdf:
    """Density of Y = t - dt for independent uniform t and dt."""

    lo: float
    hi: float
    ramp: float

    def __post_init__(self):
        span = self.hi - self.lo
        if span <= 0 or self.ramp < 0 or 2 * self.ramp > span:
            raise ValueError(f"Bad trapezoid: support [{self.lo}, {self.hi}] with ramp {self.ramp}")

    @classmethod
    def from_params(cls, params: AnalyticParams) -> "TrapezoidPdf":
        return cls(
            lo=params.t_min - params.t_max_hop,
            hi=params.t_max - params.t_min_hop,
            ramp=min(params.dt1, params.dt2),
        )

    @property
    def height(self) -> float:
        return 1.0 / (self.hi - self.lo - self.ramp)

    def __call__(self, y):
        y = np.asarray(y, dtype=float)
        u = y - self.lo
        span = self.hi - self.lo
        if self.ramp == 0:
            return np.where((u >= 0) & (u <= span), self.height, 0.0)
        rising = self.height * u / self.ramp
        falling = self.height * (span - u) / self.ramp
        value = np.minimum(np.minimum(rising, falling), self.height)
        return np.clip(value, 0.0, None)

    def cdf(self, y):
        y = np.asarray(y, dtype=float)
        u = np.clip(y - self.lo, 0.0, self.hi - self.lo)
        span, h, r = self.hi - self.lo, self.height, self.ramp
        if r == 0:
            return u / span
        rising = h * u**2 / (2 * r)
        plateau = h * r / 2 + h * (u - r)
        falling = 1.0 - h * (span - u) ** 2 / (2 * r)
        return np.where(u < r, rising, np.where(u <= span - r, plateau, falling))

    def integral(self, a: float, b: float) -> float:
        return float(self.cdf(b) - self.cdf(a))


def pdf_y(params: AnalyticParams) -> TrapezoidPdf:
    return TrapezoidPdf.from_params(params)


def p_success_hopped(params: AnalyticParams) -> float:
    mass = pdf_y(params).integral(params.t_sfd, params.t_payload)
    return min(1.0, max(0.0, p_success_exact(params) * mass))


def gain(params: AnalyticParams) -> tuple[float, float]:
    """(dt2 / dt1, exact windowed-to-hopped ratio)."""
    if params.dt1 <= 0:
        raise ValueError("Time-of-flight spread must be positive")
    hopped = p_success_hopped(params)
    windowed = p_success_windowed(params)
    exact = windowed / hopped if hopped > 0 else math.inf
    return params.dt2 / params.dt1, exact


def analyze_table(base: AnalyticParams, theta_over_x: list[float], offsets: int = 801) -> list[dict]:
    """One row of analytic values per theta/x_t at unit attack amplitude."""
    rows = []
    for ratio in theta_over_x:
        params = AnalyticParams(
            n=base.n,
            theta=ratio,
            x_t=1.0,
            t_sfd=base.t_sfd,
            t_payload=base.t_payload,
            t_min=base.t_min,
            t_max=base.t_max,
            t_min_hop=base.t_min_hop,
            t_max_hop=base.t_max_hop,
        )
        g, g_exact = gain(params)
        rows.append(
            {
                "theta_over_x": ratio,
                "exact": p_success_exact(params),
                "hoeffding": p_success_hoeffding(params),
                "union": p_success_union(params, offsets),
                "windowed": p_success_windowed(params),
                "hopped": p_success_hopped(params),
                "gain": g,
                "gain_exact": g_exact,
            }
        )
    return rows


__all__ = [
    "AnalyticParams",
    "TrapezoidPdf",
    "pulse_peak_gain",
    "p_success_exact",
    "p_success_hoeffding",
    "p_success_windowed",
    "p_success_union",
    "pdf_y",
    "p_success_hopped",
    "gain",
    "analyze_table",
]
