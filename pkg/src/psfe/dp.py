"""Laplace noise for functional keys and privacy-budget accounting.

The mechanism adds an integer-rounded Laplace draw of scale
``sensitivity / epsilon`` to the functional key body. Rounding keeps the
noisy key inside Z_q and, for integer-valued queries, preserves the privacy
guarantee (it is post-processing of the continuous mechanism). Decryption
subtracts the noisy key, so the analyst sees ``sum - e``; by symmetry of
the distribution that is the same output distribution as ``sum + e``.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field

from .mife import FunctionalKey, wrap

NOISE_LIMIT = 1 << 48  # draws beyond are resampled; negligible for scale < 2**40


@dataclass(frozen=True)
class PrivacyParams:
    """Privacy factor and query sensitivity, both in plaintext units."""

    epsilon: float
    sensitivity: float

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {self.epsilon}")
        if not self.sensitivity > 0:
            raise ValueError(f"sensitivity must be > 0, got {self.sensitivity}")

    @property
    def scale(self) -> float:
        return self.sensitivity / self.epsilon


@dataclass(frozen=True)
class NoiseSample:
    """One integer-rounded Laplace draw, |value| < 2**48."""

    value: int


def laplace_inverse_cdf(b: float, u: float) -> float:
    """Laplace(0, b) quantile at 1/2 + u, for u in (-1/2, 1/2)."""
    if u == 0.0:
        return 0.0
    return -b * math.copysign(1.0, u) * math.log(1.0 - 2.0 * abs(u))


def sample_laplace(b: float, rng) -> float:
    """One draw from Laplace(0, b) by inverse-CDF sampling."""
    if not b > 0:
        raise ValueError(f"scale must be > 0, got {b}")
    while True:
        u = rng.random() - 0.5
        if u > -0.5:  # u == -0.5 would hit log(0)
            return laplace_inverse_cdf(b, u)


def round_half_away(x: float) -> int:
    """Round to nearest integer, ties away from zero."""
    if x >= 0:
        return math.floor(x + 0.5)
    return math.ceil(x - 0.5)


def sample_noise(params: PrivacyParams, rng) -> NoiseSample:
    """Integer noise for a functional key: rounded Laplace(sensitivity/epsilon)."""
    b = params.scale
    while True:
        value = round_half_away(sample_laplace(b, rng))
        if abs(value) < NOISE_LIMIT:
            return NoiseSample(value)


def apply_noise(fk: FunctionalKey, params: PrivacyParams, rng) -> FunctionalKey:
    """Blind a functional key: body' = body + e (mod q), e fresh from sample_noise."""
    e = sample_noise(params, rng)
    return FunctionalKey(
        body=wrap(fk.body + e.value), covered_indices=fk.covered_indices
    )


@dataclass
class BudgetAccount:
    """Cumulative privacy spend for one analyst, capped or unlimited.

    ``spent`` only ever grows; a charge that would cross the cap leaves the
    account untouched. Charges are atomic so concurrent queries cannot
    overspend.
    """

    analyst_id: str
    cap: float | None = None  # None = unlimited
    spent: float = 0.0
    _lock: threading.Lock = field(
        default_factory=threading.Lock, repr=False, compare=False
    )

    def charge(self, epsilon: float) -> bool:
        """Spend epsilon if the cap allows it; returns False when exhausted."""
        if not epsilon > 0:
            raise ValueError(f"epsilon must be > 0, got {epsilon}")
        with self._lock:
            if self.cap is not None and self.spent + epsilon > self.cap:
                return False
            self.spent += epsilon
            return True
