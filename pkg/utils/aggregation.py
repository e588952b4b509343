"""
Bayesian aggregation of client binary masks

The server keeps a Beta(α, β) posterior per mask position. Reconstructed
client masks are counted into the posterior and the global probability
mask is its mode. The prior is reset to λ₀ every round(1/ρ) rounds.
"""

import logging
import struct
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from utils.codec import BinaryMask, ProbabilityMask
from utils.errors import (
    EmptyClientSet,
    LengthMismatch,
    MalformedHeader,
    TruncatedPayload,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

DEFAULT_LAMBDA0 = 1.0

CHECKPOINT_MAGIC = b"DMG1"
CHECKPOINT_VERSION = 1
# magic, version, d, t, rho, lambda0
_CHECKPOINT_HEADER = struct.Struct("<4sBQQdd")


@dataclass(frozen=True, eq=False)
class BetaPrior:
    alpha: np.ndarray
    beta: np.ndarray
    lambda0: float = DEFAULT_LAMBDA0

    @classmethod
    def fresh(cls, d: int, lambda0: float = DEFAULT_LAMBDA0) -> "BetaPrior":
        return cls(np.full(d, lambda0, dtype=np.float64), np.full(d, lambda0, dtype=np.float64), lambda0)

    @property
    def d(self) -> int:
        return int(self.alpha.size)


@dataclass(frozen=True, eq=False)
class GlobalState:
    theta: np.ndarray
    prior: BetaPrior
    round: int = 0
    participation: float = 1.0

    @classmethod
    def initial(cls, d: int, participation: float = 1.0, lambda0: float = DEFAULT_LAMBDA0,
                theta0: float = 0.5) -> "GlobalState":
        return cls(np.full(d, theta0, dtype=np.float64), BetaPrior.fresh(d, lambda0), 0, participation)

    @property
    def d(self) -> int:
        return int(self.theta.size)

    def probability_mask(self) -> ProbabilityMask:
        return ProbabilityMask.from_probabilities(self.theta)

    def __eq__(self, other):
        if not isinstance(other, GlobalState):
            return NotImplemented
        return (self.round == other.round and self.participation == other.participation
                and self.prior.lambda0 == other.prior.lambda0
                and np.array_equal(self.theta, other.theta)
                and np.array_equal(self.prior.alpha, other.prior.alpha)
                and np.array_equal(self.prior.beta, other.prior.beta))


def reset_period(rho: float) -> int:
    """round(1/ρ) with banker's rounding, at least 1"""
    if not 0.0 < rho <= 1.0:
        raise ValueError(f"Participation must lie in (0, 1], got {rho}")
    return max(1, round(1.0 / rho))


def maybe_reset(prior: BetaPrior, t: int, rho: float) -> BetaPrior:
    """Reset α and β to λ₀ when t is a multiple of round(1/ρ)"""
    if t % reset_period(rho) != 0:
        return prior
    logger.debug(f"Resetting Beta prior at round {t}")
    return BetaPrior.fresh(prior.d, prior.lambda0)


def _stack(masks: Sequence[BinaryMask], d: int) -> np.ndarray:
    if not masks:
        raise EmptyClientSet("Aggregation needs at least one client mask")
    for mask in masks:
        if mask.d != d:
            raise LengthMismatch(f"Client mask has {mask.d} entries, expected {d}")
    return np.stack([mask.bits for mask in masks]).astype(np.float64)


def bayes_agg(masks: Sequence[BinaryMask], state: GlobalState) -> GlobalState:
    """
    Count the client masks into the Beta posterior and take its mode.

    Returns:
        New GlobalState at round state.round + 1
    """
    stacked = _stack(masks, state.d)
    t = state.round + 1
    prior = maybe_reset(state.prior, t, state.participation)
    k = stacked.shape[0]
    ones = stacked.sum(axis=0)
    alpha = prior.alpha + ones
    beta = prior.beta + k - ones
    denominator = alpha + beta - 2.0
    with np.errstate(invalid="ignore", divide="ignore"):
        theta = np.where(denominator > 0, (alpha - 1.0) / denominator, 0.5)
    theta = np.clip(theta, 0.0, 1.0)
    return GlobalState(theta, BetaPrior(alpha, beta, prior.lambda0), t, state.participation)


def estimate_mean(masks: Sequence[BinaryMask]) -> np.ndarray:
    if not masks:
        raise EmptyClientSet("Mean estimation needs at least one client mask")
    return _stack(masks, masks[0].d).mean(axis=0)


@dataclass(frozen=True)
class BoundReport:
    empirical: float
    bound: float
    tolerance: float
    trials: int
    passed: bool


def verify_error_bound(theta_matrix, trials: int, bits_per_entry: Optional[int] = None,
                       seed: int = 0, chunk_elements: int = 2_000_000) -> BoundReport:
    """
    Monte Carlo check of E||θ̄ − mean(m′)||² ≤ d / 4K.

    Args:
        theta_matrix: K×d client probabilities
        trials: Monte Carlo repetitions
        bits_per_entry: when set, each sampled bit is flipped independently
            with probability 2^-bits_per_entry (filter false positives)
        seed: sampling seed
        chunk_elements: random draws per vectorised batch

    Returns:
        BoundReport with the empirical mean error, the bound d/4K and pass/fail
        against (d/4K)(1 + 3/sqrt(trials))
    """
    if trials < 1:
        raise ValueError("trials must be at least 1")
    theta = np.atleast_2d(np.asarray(theta_matrix, dtype=np.float64))
    k, d = theta.shape
    target = theta.mean(axis=0)
    flip_p = 0.0 if bits_per_entry is None else 2.0 ** (-bits_per_entry)
    rng = np.random.default_rng(seed)

    total = 0.0
    remaining = trials
    while remaining:
        n = min(remaining, max(1, chunk_elements // (k * d)))
        masks = rng.random((n, k, d)) < theta
        if flip_p:
            masks ^= rng.random((n, k, d)) < flip_p
        errors = ((masks.mean(axis=1) - target) ** 2).sum(axis=1)
        total += float(errors.sum())
        remaining -= n

    empirical = total / trials
    bound = d / (4.0 * k)
    tolerance = bound * (1.0 + 3.0 / np.sqrt(trials))
    return BoundReport(empirical, bound, tolerance, trials, bool(empirical <= tolerance))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(state: GlobalState) -> bytes:
    header = _CHECKPOINT_HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, state.d, state.round,
                                     state.participation, state.prior.lambda0)
    arrays = [state.prior.alpha, state.prior.beta, state.theta]
    return header + b"".join(np.asarray(a, dtype="<f8").tobytes() for a in arrays)


def load_checkpoint(data: bytes) -> GlobalState:
    """
    Raises:
        MalformedHeader, VersionMismatch, TruncatedPayload
    """
    if data[:4] != CHECKPOINT_MAGIC:
        raise MalformedHeader("Missing DMG1 magic")
    if len(data) < _CHECKPOINT_HEADER.size:
        raise TruncatedPayload("Checkpoint header is truncated")
    _, version, d, t, rho, lambda0 = _CHECKPOINT_HEADER.unpack_from(data, 0)
    if version != CHECKPOINT_VERSION:
        raise VersionMismatch(f"Checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    body = data[_CHECKPOINT_HEADER.size:]
    if len(body) < 3 * 8 * d:
        raise TruncatedPayload(f"Checkpoint body has {len(body)} bytes, expected {24 * d}")
    if len(body) > 3 * 8 * d:
        raise MalformedHeader("Trailing bytes after checkpoint arrays")
    arrays = np.frombuffer(body, dtype="<f8").astype(np.float64).reshape(3, d)
    prior = BetaPrior(arrays[0].copy(), arrays[1].copy(), lambda0)
    return GlobalState(arrays[2].copy(), prior, t, rho)
