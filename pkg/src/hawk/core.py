"""Grid geometry and probability-vector primitives.

Everything downstream (models, verification, the decoding engine) moves
probability vectors around; this module owns their representation, the
sampling transforms (temperature, top-k) that define effective target and
draft distributions, and the raster addressing of 2-D token grids.

All types here are immutable values and all functions are pure, so they are
safe to share across threads or worker processes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence, Union

import numpy as np

# Tolerance for "sums to one" checks on probability vectors.
SUM_TOLERANCE = 1e-9
# Entries in [-NEGATIVE_CLAMP, 0) are treated as rounding noise and clamped.
NEGATIVE_CLAMP = 1e-12


class StateError(RuntimeError):
    """An operation was invoked in a state that does not admit it."""


@dataclass(frozen=True)
class GridSpec:
    """Shape of a token grid: tokens per row, rows, and vocabulary size."""

    width: int
    height: int
    vocab_size: int

    def __post_init__(self) -> None:
        if self.width < 1:
            raise ValueError(f"width must be >= 1, got {self.width}")
        if self.height < 1:
            raise ValueError(f"height must be >= 1, got {self.height}")
        if self.vocab_size < 2:
            raise ValueError(f"vocab_size must be >= 2, got {self.vocab_size}")

    @property
    def size(self) -> int:
        """Total number of tokens in the grid."""
        return self.width * self.height

    def contains(self, pos: "Position") -> bool:
        return 0 <= pos.row < self.height and 0 <= pos.col < self.width


@dataclass(frozen=True)
class Position:
    """Zero-based (row, col) grid coordinate."""

    row: int
    col: int


def rowcol_to_raster(pos: Position, grid: GridSpec) -> int:
    """Map a (row, col) position to its raster-scan index (row-major)."""
    if not grid.contains(pos):
        raise ValueError(f"position {pos} outside {grid.width}x{grid.height} grid")
    return pos.row * grid.width + pos.col


def raster_to_rowcol(idx: int, grid: GridSpec) -> Position:
    """Inverse of :func:`rowcol_to_raster`."""
    if not 0 <= idx < grid.size:
        raise ValueError(f"raster index {idx} out of range [0, {grid.size})")
    row, col = divmod(idx, grid.width)
    return Position(row, col)


class TokenDistribution:
    """An immutable probability vector over the vocabulary.

    The entries are validated on construction: non-negative (tiny negative
    rounding noise is clamped) and summing to one within ``SUM_TOLERANCE``.
    A cumulative table is cached lazily to make repeated sampling cheap.
    """

    __slots__ = ("probs", "_cum", "_top")

    def __init__(self, probs: Union[Sequence[float], np.ndarray]) -> None:
        arr = np.array(probs, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError("probs must be a non-empty 1-D sequence")
        low = float(arr.min())
        if low < 0.0:
            if low < -NEGATIVE_CLAMP:
                raise ValueError(f"negative probability {low}")
            np.clip(arr, 0.0, None, out=arr)
        total = float(arr.sum())
        if abs(total - 1.0) > SUM_TOLERANCE:
            raise ValueError(f"probabilities sum to {total}, expected 1.0")
        arr.setflags(write=False)
        self.probs = arr
        self._cum = None
        self._top = -1

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "TokenDistribution":
        # Trusted constructor for arrays normalized by construction.
        out = object.__new__(cls)
        arr.setflags(write=False)
        out.probs = arr
        out._cum = None
        out._top = -1
        return out

    def prob(self, token: int) -> float:
        return float(self.probs[token])

    def __len__(self) -> int:
        return int(self.probs.size)

    def __repr__(self) -> str:
        return f"TokenDistribution({self.probs.tolist()!r})"


def sample_index(dist: TokenDistribution, rng: np.random.Generator) -> int:
    """Draw one token index from ``dist`` using a single uniform variate.

    Uses the cached cumulative table; cumulative rounding shortfall at the
    upper end falls back to the last token with positive probability, so a
    zero-probability token can never be returned.
    """
    cum = dist._cum
    if cum is None:
        cum = np.cumsum(dist.probs)
        dist._cum = cum
        dist._top = int(np.nonzero(dist.probs)[0][-1])
    i = int(np.searchsorted(cum, rng.random(), side="right"))
    return i if i <= dist._top else dist._top


@dataclass(frozen=True)
class SamplingConfig:
    """Sampling transform: temperature scaling followed by top-k filtering.

    ``top_k`` may be the string ``"all"`` (no filtering) or a positive
    integer; values at or above the vocabulary size are identities.
    """

    top_k: Union[int, str] = "all"
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if isinstance(self.top_k, str):
            if self.top_k != "all":
                raise ValueError(f'top_k must be a positive int or "all", got {self.top_k!r}')
        elif self.top_k < 1:
            raise ValueError(f"top_k must be >= 1, got {self.top_k}")
        if self.temperature <= 0:
            raise ValueError(f"temperature must be > 0, got {self.temperature}")

    @property
    def is_identity(self) -> bool:
        return self.top_k == "all" and self.temperature == 1.0


def normalize(weights: Union[Sequence[float], np.ndarray]) -> tuple[TokenDistribution, bool]:
    """Normalize non-negative weights to a distribution.

    Returns ``(distribution, degenerate)``. When the total mass is zero the
    fallback is the uniform distribution and ``degenerate`` is True; callers
    decide what to do with that. Negative weights raise ``ValueError``.
    """
    arr = np.array(weights, dtype=np.float64)
    if arr.ndim != 1 or arr.size == 0:
        raise ValueError("weights must be a non-empty 1-D sequence")
    low = float(arr.min())
    if low < 0.0:
        if low < -NEGATIVE_CLAMP:
            raise ValueError(f"negative weight {low}")
        np.clip(arr, 0.0, None, out=arr)
    total = float(arr.sum())
    if total <= 0.0:
        return TokenDistribution._wrap(np.full(arr.size, 1.0 / arr.size)), True
    return TokenDistribution._wrap(arr / total), False


def apply_temperature(dist: TokenDistribution, temperature: float) -> TokenDistribution:
    """Rescale a distribution as ``p_i ** (1/temperature)``, renormalized.

    Computed in log space so that very low temperatures concentrate mass on
    the argmax instead of underflowing to zero.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    if temperature == 1.0:
        return dist
    with np.errstate(divide="ignore"):
        scaled = np.log(dist.probs) / temperature
    weights = np.exp(scaled - scaled.max())
    return TokenDistribution._wrap(weights / weights.sum())


def apply_top_k(dist: TokenDistribution, k: int) -> TokenDistribution:
    """Keep the k most probable tokens, zero the rest, and renormalize.

    Ties at the cutoff are broken in favor of the lowest token index so the
    result is deterministic. ``k >= len(dist)`` is the identity.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    n = len(dist)
    if k >= n:
        return dist
    # lexsort: primary key -probs (descending prob), secondary key index.
    order = np.lexsort((np.arange(n), -dist.probs))
    kept = np.zeros(n)
    keep = order[:k]
    kept[keep] = dist.probs[keep]
    return TokenDistribution._wrap(kept / kept.sum())


def apply_sampling_config(dist: TokenDistribution, config: SamplingConfig) -> TokenDistribution:
    """Temperature first, then top-k, matching the usual sampling pipeline."""
    out = apply_temperature(dist, config.temperature)
    if config.top_k != "all":
        out = apply_top_k(out, int(config.top_k))
    return out


def kl_divergence(p: TokenDistribution, q: TokenDistribution) -> float:
    """KL(p || q) in nats, with the 0 * log(0) terms dropped.

    Returns ``math.inf`` when p puts mass where q has none.
    """
    if len(p) != len(q):
        raise ValueError(f"length mismatch: {len(p)} vs {len(q)}")
    mask = p.probs > 0.0
    if np.any(mask & (q.probs <= 0.0)):
        return math.inf
    pm = p.probs[mask]
    value = float(np.sum(pm * (np.log(pm) - np.log(q.probs[mask]))))
    return max(value, 0.0)


def total_variation(p: TokenDistribution, q: TokenDistribution) -> float:
    """Total variation distance ``0.5 * sum |p - q|``, in [0, 1]."""
    if len(p) != len(q):
        raise ValueError(f"length mismatch: {len(p)} vs {len(q)}")
    return 0.5 * float(np.abs(p.probs - q.probs).sum())
