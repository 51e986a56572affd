"""Multi-draft speculative verification with heterogeneous draft distributions.

One verification round walks an ordered list of candidates, each carrying the
draft distribution it was sampled from. Step i accepts candidate token t with
probability min(1, p_i(t) / q_i(t)), where p_1 is the target conditional and
each rejection refines the target via the residual update

    p_{i+1} = norm(max(0, p_i - q_i)).

If every candidate is rejected, the emitted token is drawn from the final
refined distribution. For candidates whose tokens are drawn independently
from their own q_i, the emitted token is distributed exactly as p regardless
of how many drafts there are, what order they come in, or whether the q_i
differ; the oracle tests enumerate this claim directly.

The recorded per-step ``acceptance_prob_alpha`` is the step's marginal
acceptance probability sum_x min(p_i(x), q_i(x)), i.e. the chance the step
accepts before conditioning on which token the draft actually proposed. The
product of (1 - alpha_i) over a chain is the rejection mass: the probability
that the round falls through to the residual resample.

Everything here is a pure function of its inputs plus an explicit random
stream, so invocations are safe to run in parallel with independent streams.
Draw order within a call: one uniform per verification step, then a single
categorical draw if the round resamples.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import TokenDistribution, sample_index

logger = logging.getLogger(__name__)

ACCEPT = "accept"
RESIDUAL_RESAMPLE = "residual_resample"

HORIZONTAL = "horizontal"
VERTICAL = "vertical"


@dataclass(frozen=True, slots=True)
class Candidate:
    """A proposed token together with the draft distribution that produced it.

    ``source`` is "horizontal" or "vertical" and ``depth`` the head depth in
    that direction (rows for vertical heads, raster steps for horizontal).
    """

    token: int
    draft_dist: TokenDistribution
    source: str
    depth: int

    def __post_init__(self) -> None:
        if self.source not in (HORIZONTAL, VERTICAL):
            raise ValueError(f"source must be horizontal or vertical, got {self.source!r}")
        if self.depth < 1:
            raise ValueError(f"depth must be >= 1, got {self.depth}")
        if self.draft_dist.prob(self.token) <= 0.0:
            raise ValueError(f"candidate token {self.token} has zero draft probability")


@dataclass(slots=True)
class VerifyStepRecord:
    """One accept/reject decision inside a verification round."""

    candidate: Candidate
    acceptance_prob_alpha: float
    accepted: bool
    residual_after: TokenDistribution | None


@dataclass(slots=True)
class VerificationOutcome:
    """Result of one round: exactly one emitted token.

    ``accepted_index`` is the position of the accepting candidate in the
    input order, or None when the round fell through to the resample. When
    step records are kept it always equals ``len(steps) - 1`` for accepts.
    """

    steps: tuple[VerifyStepRecord, ...]
    emitted_token: int
    emitted_via: str
    accepted_index: int | None


def acceptance_ratio(p: TokenDistribution, q: TokenDistribution, token: int) -> float:
    """min(1, p(token) / q(token)); requires the token be sampleable under q."""
    qt = q.prob(token)
    if qt <= 0.0:
        raise ValueError(f"token {token} has zero draft probability")
    return min(1.0, p.prob(token) / qt)


def residual_update(
    p: TokenDistribution, q: TokenDistribution
) -> tuple[TokenDistribution, bool]:
    """Entrywise max(0, p - q), renormalized.

    Returns ``(residual, degenerate)``; ``degenerate`` is True when the
    leftover mass is zero (p dominated by q entrywise, which for normalized
    inputs means p == q), in which case the uniform fallback is returned.
    """
    if len(p) != len(q):
        raise ValueError(f"length mismatch: {len(p)} vs {len(q)}")
    left = np.maximum(p.probs - q.probs, 0.0)
    mass = float(left.sum())
    if mass <= 0.0:
        n = len(p)
        return TokenDistribution._wrap(np.full(n, 1.0 / n)), True
    return TokenDistribution._wrap(left / mass), False


AcceptRule = Callable[[TokenDistribution, Candidate], float]


def _standard_rule(p: TokenDistribution, candidate: Candidate) -> float:
    return acceptance_ratio(p, candidate.draft_dist, candidate.token)


def _walk(
    p: TokenDistribution,
    candidates: Sequence[Candidate],
    rng: np.random.Generator,
    accept_rule: AcceptRule,
    record_steps: bool,
) -> VerificationOutcome:
    """Shared accept/reject walk; the rule decides each step's token probability.

    If a residual ever degenerates with candidates remaining (only reachable
    through floating-point exhaustion on tiny vocabularies), the remaining
    candidates are rejected deterministically without consuming randomness,
    their alpha is still recorded against the retained distribution, and the
    final resample uses the last non-degenerate residual.
    """
    steps: list[VerifyStepRecord] = []
    p_cur = p
    exhausted = False
    for index, candidate in enumerate(candidates):
        q = candidate.draft_dist
        alpha = float(np.minimum(p_cur.probs, q.probs).sum())
        if exhausted:
            accepted = False
            residual_after = p_cur
        else:
            accepted = rng.random() < accept_rule(p_cur, candidate)
            residual_after = None
            if not accepted:
                residual, degenerate = residual_update(p_cur, q)
                if degenerate:
                    exhausted = True
                    logger.warning(
                        "residual mass exhausted at step %d; keeping last residual", index
                    )
                else:
                    p_cur = residual
                residual_after = p_cur
        if record_steps:
            steps.append(
                VerifyStepRecord(
                    candidate=candidate,
                    acceptance_prob_alpha=alpha,
                    accepted=accepted,
                    residual_after=None if accepted else residual_after,
                )
            )
        if accepted:
            return VerificationOutcome(tuple(steps), candidate.token, ACCEPT, index)
    emitted = sample_index(p_cur, rng)
    return VerificationOutcome(tuple(steps), emitted, RESIDUAL_RESAMPLE, None)


def sequential_verify(
    p: TokenDistribution,
    candidates: Sequence[Candidate],
    rng: np.random.Generator,
    *,
    record_steps: bool = True,
) -> VerificationOutcome:
    """Verify candidates in order against p, emitting exactly one token.

    The first acceptance wins and later candidates are untouched; otherwise
    the token is resampled from the residual left after all rejections.
    ``record_steps=False`` skips building the per-step records (the walk and
    its draws are identical either way), which matters in bulk simulation.
    """
    if not candidates:
        raise ValueError("candidates must be nonempty")
    return _walk(p, candidates, rng, _standard_rule, record_steps)


def rejection_mass(p: TokenDistribution, drafts: Sequence[TokenDistribution]) -> float:
    """Probability that an entire chain of drafts is rejected.

    Computes prod_j (1 - alpha_j) with alpha_j = sum_x min(p_j(x), q_j(x))
    under the residual-update chain. Appending drafts can only shrink it.
    """
    product = 1.0
    p_cur = p
    exhausted = False
    for q in drafts:
        alpha = float(np.minimum(p_cur.probs, q.probs).sum())
        product *= 1.0 - alpha
        if not exhausted:
            residual, degenerate = residual_update(p_cur, q)
            if degenerate:
                exhausted = True
            else:
                p_cur = residual
    return max(product, 0.0)


def lantern_acceptance(
    p: TokenDistribution,
    q: TokenDistribution,
    token: int,
    neighborhood: Sequence[int],
    lam: float,
) -> float:
    """Relaxed acceptance aggregating target mass over a token neighborhood.

    Returns min(1, lam * sum_{x in neighborhood} p(x) / q(token)). With a
    singleton neighborhood and lam = 1 this is the standard ratio; any larger
    neighborhood containing the token and any lam >= 1 can only raise it, so
    it dominates :func:`acceptance_ratio` pointwise. This rule is NOT
    distribution preserving; it trades output fidelity for acceptance rate
    and exists as a baseline to measure that trade.
    """
    if lam < 1.0:
        raise ValueError(f"lam must be >= 1, got {lam}")
    if token not in neighborhood:
        raise ValueError(f"token {token} not in its neighborhood")
    qt = q.prob(token)
    if qt <= 0.0:
        logger.warning("draft probability of token %d is zero; clipping acceptance to 1", token)
        return 1.0
    idx = np.asarray(sorted(neighborhood), dtype=np.intp)
    mass = float(p.probs[idx].sum())
    return min(1.0, lam * mass / qt)


def lantern_sequential_verify(
    p: TokenDistribution,
    candidates: Sequence[Candidate],
    rng: np.random.Generator,
    neighborhoods: Sequence[Sequence[int]],
    lam: float,
    *,
    record_steps: bool = True,
) -> VerificationOutcome:
    """Sequential walk with the relaxed neighborhood acceptance rule.

    The rejection bookkeeping (residual updates, final resample) matches
    :func:`sequential_verify`; only the per-step acceptance probability is
    relaxed. ``neighborhoods[t]`` lists the tokens counted toward accepting
    a proposal of token t. Recorded alphas keep the standard
    sum-min definition so traces remain comparable across modes.
    """
    if not candidates:
        raise ValueError("candidates must be nonempty")

    def rule(p_cur: TokenDistribution, candidate: Candidate) -> float:
        return lantern_acceptance(
            p_cur, candidate.draft_dist, candidate.token, neighborhoods[candidate.token], lam
        )

    return _walk(p, candidates, rng, rule, record_steps)


def token_neighborhoods(embeddings: np.ndarray, k: int) -> tuple[tuple[int, ...], ...]:
    """k-nearest-neighbor token sets under Euclidean distance in embedding space.

    Each token's own point is at distance zero, so it is always a member.
    ``k`` is clipped to the vocabulary size; ties break by token index.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    points = np.asarray(embeddings, dtype=np.float64)
    n = points.shape[0]
    k = min(k, n)
    out = []
    for t in range(n):
        d = np.linalg.norm(points - points[t], axis=1)
        order = np.lexsort((np.arange(n), d))
        out.append(tuple(sorted(int(i) for i in order[:k])))
    return tuple(out)


def steps_to_csv_rows(
    round_index: int, steps: Sequence[VerifyStepRecord]
) -> list[tuple[int, int, str, float, bool]]:
    """Flatten step records to (round, depth, source, alpha, accepted) rows."""
    return [
        (round_index, rec.candidate.depth, rec.candidate.source,
         rec.acceptance_prob_alpha, rec.accepted)
        for rec in steps
    ]
