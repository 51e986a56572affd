"""Ground-truth machinery and measurement.

Exact joint enumeration over tiny grids is the oracle that the
distribution-preservation tests compare decoded output against. Statistical
thresholds are not hand-picked: the plain ancestral sampler is run at the
same sample size to measure the Monte Carlo noise floor, and exact modes
must land within a small multiple of it.

The report side aggregates accept length (committed tokens per target pass;
1.0 for plain decoding), a cost-model speedup, per-depth acceptance rates,
theoretical rejection-probability curves for dual-direction versus
horizontal-only drafting, and the KL trace between the two depth-1 heads.
Wall clock is reported separately and never written into the CSV outputs,
which must be byte-identical across reruns.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Iterable, Optional, Sequence, Union

import numpy as np

from .core import (
    GridSpec,
    SamplingConfig,
    TokenDistribution,
    apply_sampling_config,
    kl_divergence,
)
from .models import DraftHeadSet, TargetModel
from .rng import stream
from .verifier import rejection_mass, residual_update

if TYPE_CHECKING:  # pragma: no cover
    from .engine import EngineConfig

# Refuse exact enumeration beyond this many grid outcomes.
MAX_ENUMERATION = 10**6


@dataclass(frozen=True)
class JointTable:
    """Probability table over complete token grids (raster-order tuples)."""

    grid: GridSpec
    probs: dict[tuple[int, ...], float]

    def total(self) -> float:
        return float(sum(self.probs.values()))


def enumerate_joint(
    model: TargetModel, grid: GridSpec, transforms: SamplingConfig
) -> JointTable:
    """Exact joint law of the (transformed) target by chaining conditionals.

    Walks the prefix tree depth first, multiplying transformed conditional
    probabilities; zero-probability branches are skipped, so top-k transforms
    shrink the support. Refuses grids with more than ``MAX_ENUMERATION``
    outcomes.
    """
    outcomes = grid.vocab_size**grid.size
    if outcomes > MAX_ENUMERATION:
        raise ValueError(
            f"enumeration of {outcomes} outcomes exceeds bound {MAX_ENUMERATION}; "
            "use a smaller grid or vocabulary"
        )
    identity = transforms.is_identity
    cond_cache: dict = {}

    def conditional(prefix: list[int]) -> TokenDistribution:
        key = model.conditional_key(prefix)
        dist = cond_cache.get(key)
        if dist is None:
            dist = model.conditional(prefix)
            if not identity:
                dist = apply_sampling_config(dist, transforms)
            cond_cache[key] = dist
        return dist

    probs: dict[tuple[int, ...], float] = {}
    size = grid.size
    prefix: list[int] = []

    def walk(weight: float) -> None:
        if len(prefix) == size:
            probs[tuple(prefix)] = weight
            return
        dist = conditional(prefix)
        for token, p in enumerate(dist.probs):
            if p > 0.0:
                prefix.append(token)
                walk(weight * float(p))
                prefix.pop()

    walk(1.0)
    return JointTable(grid, probs)


def empirical_joint(samples: Sequence[tuple[int, ...]], grid: GridSpec) -> JointTable:
    """Frequency table over observed grids; grids never seen count as zero."""
    if not samples:
        raise ValueError("samples must be nonempty")
    counts: Counter = Counter()
    for sample in samples:
        if len(sample) != grid.size:
            raise ValueError(f"sample of length {len(sample)} does not match grid {grid}")
        counts[tuple(sample)] += 1
    return empirical_joint_from_counts(counts, grid)


def empirical_joint_from_counts(counts: Counter, grid: GridSpec) -> JointTable:
    """Build the frequency table from pre-aggregated grid counts.

    Counters merge associatively and commutatively (``a + b``), so partial
    counts from parallel workers can be combined before the single divide.
    """
    total = sum(counts.values())
    if total <= 0:
        raise ValueError("counts must be nonempty")
    for key in counts:
        if len(key) != grid.size:
            raise ValueError(f"count key of length {len(key)} does not match grid {grid}")
    return JointTable(grid, {key: value / total for key, value in counts.items()})


def joint_tv(a: JointTable, b: JointTable) -> float:
    """Total variation distance between two joint tables, over the support union."""
    if a.grid != b.grid:
        raise ValueError(f"grid mismatch: {a.grid} vs {b.grid}")
    keys = a.probs.keys() | b.probs.keys()
    return 0.5 * sum(abs(a.probs.get(k, 0.0) - b.probs.get(k, 0.0)) for k in keys)


def modeled_speedup(accept_length: float, draft_overhead_ratio: float) -> float:
    """Cost-model acceleration: accept_length / (1 + overhead ratio).

    The overhead ratio is the relative per-pass cost the draft machinery
    adds; zero overhead makes the speedup equal the accept length, the
    idealized upper bound.
    """
    if accept_length < 1.0:
        raise ValueError(f"accept_length must be >= 1, got {accept_length}")
    if draft_overhead_ratio < 0.0:
        raise ValueError(f"draft_overhead_ratio must be >= 0, got {draft_overhead_ratio}")
    return accept_length / (1.0 + draft_overhead_ratio)


def verification_emitted_law(
    p: TokenDistribution, drafts: Sequence[TokenDistribution]
) -> np.ndarray:
    """Exact law of the token emitted by a sequential verification round.

    Enumerates every sample path analytically: each draft proposes each
    token with its own probability, the proposal is accepted with
    min(1, p_cur/q), and rejection branches recurse with the residual
    distribution. The distribution-preservation theorem says the result
    equals ``p`` entrywise; tests assert exactly that.
    """
    n = len(p)
    law = np.zeros(n)

    def walk(p_cur: TokenDistribution, index: int, weight: float) -> None:
        if weight <= 0.0:
            return
        if index == len(drafts):
            law[:] += weight * p_cur.probs
            return
        q = drafts[index]
        alpha = 0.0
        for token in range(n):
            qt = float(q.probs[token])
            if qt <= 0.0:
                continue
            ratio = min(1.0, p_cur.prob(token) / qt)
            law[token] += weight * qt * ratio
            alpha += qt * ratio
        residual, degenerate = residual_update(p_cur, q)
        if degenerate:
            residual = p_cur
        walk(residual, index + 1, weight * (1.0 - alpha))

    walk(p, 0, 1.0)
    return law


@dataclass
class RejectionCurves:
    """Mean rejection mass by candidate count, for both pool constructions."""

    dual: list[tuple[int, float]]
    horizontal_only: list[tuple[int, float]]


def rejection_curve(
    model: TargetModel,
    heads: DraftHeadSet,
    grid: GridSpec,
    config: "EngineConfig",
    position_count: int,
    m_max: int,
    seed: int,
) -> RejectionCurves:
    """Theoretical rejection probability versus candidate count.

    Positions are taken from ancestral samples of the target, skipping the
    first row (no vertical predictions exist there). At each position the
    dual chain adds one candidate distribution per increment, cycling
    through the available vertical depths and then the horizontal head; the
    horizontal-only chain repeats the depth-1 horizontal distribution. The
    value at m is the chance that all m candidates are rejected, averaged
    over positions. A vertical entry of depth d is reconstructed exactly as
    the engine caches it: the head evaluated on the prefix ending at its
    source commit, d rows above.
    """
    if m_max < 1:
        raise ValueError(f"m_max must be >= 1, got {m_max}")
    if position_count < 1:
        raise ValueError(f"position_count must be >= 1, got {position_count}")
    if heads.vertical_depth < 1:
        raise ValueError("rejection curves need at least one vertical head")
    gen = stream(seed, "rejection-curve")
    identity = config.transform.is_identity

    def transformed(dist: TokenDistribution, is_draft: bool) -> TokenDistribution:
        if identity or (is_draft and not config.transform_drafts):
            return dist
        return apply_sampling_config(dist, config.transform)

    width = grid.width
    dual_sums = np.zeros(m_max)
    horiz_sums = np.zeros(m_max)
    seen = 0
    h1 = heads.horizontal[0]
    while seen < position_count:
        sample = model.sample_grid(gen)
        for t in range(width, grid.size):
            prefix = sample[:t]
            target = transformed(model.conditional(prefix), is_draft=False)
            horizontal = transformed(h1.predict(prefix), is_draft=True)
            verticals = []
            row = t // width
            for d in range(1, min(row, heads.vertical_depth) + 1):
                source_prefix = sample[: t - d * width + 1]
                verticals.append(transformed(heads.vertical[d - 1].predict(source_prefix), True))
            cycle = verticals + [horizontal]
            dual_chain = [cycle[i % len(cycle)] for i in range(m_max)]
            horiz_chain = [horizontal] * m_max
            for m in range(1, m_max + 1):
                dual_sums[m - 1] += rejection_mass(target, dual_chain[:m])
                horiz_sums[m - 1] += rejection_mass(target, horiz_chain[:m])
            seen += 1
            if seen >= position_count:
                break
    return RejectionCurves(
        dual=[(m, float(dual_sums[m - 1] / seen)) for m in range(1, m_max + 1)],
        horizontal_only=[(m, float(horiz_sums[m - 1] / seen)) for m in range(1, m_max + 1)],
    )


@dataclass
class MetricsReport:
    """Benchmark summary for one decoding run or batch."""

    mode: str
    rounds: int
    committed: int
    accept_length: float
    modeled_speedup: float
    depth_accept_rates: dict[int, float]
    wall_clock_ms: float
    rejection_curve: Optional[RejectionCurves] = None
    kl_trace: Optional[list[tuple[int, float]]] = None

    def __post_init__(self) -> None:
        if self.accept_length < 1.0 - 1e-12:
            raise ValueError(f"accept_length must be >= 1, got {self.accept_length}")


def kl_trace(report: MetricsReport) -> list[tuple[int, float]]:
    """Per-position KL between the depth-1 vertical and horizontal predictions.

    Only defined for hawk-mode runs; positions with no cached vertical entry
    (the whole first row, gaps after early round ends) are absent.
    """
    if report.mode != "hawk":
        raise ValueError(f"kl trace requires a hawk-mode run, got {report.mode!r}")
    if report.kl_trace is None:
        raise ValueError("run did not collect a kl trace")
    return report.kl_trace


def pairwise_kl(vertical: TokenDistribution, horizontal: TokenDistribution) -> float:
    """KL(vertical || horizontal); convenience forwarding for report builders."""
    return kl_divergence(vertical, horizontal)


# ---------------------------------------------------------------------------
# CSV export
# ---------------------------------------------------------------------------
#
# Floats are written with repr so outputs are byte-stable across runs and
# platforms. Wall clock is deliberately not a column.

METRICS_COLUMNS = (
    "mode",
    "rounds",
    "committed",
    "accept_length",
    "modeled_speedup",
    "depth_accept_rates",
)


def _fmt(value: object) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def _rates_cell(rates: dict[int, float]) -> str:
    return "|".join(f"{d}:{rates[d]!r}" for d in sorted(rates))


def write_metrics_csv(path: Union[str, Path], reports: Sequence[MetricsReport]) -> None:
    """One row per report, fixed column order (``METRICS_COLUMNS``)."""
    lines = [",".join(METRICS_COLUMNS)]
    for r in reports:
        lines.append(
            ",".join(
                (
                    r.mode,
                    str(r.rounds),
                    str(r.committed),
                    repr(r.accept_length),
                    repr(r.modeled_speedup),
                    _rates_cell(r.depth_accept_rates),
                )
            )
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_pairs_csv(
    path: Union[str, Path], header: tuple[str, str], rows: Iterable[tuple[object, object]]
) -> None:
    """Two-column CSV for external plotting (rejection curves, KL traces)."""
    lines = [",".join(header)]
    lines.extend(f"{_fmt(a)},{_fmt(b)}" for a, b in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def write_trace_csv(path: Union[str, Path], columns: Sequence[str], rows: Iterable[tuple]) -> None:
    """Per-step trace CSV with the engine's column order."""
    lines = [",".join(columns)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
