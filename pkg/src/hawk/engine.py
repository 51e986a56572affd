"""Raster-order decoding loop with spatial speculation.

Round structure (speculative modes): pools are assembled for speculation
depths 1..H from the round-start committed prefix. Each pool at depth n
merges the horizontal head's prediction for position T+n with cached
vertical predictions targeting the same position, written rows earlier. Per
depth, candidates are drawn from the pool and the layers are combined as a
Cartesian product, truncated to the node budget keeping the earliest paths
in depth-first order. Verification walks the depths: the candidate list
compatible with the accepted path so far is verified against the current
target conditional; the first rejection resamples, commits the resampled
token, and ends the round. A round that accepts through every layer commits
one extra bonus token drawn from the target. Every round therefore commits
between 1 and H+1 tokens and is accounted as exactly one target-model pass,
which is what a batched tree verification would cost.

Vertical head outputs are computed when a token commits, conditioned on the
committed prefix only, and parked in the speculation cache until decoding
reaches their target position. Writing at commit time (rather than while
drafting) keeps every cached draft distribution independent of the
verifier's randomness, which the exactness argument requires. Entries behind
the frontier are evicted; live occupancy never exceeds
``width * vsd * (vsd + 1) / 2``.

Draw order, for reproducibility: the draft stream supplies pool candidate
draws (layers in depth order, within a layer following the verification
order, one uniform per candidate); the verify stream supplies one uniform
per verification step plus one categorical draw per resample or bonus token.

One decode session is strictly sequential; sessions over shared immutable
models may run concurrently.
"""

from __future__ import annotations

import itertools
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from .core import (
    GridSpec,
    SamplingConfig,
    StateError,
    TokenDistribution,
    apply_sampling_config,
    kl_divergence,
    sample_index,
)
from .models import DraftHeadSet, TargetModel
from .oracle_metrics import MetricsReport, modeled_speedup
from .rng import stream
from .verifier import (
    ACCEPT,
    Candidate,
    HORIZONTAL,
    VERTICAL,
    VerificationOutcome,
    lantern_sequential_verify,
    sequential_verify,
    token_neighborhoods,
)

MODE_VANILLA = "vanilla"
MODE_MEDUSA = "medusa"
MODE_HAWK = "hawk"
MODE_LANTERN = "lantern"
MODES = (MODE_VANILLA, MODE_MEDUSA, MODE_HAWK, MODE_LANTERN)

VERTICAL_FIRST = "vertical_first"
HORIZONTAL_FIRST = "horizontal_first"


@dataclass(frozen=True)
class EngineConfig:
    """Decoding configuration.

    ``samples_per_horizontal`` / ``samples_per_vertical`` are per-pool
    candidate counts (the latter applies to each cached vertical entry).
    ``transform`` shapes the effective target conditional before
    verification; ``transform_drafts`` applies the same transform to head
    outputs, which keeps drafts aligned with what they are verified against.
    """

    mode: str
    horizontal_depth: int = 1
    vertical_depth: int = 0
    samples_per_horizontal: int = 1
    samples_per_vertical: int = 1
    node_budget: int = 64
    verification_order: str = VERTICAL_FIRST
    transform: SamplingConfig = field(default_factory=SamplingConfig)
    transform_drafts: bool = True
    lantern_k: int = 10
    lantern_lam: float = 2.0
    draft_overhead_ratio: float = 0.0

    def __post_init__(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.horizontal_depth < 1:
            raise ValueError(f"horizontal_depth must be >= 1, got {self.horizontal_depth}")
        if self.vertical_depth < 0:
            raise ValueError(f"vertical_depth must be >= 0, got {self.vertical_depth}")
        if self.samples_per_horizontal < 0 or self.samples_per_vertical < 0:
            raise ValueError("candidate counts must be >= 0")
        if self.node_budget < 1:
            raise ValueError(f"node_budget must be >= 1, got {self.node_budget}")
        if self.verification_order not in (VERTICAL_FIRST, HORIZONTAL_FIRST):
            raise ValueError(f"unknown verification_order {self.verification_order!r}")
        if self.mode == MODE_HAWK and self.vertical_depth < 1:
            raise ValueError("hawk mode requires vertical_depth >= 1")
        if self.mode in (MODE_VANILLA, MODE_MEDUSA, MODE_LANTERN) and self.vertical_depth != 0:
            raise ValueError(f"{self.mode} mode requires vertical_depth == 0")
        if self.lantern_k < 1:
            raise ValueError(f"lantern_k must be >= 1, got {self.lantern_k}")
        if self.lantern_lam < 1.0:
            raise ValueError(f"lantern_lam must be >= 1, got {self.lantern_lam}")
        if self.draft_overhead_ratio < 0:
            raise ValueError("draft_overhead_ratio must be >= 0")


def cache_capacity(image_width: int, vertical_depth: int) -> int:
    """Live-entry bound for the speculation cache: width * vsd * (vsd+1) / 2."""
    if image_width < 1:
        raise ValueError(f"image_width must be >= 1, got {image_width}")
    if vertical_depth < 0:
        raise ValueError(f"vertical_depth must be >= 0, got {vertical_depth}")
    return image_width * (vertical_depth * (vertical_depth + 1)) // 2


def vertical_target_index(frontier_token: int, image_width: int, depth: int) -> int:
    """Raster index a depth-d vertical prediction from token T targets: T + d*width."""
    if depth < 1:
        raise ValueError(f"depth must be >= 1, got {depth}")
    return frontier_token + image_width * depth


class SpeculationCache:
    """Vertical draft distributions keyed by (target raster index, depth).

    Each entry remembers the commit index it was computed from; the key
    relation target == source + depth * width is enforced on insert, so a
    gathered entry of depth d always originates exactly d rows above its
    target. Exceeding capacity raises instead of evicting, because a live
    entry disappearing silently would be an engine bug.
    """

    __slots__ = ("entries", "width", "vertical_depth", "capacity", "peak_occupancy")

    def __init__(self, width: int, vertical_depth: int) -> None:
        self.entries: dict[tuple[int, int], tuple[TokenDistribution, int]] = {}
        self.width = width
        self.vertical_depth = vertical_depth
        self.capacity = cache_capacity(width, vertical_depth)
        self.peak_occupancy = 0

    @property
    def occupancy(self) -> int:
        return len(self.entries)

    def insert(
        self, target_index: int, depth: int, dist: TokenDistribution, source_index: int
    ) -> None:
        if target_index != source_index + depth * self.width:
            raise RuntimeError(
                f"cache key violation: target {target_index} != "
                f"{source_index} + {depth} * {self.width}"
            )
        self.entries[(target_index, depth)] = (dist, source_index)
        n = len(self.entries)
        if n > self.capacity:
            raise RuntimeError(f"speculation cache occupancy {n} exceeds capacity {self.capacity}")
        if n > self.peak_occupancy:
            self.peak_occupancy = n

    def evict_before(self, frontier: int) -> None:
        """Drop entries whose target position is already committed."""
        dead = [key for key in self.entries if key[0] < frontier]
        for key in dead:
            del self.entries[key]

    def gather(self, target_index: int) -> list[tuple[int, TokenDistribution]]:
        """All cached entries targeting this position, ordered by depth."""
        out = []
        for depth in range(1, self.vertical_depth + 1):
            entry = self.entries.get((target_index, depth))
            if entry is not None:
                out.append((depth, entry[0]))
        return out


@dataclass(frozen=True)
class SamplingPool:
    """Merged draft distributions for one speculation position."""

    position: int
    horizontal: TokenDistribution
    vertical: tuple[tuple[int, TokenDistribution], ...]


@dataclass(frozen=True)
class CandidateTree:
    """Depth-indexed candidate layers plus the kept Cartesian-product paths."""

    layers: tuple[tuple[Candidate, ...], ...]
    paths: tuple[tuple[int, ...], ...]


@dataclass
class DecodeState:
    """Mutable per-session state: committed prefix, cache, streams, round count."""

    grid: GridSpec
    committed: list[int]
    cache: SpeculationCache
    draft_rng: np.random.Generator
    verify_rng: np.random.Generator
    rounds: int = 0

    @classmethod
    def fresh(cls, grid: GridSpec, config: EngineConfig, seed: int) -> "DecodeState":
        return cls(
            grid=grid,
            committed=[],
            cache=SpeculationCache(grid.width, config.vertical_depth),
            draft_rng=stream(seed, "draft"),
            verify_rng=stream(seed, "verify"),
        )


class DecodingContext:
    """Immutable run inputs plus memoized transformed distributions.

    The target-conditional cache is keyed by the model's own sufficient
    statistic (``conditional_key``), the draft cache by head-output object
    identity; both are what keeps bulk simulation fast. One context may
    serve many sequential sessions of the same (model, heads, config).
    """

    def __init__(
        self,
        model: TargetModel,
        heads: Optional[DraftHeadSet],
        config: EngineConfig,
        *,
        collect_records: bool = False,
        collect_kl: bool = False,
    ) -> None:
        if config.mode != MODE_VANILLA:
            if heads is None:
                raise ValueError(f"{config.mode} mode requires draft heads")
            if heads.horizontal_depth < config.horizontal_depth:
                raise ValueError(
                    f"config wants horizontal depth {config.horizontal_depth}, "
                    f"heads provide {heads.horizontal_depth}"
                )
            if heads.vertical_depth < config.vertical_depth:
                raise ValueError(
                    f"config wants vertical depth {config.vertical_depth}, "
                    f"heads provide {heads.vertical_depth}"
                )
        self.model = model
        self.heads = heads
        self.config = config
        self.collect_records = collect_records
        self.collect_kl = collect_kl
        self.kl_pairs: list[tuple[int, float]] = []
        self.depth_attempts: dict[int, int] = {}
        self.depth_accepts: dict[int, int] = {}
        self._identity = config.transform.is_identity
        self._target_cache: dict = {}
        self._draft_cache: dict[int, TokenDistribution] = {}
        if config.mode == MODE_LANTERN:
            self.neighborhoods = token_neighborhoods(model.token_embeddings, config.lantern_k)
        else:
            self.neighborhoods = None

    def target_dist(self, prefix: Sequence[int]) -> TokenDistribution:
        key = self.model.conditional_key(prefix)
        dist = self._target_cache.get(key)
        if dist is None:
            dist = self.model.conditional(prefix)
            if not self._identity:
                dist = apply_sampling_config(dist, self.config.transform)
            self._target_cache[key] = dist
        return dist

    def draft_dist(self, head, prefix: Sequence[int]) -> TokenDistribution:
        base = head.predict(prefix)
        if self._identity or not self.config.transform_drafts:
            return base
        key = id(base)
        dist = self._draft_cache.get(key)
        if dist is None:
            dist = apply_sampling_config(base, self.config.transform)
            self._draft_cache[key] = dist
        return dist


@dataclass
class RoundResult:
    """Tokens committed by one round plus its per-depth verification outcomes."""

    committed: list[int]
    verifications: list[tuple[int, VerificationOutcome]]
    frontier: int


def build_pool(state: DecodeState, n: int, horizontal_output: TokenDistribution) -> SamplingPool:
    """Pool for speculation depth n: the horizontal prediction plus any cached
    vertical predictions targeting the same position."""
    if n < 1:
        raise ValueError(f"depth must be >= 1, got {n}")
    position = len(state.committed) + n - 1
    if position >= state.grid.size:
        raise ValueError(f"speculation position {position} beyond grid end")
    return SamplingPool(position, horizontal_output, tuple(state.cache.gather(position)))


def build_candidate_tree(
    pools: Sequence[SamplingPool], config: EngineConfig, rng: np.random.Generator
) -> CandidateTree:
    """Sample per-depth candidates and combine layers as a capped Cartesian product.

    Every candidate keeps the distribution it was drawn from as its draft.
    Layers follow the configured verification order (vertical-sourced
    candidates first by default). An empty layer shortens the round; an
    empty first layer means there is nothing to speculate with.
    """
    layers: list[tuple[Candidate, ...]] = []
    for depth, pool in enumerate(pools, start=1):
        layer: list[Candidate] = []

        def draw_from(dist: TokenDistribution, source: str, head_depth: int, count: int) -> None:
            for _ in range(count):
                layer.append(Candidate(sample_index(dist, rng), dist, source, head_depth))

        def draw_vertical() -> None:
            for vdepth, dist in pool.vertical:
                draw_from(dist, VERTICAL, vdepth, config.samples_per_vertical)

        if config.verification_order == VERTICAL_FIRST:
            draw_vertical()
            draw_from(pool.horizontal, HORIZONTAL, depth, config.samples_per_horizontal)
        else:
            draw_from(pool.horizontal, HORIZONTAL, depth, config.samples_per_horizontal)
            draw_vertical()
        if not layer:
            break
        layers.append(tuple(layer))
    if not layers:
        raise ValueError("no candidates at depth 1: cannot speculate")
    index_ranges = [range(len(layer)) for layer in layers]
    paths = tuple(itertools.islice(itertools.product(*index_ranges), config.node_budget))
    return CandidateTree(tuple(layers), paths)


def commit_token(state: DecodeState, ctx: DecodingContext, token: int, newly: list[int]) -> None:
    """Append one token and apply the commit-time cache policy.

    For each vertical depth d the head is evaluated on the now-committed
    prefix and stored under (commit_index + d * width, d); writes whose
    target falls past the grid end are skipped. Entries behind the new
    frontier are evicted first, so occupancy stays within capacity.
    """
    t = len(state.committed)
    config = ctx.config
    if ctx.collect_kl and config.vertical_depth >= 1:
        entry = state.cache.entries.get((t, 1))
        if entry is not None:
            h1 = ctx.draft_dist(ctx.heads.horizontal[0], state.committed)
            ctx.kl_pairs.append((t, kl_divergence(entry[0], h1)))
    state.committed.append(token)
    newly.append(token)
    if config.mode != MODE_VANILLA and config.vertical_depth >= 1:
        state.cache.evict_before(len(state.committed))
        width = state.grid.width
        total = state.grid.size
        for d in range(1, config.vertical_depth + 1):
            target_index = vertical_target_index(t, width, d)
            if target_index < total:
                dist = ctx.draft_dist(ctx.heads.vertical[d - 1], state.committed)
                state.cache.insert(target_index, d, dist, t)


def _verify(
    ctx: DecodingContext,
    target: TokenDistribution,
    candidates: Sequence[Candidate],
    rng: np.random.Generator,
) -> VerificationOutcome:
    if ctx.config.mode == MODE_LANTERN:
        return lantern_sequential_verify(
            target,
            candidates,
            rng,
            ctx.neighborhoods,
            ctx.config.lantern_lam,
            record_steps=ctx.collect_records,
        )
    return sequential_verify(target, candidates, rng, record_steps=ctx.collect_records)


def decode_round(state: DecodeState, ctx: DecodingContext) -> RoundResult:
    """Run one decoding round; commits between 1 and H+1 tokens.

    Accounted as a single target-model pass regardless of tree size: a real
    deployment verifies the whole candidate tree in one batched forward.
    """
    total = state.grid.size
    committed = state.committed
    if len(committed) >= total:
        raise StateError("decode already finished")
    frontier = len(committed)
    newly: list[int] = []
    verifications: list[tuple[int, VerificationOutcome]] = []

    if ctx.config.mode == MODE_VANILLA:
        dist = ctx.target_dist(committed)
        commit_token(state, ctx, sample_index(dist, state.verify_rng), newly)
        state.rounds += 1
        return RoundResult(newly, verifications, frontier)

    config = ctx.config
    depth_count = min(config.horizontal_depth, total - frontier)
    pools = []
    for n in range(1, depth_count + 1):
        horizontal = ctx.draft_dist(ctx.heads.horizontal[n - 1], committed)
        pools.append(build_pool(state, n, horizontal))
    tree = build_candidate_tree(pools, config, state.draft_rng)

    active = tree.paths
    ended_by_resample = False
    for layer_index, layer in enumerate(tree.layers):
        target = ctx.target_dist(committed)
        continuations: list[int] = []
        seen: set[int] = set()
        for path in active:
            j = path[layer_index]
            if j not in seen:
                seen.add(j)
                continuations.append(j)
        candidates = [layer[j] for j in continuations]
        depth = layer_index + 1
        ctx.depth_attempts[depth] = ctx.depth_attempts.get(depth, 0) + 1
        outcome = _verify(ctx, target, candidates, state.verify_rng)
        verifications.append((depth, outcome))
        if outcome.emitted_via == ACCEPT:
            ctx.depth_accepts[depth] = ctx.depth_accepts.get(depth, 0) + 1
            chosen = continuations[outcome.accepted_index]
            active = [path for path in active if path[layer_index] == chosen]
            commit_token(state, ctx, outcome.emitted_token, newly)
        else:
            commit_token(state, ctx, outcome.emitted_token, newly)
            ended_by_resample = True
            break

    if not ended_by_resample and len(committed) < total:
        bonus = ctx.target_dist(committed)
        commit_token(state, ctx, sample_index(bonus, state.verify_rng), newly)
    state.rounds += 1
    return RoundResult(newly, verifications, frontier)


TraceRow = tuple[int, int, int, str, float, bool, int]

TRACE_COLUMNS = (
    "round",
    "frontier_index",
    "depth",
    "source",
    "alpha",
    "accepted",
    "committed_this_round",
)


def decode_image(
    model: TargetModel,
    heads: Optional[DraftHeadSet],
    config: EngineConfig,
    seed: int,
    *,
    trace: Optional[list[TraceRow]] = None,
) -> tuple[np.ndarray, MetricsReport]:
    """Decode one full grid; deterministic given the seed.

    Returns the height-by-width token array and a metrics report. Pass a
    list as ``trace`` to collect one row per verification step
    (``TRACE_COLUMNS``). The KL trace between the depth-1 cached vertical
    prediction and the depth-1 horizontal head is collected for hawk runs.
    """
    collect_kl = config.mode == MODE_HAWK and config.vertical_depth >= 1
    ctx = DecodingContext(
        model, heads, config, collect_records=trace is not None, collect_kl=collect_kl
    )
    state = DecodeState.fresh(model.grid, config, seed)
    start = time.perf_counter()
    while len(state.committed) < model.grid.size:
        result = decode_round(state, ctx)
        if trace is not None:
            round_index = state.rounds - 1
            for depth, outcome in result.verifications:
                for rec in outcome.steps:
                    trace.append(
                        (
                            round_index,
                            result.frontier,
                            depth,
                            f"{rec.candidate.source}:{rec.candidate.depth}",
                            rec.acceptance_prob_alpha,
                            rec.accepted,
                            len(result.committed),
                        )
                    )
    wall_clock_ms = (time.perf_counter() - start) * 1000.0
    tokens = np.array(state.committed, dtype=np.int64).reshape(model.grid.height, model.grid.width)
    report = _build_report(ctx, state.rounds, model.grid.size, wall_clock_ms,
                           kl_trace=ctx.kl_pairs if collect_kl else None)
    return tokens, report


@dataclass
class BatchResult:
    """Aggregate of many decode sessions sharing one context and seed."""

    grid_counts: Counter
    decodes: int
    rounds: int
    committed: int
    depth_attempts: dict[int, int]
    depth_accepts: dict[int, int]
    wall_clock_ms: float

    @property
    def accept_length(self) -> float:
        return self.committed / self.rounds

    def to_report(self, mode: str, draft_overhead_ratio: float = 0.0) -> MetricsReport:
        rates = {
            d: self.depth_accepts.get(d, 0) / attempts
            for d, attempts in sorted(self.depth_attempts.items())
        }
        return MetricsReport(
            mode=mode,
            rounds=self.rounds,
            committed=self.committed,
            accept_length=self.accept_length,
            modeled_speedup=modeled_speedup(self.accept_length, draft_overhead_ratio),
            depth_accept_rates=rates,
            wall_clock_ms=self.wall_clock_ms,
        )


def decode_batch(
    model: TargetModel,
    heads: Optional[DraftHeadSet],
    config: EngineConfig,
    seed: int,
    count: int,
) -> BatchResult:
    """Run ``count`` decode sessions back to back on shared streams.

    Sessions are sequential on a single pair of streams derived from the
    seed, so the whole batch is reproducible; a batch of one matches
    :func:`decode_image` token for token.
    """
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    ctx = DecodingContext(model, heads, config)
    draft_rng = stream(seed, "draft")
    verify_rng = stream(seed, "verify")
    grid = model.grid
    counts: Counter = Counter()
    rounds = 0
    start = time.perf_counter()
    for _ in range(count):
        state = DecodeState(
            grid=grid,
            committed=[],
            cache=SpeculationCache(grid.width, config.vertical_depth),
            draft_rng=draft_rng,
            verify_rng=verify_rng,
        )
        while len(state.committed) < grid.size:
            decode_round(state, ctx)
        counts[tuple(state.committed)] += 1
        rounds += state.rounds
    wall_clock_ms = (time.perf_counter() - start) * 1000.0
    return BatchResult(
        grid_counts=counts,
        decodes=count,
        rounds=rounds,
        committed=count * grid.size,
        depth_attempts=dict(ctx.depth_attempts),
        depth_accepts=dict(ctx.depth_accepts),
        wall_clock_ms=wall_clock_ms,
    )


def _build_report(
    ctx: DecodingContext,
    rounds: int,
    committed: int,
    wall_clock_ms: float,
    kl_trace: Optional[list[tuple[int, float]]],
) -> MetricsReport:
    rates = {
        d: ctx.depth_accepts.get(d, 0) / attempts
        for d, attempts in sorted(ctx.depth_attempts.items())
    }
    accept_length = committed / rounds
    return MetricsReport(
        mode=ctx.config.mode,
        rounds=rounds,
        committed=committed,
        accept_length=accept_length,
        modeled_speedup=modeled_speedup(accept_length, ctx.config.draft_overhead_ratio),
        depth_accept_rates=rates,
        wall_clock_ms=wall_clock_ms,
        kl_trace=kl_trace,
    )


def export_grid_image(
    tokens: Union[np.ndarray, Sequence[int]], grid: GridSpec, path: Union[str, Path]
) -> None:
    """Write the token grid as a binary 8-bit portable graymap.

    Token values map linearly onto 0..255, so token 0 is black and the top
    of the vocabulary is white.
    """
    flat = np.asarray(tokens, dtype=np.int64).reshape(-1)
    if flat.size != grid.size:
        raise ValueError(f"expected {grid.size} tokens, got {flat.size}")
    if flat.min() < 0 or flat.max() >= grid.vocab_size:
        raise ValueError("token values outside vocabulary range")
    levels = np.rint(flat * (255.0 / (grid.vocab_size - 1))).astype(np.uint8)
    header = f"P5\n{grid.width} {grid.height}\n255\n".encode("ascii")
    Path(path).write_bytes(header + levels.tobytes())
