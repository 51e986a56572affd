"""Conditional-distribution providers: target models and draft heads.

Target models produce the next-token conditional for a raster-order prefix
over a 2-D grid. Draft heads predict tokens at a fixed raster offset ahead
of the last committed token: a horizontal head of depth d targets offset d,
a vertical head of depth v targets offset v * width (the same column, v rows
down). Heads only ever see the committed prefix, never speculative tokens.

In place of neural draft-head training, heads here are fitted as tabular
maximum-likelihood estimators over a small context signature: the last two
committed tokens plus the current column index. The column component lets
vertical heads exploit column identity, which is what makes them competitive
at offset width despite the larger raster distance. Richer signatures (more
history, the row index) would trade table size for fidelity; the two-token
form keeps everything desk-scale.

Models and head sets are immutable after construction, so concurrent readers
are safe. Fitting is single-threaded per call; independent fits can run in
parallel.
"""

from __future__ import annotations

import abc
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Hashable, Sequence, Union

import numpy as np

from .core import GridSpec, StateError, TokenDistribution, sample_index
from .rng import stream

FORMAT_VERSION = 1

# Index used for the out-of-grid neighbor slot in conditional tables.
# Boundary contexts (row starts, first row) are distinct context values,
# not vocabulary members.
_BOUNDARY = -1


class TargetModel(abc.ABC):
    """Autoregressive model over a token grid in raster order."""

    grid: GridSpec
    #: 2-D points standing in for codebook latents; used by the relaxed
    #: acceptance baseline to define token neighborhoods.
    token_embeddings: np.ndarray
    #: True when the conditional at every position ignores the prefix.
    prefix_independent: bool = False

    @abc.abstractmethod
    def conditional(self, prefix: Sequence[int]) -> TokenDistribution:
        """Distribution of the next raster position given a committed prefix."""

    def conditional_key(self, prefix: Sequence[int]) -> Hashable:
        """Hashable memoization key: prefixes with equal keys share a conditional.

        The default is the full prefix, which is always correct but shares
        nothing; concrete models override it with their sufficient statistic.
        """
        return tuple(prefix)

    def sample_grid(self, rng: np.random.Generator) -> tuple[int, ...]:
        """Ancestral sample of a complete grid, in raster order."""
        out: list[int] = []
        for _ in range(self.grid.size):
            out.append(sample_index(self.conditional(out), rng))
        return tuple(out)


def target_conditional(model: TargetModel, prefix: Sequence[int]) -> TokenDistribution:
    """Next-position conditional, guarding against already-complete prefixes."""
    if len(prefix) >= model.grid.size:
        raise StateError(f"prefix of length {len(prefix)} leaves no position to predict")
    return model.conditional(prefix)


class GridMarkovModel(TargetModel):
    """Toy spatial model: the conditional depends on the left and above neighbors.

    ``tables[left, above]`` is a distribution row, with index -1 (the last
    slot) reserved for the boundary context at row starts and in the first
    row. ``vertical_weight`` records how the tables were mixed at
    construction: 1.0 means the above neighbor alone shapes the conditional,
    0.0 the left neighbor alone.
    """

    prefix_independent = False

    def __init__(
        self,
        grid: GridSpec,
        seed: int,
        vertical_weight: float,
        tables: np.ndarray,
        token_embeddings: np.ndarray,
    ) -> None:
        k = grid.vocab_size
        tables = np.asarray(tables, dtype=np.float64)
        if tables.shape != (k + 1, k + 1, k):
            raise ValueError(f"tables must have shape {(k + 1, k + 1, k)}, got {tables.shape}")
        self.grid = grid
        self.seed = seed
        self.vertical_weight = float(vertical_weight)
        self.tables = tables
        self.token_embeddings = np.asarray(token_embeddings, dtype=np.float64)
        # Validate every row once, then hand out the same immutable objects.
        self._rows = [
            [TokenDistribution(tables[left, above]) for above in range(k + 1)]
            for left in range(k + 1)
        ]

    def _neighbor_key(self, prefix: Sequence[int]) -> tuple[int, int]:
        pos = len(prefix)
        width = self.grid.width
        left = prefix[pos - 1] if pos % width != 0 else _BOUNDARY
        above = prefix[pos - width] if pos >= width else _BOUNDARY
        return left, above

    def conditional(self, prefix: Sequence[int]) -> TokenDistribution:
        left, above = self._neighbor_key(prefix)
        return self._rows[left][above]

    def conditional_key(self, prefix: Sequence[int]) -> tuple[int, int]:
        return self._neighbor_key(prefix)

    def sample_grid(self, rng: np.random.Generator) -> tuple[int, ...]:
        width = self.grid.width
        rows = self._rows
        out: list[int] = []
        for pos in range(self.grid.size):
            left = out[pos - 1] if pos % width != 0 else _BOUNDARY
            above = out[pos - width] if pos >= width else _BOUNDARY
            out.append(sample_index(rows[left][above], rng))
        return tuple(out)


def _random_rows(rng: np.random.Generator, count: int, vocab_size: int) -> np.ndarray:
    # Squared-exponential weights give visibly peaked conditionals, which is
    # what makes head alignment differences measurable on small vocabularies.
    u = np.maximum(rng.random((count, vocab_size)), 1e-16)
    w = np.log(u) ** 2
    return w / w.sum(axis=1, keepdims=True)


def _random_embeddings(rng: np.random.Generator, vocab_size: int) -> np.ndarray:
    return rng.random((vocab_size, 2))


def make_grid_markov_target(grid: GridSpec, seed: int, vertical_weight: float) -> GridMarkovModel:
    """Build a seeded GridMarkovModel.

    ``vertical_weight`` mixes two independent conditional families: with
    weight w the conditional is ``(1 - w) * L[left] + w * A[above]``, so 0
    depends only on the left neighbor and 1 only on the above neighbor.
    """
    if not 0.0 <= vertical_weight <= 1.0:
        raise ValueError(f"vertical_weight must be in [0, 1], got {vertical_weight}")
    k = grid.vocab_size
    gen = stream(seed, "grid-markov-tables")
    left_rows = _random_rows(gen, k + 1, k)
    above_rows = _random_rows(gen, k + 1, k)
    tables = np.empty((k + 1, k + 1, k))
    for left in range(k + 1):
        for above in range(k + 1):
            tables[left, above] = (
                (1.0 - vertical_weight) * left_rows[left] + vertical_weight * above_rows[above]
            )
    embeddings = _random_embeddings(stream(seed, "token-embeddings"), k)
    return GridMarkovModel(grid, seed, vertical_weight, tables, embeddings)


class IndependentPositionModel(TargetModel):
    """Target whose conditional at each position ignores the prefix entirely."""

    prefix_independent = True

    def __init__(
        self,
        grid: GridSpec,
        seed: int,
        tables: np.ndarray,
        token_embeddings: np.ndarray,
    ) -> None:
        tables = np.asarray(tables, dtype=np.float64)
        if tables.shape != (grid.size, grid.vocab_size):
            raise ValueError(
                f"tables must have shape {(grid.size, grid.vocab_size)}, got {tables.shape}"
            )
        self.grid = grid
        self.seed = seed
        self.tables = tables
        self.token_embeddings = np.asarray(token_embeddings, dtype=np.float64)
        self._dists = [TokenDistribution(row) for row in tables]

    def position_conditional(self, index: int) -> TokenDistribution:
        if not 0 <= index < self.grid.size:
            raise ValueError(f"position {index} out of range [0, {self.grid.size})")
        return self._dists[index]

    def conditional(self, prefix: Sequence[int]) -> TokenDistribution:
        if len(prefix) >= self.grid.size:
            raise StateError("grid already complete")
        return self._dists[len(prefix)]

    def conditional_key(self, prefix: Sequence[int]) -> int:
        return len(prefix)


def make_independent_target(
    grid: GridSpec, seed: int, *, constant: bool = False
) -> IndependentPositionModel:
    """Seeded prefix-independent target; ``constant`` repeats one row everywhere."""
    gen = stream(seed, "independent-tables")
    if constant:
        tables = np.tile(_random_rows(gen, 1, grid.vocab_size), (grid.size, 1))
    else:
        tables = _random_rows(gen, grid.size, grid.vocab_size)
    embeddings = _random_embeddings(stream(seed, "token-embeddings"), grid.vocab_size)
    return IndependentPositionModel(grid, seed, tables, embeddings)


# ---------------------------------------------------------------------------
# Draft heads
# ---------------------------------------------------------------------------


class DraftHead(abc.ABC):
    """Predictor for the token ``offset`` raster steps past the last commit.

    For a committed prefix of length L the predicted position is
    ``L - 1 + offset``.
    """

    offset: int

    @abc.abstractmethod
    def predict(self, prefix: Sequence[int]) -> TokenDistribution:
        """Draft distribution given the committed prefix only."""


def _signature_at(seq: Sequence[int], length: int, width: int) -> tuple[tuple[int, ...], int]:
    """Context signature: the last up-to-2 tokens before ``length`` plus the column."""
    if length >= 2:
        ctx = (seq[length - 2], seq[length - 1])
    elif length == 1:
        ctx = (seq[0],)
    else:
        ctx = ()
    return ctx, length % width


class TabularDraftHead(DraftHead):
    """Empirical conditional table keyed by the context signature."""

    def __init__(
        self,
        offset: int,
        width: int,
        vocab_size: int,
        smoothing: float,
        table: dict[tuple[tuple[int, ...], int], TokenDistribution],
    ) -> None:
        if offset < 1:
            raise ValueError(f"offset must be >= 1, got {offset}")
        self.offset = offset
        self.width = width
        self.vocab_size = vocab_size
        self.smoothing = smoothing
        self.table = table
        # Signatures never seen in fitting fall back to the smoothed empty
        # count vector, i.e. uniform.
        self._fallback = TokenDistribution._wrap(np.full(vocab_size, 1.0 / vocab_size))

    def predict(self, prefix: Sequence[int]) -> TokenDistribution:
        sig = _signature_at(prefix, len(prefix), self.width)
        return self.table.get(sig, self._fallback)


class ExactDraftHead(DraftHead):
    """Head returning the target's own position conditional; all-accept oracle."""

    def __init__(self, offset: int, model: IndependentPositionModel) -> None:
        if offset < 1:
            raise ValueError(f"offset must be >= 1, got {offset}")
        if not getattr(model, "prefix_independent", False):
            raise ValueError("exact heads require a prefix-independent target model")
        self.offset = offset
        self._model = model

    def predict(self, prefix: Sequence[int]) -> TokenDistribution:
        return self._model.position_conditional(len(prefix) - 1 + self.offset)


@dataclass(frozen=True)
class DraftHeadSet:
    """Horizontal heads for depths 1..H plus vertical heads for depths 1..VSD."""

    width: int
    horizontal: tuple[DraftHead, ...]
    vertical: tuple[DraftHead, ...] = field(default=())

    def __post_init__(self) -> None:
        if not self.horizontal:
            raise ValueError("at least one horizontal head is required")
        got_h = tuple(h.offset for h in self.horizontal)
        if got_h != tuple(range(1, len(got_h) + 1)):
            raise ValueError(f"horizontal offsets must be contiguous from 1, got {got_h}")
        got_v = tuple(h.offset for h in self.vertical)
        want_v = tuple(self.width * d for d in range(1, len(got_v) + 1))
        if got_v != want_v:
            raise ValueError(f"vertical offsets must be {want_v}, got {got_v}")

    @property
    def horizontal_depth(self) -> int:
        return len(self.horizontal)

    @property
    def vertical_depth(self) -> int:
        return len(self.vertical)


def _classify_offsets(
    offsets: Sequence[int], width: int, vertical_offsets: Sequence[int] | None
) -> tuple[list[int], list[int]]:
    """Split raster offsets into (horizontal, vertical) lists.

    By default multiples of the width are treated as vertical. When that
    heuristic is wrong (width <= horizontal depth, e.g. a 2-wide grid whose
    horizontal depth 2 collides with vertical depth 1), pass
    ``vertical_offsets`` explicitly: each listed offset claims one occurrence
    from ``offsets`` for the vertical direction and the rest stay horizontal,
    so ``offsets=[1, 2, 2], vertical_offsets=[2]`` fits horizontal depths
    {1, 2} plus a vertical head one row down.
    """
    if any(d < 1 for d in offsets):
        raise ValueError(f"offsets must be >= 1, got {list(offsets)}")
    if vertical_offsets is not None:
        if any(d < 1 or d % width != 0 for d in vertical_offsets):
            raise ValueError(f"vertical offsets must be positive multiples of {width}")
        remaining = list(offsets)
        for d in vertical_offsets:
            try:
                remaining.remove(d)
            except ValueError:
                raise ValueError(f"vertical offset {d} not present in offsets") from None
        return sorted(remaining), sorted(vertical_offsets)
    horizontal = [d for d in offsets if width == 1 or d % width != 0]
    vertical = [d for d in offsets if width > 1 and d % width == 0]
    return sorted(horizontal), sorted(vertical)


def fit_tabular_draft_heads(
    model: TargetModel,
    grid: GridSpec,
    offsets: Sequence[int],
    sample_count: int,
    seed: int,
    smoothing: float = 0.5,
    *,
    vertical_offsets: Sequence[int] | None = None,
) -> DraftHeadSet:
    """Fit tabular heads by maximum likelihood over ancestral samples.

    Draws ``sample_count`` complete grids from the target model and, for each
    offset d, tabulates the empirical distribution of the token d steps past
    every frontier, keyed by the context signature. Additive smoothing keeps
    every fitted probability positive, which both guarantees that sampled
    candidates are sampleable under their own draft and stabilizes residual
    chains on tiny vocabularies.

    ``offsets`` are raster offsets; see :func:`_classify_offsets` for how
    they are split into horizontal and vertical heads.
    """
    if sample_count < 1:
        raise ValueError(f"sample_count must be >= 1, got {sample_count}")
    if smoothing < 0:
        raise ValueError(f"smoothing must be >= 0, got {smoothing}")
    horizontal, vertical = _classify_offsets(offsets, grid.width, vertical_offsets)
    if not horizontal and not vertical:
        raise ValueError("no offsets to fit")

    unique_offsets = sorted(set(horizontal) | set(vertical))
    counts: dict[int, dict[tuple, np.ndarray]] = {d: {} for d in unique_offsets}
    k = grid.vocab_size
    size = grid.size
    width = grid.width

    gen = stream(seed, "head-fit")
    for _ in range(sample_count):
        sample = model.sample_grid(gen)
        for d in unique_offsets:
            table = counts[d]
            # Frontier length L predicts position L - 1 + d.
            for length in range(0, size - d + 1):
                sig = _signature_at(sample, length, width)
                row = table.get(sig)
                if row is None:
                    row = np.zeros(k)
                    table[sig] = row
                row[sample[length - 1 + d]] += 1.0

    dists: dict[int, dict[tuple, TokenDistribution]] = {}
    for d, table in counts.items():
        out: dict[tuple, TokenDistribution] = {}
        for sig, row in table.items():
            smoothed = row + smoothing
            out[sig] = TokenDistribution._wrap(smoothed / smoothed.sum())
        dists[d] = out

    def head(offset: int) -> TabularDraftHead:
        return TabularDraftHead(offset, width, k, smoothing, dists[offset])

    return DraftHeadSet(
        width=width,
        horizontal=tuple(head(d) for d in horizontal),
        vertical=tuple(head(d) for d in vertical),
    )


def make_exact_heads(
    model: TargetModel,
    offsets: Sequence[int],
    *,
    vertical_offsets: Sequence[int] | None = None,
) -> DraftHeadSet:
    """Heads that reproduce the target's conditional at their offset exactly.

    Only valid for prefix-independent targets; with these heads every
    verification step accepts with probability one.
    """
    if not getattr(model, "prefix_independent", False):
        raise ValueError("exact heads require a prefix-independent target model")
    width = model.grid.width
    horizontal, vertical = _classify_offsets(offsets, width, vertical_offsets)
    return DraftHeadSet(
        width=width,
        horizontal=tuple(ExactDraftHead(d, model) for d in horizontal),
        vertical=tuple(ExactDraftHead(d, model) for d in vertical),
    )


def held_out_nll(
    model: TargetModel,
    heads: DraftHeadSet,
    sample_count: int,
    seed: int,
) -> dict[tuple[str, int], float]:
    """Mean negative log-likelihood of each head on fresh ancestral samples.

    Keys are ``(direction, depth)``; lower is better. This is the measurement
    behind the horizontal-vs-vertical decay comparison: heads at equal
    Euclidean rank (horizontal depth d vs vertical depth d) can be read off
    against each other.
    """
    if sample_count < 1:
        raise ValueError(f"sample_count must be >= 1, got {sample_count}")
    gen = stream(seed, "head-holdout")
    labeled = [("horizontal", i + 1, h) for i, h in enumerate(heads.horizontal)]
    labeled += [("vertical", i + 1, h) for i, h in enumerate(heads.vertical)]
    totals = {(direction, depth): [0.0, 0] for direction, depth, _ in labeled}
    size = model.grid.size
    for _ in range(sample_count):
        sample = model.sample_grid(gen)
        for direction, depth, headobj in labeled:
            acc = totals[(direction, depth)]
            d = headobj.offset
            for length in range(0, size - d + 1):
                q = headobj.predict(sample[:length])
                acc[0] -= float(np.log(max(q.prob(sample[length - 1 + d]), 1e-300)))
                acc[1] += 1
    return {key: acc[0] / acc[1] for key, acc in totals.items() if acc[1]}


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------
#
# Versioned JSON with fixed field names. Floats are written with Python's
# repr, which round-trips binary64 exactly, so a load reproduces the stored
# decimal representations bit for bit.


def _grid_to_json(grid: GridSpec) -> dict:
    return {"width": grid.width, "height": grid.height, "vocab_size": grid.vocab_size}


def _grid_from_json(obj: dict) -> GridSpec:
    return GridSpec(int(obj["width"]), int(obj["height"]), int(obj["vocab_size"]))


def save_model(model: TargetModel, path: Union[str, Path]) -> None:
    if isinstance(model, GridMarkovModel):
        payload = {
            "format_version": FORMAT_VERSION,
            "kind": "grid_markov",
            "grid": _grid_to_json(model.grid),
            "seed": model.seed,
            "vertical_weight": model.vertical_weight,
            "tables": model.tables.tolist(),
            "token_embeddings": model.token_embeddings.tolist(),
        }
    elif isinstance(model, IndependentPositionModel):
        payload = {
            "format_version": FORMAT_VERSION,
            "kind": "independent",
            "grid": _grid_to_json(model.grid),
            "seed": model.seed,
            "tables": model.tables.tolist(),
            "token_embeddings": model.token_embeddings.tolist(),
        }
    else:
        raise ValueError(f"cannot serialize model type {type(model).__name__}")
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_model(path: Union[str, Path]) -> TargetModel:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported model format_version {version!r}")
    grid = _grid_from_json(payload["grid"])
    kind = payload["kind"]
    if kind == "grid_markov":
        return GridMarkovModel(
            grid,
            int(payload["seed"]),
            float(payload["vertical_weight"]),
            np.array(payload["tables"], dtype=np.float64),
            np.array(payload["token_embeddings"], dtype=np.float64),
        )
    if kind == "independent":
        return IndependentPositionModel(
            grid,
            int(payload["seed"]),
            np.array(payload["tables"], dtype=np.float64),
            np.array(payload["token_embeddings"], dtype=np.float64),
        )
    raise ValueError(f"unknown model kind {kind!r}")


def _head_to_json(head: DraftHead) -> dict:
    if not isinstance(head, TabularDraftHead):
        raise ValueError(f"only tabular heads serialize, got {type(head).__name__}")
    entries = [
        {"context": list(ctx), "column": col, "probs": dist.probs.tolist()}
        for (ctx, col), dist in sorted(head.table.items(), key=lambda kv: (kv[0][1], kv[0][0]))
    ]
    return {
        "offset": head.offset,
        "smoothing": head.smoothing,
        "entries": entries,
    }


def _head_from_json(obj: dict, width: int, vocab_size: int) -> TabularDraftHead:
    table = {
        (tuple(int(t) for t in e["context"]), int(e["column"])): TokenDistribution(e["probs"])
        for e in obj["entries"]
    }
    return TabularDraftHead(int(obj["offset"]), width, vocab_size, float(obj["smoothing"]), table)


def save_head_set(heads: DraftHeadSet, path: Union[str, Path]) -> None:
    vocab_sizes = {h.vocab_size for h in heads.horizontal + heads.vertical
                   if isinstance(h, TabularDraftHead)}
    if len(vocab_sizes) != 1:
        raise ValueError("head set must contain tabular heads with a single vocab size")
    payload = {
        "format_version": FORMAT_VERSION,
        "kind": "tabular_heads",
        "width": heads.width,
        "vocab_size": vocab_sizes.pop(),
        "horizontal": [_head_to_json(h) for h in heads.horizontal],
        "vertical": [_head_to_json(h) for h in heads.vertical],
    }
    Path(path).write_text(json.dumps(payload, indent=1), encoding="utf-8")


def load_head_set(path: Union[str, Path]) -> DraftHeadSet:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    version = payload.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported head set format_version {version!r}")
    if payload.get("kind") != "tabular_heads":
        raise ValueError(f"unknown head set kind {payload.get('kind')!r}")
    width = int(payload["width"])
    vocab_size = int(payload["vocab_size"])
    return DraftHeadSet(
        width=width,
        horizontal=tuple(_head_from_json(o, width, vocab_size) for o in payload["horizontal"]),
        vertical=tuple(_head_from_json(o, width, vocab_size) for o in payload["vertical"]),
    )
