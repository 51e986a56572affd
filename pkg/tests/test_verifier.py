"""Acceptance mathematics: ratios, residual chains, sequential verification."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hawk.core import TokenDistribution, total_variation
from hawk.rng import stream
from hawk.verifier import (
    ACCEPT,
    RESIDUAL_RESAMPLE,
    Candidate,
    acceptance_ratio,
    lantern_acceptance,
    lantern_sequential_verify,
    rejection_mass,
    residual_update,
    sequential_verify,
    steps_to_csv_rows,
    token_neighborhoods,
)


def dist(*probs):
    return TokenDistribution(list(probs))


def random_dist(gen, k, floor=1e-3):
    w = gen.random(k) + floor
    return TokenDistribution(w / w.sum())


@st.composite
def dist_pairs(draw, k=4):
    def vec():
        w = np.array(
            draw(st.lists(st.floats(0.01, 1.0, allow_nan=False), min_size=k, max_size=k))
        )
        return TokenDistribution(w / w.sum())

    return vec(), vec()


class TestAcceptanceRatio:
    def test_identical_is_one(self):
        p = dist(0.5, 0.3, 0.2)
        for token in range(3):
            assert acceptance_ratio(p, p, token) == 1.0

    def test_clipping(self):
        p = dist(0.5, 0.3, 0.2)
        q = dist(0.2, 0.5, 0.3)
        assert acceptance_ratio(p, q, 0) == 1.0  # ratio 2.5 clipped

    def test_plain_ratio(self):
        p = dist(0.5, 0.3, 0.2)
        q = dist(0.2, 0.5, 0.3)
        assert abs(acceptance_ratio(p, q, 1) - 0.6) < 1e-12

    def test_zero_draft_probability_rejected(self):
        with pytest.raises(ValueError):
            acceptance_ratio(dist(0.5, 0.5), dist(1.0, 0.0), 1)


class TestResidualUpdate:
    def test_basic(self):
        residual, degenerate = residual_update(dist(0.5, 0.3, 0.2), dist(0.2, 0.5, 0.3))
        assert not degenerate
        np.testing.assert_allclose(residual.probs, [1.0, 0.0, 0.0])

    def test_identical_degenerates_to_uniform(self):
        p = dist(0.5, 0.3, 0.2)
        residual, degenerate = residual_update(p, p)
        assert degenerate
        np.testing.assert_allclose(residual.probs, [1 / 3] * 3)

    def test_disjoint_support_unchanged(self):
        p = dist(0.6, 0.4, 0.0)
        q = dist(0.0, 0.0, 1.0)
        residual, degenerate = residual_update(p, q)
        assert not degenerate
        np.testing.assert_allclose(residual.probs, p.probs)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            residual_update(dist(0.5, 0.5), dist(0.5, 0.3, 0.2))


class TestCandidate:
    def test_invariant_enforced(self):
        with pytest.raises(ValueError):
            Candidate(1, dist(1.0, 0.0), "horizontal", 1)
        with pytest.raises(ValueError):
            Candidate(0, dist(0.5, 0.5), "diagonal", 1)
        with pytest.raises(ValueError):
            Candidate(0, dist(0.5, 0.5), "vertical", 0)


class TestSequentialVerify:
    def test_self_draft_always_accepts(self):
        p = dist(0.5, 0.3, 0.2)
        gen = stream(1, "verify")
        for _ in range(200):
            token = int(gen.integers(3))
            outcome = sequential_verify(p, [Candidate(token, p, "horizontal", 1)], gen)
            assert outcome.emitted_via == ACCEPT
            assert outcome.emitted_token == token
            assert outcome.accepted_index == 0

    def test_acceptance_leaves_later_candidates_untouched(self):
        p = dist(0.5, 0.3, 0.2)
        gen = stream(2, "verify")
        cands = [
            Candidate(0, p, "vertical", 1),
            Candidate(1, dist(0.1, 0.8, 0.1), "horizontal", 1),
        ]
        outcome = sequential_verify(p, cands, gen)
        assert outcome.emitted_via == ACCEPT
        assert len(outcome.steps) == 1

    def test_empty_candidates_rejected(self):
        with pytest.raises(ValueError):
            sequential_verify(dist(0.5, 0.5), [], stream(0, "x"))

    def test_alpha_recorded_as_overlap_mass(self):
        p = dist(0.5, 0.3, 0.2)
        q = dist(0.2, 0.5, 0.3)
        gen = stream(3, "verify")
        outcome = sequential_verify(p, [Candidate(0, q, "horizontal", 1)], gen)
        assert abs(outcome.steps[0].acceptance_prob_alpha - 0.7) < 1e-12

    def test_record_flag_does_not_change_outcomes(self):
        p = dist(0.4, 0.3, 0.2, 0.1)
        q1 = dist(0.1, 0.2, 0.3, 0.4)
        q2 = dist(0.25, 0.25, 0.25, 0.25)
        for trial in range(50):
            cands = [Candidate(trial % 4, q1, "vertical", 1), Candidate(0, q2, "horizontal", 1)]
            a = sequential_verify(p, cands, stream(trial, "flag"), record_steps=True)
            b = sequential_verify(p, cands, stream(trial, "flag"), record_steps=False)
            assert a.emitted_token == b.emitted_token
            assert a.emitted_via == b.emitted_via
            assert a.accepted_index == b.accepted_index
            assert b.steps == ()

    def test_resample_reached_and_recorded(self):
        p = dist(1.0, 0.0)
        q = dist(0.01, 0.99)
        gen = stream(5, "verify")
        saw_resample = False
        for _ in range(200):
            outcome = sequential_verify(p, [Candidate(1, q, "horizontal", 1)], gen)
            if outcome.emitted_via == RESIDUAL_RESAMPLE:
                saw_resample = True
                assert outcome.emitted_token == 0
                assert outcome.accepted_index is None
                assert outcome.steps[0].residual_after is not None
        assert saw_resample

    def test_monte_carlo_exactness_heterogeneous(self):
        # Emitted-token law equals the target regardless of draft identity.
        k = 5
        gen = stream(11, "mc")
        p = random_dist(gen, k)
        q1 = random_dist(gen, k)
        q2 = random_dist(gen, k)
        q3 = random_dist(gen, k)
        trials = 1_000_000
        counts = np.zeros(k)
        from hawk.core import sample_index

        for _ in range(trials):
            cands = [
                Candidate(sample_index(q1, gen), q1, "vertical", 1),
                Candidate(sample_index(q2, gen), q2, "vertical", 2),
                Candidate(sample_index(q3, gen), q3, "horizontal", 1),
            ]
            outcome = sequential_verify(p, cands, gen, record_steps=False)
            counts[outcome.emitted_token] += 1
        empirical = TokenDistribution(counts / trials)
        assert total_variation(empirical, p) <= 0.01

    @pytest.mark.parametrize("order", ["vertical_first", "horizontal_first"])
    def test_exactness_holds_for_both_orders(self, order):
        k = 3
        gen = stream(13, "order", order)
        p = random_dist(gen, k)
        qv = random_dist(gen, k)
        qh = random_dist(gen, k)
        first, second = (qv, qh) if order == "vertical_first" else (qh, qv)
        trials = 100_000
        counts = np.zeros(k)
        from hawk.core import sample_index

        for _ in range(trials):
            cands = [
                Candidate(sample_index(first, gen), first, "vertical", 1),
                Candidate(sample_index(second, gen), second, "horizontal", 1),
            ]
            outcome = sequential_verify(p, cands, gen, record_steps=False)
            counts[outcome.emitted_token] += 1
        assert total_variation(TokenDistribution(counts / trials), p) <= 0.02


class ScriptedRng:
    """Replays a fixed uniform sequence; stands in for a Generator."""

    def __init__(self, uniforms):
        self._uniforms = list(uniforms)

    def random(self):
        return self._uniforms.pop(0)


def classic_multidraft_reference(p, q, tokens, uniforms):
    """Independent textbook multi-draft sampler for a single draft distribution.

    Returns (accept_index, emitted_token). Plain-array arithmetic; the final
    resample walks the cumulative sum by hand.
    """
    p_cur = np.array(p, dtype=float)
    q = np.array(q, dtype=float)
    used = 0
    for i, token in enumerate(tokens):
        ratio = min(1.0, p_cur[token] / q[token])
        if uniforms[used] < ratio:
            return i, token
        used += 1
        p_cur = np.maximum(p_cur - q, 0.0)
        p_cur = p_cur / p_cur.sum()
    u = uniforms[used]
    acc = 0.0
    for token, mass in enumerate(p_cur):
        acc += mass
        if u < acc:
            return None, token
    return None, int(np.nonzero(p_cur)[0][-1])


class TestMedusaSpecialCase:
    def test_matches_textbook_implementation(self):
        # All candidates from one horizontal draft == classic speculative
        # sampling; drive both implementations with identical uniforms.
        gen = stream(17, "medusa-ref")
        for _ in range(500):
            k = int(gen.integers(2, 6))
            p = random_dist(gen, k)
            q = random_dist(gen, k)
            m = int(gen.integers(1, 4))
            tokens = [int(gen.integers(k)) for _ in range(m)]
            uniforms = [gen.random() for _ in range(m + 1)]
            ref_idx, ref_token = classic_multidraft_reference(
                p.probs, q.probs, tokens, uniforms
            )
            cands = [Candidate(t, q, "horizontal", 1) for t in tokens]
            outcome = sequential_verify(p, cands, ScriptedRng(uniforms))
            assert outcome.accepted_index == ref_idx
            assert outcome.emitted_token == ref_token


class TestRejectionMass:
    def test_self_draft_zero(self):
        p = dist(0.5, 0.3, 0.2)
        assert rejection_mass(p, [p]) == 0.0

    def test_single_draft(self):
        p = dist(0.5, 0.3, 0.2)
        q = dist(0.2, 0.5, 0.3)
        assert abs(rejection_mass(p, [q]) - 0.3) < 1e-12

    def test_repeated_draft_chains_residual(self):
        # After one rejection the residual is [1,0,0]; the same draft still
        # overlaps it with mass 0.2, so the chain value is 0.3 * 0.8.
        p = dist(0.5, 0.3, 0.2)
        q = dist(0.2, 0.5, 0.3)
        assert abs(rejection_mass(p, [q, q]) - 0.24) < 1e-12

    def test_monotone_in_chain_length(self):
        gen = stream(19, "chains")
        for _ in range(300):
            k = int(gen.integers(2, 6))
            p = random_dist(gen, k)
            drafts = [random_dist(gen, k) for _ in range(5)]
            values = [rejection_mass(p, drafts[:m]) for m in range(1, 6)]
            assert all(a >= b - 1e-15 for a, b in zip(values, values[1:]))

    def test_zero_overlap_append_is_noop(self):
        # A draft entirely outside the current residual's support removes
        # nothing: min(residual, q) has zero mass, so the factor is 1.
        p = dist(0.5, 0.0, 0.5)
        q_first = dist(0.0, 0.0, 1.0)  # residual after: [1, 0, 0]
        q_outside = dist(0.0, 1.0, 0.0)
        base = rejection_mass(p, [q_first])
        assert rejection_mass(p, [q_first, q_outside]) == pytest.approx(base)

    @given(dist_pairs())
    @settings(max_examples=100, deadline=None)
    def test_alpha_bounds(self, pair):
        p, q = pair
        alpha = float(np.minimum(p.probs, q.probs).sum())
        assert 0.0 <= alpha <= 1.0 + 1e-12
        # alpha hits 1 only when the distributions coincide
        if abs(alpha - 1.0) < 1e-12:
            np.testing.assert_allclose(p.probs, q.probs, atol=1e-9)


class TestLantern:
    def test_singleton_reduces_to_standard_ratio(self):
        gen = stream(23, "lantern")
        for _ in range(200):
            k = int(gen.integers(2, 6))
            p = random_dist(gen, k)
            q = random_dist(gen, k)
            token = int(gen.integers(k))
            got = lantern_acceptance(p, q, token, [token], 1.0)
            assert got == pytest.approx(acceptance_ratio(p, q, token))

    def test_full_vocabulary_always_accepts(self):
        p = dist(0.5, 0.3, 0.2)
        q = dist(0.2, 0.5, 0.3)
        for token in range(3):
            assert lantern_acceptance(p, q, token, [0, 1, 2], 1.0) == 1.0

    def test_dominates_standard_ratio(self):
        gen = stream(29, "lantern-dom")
        for _ in range(500):
            k = int(gen.integers(2, 8))
            p = random_dist(gen, k)
            q = random_dist(gen, k)
            token = int(gen.integers(k))
            size = int(gen.integers(1, k + 1))
            others = [t for t in range(k) if t != token]
            neighborhood = [token] + others[: size - 1]
            lam = 1.0 + float(gen.random()) * 3.0
            relaxed = lantern_acceptance(p, q, token, neighborhood, lam)
            assert relaxed >= acceptance_ratio(p, q, token) - 1e-12

    def test_validation(self):
        p = dist(0.5, 0.5)
        with pytest.raises(ValueError):
            lantern_acceptance(p, p, 0, [1], 1.0)  # token not in neighborhood
        with pytest.raises(ValueError):
            lantern_acceptance(p, p, 0, [0], 0.5)  # lam below 1

    def test_zero_draft_prob_clips_to_one(self):
        p = dist(0.5, 0.5)
        q = dist(1.0, 0.0)
        assert lantern_acceptance(p, q, 1, [0, 1], 1.0) == 1.0

    def test_sequential_walk_keeps_structure(self):
        p = dist(0.5, 0.3, 0.2)
        q = dist(0.2, 0.5, 0.3)
        neighborhoods = [(0, 1, 2)] * 3
        gen = stream(31, "lantern-walk")
        outcome = lantern_sequential_verify(
            p, [Candidate(1, q, "horizontal", 1)], gen, neighborhoods, 2.0
        )
        # full-vocabulary neighborhood accepts unconditionally
        assert outcome.emitted_via == ACCEPT
        assert outcome.emitted_token == 1


class TestTokenNeighborhoods:
    def test_self_membership_and_clipping(self):
        embeddings = np.array([[0.0, 0.0], [1.0, 0.0], [0.1, 0.0], [5.0, 5.0]])
        hoods = token_neighborhoods(embeddings, 2)
        assert len(hoods) == 4
        for token, hood in enumerate(hoods):
            assert token in hood
            assert len(hood) == 2
        assert set(token_neighborhoods(embeddings, 99)[0]) == {0, 1, 2, 3}

    def test_nearest_is_chosen(self):
        embeddings = np.array([[0.0, 0.0], [1.0, 0.0], [0.1, 0.0]])
        hoods = token_neighborhoods(embeddings, 2)
        assert set(hoods[0]) == {0, 2}


class TestCsvRows:
    def test_row_shape(self):
        p = dist(0.5, 0.5)
        outcome = sequential_verify(p, [Candidate(0, p, "vertical", 2)], stream(0, "csv"))
        rows = steps_to_csv_rows(7, outcome.steps)
        assert rows == [(7, 2, "vertical", 1.0, True)]
