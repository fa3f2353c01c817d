import math

import numpy as np
import pytest
from conftest import random_params, random_record
from gradcheck import fixture_record, max_relative_error
from hypothesis import given
from hypothesis import strategies as st

from slate_lab.core import Context, Feedback, LogBatch, LogRecord, ModelParams, Slate, Variant, softmax_normalize
from slate_lab.model import (RankOnlyError, batch_click_probability, batch_log_likelihood, batch_loglik_and_grad,
                             click_probability, grad_log_likelihood, log_likelihood, score_item,
                             score_no_interaction, score_slate)


def scalar_params(psi, phi=(0.0,), gamma=(0.0, 0.0), alpha=(-50.0, -50.0), variant=Variant.FULL, phi_scalar=0.0):
    """1-d embeddings with Gamma = 1 so that u @ Psi[a] = z * psi[a]."""
    return ModelParams(np.array(phi, float), np.ones((1, 1)), np.array(psi, float).reshape(-1, 1),
                       np.array(gamma, float), np.array(alpha, float), variant, phi_scalar)


def banner_fixture(variant=Variant.FULL):
    # theta = (0.91, 0.06, 0.03) up to the exp(-50) accidental floor
    params = scalar_params([math.log(0.06), math.log(0.03), 0.0], phi=(math.log(0.91),), variant=variant)
    return params, Context([1.0], [1.0], 2), Slate((0, 1))


class TestScores:
    def test_no_interaction_zero_features(self, rng):
        p = random_params(rng)
        assert score_no_interaction(p, Context(np.zeros(2), np.zeros(4), 1)) == 0.0

    def test_no_interaction_orthogonal(self):
        p = scalar_params([0.0, 0.0], phi=(0.5, -0.25))
        assert score_no_interaction(p, Context([1.0, 2.0], [1.0], 1)) == 0.0

    def test_bias_only_ignores_features(self):
        p = scalar_params([0.0, 0.0], phi=(3.0,), variant=Variant.BIAS_ONLY, phi_scalar=1.3)
        assert score_no_interaction(p, Context([100.0], [1.0], 1)) == 1.3

    def test_dimension_mismatch(self, rng):
        with pytest.raises(ValueError):
            score_no_interaction(random_params(rng), Context(np.zeros(3), np.zeros(4), 1))

    def test_item_symmetric_case(self):
        assert score_item(scalar_params([0.0, 1.0], alpha=(0.0, 0.0)), [0.0], 0, 0) == pytest.approx(math.log(2))

    def test_item_relevance_dominates(self):
        p = scalar_params([2.0, 0.0], alpha=(-30.0, -30.0))
        assert score_item(p, [1.0], 0, 0) == pytest.approx(math.log(math.exp(2) + math.exp(-30)), abs=1e-15)
        assert score_item(p, [1.0], 0, 0) == pytest.approx(2.0, abs=1e-12)

    def test_item_accidental_floor(self):
        p = scalar_params([-30.0, 0.0], alpha=(1.0, 1.0))
        assert score_item(p, [1.0], 0, 0) == pytest.approx(math.log(math.exp(-30) + math.e), abs=1e-15)
        assert score_item(p, [1.0], 0, 0) == pytest.approx(1.0, abs=1e-12)

    def test_item_out_of_range(self, rng):
        p = random_params(rng, P=6, k_max=3)
        with pytest.raises(IndexError):
            score_item(p, np.zeros(4), 6, 0)
        with pytest.raises(IndexError):
            score_item(p, np.zeros(4), 0, 3)

    def test_equal_thetas_give_uniform_categorical(self):
        p = scalar_params([0.0, 0.0, 0.0], gamma=(0.0, 0.0, 0.0), alpha=(0.0, 0.0, 0.0), phi=(math.log(2),))
        probs = softmax_normalize(score_slate(p, Context([1.0], [0.0], 3), Slate((0, 1, 2))))
        np.testing.assert_allclose(probs, [0.25] * 4, atol=1e-15)

    def test_banner_probabilities(self):
        params, ctx, slate = banner_fixture()
        np.testing.assert_allclose(softmax_normalize(score_slate(params, ctx, slate)), [0.91, 0.06, 0.03], atol=1e-12)

    def test_banner_reward_only(self):
        params, ctx, slate = banner_fixture(Variant.REWARD_ONLY)
        np.testing.assert_allclose(softmax_normalize(score_slate(params, ctx, slate)), [0.91, 0.09], atol=1e-12)

    def test_rank_only_drops_head(self):
        params, ctx, slate = banner_fixture(Variant.RANK_ONLY)
        np.testing.assert_allclose(softmax_normalize(score_slate(params, ctx, slate)), [2 / 3, 1 / 3], atol=1e-12)

    def test_slate_length_must_match_context(self, rng):
        with pytest.raises(ValueError):
            score_slate(random_params(rng), Context(np.zeros(2), np.zeros(4), 2), Slate((0,)))


class TestLikelihood:
    def test_uniform_scores(self):
        p = scalar_params([0.0, 0.0], alpha=(0.0, 0.0))
        for c in range(3):
            rec = LogRecord(Context([0.0], [0.0], 2), Slate((0, 1)), Feedback.from_index(c, 2), 1.0, (1.0, 1.0))
            assert log_likelihood(p, rec) == pytest.approx(math.log(2 / 5) if c else math.log(1 / 5))

    def test_banner_first_item_click(self):
        params, ctx, slate = banner_fixture()
        rec = LogRecord(ctx, slate, Feedback.from_index(1, 2), 1.0, (1.0, 1.0))
        assert log_likelihood(params, rec) == pytest.approx(math.log(0.06), abs=1e-12)

    @pytest.mark.parametrize("variant", [Variant.FULL, Variant.REWARD_ONLY, Variant.BIAS_ONLY])
    def test_outcomes_sum_to_one(self, rng, variant):
        p = random_params(rng, variant=variant)
        rec = random_record(rng, p, k=3)
        outcomes = range(4) if variant is not Variant.REWARD_ONLY else (0, 1)
        total = sum(math.exp(log_likelihood(p, LogRecord(rec.context, rec.slate, Feedback.from_index(c, 3), 1.0,
                                                              rec.marginal_propensities))) for c in outcomes)
        assert total == pytest.approx(1.0, abs=1e-12)

    def test_rank_only_rejects_failures(self, rng):
        p = random_params(rng, variant=Variant.RANK_ONLY)
        with pytest.raises(RankOnlyError, match="rank-only requires successful slates"):
            log_likelihood(p, random_record(rng, p, click=0))

    def test_batch_path_matches_scalar_path(self, rng):
        for variant in Variant:
            p = random_params(rng, P=8, k_max=4, variant=variant)
            recs = [random_record(rng, p, click=None if variant is not Variant.RANK_ONLY else 1) for _ in range(20)]
            batch = LogBatch.from_records(recs, k_max=4)
            np.testing.assert_allclose(batch_log_likelihood(p, batch), [log_likelihood(p, r) for r in recs],
                                       rtol=1e-12, atol=1e-12)

    def test_click_probability_matches_batch(self, rng):
        p = random_params(rng, P=8, k_max=4)
        recs = [random_record(rng, p) for _ in range(15)]
        b = LogBatch.from_records(recs, k_max=4)
        np.testing.assert_allclose(batch_click_probability(p, b.y, b.z, b.slates, b.sizes),
                                   [click_probability(p, r.context, r.slate) for r in recs], rtol=1e-12)

    @given(st.integers(0, 10_000))
    def test_full_and_reward_only_agree_on_success_probability(self, seed):
        rng = np.random.default_rng(seed)
        p = random_params(rng, scale=2.0)
        rec = random_record(rng, p)
        full = softmax_normalize(score_slate(p, rec.context, rec.slate))
        reward = softmax_normalize(score_slate(p.with_variant(Variant.REWARD_ONLY), rec.context, rec.slate))
        assert full[1:].sum() == pytest.approx(reward[1], abs=1e-12)
        assert click_probability(p, rec.context, rec.slate) == pytest.approx(reward[1], abs=1e-12)


class TestGradient:
    @pytest.mark.parametrize("variant", list(Variant))
    def test_finite_differences(self, variant):
        rng = np.random.default_rng(7)
        for _ in range(5):
            p = random_params(rng, variant=variant)
            assert max_relative_error(p, fixture_record(rng, p)) < 1e-5

    def test_untouched_rows_have_no_gradient(self, rng):
        p = random_params(rng, P=10)
        rec = random_record(rng, p, k=2)
        g = grad_log_likelihood(p, rec)
        assert set(g.Psi_rows.tolist()) <= set(rec.slate.items)
        dense = g.dense_Psi(10)
        others = [a for a in range(10) if a not in rec.slate.items]
        assert np.all(dense[others] == 0)

    def test_bias_only_has_scalar_head_gradient(self, rng):
        p = random_params(rng, variant=Variant.BIAS_ONLY)
        g = grad_log_likelihood(p, random_record(rng, p))
        assert g.phi is None and g.phi_scalar is not None

    def test_positions_beyond_slate_get_no_gradient(self, rng):
        p = random_params(rng, k_max=3)
        g = grad_log_likelihood(p, random_record(rng, p, k=1, click=1))
        assert g.gamma[1:].tolist() == [0.0, 0.0] and g.alpha[1:].tolist() == [0.0, 0.0]

    def test_batch_gradient_is_mean_of_record_gradients(self, rng):
        p = random_params(rng, P=8, k_max=3)
        recs = [random_record(rng, p) for _ in range(12)]
        _, g = batch_loglik_and_grad(p, LogBatch.from_records(recs, k_max=3))
        singles = [grad_log_likelihood(p, r) for r in recs]
        np.testing.assert_allclose(g.Gamma, np.mean([s.Gamma for s in singles], axis=0), atol=1e-13)
        np.testing.assert_allclose(g.dense_Psi(8), np.mean([s.dense_Psi(8) for s in singles], axis=0), atol=1e-13)
        np.testing.assert_allclose(g.phi, np.mean([s.phi for s in singles], axis=0), atol=1e-13)
