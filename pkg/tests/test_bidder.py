"""Bidding policies: candidate pricing, exploration wiring, modifier pool."""

import numpy as np
import pytest

from rtbexplore.bidder import (
    Bidder,
    GroupPolicy,
    ModifierPool,
    PoolConfig,
    base_bid,
)
from rtbexplore.controller import ControllerConfig, ExplorationController
from rtbexplore.features import FeatureConfig, FeatureEncoder
from rtbexplore.market import AdCandidate, BidRequest
from rtbexplore.model import CtrModel, ModelConfig

SPACES = (16, 8, 8, 8, 8)


def encoder():
    return FeatureEncoder(
        FeatureConfig(
            publisher_space=16, segment_space=8, slot_space=8, ad_space=8, campaign_space=8
        )
    )


def model(seed=0, **kwargs):
    defaults = dict(embedding_dim=2, hidden_units=(4, 3), dropout=0.2, init_scale=0.1)
    defaults.update(kwargs)
    return CtrModel(SPACES, ModelConfig(**defaults), np.random.default_rng(seed))


def catalog(n=6):
    return [AdCandidate(ad_id=i, campaign_id=i // 2, cpc_goal=1.0 + 0.25 * i) for i in range(n)]


def request(pub=1, seg=2, slot=3):
    return BidRequest(
        request_id=0, publisher_id=pub, user_segment=seg, context_slot=slot, timestamp=0
    )


def uncertainty_bidder(
    mc_samples=8, explore_fraction=1.0, min_fill=1, seed=0, pool=None, **ctrl_kwargs
):
    ctrl_defaults = dict(
        window_len=50, min_window_fill=min_fill, q_low=0.0, q_high=1.0,
        explore_fraction=explore_fraction,
    )
    ctrl_defaults.update(ctrl_kwargs)
    controller = ExplorationController(ControllerConfig(**ctrl_defaults))
    pool = pool if pool is not None else ModifierPool(PoolConfig(min_fill=1), np.random.default_rng(40))
    b = Bidder(
        GroupPolicy.UNCERTAINTY,
        model(seed),
        encoder(),
        catalog(),
        mc_samples=mc_samples,
        explore_fraction=explore_fraction,
        controller=controller,
        pool=pool,
        rng_mc=np.random.default_rng(41),
        rng_explore=np.random.default_rng(42),
    )
    return b, controller, pool


class TestBaseBid:
    def test_expected_value(self):
        assert base_bid(0.02, 1.5) == pytest.approx(0.03)

    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            base_bid(-0.1, 1.0)
        with pytest.raises(ValueError):
            base_bid(0.1, -1.0)


class TestModifierPool:
    def test_config_validation(self):
        with pytest.raises(ValueError):
            PoolConfig(capacity=0)
        with pytest.raises(ValueError):
            PoolConfig(capacity=10, min_fill=11)

    def test_fills_then_reservoir_samples(self):
        pool = ModifierPool(PoolConfig(capacity=100, min_fill=10), np.random.default_rng(0))
        assert not pool.ready
        for i in range(100):
            pool.add(float(i))
        assert pool.ready and len(pool) == 100 and pool.seen == 100
        np.testing.assert_array_equal(np.sort(pool.contents()), np.arange(100.0))

    def test_reservoir_is_uniform_over_stream(self):
        # Algorithm R: after n adds each item survives with p = capacity/n,
        # so the reservoir mean tracks the full-stream mean, not the tail's.
        pool = ModifierPool(PoolConfig(capacity=200, min_fill=1), np.random.default_rng(1))
        for i in range(20_000):
            pool.add(float(i))
        assert len(pool) == 200 and pool.seen == 20_000
        assert pool.contents().mean() == pytest.approx(10_000, rel=0.2)

    def test_sample_uniform_from_buffer(self):
        pool = ModifierPool(PoolConfig(capacity=4, min_fill=1), np.random.default_rng(2))
        for v in (1.0, 2.0, 3.0, 4.0):
            pool.add(v)
        rng = np.random.default_rng(3)
        draws = [pool.sample(rng) for _ in range(4000)]
        _, counts = np.unique(draws, return_counts=True)
        assert counts.min() > 800  # all four values drawn, roughly evenly

    def test_sample_empty_rejected(self):
        pool = ModifierPool(PoolConfig(), np.random.default_rng(4))
        with pytest.raises(ValueError):
            pool.sample(np.random.default_rng(0))


class TestPolicyWiring:
    def test_uncertainty_requires_full_wiring(self):
        with pytest.raises(ValueError):
            Bidder(GroupPolicy.UNCERTAINTY, model(), encoder(), catalog())

    def test_random_requires_pool(self):
        with pytest.raises(ValueError):
            Bidder(GroupPolicy.RANDOM, model(), encoder(), catalog())

    def test_control_needs_no_streams(self):
        b = Bidder(GroupPolicy.CONTROL, model(), encoder(), catalog())
        dec = b.decide(request(), np.arange(6))
        assert dec.modifier is None and not dec.explored and dec.uncertainty is None
        assert dec.final_bid == dec.base_bid


class TestDecide:
    def test_picks_highest_value_candidate(self):
        m = model(seed=5)
        b = Bidder(GroupPolicy.CONTROL, m, encoder(), catalog())
        cand = np.array([0, 2, 4, 5])
        dec = b.decide(request(), cand)
        rows = b._score_rows(request(), cand)
        values = m.predict_batch(rows) * np.array([1.0, 1.5, 2.0, 2.25])
        assert dec.chosen_ad == cand[int(np.argmax(values))]
        assert dec.base_bid == pytest.approx(values.max())

    def test_tie_breaks_toward_lowest_ad_id(self):
        # An untrained model with zeroed embeddings scores every candidate
        # identically; equal cpc goals then force a bid tie across the board.
        m = model(init_scale=0.0)
        m.embeddings[:] = 0.0
        ads = [AdCandidate(ad_id=i, campaign_id=0, cpc_goal=1.0) for i in range(6)]
        b = Bidder(GroupPolicy.CONTROL, m, encoder(), ads)
        dec = b.decide(request(), np.array([4, 1, 3]))
        assert dec.chosen_ad == 1

    def test_empty_candidates_rejected(self):
        b = Bidder(GroupPolicy.CONTROL, model(), encoder(), catalog())
        with pytest.raises(ValueError):
            b.decide(request(), np.array([], dtype=np.int64))

    def test_control_forward_budget_is_candidate_count(self):
        m = model()
        b = Bidder(GroupPolicy.CONTROL, m, encoder(), catalog())
        before = m.forward_rows
        b.decide(request(), np.arange(4))
        assert m.forward_rows - before == 4

    def test_uncertainty_forward_budget_adds_mc_samples(self):
        b, _, _ = uncertainty_bidder(mc_samples=8)
        before = b.model.forward_rows
        b.decide(request(), np.arange(6))
        assert b.model.forward_rows - before == 6 + 8

    def test_random_forward_budget_is_candidate_count(self):
        pool = ModifierPool(PoolConfig(min_fill=1), np.random.default_rng(6))
        pool.add(2.0)
        m = model()
        b = Bidder(
            GroupPolicy.RANDOM, m, encoder(), catalog(),
            explore_fraction=1.0, pool=pool, rng_explore=np.random.default_rng(7),
        )
        before = m.forward_rows
        dec = b.decide(request(), np.arange(6))
        assert m.forward_rows - before == 6
        assert dec.modifier == 2.0 and dec.final_bid == pytest.approx(2.0 * dec.base_bid)
        assert dec.uncertainty is None


class TestUncertaintyPolicy:
    def test_ingests_every_request_even_unexplored(self):
        b, controller, _ = uncertainty_bidder(explore_fraction=0.0, min_fill=10)
        for _ in range(5):
            b.decide(request(), np.arange(6))
        # Default dimension is publisher; the request's publisher id is 1.
        assert controller.snapshot(1).count == 5

    def test_granted_modifier_scales_bid_and_feeds_pool(self):
        b, controller, pool = uncertainty_bidder(explore_fraction=1.0, min_fill=1)
        dec = b.decide(request(), np.arange(6))
        assert dec.explored and dec.modifier is not None
        assert controller.config.m_min <= dec.modifier <= controller.config.m_max
        assert dec.final_bid == pytest.approx(dec.base_bid * dec.modifier)
        assert pool.seen == 1 and pool.contents()[0] == dec.modifier
        assert b.applied_modifiers == [dec.modifier]

    def test_estimate_attached_to_decision(self):
        b, _, _ = uncertainty_bidder(mc_samples=12)
        dec = b.decide(request(), np.arange(6))
        assert dec.uncertainty is not None and dec.uncertainty.n_samples == 12

    def test_not_ready_window_never_explores(self):
        b, controller, pool = uncertainty_bidder(explore_fraction=1.0, min_fill=40)
        for _ in range(10):
            dec = b.decide(request(), np.arange(6))
            assert not dec.explored and dec.modifier is None
        assert pool.seen == 0 and controller.coin_trials == 0


class TestRandomPolicy:
    def test_no_exploration_until_pool_ready(self):
        pool = ModifierPool(PoolConfig(min_fill=3), np.random.default_rng(8))
        b = Bidder(
            GroupPolicy.RANDOM, model(), encoder(), catalog(),
            explore_fraction=1.0, pool=pool, rng_explore=np.random.default_rng(9),
        )
        dec = b.decide(request(), np.arange(6))
        assert not dec.explored and dec.final_bid == dec.base_bid
        for v in (1.5, 2.0, 2.5):
            pool.add(v)
        dec = b.decide(request(), np.arange(6))
        assert dec.explored and dec.modifier in (1.5, 2.0, 2.5)

    def test_explore_fraction_gates_sampling(self):
        pool = ModifierPool(PoolConfig(min_fill=1), np.random.default_rng(10))
        pool.add(2.0)
        b = Bidder(
            GroupPolicy.RANDOM, model(), encoder(), catalog(),
            explore_fraction=0.25, pool=pool, rng_explore=np.random.default_rng(11),
        )
        explored = sum(b.decide(request(), np.arange(6)).explored for _ in range(4000))
        assert explored / 4000 == pytest.approx(0.25, abs=0.03)
