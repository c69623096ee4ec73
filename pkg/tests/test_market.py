"""Synthetic market: requests, ground truth, censored auctions, drift."""

import math

import numpy as np
import pytest

from rtbexplore.market import (
    AdCandidate,
    AuctionOutcome,
    BidRequest,
    CatalogMismatchError,
    DriftEvent,
    Market,
    MarketConfig,
)


def small_market(seed=0, **kwargs):
    defaults = dict(n_publishers=20, n_segments=10, n_slots=5, n_ads=10, ads_per_campaign=3)
    defaults.update(kwargs)
    return Market(MarketConfig(**defaults), np.random.default_rng(seed))


class TestConfigValidation:
    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(n_publishers=0),
            dict(n_segments=0),
            dict(n_ads=0),
            dict(ads_per_campaign=0),
            dict(zipf_exponent=0.0),
            dict(cpc_goal_min=0.0),
            dict(cpc_goal_min=2.0, cpc_goal_max=1.0),
            dict(price_floor=-0.1),
            dict(competitor_sigma=-0.1),
            dict(competitor_informedness=-1.0),
        ],
    )
    def test_rejects_bad_values(self, kwargs):
        with pytest.raises(ValueError):
            MarketConfig(**kwargs)

    def test_drift_event_validation(self):
        with pytest.raises(ValueError):
            DriftEvent(tick=-1)
        with pytest.raises(ValueError):
            DriftEvent(tick=0, add=-1)

    def test_duplicate_drift_ticks_rejected(self):
        drift = (DriftEvent(tick=5, add=1), DriftEvent(tick=5, add=2))
        with pytest.raises(ValueError):
            small_market(drift=drift)


class TestCatalog:
    def test_campaign_grouping_and_shared_cpc(self):
        m = small_market()
        assert len(m.catalog) == 10
        for ad in m.catalog:
            assert ad.campaign_id == ad.ad_id // 3
            assert ad.cpc_goal == m.campaign_cpc_goals[ad.campaign_id]
            assert 0.5 <= ad.cpc_goal <= 2.0

    def test_construction_deterministic_per_seed(self):
        a, b = small_market(seed=7), small_market(seed=7)
        assert [ad.cpc_goal for ad in a.catalog] == [ad.cpc_goal for ad in b.catalog]
        ra = a.gen_request(np.random.default_rng(1))
        rb = b.gen_request(np.random.default_rng(1))
        assert ra == rb


class TestRequests:
    def test_ids_and_fields_in_range(self):
        m = small_market()
        rng = np.random.default_rng(2)
        for i in range(200):
            req = m.gen_request(rng)
            assert req.request_id == i == req.timestamp
            assert req.publisher_id in m.active_publisher_ids
            assert 0 <= req.user_segment < 10
            assert 0 <= req.context_slot < 5

    def test_popularity_is_skewed(self):
        m = small_market()
        rng = np.random.default_rng(3)
        pubs = np.array([m.gen_request(rng).publisher_id for _ in range(8000)])
        counts = np.sort(np.bincount(pubs, minlength=20))[::-1]
        # Zipf-ranked weights: the busiest publisher dwarfs the median one.
        assert counts[0] > 5 * max(counts[10], 1)

    def test_sample_candidates_distinct_and_uniform(self):
        m = small_market()
        rng = np.random.default_rng(4)
        seen = np.zeros(10)
        for _ in range(4000):
            cand = m.sample_candidates(3, rng)
            assert len(set(cand.tolist())) == 3
            seen[cand] += 1
        # Every ad appears ~1200 times under uniform subset sampling.
        assert seen.min() > 1000 and seen.max() < 1450

    def test_sample_candidates_full_catalog(self):
        m = small_market()
        assert np.array_equal(
            m.sample_candidates(10, np.random.default_rng(0)), np.arange(10)
        )

    def test_sample_candidates_bounds(self):
        m = small_market()
        with pytest.raises(ValueError):
            m.sample_candidates(0, np.random.default_rng(0))
        with pytest.raises(ValueError):
            m.sample_candidates(11, np.random.default_rng(0))


class TestGroundTruth:
    def test_true_ctr_is_probability_and_deterministic(self):
        m = small_market()
        rng = np.random.default_rng(5)
        req = m.gen_request(rng)
        for ad in m.catalog:
            p = m.true_ctr(req, ad)
            assert 0.0 < p < 1.0
            assert p == m.true_ctr(req, ad)

    def test_true_ctr_batch_matches_scalar(self):
        m = small_market()
        rng = np.random.default_rng(6)
        reqs = [m.gen_request(rng) for _ in range(50)]
        ads = [m.catalog[int(rng.integers(10))] for _ in range(50)]
        batch = m.true_ctr_batch(
            np.array([r.publisher_id for r in reqs]),
            np.array([r.user_segment for r in reqs]),
            np.array([a.ad_id for a in ads]),
        )
        scalar = [m.true_ctr(r, a) for r, a in zip(reqs, ads)]
        np.testing.assert_allclose(batch, scalar, rtol=1e-12)

    def test_unknown_ids_rejected(self):
        m = small_market()
        good = BidRequest(0, 0, 0, 0, 0)
        bad_pub = BidRequest(0, 99, 0, 0, 0)
        bad_seg = BidRequest(0, 0, 99, 0, 0)
        with pytest.raises(CatalogMismatchError):
            m.true_ctr(bad_pub, m.catalog[0])
        with pytest.raises(CatalogMismatchError):
            m.true_ctr(bad_seg, m.catalog[0])
        with pytest.raises(CatalogMismatchError):
            m.true_ctr(good, AdCandidate(ad_id=99, campaign_id=0, cpc_goal=1.0))

    def test_ctr_bias_anchors_mean_level(self):
        lo = small_market(ctr_bias=-5.0)
        hi = small_market(ctr_bias=-2.0)
        rng = np.random.default_rng(7)
        mean = lambda m: np.mean(
            [m.true_ctr(m.gen_request(rng), m.catalog[0]) for _ in range(300)]
        )
        assert mean(hi) > 3 * mean(lo)


class TestAuctions:
    def test_outcome_invariants_enforced(self):
        with pytest.raises(ValueError):
            AuctionOutcome(won=True)  # missing price/click
        with pytest.raises(ValueError):
            AuctionOutcome(won=False, clearing_price=0.1, clicked=False)
        with pytest.raises(ValueError):
            AuctionOutcome(won=True, clearing_price=-0.1, clicked=False)

    def test_losses_are_fully_censored(self):
        m = small_market()
        rng = np.random.default_rng(8)
        req = m.gen_request(rng)
        out = m.run_auction(0.0, req, m.catalog[0], rng)
        assert not out.won and out.clearing_price is None and out.clicked is None

    def test_zero_bid_never_wins(self):
        m = small_market(price_floor=0.0)
        rng = np.random.default_rng(9)
        req = m.gen_request(rng)
        assert not m.run_auction(0.0, req, m.catalog[0], rng).won

    def test_win_pays_second_price_not_bid(self):
        m = small_market()
        rng = np.random.default_rng(10)
        req = m.gen_request(rng)
        out = m.run_auction(10_000.0, req, m.catalog[0], rng)
        assert out.won and out.clearing_price < 10_000.0
        assert out.clearing_price >= m.config.price_floor

    def test_price_floor_is_reserve(self):
        m = small_market(price_floor=0.5, competitor_log_loc=-8.0)
        rng = np.random.default_rng(11)
        req = m.gen_request(rng)
        # Competitors bid ~e^-8, so the floor is the binding reserve.
        assert not m.run_auction(0.49, req, m.catalog[0], rng).won
        out = m.run_auction(0.51, req, m.catalog[0], rng)
        assert out.won and out.clearing_price == 0.5

    def test_raising_bid_only_adds_wins(self):
        m = small_market()
        req = m.gen_request(np.random.default_rng(12))
        ad = m.catalog[0]
        low_wins = [
            m.run_auction(0.02, req, ad, np.random.default_rng(s)).won for s in range(200)
        ]
        high_wins = [
            m.run_auction(0.08, req, ad, np.random.default_rng(s)).won for s in range(200)
        ]
        assert all(h or not l for l, h in zip(low_wins, high_wins))
        assert sum(high_wins) > sum(low_wins)

    def test_click_rate_matches_ground_truth(self):
        m = small_market(ctr_bias=-1.0)
        rng = np.random.default_rng(13)
        req = m.gen_request(rng)
        ad = m.catalog[3]
        p = m.true_ctr(req, ad)
        clicks = wins = 0
        for _ in range(4000):
            out = m.run_auction(100.0, req, ad, rng)
            wins += 1
            clicks += out.clicked
        se = math.sqrt(p * (1 - p) / wins)
        assert abs(clicks / wins - p) < 4 * se

    def test_informed_competition_prices_quality(self):
        m = small_market(
            n_publishers=200, competitor_informedness=2.0, competitor_log_spread=0.0
        )
        quality = m.mean_publisher_ctr(m._pubs.latents)
        locs = m._pubs.competitor_locs
        # Without idiosyncratic spread, locs are an affine map of log-quality.
        assert np.corrcoef(np.log(quality), locs)[0, 1] > 0.999

    def test_negative_bid_rejected(self):
        m = small_market()
        req = m.gen_request(np.random.default_rng(14))
        with pytest.raises(ValueError):
            m.run_auction(-1.0, req, m.catalog[0], np.random.default_rng(0))


class TestDrift:
    def test_add_and_retire_shift_active_window(self):
        m = small_market(drift=(DriftEvent(tick=3, add=5, retire=2),))
        assert m.state.n_publishers_total == 20
        m.drift_step(2)  # no event scheduled
        assert m.state.n_publishers_total == 20
        m.drift_step(3)
        st = m.state
        assert st.n_publishers_total == 25
        assert st.active_publisher_ids.min() == 2  # oldest two retired
        assert st.active_publisher_ids.max() == 24

    def test_retired_publishers_stop_appearing_but_keep_truth(self):
        m = small_market(drift=(DriftEvent(tick=0, add=0, retire=10),))
        rng = np.random.default_rng(15)
        req_before = m.gen_request(rng)
        m.drift_step(0)
        pubs = {m.gen_request(rng).publisher_id for _ in range(500)}
        assert min(pubs) >= 10
        # Old ids still resolve for true-CTR lookups (holdout scoring).
        assert 0.0 < m.true_ctr(req_before, m.catalog[0]) < 1.0

    def test_cannot_retire_everyone(self):
        m = small_market(drift=(DriftEvent(tick=1, retire=20),))
        with pytest.raises(ValueError):
            m.drift_step(1)

    def test_level_shift_lowers_new_cohort_quality(self):
        m = small_market(
            n_publishers=150,
            drift=(DriftEvent(tick=0, add=150, level_shift=-1.0),),
        )
        m.drift_step(0)
        quality = m.mean_publisher_ctr(m._pubs.latents)
        old, new = quality[:150], quality[150:]
        assert new.mean() < 0.6 * old.mean()

    def test_new_publishers_enter_rotation(self):
        m = small_market(drift=(DriftEvent(tick=0, add=30),))
        m.drift_step(0)
        rng = np.random.default_rng(16)
        pubs = {m.gen_request(rng).publisher_id for _ in range(3000)}
        assert any(p >= 20 for p in pubs)
