"""Hashed feature encoding: determinism, dummy-index reservation, masking."""

import numpy as np
import pytest

from rtbexplore.features import (
    AD,
    AD_FIELDS,
    CAMPAIGN,
    DUMMY_INDEX,
    FIELD_NAMES,
    N_FIELDS,
    PUBLISHER,
    REQUEST_FIELDS,
    SEGMENT,
    SLOT,
    FeatureConfig,
    FeatureEncoder,
    FeatureVector,
    hash_index,
    splitmix64,
)
from rtbexplore.market import AdCandidate, BidRequest


def _request(pub=3, seg=7, slot=1, rid=0):
    return BidRequest(
        request_id=rid, publisher_id=pub, user_segment=seg, context_slot=slot, timestamp=0
    )


def _ad(ad_id=5, campaign_id=2, cpc=1.0):
    return AdCandidate(ad_id=ad_id, campaign_id=campaign_id, cpc_goal=cpc)


class TestSplitmix64:
    def test_known_vector(self):
        # SplitMix64 reference sequence seeded with 0 starts with this value.
        assert splitmix64(0) == 0xE220A8397B1DCDAF

    def test_stays_in_64_bits(self):
        for x in (0, 1, 2**63, 2**64 - 1):
            assert 0 <= splitmix64(x) < 2**64

    def test_bijective_behaviour_no_collisions_small_range(self):
        outs = {splitmix64(x) for x in range(10_000)}
        assert len(outs) == 10_000


class TestHashIndex:
    def test_never_returns_dummy(self):
        for value in range(5_000):
            assert hash_index(99, 0, value, 64) != DUMMY_INDEX

    def test_range(self):
        space = 17
        idx = [hash_index(1, 2, v, space) for v in range(1_000)]
        assert min(idx) >= 1 and max(idx) < space

    def test_deterministic(self):
        assert hash_index(7, 1, 42, 100) == hash_index(7, 1, 42, 100)

    def test_salt_and_field_change_mapping(self):
        base = hash_index(7, 1, 42, 2**20)
        assert hash_index(8, 1, 42, 2**20) != base
        assert hash_index(7, 2, 42, 2**20) != base

    def test_rejects_bad_space_and_value(self):
        with pytest.raises(ValueError):
            hash_index(0, 0, 1, 1)
        with pytest.raises(ValueError):
            hash_index(0, 0, -1, 16)

    def test_roughly_uniform(self):
        space = 8
        counts = np.bincount(
            [hash_index(3, 0, v, space) for v in range(70_000)], minlength=space
        )
        assert counts[DUMMY_INDEX] == 0
        # 10k expected per live slot; a fair hash stays well within 10%.
        live = counts[1:]
        assert live.min() > 9_000 and live.max() < 11_000


class TestFeatureConfig:
    def test_spaces_order_matches_field_names(self):
        cfg = FeatureConfig()
        assert len(cfg.spaces()) == N_FIELDS == len(FIELD_NAMES)

    def test_rejects_tiny_space(self):
        with pytest.raises(ValueError):
            FeatureConfig(slot_space=1)


class TestFeatureVector:
    def test_shape_enforced(self):
        with pytest.raises(ValueError):
            FeatureVector(np.arange(3))

    def test_equality_by_value(self):
        a = FeatureVector(np.arange(N_FIELDS))
        b = FeatureVector(np.arange(N_FIELDS))
        assert a == b and not (a != b)

    def test_pairs(self):
        fv = FeatureVector(np.array([5, 4, 3, 2, 1]))
        assert fv.pairs() == ((0, 5), (1, 4), (2, 3), (3, 2), (4, 1))


class TestFeatureEncoder:
    def setup_method(self):
        self.enc = FeatureEncoder(FeatureConfig())

    def test_encode_layout(self):
        fv = self.enc.encode(_request(), _ad())
        assert fv.indices.shape == (N_FIELDS,)
        assert all(fv.indices[f] != DUMMY_INDEX for f in range(N_FIELDS))

    def test_two_encoders_agree_regardless_of_order(self):
        other = FeatureEncoder(FeatureConfig())
        # Warm this encoder's memo tables in a scrambled order first.
        for pub in (9, 1, 5):
            other.encode(_request(pub=pub), _ad(ad_id=pub))
        assert other.encode(_request(), _ad()) == self.enc.encode(_request(), _ad())

    def test_masked_encoding_blanks_only_ad_fields(self):
        full = self.enc.encode(_request(), _ad())
        masked = self.enc.encode_masked(_request())
        for f in REQUEST_FIELDS:
            assert masked.indices[f] == full.indices[f]
        for f in AD_FIELDS:
            assert masked.indices[f] == DUMMY_INDEX

    def test_mask_ad_features_copies(self):
        full = self.enc.encode(_request(), _ad())
        masked = self.enc.mask_ad_features(full)
        assert masked == self.enc.encode_masked(_request())
        assert full.indices[AD] != DUMMY_INDEX  # original untouched

    def test_catalog_rows_match_single_encoding(self):
        catalog = [_ad(ad_id=i, campaign_id=i % 3) for i in range(8)]
        rows = self.enc.catalog_rows(catalog)
        assert rows.shape == (8, len(AD_FIELDS))
        for i, ad in enumerate(catalog):
            assert tuple(rows[i]) == self.enc.ad_indices(ad)

    def test_encode_batch_matches_encode(self):
        ads = [_ad(ad_id=i, campaign_id=2 * i) for i in range(6)]
        batch = self.enc.encode_batch(_request(), ads)
        for i, ad in enumerate(ads):
            assert np.array_equal(batch[i], self.enc.encode(_request(), ad).indices)

    def test_different_salt_changes_encoding(self):
        other = FeatureEncoder(FeatureConfig(hash_salt=123))
        assert other.encode(_request(), _ad()) != self.enc.encode(_request(), _ad())

    def test_hash_value_validates_field(self):
        with pytest.raises(ValueError):
            self.enc.hash_value(N_FIELDS, 0)

    def test_request_indices_distinct_fields(self):
        # Same raw id in different fields should land on different indices
        # with overwhelming probability under the per-field salting.
        req = _request(pub=77, seg=77, slot=77)
        pub, seg, slot = self.enc.request_indices(req)
        assert len({pub, seg, slot}) == 3
