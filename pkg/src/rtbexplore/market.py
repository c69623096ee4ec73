"""Synthetic CPC display-ad market with second-price auctions and drift.

The market owns the ground truth: per-publisher and per-ad latent vectors
define true click probabilities, publisher popularity follows a Zipf law over
a random popularity ranking, and competition is a per-publisher lognormal
highest-other-bid whose location tracks the publisher's true mean CTR —
informed competitors price inventory by its quality.  Auctions are strictly
second price with a floor, and losses are fully censored — a lost
``AuctionOutcome`` carries no price and no click information at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class CatalogMismatchError(LookupError):
    """Raised when a request or ad references an id the market never issued."""


@dataclass(frozen=True)
class DriftEvent:
    """Scheduled supply change: at ``tick`` add and/or retire publishers.

    ``level_shift`` offsets the added publishers' quality-axis level: cold
    inventory entering an exchange mid-flight skews below the surviving
    standing catalog (long-tail and made-for-advertising supply), so drift
    events typically add publishers from a downshifted level distribution.
    """

    tick: int
    add: int = 0
    retire: int = 0
    level_shift: float = 0.0

    def __post_init__(self) -> None:
        if self.tick < 0:
            raise ValueError(f"drift tick must be >= 0, got {self.tick}")
        if self.add < 0 or self.retire < 0:
            raise ValueError("drift add/retire counts must be >= 0")


@dataclass(frozen=True)
class MarketConfig:
    """Knobs for supply, demand, competition and ground-truth CTR."""

    n_publishers: int = 300
    n_segments: int = 100
    n_slots: int = 50
    n_ads: int = 50
    ads_per_campaign: int = 5
    zipf_exponent: float = 1.1
    # Ground-truth CTR: sigmoid(ctr_bias + <u_pub, v_ad> + segment_offset).
    # The last latent coordinate is a shared quality axis: every ad loads 1.0
    # on it and publishers carry N(0, publisher_level_scale) there, so the
    # dot product decomposes into a per-publisher level plus a smaller
    # per-(publisher, ad) interaction.  Publisher-level CTR differences are
    # what exploration has to discover; the interaction keeps ad choice
    # non-trivial without letting winner's-curse noise swamp the level.
    ctr_bias: float = -4.0
    latent_dim: int = 4
    latent_scale: float = 0.4
    publisher_level_scale: float = 0.6
    segment_offset_scale: float = 0.3
    # Advertiser willingness to pay per click.
    cpc_goal_min: float = 0.5
    cpc_goal_max: float = 2.0
    # Highest competing bid: exp(loc_pub + competitor_sigma * N(0,1)) where
    # loc_pub = competitor_log_loc
    #         + competitor_informedness * ln(mean_ctr_pub / sigmoid(ctr_bias))
    #         + competitor_log_spread * N(0,1).
    # Informed competition prices inventory superlinearly in its true quality
    # (competitor location rises with informedness * log-quality): average
    # and below-average supply stays cheap enough that a prior-level bidder
    # buys it freely and keeps its global calibration healthy, while good
    # publishers are priced far above a fleet-average bid — the
    # censored-feedback trap that bid-boosted exploration exists to break.
    # Because a calibrated bid grows linearly in quality, there is a band of
    # good publishers that can be harvested sustainably once their value is
    # known; only the extreme premium tail stays out of reach.
    competitor_log_loc: float = -4.4
    competitor_log_spread: float = 0.25
    competitor_informedness: float = 2.0
    competitor_sigma: float = 0.45
    price_floor: float = 0.005
    drift: tuple[DriftEvent, ...] = ()

    def __post_init__(self) -> None:
        if self.n_publishers < 1:
            raise ValueError("n_publishers must be >= 1")
        if self.n_segments < 1 or self.n_slots < 1:
            raise ValueError("n_segments and n_slots must be >= 1")
        if self.n_ads < 1:
            raise ValueError("n_ads must be >= 1")
        if self.ads_per_campaign < 1:
            raise ValueError("ads_per_campaign must be >= 1")
        if self.zipf_exponent <= 0:
            raise ValueError("zipf_exponent must be > 0")
        if not 0 < self.cpc_goal_min <= self.cpc_goal_max:
            raise ValueError("need 0 < cpc_goal_min <= cpc_goal_max")
        if self.price_floor < 0:
            raise ValueError("price_floor must be >= 0")
        if self.competitor_sigma < 0 or self.competitor_log_spread < 0:
            raise ValueError("competitor spread parameters must be >= 0")
        if self.competitor_informedness < 0:
            raise ValueError("competitor_informedness must be >= 0")
        if self.publisher_level_scale < 0:
            raise ValueError("publisher_level_scale must be >= 0")


@dataclass(frozen=True)
class AdCandidate:
    """One bid-eligible ad with its advertiser's per-click value."""

    ad_id: int
    campaign_id: int
    cpc_goal: float


@dataclass(slots=True)
class BidRequest:
    """A single incoming impression opportunity."""

    request_id: int
    publisher_id: int
    user_segment: int
    context_slot: int
    timestamp: int


@dataclass(frozen=True)
class AuctionOutcome:
    """Censored auction result: losses reveal neither price nor click."""

    won: bool
    clearing_price: float | None = None
    clicked: bool | None = None

    def __post_init__(self) -> None:
        if self.won:
            if self.clearing_price is None or self.clicked is None:
                raise ValueError("a won auction must carry clearing_price and clicked")
            if self.clearing_price < 0:
                raise ValueError("clearing_price must be >= 0")
        else:
            if self.clearing_price is not None or self.clicked is not None:
                raise ValueError("a lost auction must censor price and click")


# Losses carry no per-auction state, so every loss shares one frozen instance.
_LOST = AuctionOutcome(won=False)


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


@dataclass
class _PublisherTable:
    """Growable per-publisher state; retired rows are kept for true-CTR lookups."""

    latents: np.ndarray  # (n_total, latent_dim)
    popularity_keys: np.ndarray  # (n_total,), uniform draws ranked for Zipf weights
    competitor_locs: np.ndarray  # (n_total,), lognormal location per publisher
    first_active: int = 0

    @property
    def n_total(self) -> int:
        return self.latents.shape[0]

    def append(self, latents, keys, locs) -> None:
        self.latents = np.concatenate([self.latents, latents])
        self.popularity_keys = np.concatenate([self.popularity_keys, keys])
        self.competitor_locs = np.concatenate([self.competitor_locs, locs])


@dataclass
class MarketState:
    """Read-only snapshot of the mutable market state, for tests and audits."""

    tick_ids_issued: int
    n_publishers_total: int
    active_publisher_ids: np.ndarray
    n_ads: int


class Market:
    """Synthetic market; all randomness flows through caller-provided streams
    except construction and drift, which consume the stream given at init."""

    def __init__(self, config: MarketConfig, rng: np.random.Generator):
        self.config = config
        self._rng = rng  # owned: used for initial state and drift events only
        c = config
        pub_latents = self._draw_latents(c.n_publishers)
        pub_keys = rng.random(c.n_publishers)
        # Ads load 1.0 on the trailing shared quality axis (see MarketConfig).
        ad_latents = np.concatenate(
            [
                rng.normal(0.0, c.latent_scale, size=(c.n_ads, c.latent_dim)),
                np.ones((c.n_ads, 1)),
            ],
            axis=1,
        )
        # One CPC goal per campaign: the realized-CPC business constraint is
        # stated per campaign, so all its ads share the advertiser's goal.
        n_campaigns = (c.n_ads + c.ads_per_campaign - 1) // c.ads_per_campaign
        campaign_cpcs = rng.uniform(c.cpc_goal_min, c.cpc_goal_max, size=n_campaigns)
        self._ad_latents = ad_latents
        self.catalog: list[AdCandidate] = [
            AdCandidate(
                ad_id=i,
                campaign_id=i // c.ads_per_campaign,
                cpc_goal=float(campaign_cpcs[i // c.ads_per_campaign]),
            )
            for i in range(c.n_ads)
        ]
        self.campaign_cpc_goals = {
            cid: float(campaign_cpcs[cid]) for cid in range(n_campaigns)
        }
        self._segment_offsets = rng.normal(0.0, c.segment_offset_scale, size=c.n_segments)
        # Competitor locations depend on publisher quality, so the ad catalog
        # and segment offsets must exist before they are drawn.
        self._pubs = _PublisherTable(
            latents=pub_latents,
            popularity_keys=pub_keys,
            competitor_locs=self._draw_competitor_locs(pub_latents),
        )
        self._drift = {ev.tick: ev for ev in c.drift}
        if len(self._drift) != len(c.drift):
            raise ValueError("drift schedule has duplicate ticks")
        self._next_request_id = 0
        self._seg_slot_high = np.array([c.n_segments, c.n_slots], dtype=np.int64)
        self._rebuild_sampler()

    # -- construction helpers ------------------------------------------------

    def _draw_latents(self, n: int, level_shift: float = 0.0) -> np.ndarray:
        c = self.config
        return np.concatenate(
            [
                self._rng.normal(0.0, c.latent_scale, size=(n, c.latent_dim)),
                self._rng.normal(level_shift, c.publisher_level_scale, size=(n, 1)),
            ],
            axis=1,
        )

    def mean_publisher_ctr(self, latents: np.ndarray) -> np.ndarray:
        """True CTR of each publisher row averaged over ads and segments."""
        z = (
            self.config.ctr_bias
            + (latents @ self._ad_latents.T)[:, :, None]
            + self._segment_offsets[None, None, :]
        )
        out = np.exp(-np.abs(z))
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + out[pos])
        out[~pos] = out[~pos] / (1.0 + out[~pos])
        return out.mean(axis=(1, 2))

    def _draw_competitor_locs(self, latents: np.ndarray) -> np.ndarray:
        c = self.config
        quality = np.log(self.mean_publisher_ctr(latents) / _sigmoid(c.ctr_bias))
        return (
            c.competitor_log_loc
            + c.competitor_informedness * quality
            + c.competitor_log_spread * self._rng.standard_normal(len(latents))
        )

    def _rebuild_sampler(self) -> None:
        """Zipf weights over active publishers, ranked by their random keys."""
        pubs = self._pubs
        active = np.arange(pubs.first_active, pubs.n_total)
        keys = pubs.popularity_keys[active]
        ranks = np.empty(len(active), dtype=np.float64)
        ranks[np.argsort(keys, kind="stable")] = np.arange(1, len(active) + 1)
        weights = ranks ** (-self.config.zipf_exponent)
        cum = np.cumsum(weights)
        self._active_ids = active
        self._cum_weights = cum / cum[-1]

    # -- state inspection ----------------------------------------------------

    @property
    def state(self) -> MarketState:
        return MarketState(
            tick_ids_issued=self._next_request_id,
            n_publishers_total=self._pubs.n_total,
            active_publisher_ids=self._active_ids.copy(),
            n_ads=self.config.n_ads,
        )

    @property
    def active_publisher_ids(self) -> np.ndarray:
        return self._active_ids

    # -- core operations -----------------------------------------------------

    def gen_request(self, rng: np.random.Generator) -> BidRequest:
        pos = int(np.searchsorted(self._cum_weights, rng.random(), side="right"))
        pos = min(pos, len(self._active_ids) - 1)  # guard the u == 1.0 edge
        rid = self._next_request_id
        self._next_request_id += 1
        seg, slot = rng.integers(self._seg_slot_high)
        return BidRequest(
            request_id=rid,
            publisher_id=int(self._active_ids[pos]),
            user_segment=int(seg),
            context_slot=int(slot),
            timestamp=rid,
        )

    def sample_candidates(self, k: int, rng: np.random.Generator) -> np.ndarray:
        """Uniformly sample ``k`` distinct catalog indices for one request.

        The ``k`` smallest of ``n`` iid uniforms index a uniformly random
        k-subset; this is much cheaper than a generic no-replacement draw.
        """
        n = self.config.n_ads
        if not 1 <= k <= n:
            raise ValueError(f"need 1 <= k <= {n} candidates, got {k}")
        if k == n:
            return np.arange(n)
        return np.argpartition(rng.random(n), k)[:k]

    def true_ctr(self, request: BidRequest, ad: AdCandidate) -> float:
        pub = request.publisher_id
        if not 0 <= pub < self._pubs.n_total:
            raise CatalogMismatchError(f"unknown publisher id {pub}")
        if not 0 <= request.user_segment < self.config.n_segments:
            raise CatalogMismatchError(f"unknown user segment {request.user_segment}")
        if not 0 <= ad.ad_id < self.config.n_ads:
            raise CatalogMismatchError(f"unknown ad id {ad.ad_id}")
        z = (
            self.config.ctr_bias
            + float(self._pubs.latents[pub] @ self._ad_latents[ad.ad_id])
            + float(self._segment_offsets[request.user_segment])
        )
        return _sigmoid(z)

    def true_ctr_batch(self, publisher_ids, segments, ad_ids) -> np.ndarray:
        """Vectorized ground-truth CTR for aligned id arrays."""
        z = (
            self.config.ctr_bias
            + np.einsum(
                "ij,ij->i", self._pubs.latents[publisher_ids], self._ad_latents[ad_ids]
            )
            + self._segment_offsets[segments]
        )
        out = np.empty_like(z)
        np.exp(-np.abs(z), out=out)
        pos = z >= 0
        out[pos] = 1.0 / (1.0 + out[pos])
        out[~pos] = out[~pos] / (1.0 + out[~pos])
        return out

    def run_auction(
        self,
        bid: float,
        request: BidRequest,
        ad: AdCandidate,
        rng: np.random.Generator,
    ) -> AuctionOutcome:
        """Second-price auction against one sampled competitor and the floor.

        The competitor draw happens before the win test so that, for a fixed
        rng stream, raising the bid can only turn losses into wins.  The click
        coin is drawn only on a win: losses stay fully censored and consume no
        click randomness.
        """
        if bid < 0:
            raise ValueError(f"bid must be >= 0, got {bid!r}")
        pub = request.publisher_id
        if not 0 <= pub < self._pubs.n_total:
            raise CatalogMismatchError(f"unknown publisher id {pub}")
        c = self.config
        competitor = math.exp(
            self._pubs.competitor_locs[pub] + c.competitor_sigma * rng.standard_normal()
        )
        reserve = max(competitor, c.price_floor)
        if bid <= reserve:  # ties lose
            return _LOST
        clicked = bool(rng.random() < self.true_ctr(request, ad))
        return AuctionOutcome(won=True, clearing_price=reserve, clicked=clicked)

    def drift_step(self, tick: int) -> None:
        """Apply the scheduled supply change for ``tick``, if any."""
        ev = self._drift.get(tick)
        if ev is None:
            return
        if ev.add:
            latents = self._draw_latents(ev.add, ev.level_shift)
            keys = self._rng.random(ev.add)
            self._pubs.append(latents, keys, self._draw_competitor_locs(latents))
        if ev.retire:
            remaining = self._pubs.n_total - self._pubs.first_active - ev.retire
            if remaining < 1:
                raise ValueError(
                    f"drift at tick {tick} would retire all active publishers"
                )
            self._pubs.first_active += ev.retire
        self._rebuild_sampler()
