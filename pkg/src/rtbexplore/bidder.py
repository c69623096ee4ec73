"""Bid construction per experiment group: scoring, exploration, final bids.

All groups price every candidate at pCTR × cpc_goal and bid the best one
(ties broken toward the lowest ad id).  They differ only in how the bid gets
scaled up:

- ``control`` never scales.
- ``uncertainty_explore`` estimates MC-dropout uncertainty on the masked
  request, feeds the controller, and applies the granted modifier, if any.
  Every granted modifier is also published to a shared pool.
- ``random_explore`` never looks at uncertainty: with the same explore
  probability it draws a modifier uniformly from the pool's reservoir, so the
  two exploring groups apply the same modifier *distribution* but only one
  targets it.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from . import uncertainty as unc_mod
from .controller import ExplorationController, dimension_key
from .features import AD_FIELDS, N_FIELDS, FeatureEncoder
from .market import AdCandidate, BidRequest
from .model import CtrModel
from .uncertainty import UncertaintyEstimate


class GroupPolicy(str, enum.Enum):
    CONTROL = "control"
    UNCERTAINTY = "uncertainty_explore"
    RANDOM = "random_explore"


def base_bid(pctr: float, cpc_goal: float) -> float:
    """Expected value of the impression to the advertiser."""
    if pctr < 0.0 or cpc_goal < 0.0:
        raise ValueError("pctr and cpc_goal must be >= 0")
    return pctr * cpc_goal


@dataclass(frozen=True)
class PoolConfig:
    capacity: int = 50_000
    min_fill: int = 1_000

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if not 1 <= self.min_fill <= self.capacity:
            raise ValueError("need 1 <= min_fill <= capacity")


class ModifierPool:
    """Reservoir sample (Algorithm R) of every granted exploration modifier.

    Writers call ``add``; readers get ``ready``/``sample`` only — there is no
    way to read uncertainty values back out of the pool, which is what keeps
    the random group blind to the signal while matching its distribution.
    """

    def __init__(self, config: PoolConfig, rng: np.random.Generator):
        self.config = config
        self._rng = rng  # owned: reservoir replacement decisions
        self._buf: list[float] = []
        self._seen = 0

    def __len__(self) -> int:
        return len(self._buf)

    @property
    def seen(self) -> int:
        return self._seen

    @property
    def ready(self) -> bool:
        return len(self._buf) >= self.config.min_fill

    def add(self, modifier: float) -> None:
        self._seen += 1
        if len(self._buf) < self.config.capacity:
            self._buf.append(modifier)
            return
        j = int(self._rng.integers(0, self._seen))
        if j < self.config.capacity:
            self._buf[j] = modifier

    def sample(self, rng: np.random.Generator) -> float:
        if not self._buf:
            raise ValueError("cannot sample from an empty modifier pool")
        return self._buf[int(rng.integers(0, len(self._buf)))]

    def contents(self) -> np.ndarray:
        """Copy of the reservoir, for audits and distribution tests."""
        return np.array(self._buf)


@dataclass(frozen=True)
class BidDecision:
    """Everything a group decided about one request."""

    chosen_ad: int
    pctr: float
    base_bid: float
    modifier: float | None
    final_bid: float
    explored: bool
    uncertainty: UncertaintyEstimate | None


class Bidder:
    """One experiment group's bidding policy over a fixed ad catalog."""

    def __init__(
        self,
        policy: GroupPolicy,
        model: CtrModel,
        encoder: FeatureEncoder,
        catalog: list[AdCandidate],
        mc_samples: int = 30,
        explore_fraction: float = 0.10,
        controller: ExplorationController | None = None,
        pool: ModifierPool | None = None,
        rng_mc: np.random.Generator | None = None,
        rng_explore: np.random.Generator | None = None,
    ):
        if policy is GroupPolicy.UNCERTAINTY:
            if controller is None or pool is None or rng_mc is None or rng_explore is None:
                raise ValueError(
                    "uncertainty_explore needs a controller, pool and rng streams"
                )
        if policy is GroupPolicy.RANDOM and (pool is None or rng_explore is None):
            raise ValueError("random_explore needs the shared pool and an rng stream")
        self.policy = policy
        self.model = model
        self.encoder = encoder
        self.catalog = catalog
        self.mc_samples = mc_samples
        self.explore_fraction = explore_fraction
        self.controller = controller
        self.pool = pool
        self._rng_mc = rng_mc
        self._rng_explore = rng_explore
        # Precomputed per-catalog encodings: hashed ad rows and cpc goals.
        self.ad_rows = encoder.catalog_rows(catalog)
        self._cpc = np.array([ad.cpc_goal for ad in catalog])
        self._ad_ids = np.array([ad.ad_id for ad in catalog])
        self.applied_modifiers: list[float] = []

    def _score_rows(self, request: BidRequest, candidate_idx: np.ndarray) -> np.ndarray:
        rows = np.empty((len(candidate_idx), N_FIELDS), dtype=np.int64)
        pub, seg, slot = self.encoder.request_indices(request)
        rows[:, 0] = pub
        rows[:, 1] = seg
        rows[:, 2] = slot
        rows[:, AD_FIELDS[0]] = self.ad_rows[candidate_idx, 0]
        rows[:, AD_FIELDS[1]] = self.ad_rows[candidate_idx, 1]
        return rows

    def decide(self, request: BidRequest, candidate_idx: np.ndarray) -> BidDecision:
        """Score candidates, pick the best, and maybe scale the bid up."""
        candidate_idx = np.asarray(candidate_idx, dtype=np.int64)
        if candidate_idx.size == 0:
            raise ValueError("cannot bid with an empty candidate list")
        rows = self._score_rows(request, candidate_idx)
        pctrs = self.model.predict_batch(rows)
        bids = pctrs * self._cpc[candidate_idx]
        top = bids.max()
        tied = np.flatnonzero(bids == top)
        pos = tied[np.argmin(self._ad_ids[candidate_idx[tied]])]
        chosen = int(candidate_idx[pos])
        pctr = float(pctrs[pos])
        base = float(bids[pos])

        modifier: float | None = None
        estimate: UncertaintyEstimate | None = None
        if self.policy is GroupPolicy.UNCERTAINTY:
            estimate = unc_mod.estimate(
                self.model, self.encoder, request, self.mc_samples, self._rng_mc
            )
            key = dimension_key(self.controller.config.dimension, request)
            self.controller.ingest(key, estimate.std)
            snap = self.controller.snapshot(key)
            modifier = self.controller.modifier(estimate.std, snap, self._rng_explore)
            if modifier is not None:
                self.pool.add(modifier)
        elif self.policy is GroupPolicy.RANDOM:
            if (
                self.pool.ready
                and self._rng_explore.random() < self.explore_fraction
            ):
                modifier = self.pool.sample(self._rng_explore)

        final = base if modifier is None else base * modifier
        if modifier is not None:
            self.applied_modifiers.append(modifier)
        return BidDecision(
            chosen_ad=chosen,
            pctr=pctr,
            base_bid=base,
            modifier=modifier,
            final_bid=final,
            explored=modifier is not None,
            uncertainty=estimate,
        )
