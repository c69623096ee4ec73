"""Three-group A/B experiment harness over the synthetic market.

Protocol: a single model is warmed up on live traffic with the control
policy, cloned three ways (identical starting weights), and the online phase
routes each request to exactly one group uniformly at random.  Groups train
only on impressions they themselves won — losses are censored and produce no
training event.  After the online phase a fresh holdout stream is generated,
labeled from ground truth, and scored by every group's final model in
deterministic mode for AUC / log loss / mean masked uncertainty.

Every stochastic decision draws from a named child stream of the master
seed, spawned in fixed order, so a seed pins the full run byte for byte.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import IO, Callable

import numpy as np
import yaml

from .bidder import Bidder, GroupPolicy, ModifierPool, PoolConfig
from .controller import ControllerConfig, ExplorationController, dimension_key
from .features import (
    AD,
    CAMPAIGN,
    N_FIELDS,
    PUBLISHER,
    SEGMENT,
    SLOT,
    FeatureConfig,
    FeatureEncoder,
)
from .market import Market, MarketConfig
from .metrics import auc, log_loss
from .model import CtrModel, ModelConfig

GROUP_ORDER = (GroupPolicy.CONTROL, GroupPolicy.UNCERTAINTY, GroupPolicy.RANDOM)


@dataclass(frozen=True)
class ExperimentConfig:
    """Full description of one seeded experiment."""

    seed: int = 1
    n_warmup_requests: int = 200_000
    n_online_requests: int = 600_000
    n_holdout_requests: int = 100_000
    ads_per_request: int = 10
    mc_samples: int = 30
    # Launch-calibration boosts during the shared warmup: a fraction of
    # warmup bids is multiplied by a uniform draw from [m_min, m_max] so the
    # cloned model enters the A/B with the standing catalog already priced.
    # Without this, starved-but-good publishers from the initial supply stay
    # contested all run and their luck-driven unlocks drown the treatment
    # contrast on the supply injected by drift.
    warmup_explore_fraction: float = 0.10
    market: MarketConfig = field(default_factory=MarketConfig)
    features: FeatureConfig = field(default_factory=FeatureConfig)
    # Experiment-level model defaults differ from the bare ModelConfig: the
    # publisher field gets a large embedding init and touched rows decay, so
    # MC-dropout noise tracks per-publisher training volume — the signal the
    # exploration controller consumes.
    model: ModelConfig = field(
        default_factory=lambda: ModelConfig(
            field_init_scales=(0.35, 0.01, 0.01, 0.01, 0.01),
            embedding_decay=0.008,
        )
    )
    # A single shared window: modifiers compare a request's uncertainty to
    # the fleet-wide recent mean, so undertrained publishers stand out.  A
    # per-publisher window would normalize each publisher against itself and
    # grant cold publishers no boost at all.  The band is opened to (0, 1):
    # with m_min = 1 the magnitude clamp already turns sub-mean requests into
    # no-op bids, and a full-width band keeps both explore arms at the same
    # coin rate instead of handing the random arm extra boost volume.
    controller: ControllerConfig = field(
        default_factory=lambda: ControllerConfig(
            dimension="global", q_low=0.0, q_high=1.0
        )
    )
    pool: PoolConfig = field(default_factory=PoolConfig)

    def __post_init__(self) -> None:
        for name in ("n_warmup_requests", "n_online_requests", "n_holdout_requests"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.ads_per_request < 1:
            raise ValueError("ads_per_request must be >= 1")
        if self.ads_per_request > self.market.n_ads:
            raise ValueError("ads_per_request cannot exceed market.n_ads")
        if self.mc_samples < 1:
            raise ValueError("mc_samples must be >= 1")
        if not 0.0 <= self.warmup_explore_fraction <= 1.0:
            raise ValueError("warmup_explore_fraction must be in [0, 1]")


@dataclass
class _Streams:
    """Named child generators of the master seed, spawned in fixed order."""

    market_init: np.random.Generator
    model_init: np.random.Generator
    requests: np.random.Generator
    candidates: np.random.Generator
    auctions: np.random.Generator
    routing: np.random.Generator
    warmup_train: np.random.Generator
    warmup_explore: np.random.Generator
    pool: np.random.Generator
    holdout_labels: np.random.Generator
    group_mc: dict[GroupPolicy, np.random.Generator]
    group_explore: dict[GroupPolicy, np.random.Generator]
    group_train: dict[GroupPolicy, np.random.Generator]
    group_holdout: dict[GroupPolicy, np.random.Generator]
    group_auctions: dict[GroupPolicy, np.random.Generator]


def spawn_streams(seed: int) -> _Streams:
    children = np.random.SeedSequence(seed).spawn(10 + 5 * len(GROUP_ORDER))
    gens = [np.random.default_rng(c) for c in children]
    n = len(GROUP_ORDER)
    return _Streams(
        market_init=gens[0],
        model_init=gens[1],
        requests=gens[2],
        candidates=gens[3],
        auctions=gens[4],
        routing=gens[5],
        warmup_train=gens[6],
        warmup_explore=gens[7],
        pool=gens[8],
        holdout_labels=gens[9],
        group_mc=dict(zip(GROUP_ORDER, gens[10 : 10 + n])),
        group_explore=dict(zip(GROUP_ORDER, gens[10 + n : 10 + 2 * n])),
        group_train=dict(zip(GROUP_ORDER, gens[10 + 2 * n : 10 + 3 * n])),
        group_holdout=dict(zip(GROUP_ORDER, gens[10 + 3 * n : 10 + 4 * n])),
        # One auction stream per arm: a win in one arm changes how much
        # randomness that arm consumes (the click coin only exists on wins),
        # so a shared stream would let any arm's outcome shift every other
        # arm's future draws.  Isolated streams keep the arms comparable.
        group_auctions=dict(zip(GROUP_ORDER, gens[10 + 4 * n : 10 + 5 * n])),
    )


@dataclass
class GroupLedger:
    """Online-phase KPI accumulator for one group."""

    requests: int = 0
    impressions: int = 0
    clicks: int = 0
    spend: float = 0.0
    revenue: float = 0.0
    training_events: int = 0
    explored: int = 0
    campaign_spend: dict[int, float] = field(default_factory=dict)
    campaign_clicks: dict[int, int] = field(default_factory=dict)

    @property
    def ctr(self) -> float:
        return self.clicks / self.impressions if self.impressions else 0.0

    def cpc_violations(self, campaign_goals: dict[int, float]) -> int:
        """Campaigns whose realized CPC (spend per click) exceeds their goal."""
        violations = 0
        for cid, clicks in self.campaign_clicks.items():
            if clicks and self.campaign_spend.get(cid, 0.0) / clicks > campaign_goals[cid]:
                violations += 1
        return violations


@dataclass(frozen=True)
class GroupOnlineMetrics:
    requests: int
    impressions: int
    clicks: int
    spend: float
    revenue: float
    ctr: float
    training_events: int
    explored: int
    cpc_violations: int
    cpc_ok: bool


@dataclass(frozen=True)
class GroupOfflineMetrics:
    auc: float
    log_loss: float
    mean_uncertainty: float


@dataclass(frozen=True)
class GroupReport:
    online: GroupOnlineMetrics
    offline: GroupOfflineMetrics


@dataclass(frozen=True)
class DeltaReport:
    """Relative (group − control) / control per KPI; None when undefined."""

    revenue: float | None
    ctr: float | None
    auc: float | None
    log_loss: float | None


@dataclass(frozen=True)
class Report:
    seed: int
    n_warmup_requests: int
    n_online_requests: int
    n_holdout_requests: int
    groups: dict[str, GroupReport]
    deltas: dict[str, DeltaReport]
    uncertainty_gap: float | None

    def to_dict(self) -> dict:
        d: dict = {
            "seed": self.seed,
            "requests": {
                "warmup": self.n_warmup_requests,
                "online": self.n_online_requests,
                "holdout": self.n_holdout_requests,
            },
            "groups": {},
            "deltas": {},
            "uncertainty_gap": self.uncertainty_gap,
        }
        for name, g in self.groups.items():
            d["groups"][name] = {
                "online": {
                    "requests": g.online.requests,
                    "impressions": g.online.impressions,
                    "clicks": g.online.clicks,
                    "spend": g.online.spend,
                    "revenue": g.online.revenue,
                    "ctr": g.online.ctr,
                    "training_events": g.online.training_events,
                    "explored": g.online.explored,
                    "cpc_violations": g.online.cpc_violations,
                    "cpc_ok": g.online.cpc_ok,
                },
                "offline": {
                    "auc": g.offline.auc,
                    "log_loss": g.offline.log_loss,
                    "mean_uncertainty": g.offline.mean_uncertainty,
                },
            }
        for name, delta in self.deltas.items():
            d["deltas"][name] = {
                "revenue": delta.revenue,
                "ctr": delta.ctr,
                "auc": delta.auc,
                "log_loss": delta.log_loss,
            }
        return d

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)

    def to_csv(self) -> str:
        lines = [
            "group,revenue,ctr,auc,logloss,mean_unc,"
            "delta_revenue,delta_ctr,delta_auc,delta_logloss"
        ]
        for name, g in self.groups.items():
            delta = self.deltas[name]
            cells = [
                name,
                repr(g.online.revenue),
                repr(g.online.ctr),
                repr(g.offline.auc),
                repr(g.offline.log_loss),
                repr(g.offline.mean_uncertainty),
                "" if delta.revenue is None else repr(delta.revenue),
                "" if delta.ctr is None else repr(delta.ctr),
                "" if delta.auc is None else repr(delta.auc),
                "" if delta.log_loss is None else repr(delta.log_loss),
            ]
            lines.append(",".join(cells))
        return "\n".join(lines) + "\n"


def holdout_uncertainty_gap(report: Report) -> float | None:
    """Relative masked-uncertainty gap: (random − uncertainty) / random."""
    rand = report.groups[GroupPolicy.RANDOM.value].offline.mean_uncertainty
    unc = report.groups[GroupPolicy.UNCERTAINTY.value].offline.mean_uncertainty
    if rand == 0.0:
        return None
    return (rand - unc) / rand


@dataclass
class HoldoutData:
    """Raw holdout-phase arrays, exposed for white-box tests and notebooks."""

    publisher_ids: np.ndarray
    segments: np.ndarray
    slots: np.ndarray
    chosen_ads: np.ndarray
    labels: np.ndarray
    scores: dict[str, np.ndarray]
    stds: dict[str, np.ndarray]


@dataclass
class ExperimentState:
    """Live objects of a finished run, for inspection beyond the Report."""

    config: ExperimentConfig
    market: Market
    encoder: FeatureEncoder
    warm_model: CtrModel
    models: dict[GroupPolicy, CtrModel]
    bidders: dict[GroupPolicy, Bidder]
    controller: ExplorationController
    pool: ModifierPool
    ledgers: dict[GroupPolicy, GroupLedger]
    holdout: HoldoutData


def _relative_delta(value: float, control: float) -> float | None:
    if control == 0.0:
        return None
    return (value - control) / control


_HOLDOUT_CHUNK = 4_096


def _hash_ids(encoder: FeatureEncoder, field_id: int, ids: np.ndarray) -> np.ndarray:
    """Vectorized memoized hashing of raw ids (few uniques, many rows)."""
    uniq, inverse = np.unique(ids, return_inverse=True)
    hashed = np.array(
        [encoder.hash_value(field_id, int(v)) for v in uniq], dtype=np.int64
    )
    return hashed[inverse]


def run_with_state(
    cfg: ExperimentConfig,
    audit: IO[str] | None = None,
    progress: Callable[[str], None] | None = None,
) -> tuple[Report, ExperimentState]:
    """Run the full experiment; returns the report plus live state."""
    streams = spawn_streams(cfg.seed)
    market = Market(cfg.market, streams.market_init)
    encoder = FeatureEncoder(cfg.features)
    warm_model = CtrModel(encoder.spaces, cfg.model, streams.model_init)
    catalog = market.catalog
    k = cfg.ads_per_request

    def emit(record: dict) -> None:
        audit.write(json.dumps(record, separators=(",", ":")) + "\n")

    # ---- warm-up: one shared model buys traffic under the control policy.
    if progress:
        progress("warmup")
    warm_bidder = Bidder(
        GroupPolicy.CONTROL, warm_model, encoder, catalog, mc_samples=cfg.mc_samples
    )
    ad_rows = warm_bidder.ad_rows  # hashed (ad, campaign) per catalog index
    train_row = np.empty(N_FIELDS, dtype=np.int64)

    def settle(
        bidder, req, tick, group_name, rng_train, rng_auction, ledger=None, launch_rng=None
    ):
        """Score, bid, auction, and train on a win; returns the outcome."""
        cand = market.sample_candidates(k, streams.candidates)
        dec = bidder.decide(req, cand)
        bid, modifier, explored = dec.final_bid, dec.modifier, dec.explored
        if (
            launch_rng is not None
            and launch_rng.random() < cfg.warmup_explore_fraction
        ):
            lo, hi = cfg.controller.m_min, cfg.controller.m_max
            modifier = lo + (hi - lo) * launch_rng.random()
            bid = dec.base_bid * modifier
            explored = True
        ad = catalog[dec.chosen_ad]
        out = market.run_auction(bid, req, ad, rng_auction)
        if ledger is not None:
            ledger.requests += 1
            if explored:
                ledger.explored += 1
        if out.won:
            pub, seg, slot = encoder.request_indices(req)
            train_row[PUBLISHER] = pub
            train_row[SEGMENT] = seg
            train_row[SLOT] = slot
            train_row[AD] = ad_rows[dec.chosen_ad, 0]
            train_row[CAMPAIGN] = ad_rows[dec.chosen_ad, 1]
            label = int(out.clicked)
            bidder.model.train_step(train_row, label, rng_train)
            if ledger is not None:
                ledger.impressions += 1
                ledger.spend += out.clearing_price
                cid = ad.campaign_id
                ledger.campaign_spend[cid] = (
                    ledger.campaign_spend.get(cid, 0.0) + out.clearing_price
                )
                if out.clicked:
                    ledger.clicks += 1
                    ledger.revenue += ad.cpc_goal
                    ledger.campaign_clicks[cid] = ledger.campaign_clicks.get(cid, 0) + 1
                ledger.training_events += 1
        if audit is not None:
            est = dec.uncertainty
            emit(
                {
                    "kind": "decision",
                    "tick": tick,
                    "request_id": req.request_id,
                    "group": group_name,
                    "publisher": req.publisher_id,
                    "dim_key": dimension_key(cfg.controller.dimension, req),
                    "chosen_ad": dec.chosen_ad,
                    "pctr": dec.pctr,
                    "base_bid": dec.base_bid,
                    "unc": None if est is None else est.std,
                    "modifier": modifier,
                    "final_bid": bid,
                    "explored": explored,
                    "won": out.won,
                    "price": out.clearing_price,
                    "clicked": out.clicked,
                }
            )
            if out.won:
                emit(
                    {
                        "kind": "train",
                        "tick": tick,
                        "request_id": req.request_id,
                        "group": group_name,
                        "label": int(out.clicked),
                    }
                )
        return out

    for tick in range(cfg.n_warmup_requests):
        market.drift_step(tick)
        req = market.gen_request(streams.requests)
        settle(
            warm_bidder,
            req,
            tick,
            "warmup",
            streams.warmup_train,
            streams.auctions,
            launch_rng=streams.warmup_explore,
        )

    # ---- clone into three groups with identical starting weights.
    models = {g: warm_model.clone() for g in GROUP_ORDER}
    controller = ExplorationController(cfg.controller)
    pool = ModifierPool(cfg.pool, streams.pool)
    bidders = {
        GroupPolicy.CONTROL: Bidder(
            GroupPolicy.CONTROL,
            models[GroupPolicy.CONTROL],
            encoder,
            catalog,
            mc_samples=cfg.mc_samples,
        ),
        GroupPolicy.UNCERTAINTY: Bidder(
            GroupPolicy.UNCERTAINTY,
            models[GroupPolicy.UNCERTAINTY],
            encoder,
            catalog,
            mc_samples=cfg.mc_samples,
            explore_fraction=cfg.controller.explore_fraction,
            controller=controller,
            pool=pool,
            rng_mc=streams.group_mc[GroupPolicy.UNCERTAINTY],
            rng_explore=streams.group_explore[GroupPolicy.UNCERTAINTY],
        ),
        GroupPolicy.RANDOM: Bidder(
            GroupPolicy.RANDOM,
            models[GroupPolicy.RANDOM],
            encoder,
            catalog,
            mc_samples=cfg.mc_samples,
            explore_fraction=cfg.controller.explore_fraction,
            pool=pool,
            rng_explore=streams.group_explore[GroupPolicy.RANDOM],
        ),
    }
    ledgers = {g: GroupLedger() for g in GROUP_ORDER}

    # ---- online phase: uniform routing, group-isolated training on wins.
    if progress:
        progress("online")
    base_tick = cfg.n_warmup_requests
    for i in range(cfg.n_online_requests):
        tick = base_tick + i
        market.drift_step(tick)
        req = market.gen_request(streams.requests)
        g = GROUP_ORDER[int(streams.routing.integers(3))]
        settle(
            bidders[g],
            req,
            tick,
            g.value,
            streams.group_train[g],
            streams.group_auctions[g],
            ledger=ledgers[g],
        )

    # ---- holdout: fresh labeled traffic, scored by all final models.
    if progress:
        progress("holdout")
    H = cfg.n_holdout_requests
    pub_ids = np.empty(H, dtype=np.int64)
    segs = np.empty(H, dtype=np.int64)
    slots = np.empty(H, dtype=np.int64)
    cands = np.empty((H, k), dtype=np.int64)
    hold_base = base_tick + cfg.n_online_requests
    for i in range(H):
        market.drift_step(hold_base + i)
        req = market.gen_request(streams.requests)
        pub_ids[i] = req.publisher_id
        segs[i] = req.user_segment
        slots[i] = req.context_slot
        cands[i] = market.sample_candidates(k, streams.candidates)

    hashed_pub = _hash_ids(encoder, PUBLISHER, pub_ids)
    hashed_seg = _hash_ids(encoder, SEGMENT, segs)
    hashed_slot = _hash_ids(encoder, SLOT, slots)
    cpc = np.array([ad.cpc_goal for ad in catalog])

    # The frozen warm-up model is a neutral reference policy: it picks one ad
    # per holdout request so every group is evaluated on identical pairs.
    chosen = np.empty(H, dtype=np.int64)
    for lo in range(0, H, _HOLDOUT_CHUNK):
        hi = min(lo + _HOLDOUT_CHUNK, H)
        C = hi - lo
        block = np.empty((C, k, N_FIELDS), dtype=np.int64)
        block[:, :, PUBLISHER] = hashed_pub[lo:hi, None]
        block[:, :, SEGMENT] = hashed_seg[lo:hi, None]
        block[:, :, SLOT] = hashed_slot[lo:hi, None]
        block[:, :, AD] = ad_rows[cands[lo:hi], 0]
        block[:, :, CAMPAIGN] = ad_rows[cands[lo:hi], 1]
        pctrs = warm_model.predict_batch(block.reshape(C * k, N_FIELDS))
        bids = pctrs.reshape(C, k) * cpc[cands[lo:hi]]
        top = bids.max(axis=1, keepdims=True)
        # Ties break toward the lowest ad id (catalog index == ad id).
        chosen[lo:hi] = np.where(bids == top, cands[lo:hi], cfg.market.n_ads).min(axis=1)

    click_probs = market.true_ctr_batch(pub_ids, segs, chosen)
    labels = (streams.holdout_labels.random(H) < click_probs).astype(np.int64)

    rows = np.empty((H, N_FIELDS), dtype=np.int64)
    rows[:, PUBLISHER] = hashed_pub
    rows[:, SEGMENT] = hashed_seg
    rows[:, SLOT] = hashed_slot
    rows[:, AD] = ad_rows[chosen, 0]
    rows[:, CAMPAIGN] = ad_rows[chosen, 1]
    masked_rows = rows.copy()
    masked_rows[:, AD] = 0
    masked_rows[:, CAMPAIGN] = 0

    scores: dict[str, np.ndarray] = {}
    stds: dict[str, np.ndarray] = {}
    offline: dict[GroupPolicy, GroupOfflineMetrics] = {}
    for g in GROUP_ORDER:
        model = models[g]
        s = np.empty(H)
        u = np.empty(H)
        rng_hold = streams.group_holdout[g]
        for lo in range(0, H, _HOLDOUT_CHUNK):
            hi = min(lo + _HOLDOUT_CHUNK, H)
            s[lo:hi] = model.predict_batch(rows[lo:hi])
            _, u[lo:hi] = model.mc_stats_batch(
                masked_rows[lo:hi], cfg.mc_samples, rng_hold
            )
        scores[g.value] = s
        stds[g.value] = u
        offline[g] = GroupOfflineMetrics(
            auc=auc(s, labels),
            log_loss=log_loss(s, labels),
            mean_uncertainty=float(u.mean()),
        )

    # ---- assemble the report.
    group_reports: dict[str, GroupReport] = {}
    for g in GROUP_ORDER:
        led = ledgers[g]
        violations = led.cpc_violations(market.campaign_cpc_goals)
        group_reports[g.value] = GroupReport(
            online=GroupOnlineMetrics(
                requests=led.requests,
                impressions=led.impressions,
                clicks=led.clicks,
                spend=led.spend,
                revenue=led.revenue,
                ctr=led.ctr,
                training_events=led.training_events,
                explored=led.explored,
                cpc_violations=violations,
                cpc_ok=violations == 0,
            ),
            offline=offline[g],
        )
    control = group_reports[GroupPolicy.CONTROL.value]
    deltas = {
        name: DeltaReport(
            revenue=_relative_delta(g.online.revenue, control.online.revenue),
            ctr=_relative_delta(g.online.ctr, control.online.ctr),
            auc=_relative_delta(g.offline.auc, control.offline.auc),
            log_loss=_relative_delta(g.offline.log_loss, control.offline.log_loss),
        )
        for name, g in group_reports.items()
    }
    report = Report(
        seed=cfg.seed,
        n_warmup_requests=cfg.n_warmup_requests,
        n_online_requests=cfg.n_online_requests,
        n_holdout_requests=cfg.n_holdout_requests,
        groups=group_reports,
        deltas=deltas,
        uncertainty_gap=None,
    )
    report = replace(report, uncertainty_gap=holdout_uncertainty_gap(report))
    state = ExperimentState(
        config=cfg,
        market=market,
        encoder=encoder,
        warm_model=warm_model,
        models=models,
        bidders=bidders,
        controller=controller,
        pool=pool,
        ledgers=ledgers,
        holdout=HoldoutData(
            publisher_ids=pub_ids,
            segments=segs,
            slots=slots,
            chosen_ads=chosen,
            labels=labels,
            scores=scores,
            stds=stds,
        ),
    )
    return report, state


def run(
    cfg: ExperimentConfig,
    audit: IO[str] | None = None,
    progress: Callable[[str], None] | None = None,
) -> Report:
    report, _ = run_with_state(cfg, audit=audit, progress=progress)
    return report
