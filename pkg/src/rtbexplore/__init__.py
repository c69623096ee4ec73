"""Desk-scale RTB testbed: CTR-model uncertainty driving supply exploration."""

from .bidder import BidDecision, Bidder, GroupPolicy, ModifierPool, PoolConfig, base_bid
from .controller import (
    ControllerConfig,
    ControllerSnapshot,
    ExplorationController,
    dimension_key,
)
from .experiment import (
    ExperimentConfig,
    GroupLedger,
    Report,
    holdout_uncertainty_gap,
    run,
    run_with_state,
)
from .features import FeatureConfig, FeatureEncoder, FeatureVector
from .market import (
    AdCandidate,
    AuctionOutcome,
    BidRequest,
    CatalogMismatchError,
    DriftEvent,
    Market,
    MarketConfig,
)
from .metrics import auc, log_loss
from .model import CtrModel, DivergenceError, ModelConfig
from .uncertainty import UncertaintyEstimate, estimate, prediction_budget

__version__ = "0.1.0"

__all__ = [
    "AdCandidate",
    "AuctionOutcome",
    "BidDecision",
    "Bidder",
    "BidRequest",
    "CatalogMismatchError",
    "ControllerConfig",
    "ControllerSnapshot",
    "CtrModel",
    "DivergenceError",
    "DriftEvent",
    "ExperimentConfig",
    "ExplorationController",
    "FeatureConfig",
    "FeatureEncoder",
    "FeatureVector",
    "GroupLedger",
    "GroupPolicy",
    "Market",
    "MarketConfig",
    "ModelConfig",
    "ModifierPool",
    "PoolConfig",
    "Report",
    "UncertaintyEstimate",
    "auc",
    "base_bid",
    "dimension_key",
    "estimate",
    "holdout_uncertainty_gap",
    "log_loss",
    "prediction_budget",
    "run",
    "run_with_state",
    "__version__",
]
