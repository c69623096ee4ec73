"""MC-dropout predictive uncertainty on ad-masked request features.

A request's uncertainty is the sample standard deviation of N stochastic
forward passes over the request encoded with both ad fields pointed at the
reserved dummy index — so the number is a property of the request alone and
costs N extra forward passes on top of the #ads scoring passes (never
#ads × N).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .features import FeatureEncoder
from .market import BidRequest
from .model import CtrModel


@dataclass(frozen=True)
class UncertaintyEstimate:
    """Sample mean/std of the MC-dropout prediction distribution."""

    mean: float
    std: float
    n_samples: int

    def __post_init__(self) -> None:
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if self.std < 0:
            raise ValueError("std must be >= 0")


def estimate(
    model: CtrModel,
    encoder: FeatureEncoder,
    request: BidRequest,
    n: int,
    rng: np.random.Generator,
) -> UncertaintyEstimate:
    """Run ``n`` independent-mask stochastic passes on the masked request.

    Uses Bessel's correction for n >= 2; a single sample (or identical
    samples, as with dropout 0) yields std exactly 0.
    """
    if n < 1:
        raise ValueError(f"need n >= 1 samples, got {n}")
    row = encoder.encode_masked(request).indices
    preds = model.mc_predictions(row, n, rng)
    mean = float(preds.sum()) / n
    d = preds - mean
    var = float(d @ d)
    # Identical samples (n == 1, or dropout off) must give exactly 0.0
    # rather than float-summation dust.
    if n < 2 or var == 0.0 or bool(np.all(preds == preds[0])):
        std = 0.0
    else:
        std = math.sqrt(var / (n - 1))
    return UncertaintyEstimate(mean=mean, std=std, n_samples=n)


def prediction_budget(num_ads: int, n: int) -> int:
    """Per-request forward-pass budget: candidate scoring plus MC samples."""
    if num_ads < 0 or n < 0:
        raise ValueError("num_ads and n must be >= 0")
    return num_ads + n
