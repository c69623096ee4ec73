"""Deterministic hashed feature encoding for bid requests and ad candidates.

Every categorical id is mapped into a fixed per-field index space with a salted
64-bit mixer, so the encoding needs no vocabulary and never changes across
runs.  Index 0 of every field is reserved as a dummy: real values always hash
into [1, space), which lets callers blank out ad fields (for request-only
model queries) by pointing them at an index the model never trains.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Field layout of a fully encoded example, in fixed canonical order.
PUBLISHER, SEGMENT, SLOT, AD, CAMPAIGN = range(5)
FIELD_NAMES = ("publisher", "segment", "slot", "ad", "campaign")
REQUEST_FIELDS = (PUBLISHER, SEGMENT, SLOT)
AD_FIELDS = (AD, CAMPAIGN)
N_FIELDS = len(FIELD_NAMES)

#: Reserved per-field index that no real value ever hashes to.
DUMMY_INDEX = 0

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    """One round of the SplitMix64 finalizer (public-domain constants)."""
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


def hash_index(salt: int, field_id: int, value: int, space: int) -> int:
    """Hash ``value`` of field ``field_id`` into [1, space).

    The salt and field id are mixed first so that equal raw ids in different
    fields land independently; the reserved dummy slot 0 is skipped by
    construction.
    """
    if space < 2:
        raise ValueError(f"field space must be >= 2, got {space}")
    if value < 0:
        raise ValueError(f"categorical ids must be non-negative, got {value}")
    mixed = splitmix64(splitmix64((salt + field_id) & _MASK64) ^ (value & _MASK64))
    return 1 + mixed % (space - 1)


@dataclass(frozen=True)
class FeatureConfig:
    """Sizes of the per-field hashed index spaces plus the shared salt."""

    publisher_space: int = 2**14
    segment_space: int = 2**10
    slot_space: int = 2**10
    ad_space: int = 2**10
    campaign_space: int = 2**10
    hash_salt: int = 1_000_003

    def spaces(self) -> tuple[int, ...]:
        return (
            self.publisher_space,
            self.segment_space,
            self.slot_space,
            self.ad_space,
            self.campaign_space,
        )

    def __post_init__(self) -> None:
        for name, space in zip(FIELD_NAMES, self.spaces()):
            if space < 2:
                raise ValueError(f"{name}_space must be >= 2, got {space}")


@dataclass(eq=False)
class FeatureVector:
    """Per-field hashed indices for one (request, ad) example."""

    indices: np.ndarray  # shape (N_FIELDS,), int64

    def __post_init__(self) -> None:
        self.indices = np.asarray(self.indices, dtype=np.int64)
        if self.indices.shape != (N_FIELDS,):
            raise ValueError(f"expected {N_FIELDS} field indices, got shape {self.indices.shape}")

    def pairs(self) -> tuple[tuple[int, int], ...]:
        return tuple((f, int(self.indices[f])) for f in range(N_FIELDS))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, FeatureVector):
            return NotImplemented
        return bool(np.array_equal(self.indices, other.indices))


@dataclass
class _FieldMemo:
    """Lazy per-field cache of raw id -> hashed index."""

    field_id: int
    space: int
    salt: int
    table: dict[int, int] = field(default_factory=dict)

    def lookup(self, value: int) -> int:
        idx = self.table.get(value)
        if idx is None:
            idx = hash_index(self.salt, self.field_id, value, self.space)
            self.table[value] = idx
        return idx


class FeatureEncoder:
    """Stateless-by-contract encoder from market objects to hashed indices.

    The memo tables are a pure cache: the mapping is a function of
    (salt, field, value) only, so two encoders with equal config agree on
    every id regardless of encounter order.
    """

    def __init__(self, config: FeatureConfig):
        self.config = config
        self.spaces = config.spaces()
        self._memos = [
            _FieldMemo(f, self.spaces[f], config.hash_salt) for f in range(N_FIELDS)
        ]

    def hash_value(self, field_id: int, value: int) -> int:
        if not 0 <= field_id < N_FIELDS:
            raise ValueError(f"unknown field id {field_id}")
        return self._memos[field_id].lookup(value)

    def request_indices(self, request) -> tuple[int, int, int]:
        """Hashed (publisher, segment, slot) triple for a bid request."""
        return (
            self._memos[PUBLISHER].lookup(request.publisher_id),
            self._memos[SEGMENT].lookup(request.user_segment),
            self._memos[SLOT].lookup(request.context_slot),
        )

    def ad_indices(self, ad) -> tuple[int, int]:
        """Hashed (ad, campaign) pair for an ad candidate."""
        return (
            self._memos[AD].lookup(ad.ad_id),
            self._memos[CAMPAIGN].lookup(ad.campaign_id),
        )

    def encode(self, request, ad) -> FeatureVector:
        pub, seg, slot = self.request_indices(request)
        ad_i, camp = self.ad_indices(ad)
        return FeatureVector(np.array([pub, seg, slot, ad_i, camp], dtype=np.int64))

    def encode_masked(self, request) -> FeatureVector:
        """Encode a request with both ad fields pointed at the dummy index."""
        pub, seg, slot = self.request_indices(request)
        return FeatureVector(
            np.array([pub, seg, slot, DUMMY_INDEX, DUMMY_INDEX], dtype=np.int64)
        )

    def mask_ad_features(self, fv: FeatureVector) -> FeatureVector:
        """Return a copy of ``fv`` with ad-side fields replaced by the dummy."""
        out = fv.indices.copy()
        for f in AD_FIELDS:
            out[f] = DUMMY_INDEX
        return FeatureVector(out)

    def catalog_rows(self, catalog) -> np.ndarray:
        """Hashed (ad, campaign) index rows for a whole ad catalog."""
        rows = np.empty((len(catalog), len(AD_FIELDS)), dtype=np.int64)
        for i, ad in enumerate(catalog):
            rows[i, 0], rows[i, 1] = self.ad_indices(ad)
        return rows

    def encode_batch(self, request, ads) -> np.ndarray:
        """Encode one request against many ads; shape (len(ads), N_FIELDS)."""
        pub, seg, slot = self.request_indices(request)
        out = np.empty((len(ads), N_FIELDS), dtype=np.int64)
        out[:, PUBLISHER] = pub
        out[:, SEGMENT] = seg
        out[:, SLOT] = slot
        for i, ad in enumerate(ads):
            out[i, AD], out[i, CAMPAIGN] = self.ad_indices(ad)
        return out
