"""Online factorization-machine + MLP click model with MC-dropout support.

The model is deliberately small and entirely NumPy/float64: per-field hashed
embeddings feed a first-order term, a second-order FM interaction, and a
two-hidden-layer ReLU MLP whose hidden activations carry inverted dropout.
Training is strictly one example at a time with Adagrad-style per-coordinate
step sizes; embeddings update sparsely (only touched rows).

All stochastic forward passes draw fresh dropout masks from a caller-provided
generator, and an instance-level ``forward_rows`` counter records how many
example-rows have passed through the network — the bidding layer's per-request
prediction budget is audited against it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import FeatureVector


class DivergenceError(RuntimeError):
    """Raised when a forward or backward pass produces a non-finite value."""


@dataclass(frozen=True)
class ModelConfig:
    """Architecture and optimizer hyperparameters."""

    embedding_dim: int = 8
    hidden_units: tuple[int, ...] = (32, 16)
    dropout: float = 0.2
    learning_rate: float = 0.05
    adagrad_epsilon: float = 1e-8
    # Nonzero accumulator start (the common library default) keeps the first
    # touch of a coordinate proportional to its gradient instead of a full
    # lr-sized jump; without it the run of no-click labels that necessarily
    # precedes the first click (base CTR ~2%) craters the logit so far that
    # the bidder prices itself under the floor and the feedback loop never
    # delivers the correcting click.
    adagrad_init_accumulator: float = 0.1
    init_scale: float = 0.01
    # Optional per-field embedding init scale (same order as the feature
    # fields).  The high-cardinality identity field benefits from a large
    # random init: an untrained row then produces visibly noisy hidden
    # contributions under MC dropout, while training with dropout active
    # shrinks exactly that contribution variance — so uncertainty decays as
    # a row accumulates data.  Low-cardinality context fields stay small.
    field_init_scales: tuple[float, ...] | None = None
    # Decoupled multiplicative decay applied to the embedding rows touched by
    # a training step (first-order weights are exempt so per-feature
    # calibration persists).  Rows that keep receiving data settle at the
    # norm their gradient signal supports, while the random init mass — the
    # dominant source of MC-dropout noise — survives only on rows that have
    # seen little data.  This is what makes predictive uncertainty track
    # per-feature training volume instead of init luck.
    embedding_decay: float = 0.0
    # Output-bias prior (log-odds).  Online CPC models start from the
    # historical base click rate; without this the untrained model bids as if
    # CTR were 50%, wins everything, then overshoots far below the truth on
    # the first run of no-click labels and censors itself out of the market.
    init_output_bias: float = -4.0
    logit_clip: float = 30.0

    def __post_init__(self) -> None:
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")
        if not self.hidden_units or any(h < 1 for h in self.hidden_units):
            raise ValueError("hidden_units must be a non-empty tuple of positive ints")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        if self.adagrad_epsilon <= 0:
            raise ValueError("adagrad_epsilon must be > 0")
        if self.adagrad_init_accumulator < 0:
            raise ValueError("adagrad_init_accumulator must be >= 0")
        if not 0.0 <= self.embedding_decay < 1.0:
            raise ValueError(f"embedding_decay must be in [0, 1), got {self.embedding_decay}")
        if self.logit_clip <= 0:
            raise ValueError("logit_clip must be > 0")


def _as_row(x) -> np.ndarray:
    if isinstance(x, FeatureVector):
        return x.indices
    return np.asarray(x, dtype=np.int64)


_SNAPSHOT_VERSION = 1


class CtrModel:
    """FM+MLP click-probability model trained online, one example at a time."""

    def __init__(
        self,
        field_spaces: Sequence[int],
        config: ModelConfig,
        rng: np.random.Generator,
    ):
        self.config = config
        self.field_spaces = tuple(int(s) for s in field_spaces)
        if any(s < 2 for s in self.field_spaces):
            raise ValueError("every field space must be >= 2")
        self.n_fields = len(self.field_spaces)
        d = config.embedding_dim
        # All fields share one table; per-field offsets keep their index
        # spaces (including each field's reserved dummy row 0) disjoint.
        self._offsets = np.concatenate(
            [[0], np.cumsum(self.field_spaces[:-1])]
        ).astype(np.int64)
        total = int(sum(self.field_spaces))
        if config.field_init_scales is not None:
            if len(config.field_init_scales) != self.n_fields:
                raise ValueError(
                    f"field_init_scales needs {self.n_fields} entries, "
                    f"got {len(config.field_init_scales)}"
                )
            row_scale = np.repeat(
                np.asarray(config.field_init_scales, dtype=np.float64),
                self.field_spaces,
            )[:, None]
        else:
            row_scale = config.init_scale
        self.embeddings = rng.normal(0.0, 1.0, size=(total, d)) * row_scale
        self.first_order = rng.normal(0.0, config.init_scale, size=total)
        # Dense MLP parameters live in one contiguous buffer; weights/biases
        # are reshaped views into it, so the optimizer can update every dense
        # coordinate with a handful of whole-buffer operations.
        self._layer_sizes = [self.n_fields * d, *config.hidden_units, 1]
        self._flat = np.empty(self._dense_len(), dtype=np.float64)
        self.weights, self.biases = self._dense_views(self._flat)
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            fan_in = self._layer_sizes[i]
            w[...] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=w.shape)
            b[...] = 0.0
        self.biases[-1][0] = config.init_output_bias
        acc0 = config.adagrad_init_accumulator
        self._g2_embeddings = np.full_like(self.embeddings, acc0)
        self._g2_first_order = np.full_like(self.first_order, acc0)
        self._g2_flat = np.full_like(self._flat, acc0)
        self._g2_weights, self._g2_biases = self._dense_views(self._g2_flat)
        self._grad_flat = np.zeros_like(self._flat)
        self._grad_w, self._grad_b = self._dense_views(self._grad_flat)
        self._opt_scratch = np.empty_like(self._flat)
        self.forward_rows = 0
        self.train_steps = 0

    def _dense_len(self) -> int:
        s = self._layer_sizes
        return sum(s[i] * s[i + 1] + s[i + 1] for i in range(len(s) - 1))

    def _dense_views(self, flat: np.ndarray) -> tuple[list[np.ndarray], list[np.ndarray]]:
        """Per-layer (weight, bias) views into one contiguous buffer."""
        s = self._layer_sizes
        ws, bs, off = [], [], 0
        for i in range(len(s) - 1):
            n_in, n_out = s[i], s[i + 1]
            ws.append(flat[off : off + n_in * n_out].reshape(n_in, n_out))
            off += n_in * n_out
            bs.append(flat[off : off + n_out])
            off += n_out
        return ws, bs

    # -- helpers ---------------------------------------------------------

    @property
    def dropout(self) -> float:
        return self.config.dropout

    @property
    def n_hidden_layers(self) -> int:
        return len(self.weights) - 1

    def _check_rows(self, idx: np.ndarray) -> None:
        if idx.shape[-1] != self.n_fields:
            raise ValueError(
                f"expected {self.n_fields} field indices per row, got {idx.shape[-1]}"
            )

    def _base_terms(self, flat: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """First-order + FM logit contribution and the flattened embeddings.

        ``flat`` has shape (B, F); returns (base (B,), x0 (B, F*d)).
        """
        emb = self.embeddings[flat]  # (B, F, d)
        first = self.first_order[flat].sum(axis=1)
        s = emb.sum(axis=1)
        fm = 0.5 * ((s * s).sum(axis=1) - (emb * emb).sum(axis=(1, 2)))
        return first + fm, emb.reshape(flat.shape[0], -1)

    def _squash(self, logit: np.ndarray) -> np.ndarray:
        # A non-finite element makes the sum non-finite; finite logits are far
        # too small (|z| < clip after training guards) to overflow a sum.
        if not math.isfinite(float(logit.sum())):
            raise DivergenceError("non-finite logit in forward pass")
        clip = self.config.logit_clip
        z = np.clip(logit, -clip, clip)
        return 1.0 / (1.0 + np.exp(-z))

    # -- prediction ------------------------------------------------------

    def predict_batch(
        self,
        idx: np.ndarray,
        stochastic: bool = False,
        rng: np.random.Generator | None = None,
    ) -> np.ndarray:
        """Predicted click probability for each row of hashed indices."""
        idx = np.asarray(idx, dtype=np.int64)
        self._check_rows(idx)
        if stochastic and self.config.dropout > 0.0 and rng is None:
            raise ValueError("stochastic prediction with dropout needs an rng")
        self.forward_rows += idx.shape[0]
        base, h = self._base_terms(idx + self._offsets)
        p = self.config.dropout
        inv = 1.0 / (1.0 - p) if p > 0.0 else 1.0
        for layer in range(self.n_hidden_layers):
            h = h @ self.weights[layer] + self.biases[layer]
            np.maximum(h, 0.0, out=h)
            if stochastic and p > 0.0:
                h *= rng.random(h.shape) >= p
                h *= inv
        z = h @ self.weights[-1] + self.biases[-1]
        return self._squash(base + z[:, 0])

    def predict(
        self,
        fv,
        stochastic: bool = False,
        rng: np.random.Generator | None = None,
    ) -> float:
        """Single-example prediction; ``fv`` is a FeatureVector or index row."""
        row = _as_row(fv).reshape(1, -1)
        return float(self.predict_batch(row, stochastic=stochastic, rng=rng)[0])

    def mc_predictions(self, fv, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` stochastic predictions for one example with independent masks.

        The pre-dropout first hidden layer depends only on the example, so it
        is computed once and shared; the per-sample work starts at the first
        dropout mask.  Counts as ``n`` forward rows.
        """
        if n < 1:
            raise ValueError(f"need n >= 1 MC samples, got {n}")
        row = _as_row(fv).reshape(1, -1)
        self._check_rows(row)
        self.forward_rows += n
        base, x0 = self._base_terms(row + self._offsets)
        p = self.config.dropout
        a1 = np.maximum(x0 @ self.weights[0] + self.biases[0], 0.0)  # (1, H1)
        if p == 0.0:
            h = a1
            for layer in range(1, self.n_hidden_layers):
                h = np.maximum(h @ self.weights[layer] + self.biases[layer], 0.0)
            z = h @ self.weights[-1] + self.biases[-1]
            return np.full(n, self._squash(base + z[:, 0])[0])
        inv = 1.0 / (1.0 - p)
        h = a1 * (rng.random((n, a1.shape[1])) >= p)
        h *= inv
        for layer in range(1, self.n_hidden_layers):
            h = h @ self.weights[layer] + self.biases[layer]
            np.maximum(h, 0.0, out=h)
            h *= rng.random(h.shape) >= p
            h *= inv
        z = h @ self.weights[-1] + self.biases[-1]
        return self._squash(base + z[:, 0])

    def mc_stats_batch(
        self, idx: np.ndarray, n: int, rng: np.random.Generator
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-row MC mean and sample std over ``n`` masks; batched.

        Returns ``(means, stds)`` of shape (B,).  Rows whose ``n`` samples are
        all identical get std exactly 0.0, avoiding float-summation dust.
        Counts as B*n forward rows.
        """
        if n < 1:
            raise ValueError(f"need n >= 1 MC samples, got {n}")
        idx = np.asarray(idx, dtype=np.int64)
        self._check_rows(idx)
        B = idx.shape[0]
        self.forward_rows += B * n
        base, x0 = self._base_terms(idx + self._offsets)
        p = self.config.dropout
        a1 = np.maximum(x0 @ self.weights[0] + self.biases[0], 0.0)  # (B, H1)
        if p == 0.0 or n == 1:
            h = a1
            for layer in range(1, self.n_hidden_layers):
                h = np.maximum(h @ self.weights[layer] + self.biases[layer], 0.0)
            z = h @ self.weights[-1] + self.biases[-1]
            preds = self._squash(base + z[:, 0])
            return preds, np.zeros(B)
        inv = 1.0 / (1.0 - p)
        h = a1[:, None, :] * (rng.random((B, n, a1.shape[1])) >= p)
        h *= inv
        h = h.reshape(B * n, -1)
        for layer in range(1, self.n_hidden_layers):
            h = h @ self.weights[layer] + self.biases[layer]
            np.maximum(h, 0.0, out=h)
            h *= rng.random(h.shape) >= p
            h *= inv
        z = h @ self.weights[-1] + self.biases[-1]
        probs = self._squash(base[:, None] + z[:, 0].reshape(B, n))
        means = probs.mean(axis=1)
        stds = probs.std(axis=1, ddof=1)
        degenerate = (probs == probs[:, :1]).all(axis=1)
        if degenerate.any():
            stds[degenerate] = 0.0
        return means, stds

    # -- training --------------------------------------------------------

    def example_loss(self, fv, label: int) -> float:
        """Deterministic (dropout-off) log loss of one example, no update."""
        loss, _ = self._loss_and_grads(fv, label, rng=None, stochastic=False)
        return loss

    def train_step(self, fv, label: int, rng: np.random.Generator) -> float:
        """One online SGD step with dropout active; returns pre-update loss."""
        loss, grads = self._loss_and_grads(fv, label, rng=rng, stochastic=True)
        self._apply_adagrad(*grads)
        self.train_steps += 1
        return loss

    def _loss_and_grads(
        self,
        fv,
        label: int,
        rng: np.random.Generator | None,
        stochastic: bool,
    ):
        if label not in (0, 1):
            raise ValueError(f"label must be 0 or 1, got {label!r}")
        row = _as_row(fv)
        if row.shape != (self.n_fields,):
            raise ValueError(f"expected a single row of {self.n_fields} indices")
        p = self.config.dropout
        use_dropout = stochastic and p > 0.0
        if use_dropout and rng is None:
            raise ValueError("stochastic pass with dropout needs an rng")
        self.forward_rows += 1
        flat = row + self._offsets
        emb = self.embeddings[flat]  # (F, d)
        first = float(self.first_order[flat].sum())
        s = emb.sum(axis=0)
        fm = 0.5 * (float(s @ s) - float((emb * emb).sum()))
        x0 = emb.reshape(-1)

        inv = 1.0 / (1.0 - p) if p > 0.0 else 1.0
        inputs = [x0]
        pres = []
        masks = []
        h = x0
        for layer in range(self.n_hidden_layers):
            pre = h @ self.weights[layer] + self.biases[layer]
            h = np.maximum(pre, 0.0)
            if use_dropout:
                mask = (rng.random(h.shape) >= p) * inv
                h = h * mask
                masks.append(mask)
            pres.append(pre)
            inputs.append(h)
        z = float(h @ self.weights[-1][:, 0] + self.biases[-1][0])
        logit = first + fm + z
        if not math.isfinite(logit):
            raise DivergenceError("non-finite logit in training forward pass")

        y = float(label)
        # Numerically stable BCE from the raw (unclipped) logit.
        loss = max(logit, 0.0) - logit * y + math.log1p(math.exp(-abs(logit)))
        if logit >= 0:
            g = 1.0 / (1.0 + math.exp(-logit)) - y
        else:
            e = math.exp(logit)
            g = e / (1.0 + e) - y

        # Dense gradients are written into the reusable _grad_flat scratch
        # (valid until the next call); sparse gradients are fresh arrays.
        np.multiply(inputs[-1], g, out=self._grad_w[-1][:, 0])
        self._grad_b[-1][0] = g
        delta = g * self.weights[-1][:, 0]
        for layer in range(self.n_hidden_layers - 1, -1, -1):
            if use_dropout:
                delta = delta * masks[layer]
            delta = delta * (pres[layer] > 0.0)
            np.multiply(inputs[layer][:, None], delta, out=self._grad_w[layer])
            self._grad_b[layer][...] = delta
            delta = self.weights[layer] @ delta
        # FM term: d fm / d e_f = s - e_f; MLP input path adds delta.
        grad_emb = g * (s[None, :] - emb) + delta.reshape(emb.shape)
        grad_first = np.full(self.n_fields, g)
        if not math.isfinite(loss):
            raise DivergenceError("non-finite training loss")
        return float(loss), (flat, grad_emb, grad_first)

    def _apply_adagrad(self, flat, grad_emb, grad_first) -> None:
        """Adagrad step from sparse grads plus the dense _grad_flat scratch."""
        lr = self.config.learning_rate
        eps = self.config.adagrad_epsilon
        decay = self.config.embedding_decay
        if decay > 0.0:
            self.embeddings[flat] *= 1.0 - decay
        # Sparse rows: fields map to distinct table rows by construction.
        g2e = self._g2_embeddings[flat]
        g2e += grad_emb * grad_emb
        self._g2_embeddings[flat] = g2e
        self.embeddings[flat] -= lr * grad_emb / (np.sqrt(g2e) + eps)
        g2f = self._g2_first_order[flat]
        g2f += grad_first * grad_first
        self._g2_first_order[flat] = g2f
        self.first_order[flat] -= lr * grad_first / (np.sqrt(g2f) + eps)
        # Dense parameters: a few fused whole-buffer operations.
        gf = self._grad_flat
        sc = self._opt_scratch
        np.multiply(gf, gf, out=sc)
        self._g2_flat += sc
        np.sqrt(self._g2_flat, out=sc)
        sc += eps
        np.divide(gf, sc, out=sc)
        sc *= lr
        self._flat -= sc

    # -- lifecycle -------------------------------------------------------

    def clone(self) -> "CtrModel":
        """Deep copy: parameter, accumulator and counter state all duplicated."""
        other = object.__new__(CtrModel)
        other.config = self.config
        other.field_spaces = self.field_spaces
        other.n_fields = self.n_fields
        other._offsets = self._offsets
        other._layer_sizes = list(self._layer_sizes)
        other.embeddings = self.embeddings.copy()
        other.first_order = self.first_order.copy()
        other._flat = self._flat.copy()
        other.weights, other.biases = other._dense_views(other._flat)
        other._g2_embeddings = self._g2_embeddings.copy()
        other._g2_first_order = self._g2_first_order.copy()
        other._g2_flat = self._g2_flat.copy()
        other._g2_weights, other._g2_biases = other._dense_views(other._g2_flat)
        other._grad_flat = np.zeros_like(other._flat)
        other._grad_w, other._grad_b = other._dense_views(other._grad_flat)
        other._opt_scratch = np.empty_like(other._flat)
        other.forward_rows = self.forward_rows
        other.train_steps = self.train_steps
        return other

    def save(self, path) -> None:
        """Write a flat-array parameter snapshot (versioned .npz)."""
        arrays = {
            "version": np.array([_SNAPSHOT_VERSION]),
            "field_spaces": np.array(self.field_spaces, dtype=np.int64),
            "hparams": np.array(
                [
                    self.config.embedding_dim,
                    self.config.dropout,
                    self.config.learning_rate,
                    self.config.adagrad_epsilon,
                    self.config.adagrad_init_accumulator,
                    self.config.init_scale,
                    self.config.init_output_bias,
                    self.config.logit_clip,
                    self.config.embedding_decay,
                ]
            ),
            "hidden_units": np.array(self.config.hidden_units, dtype=np.int64),
            "field_init_scales": np.array(
                [-1.0]
                if self.config.field_init_scales is None
                else list(self.config.field_init_scales)
            ),
            "embeddings": self.embeddings,
            "first_order": self.first_order,
            "g2_embeddings": self._g2_embeddings,
            "g2_first_order": self._g2_first_order,
            "counters": np.array([self.forward_rows, self.train_steps], dtype=np.int64),
        }
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            arrays[f"w_{i}"] = w
            arrays[f"b_{i}"] = b
            arrays[f"g2w_{i}"] = self._g2_weights[i]
            arrays[f"g2b_{i}"] = self._g2_biases[i]
        np.savez(path, **arrays)

    @classmethod
    def load(cls, path) -> "CtrModel":
        with np.load(path) as data:
            version = int(data["version"][0])
            if version != _SNAPSHOT_VERSION:
                raise ValueError(f"unsupported snapshot version {version}")
            h = data["hparams"]
            fis = data["field_init_scales"]
            config = ModelConfig(
                field_init_scales=None if fis[0] < 0 else tuple(float(v) for v in fis),
                embedding_dim=int(h[0]),
                hidden_units=tuple(int(u) for u in data["hidden_units"]),
                dropout=float(h[1]),
                learning_rate=float(h[2]),
                adagrad_epsilon=float(h[3]),
                adagrad_init_accumulator=float(h[4]),
                init_scale=float(h[5]),
                init_output_bias=float(h[6]),
                logit_clip=float(h[7]),
                embedding_decay=float(h[8]),
            )
            model = cls(
                tuple(int(s) for s in data["field_spaces"]),
                config,
                np.random.default_rng(0),
            )
            model.embeddings = data["embeddings"].copy()
            model.first_order = data["first_order"].copy()
            model._g2_embeddings = data["g2_embeddings"].copy()
            model._g2_first_order = data["g2_first_order"].copy()
            # Copy into the flat-buffer views so the layout invariant holds.
            for i in range(len(model.weights)):
                model.weights[i][...] = data[f"w_{i}"]
                model.biases[i][...] = data[f"b_{i}"]
                model._g2_weights[i][...] = data[f"g2w_{i}"]
                model._g2_biases[i][...] = data[f"g2b_{i}"]
            model.forward_rows = int(data["counters"][0])
            model.train_steps = int(data["counters"][1])
        return model
