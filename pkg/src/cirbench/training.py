"""Soft-triplet metric learning: loss, negative sampling, optimizers, the
training loop, and finite-difference gradient verification.

The ranking loss on a (composed, positive, negative) triple is

    loss = log(1 + exp(d_pos - d_neg))

with plain (not squared) Euclidean distances between unit vectors, computed
in the numerically stable softplus form.  Minimizing it pulls the composed
feature toward the projected target and away from the sampled negative; at
d_pos == d_neg the loss is exactly ln 2, and it drops below ln 2 precisely
when the positive is already the closer of the two.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import composers
from .core import (
    DataError,
    FeatureStore,
    NumericalError,
    PairRecord,
    Vocabulary,
)
from .composers import (
    ComposerConfig,
    ComposerParameters,
    compose_backward,
    compose_with_cache,
    init_parameters,
    project_image_backward,
    project_image_with_cache,
)

LN2 = float(np.log(2.0))


# ---------------------------------------------------------------------------
# Loss
# ---------------------------------------------------------------------------

def _row_distances(a: np.ndarray, b: np.ndarray):
    delta = a - b
    dist = np.linalg.norm(delta, axis=-1)
    safe = np.where(dist < 1e-12, 1.0, dist)
    unit = delta / safe[..., None]
    unit = np.where(dist[..., None] < 1e-12, 0.0, unit)
    return dist, unit


def soft_triplet_loss(anchor: np.ndarray, positive: np.ndarray,
                      negative: np.ndarray):
    """Per-triplet losses and gradients w.r.t. all three inputs.

    Accepts single vectors or (batch, dim) matrices; returns the loss array
    plus (d_anchor, d_positive, d_negative) of matching shapes.
    """
    anchor = np.atleast_2d(np.asarray(anchor, dtype=np.float64))
    positive = np.atleast_2d(np.asarray(positive, dtype=np.float64))
    negative = np.atleast_2d(np.asarray(negative, dtype=np.float64))
    if anchor.shape != positive.shape or anchor.shape != negative.shape:
        raise DataError(
            f"triplet shape mismatch: {anchor.shape}, {positive.shape}, {negative.shape}"
        )
    d_pos, unit_pos = _row_distances(anchor, positive)
    d_neg, unit_neg = _row_distances(anchor, negative)
    margin = d_pos - d_neg
    loss = np.maximum(margin, 0.0) + np.log1p(np.exp(-np.abs(margin)))
    sig = 1.0 / (1.0 + np.exp(-margin))
    d_anchor = sig[:, None] * (unit_pos - unit_neg)
    d_positive = -sig[:, None] * unit_pos
    d_negative = sig[:, None] * unit_neg
    return loss, d_anchor, d_positive, d_negative


def soft_triplet_loss_value(d_pos: float, d_neg: float) -> float:
    """Scalar loss from the two distances (stable softplus of the margin)."""
    margin = d_pos - d_neg
    return float(np.maximum(margin, 0.0) + np.log1p(np.exp(-abs(margin))))


# ---------------------------------------------------------------------------
# Negative sampling
# ---------------------------------------------------------------------------

def sample_negatives(records: list[PairRecord], corpus_ids: list[str],
                     rng: np.random.Generator) -> list[str]:
    """One uniform negative id per record, never the record's own reference
    or target.  Deterministic for a seeded generator."""
    if len(corpus_ids) < 3:
        raise DataError(f"corpus of {len(corpus_ids)} images is too small to sample from")
    negatives = []
    for record in records:
        banned = {record.reference, record.target_hard}
        eligible = [image_id for image_id in corpus_ids if image_id not in banned]
        if not eligible:
            raise DataError(f"pair {record.pair_id}: no eligible negatives")
        negatives.append(eligible[int(rng.integers(0, len(eligible)))])
    return negatives


# ---------------------------------------------------------------------------
# Optimizers
# ---------------------------------------------------------------------------

class Sgd:
    """Plain stochastic gradient descent."""

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float) -> None:
        flat -= lr * grad


class AdamW:
    """Adaptive moments with decoupled weight decay."""

    def __init__(self, size: int, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8, weight_decay: float = 0.01):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.m = np.zeros(size, dtype=np.float64)
        self.v = np.zeros(size, dtype=np.float64)
        self.t = 0

    def step(self, flat: np.ndarray, grad: np.ndarray, lr: float) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1 ** self.t)
        v_hat = self.v / (1.0 - self.beta2 ** self.t)
        flat -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * flat)


OPTIMIZERS = {"adamw": AdamW, "sgd": Sgd}


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adamw"
    weight_decay: float = 0.01
    negatives: str = "corpus"
    num_negatives: int = 1
    rng_seed: int = 0

    def __post_init__(self):
        if self.batch_size < 2:
            raise DataError("batch size must be at least 2")
        if self.learning_rate < 0:
            raise DataError("learning rate must be non-negative")
        if self.optimizer not in OPTIMIZERS:
            raise DataError(f"unknown optimizer {self.optimizer!r}")
        if self.negatives not in ("corpus", "in_batch"):
            raise DataError(f"negatives must be corpus or in_batch: {self.negatives!r}")
        if self.num_negatives < 1:
            raise DataError("num_negatives must be at least 1")


PAPER_PRESET = {"learning_rate": 1e-5, "epochs": 300, "optimizer": "adamw"}


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TraceRow:
    epoch: int
    step: int
    loss: float
    lr: float


@dataclass
class TrainResult:
    params: ComposerParameters
    vocab: Vocabulary
    trace: list[TraceRow] = field(default_factory=list)

    def epoch_losses(self) -> list[float]:
        by_epoch: dict[int, list[float]] = {}
        for row in self.trace:
            by_epoch.setdefault(row.epoch, []).append(row.loss)
        return [float(np.mean(by_epoch[epoch])) for epoch in sorted(by_epoch)]


def _batch_loss_and_grads(params, refs, tokens, pos_feats, neg_feats_draws,
                          grads) -> float:
    """Mean triplet loss over one batch, averaged over every sampled negative
    draw; accumulates exact parameter gradients."""
    if isinstance(neg_feats_draws, np.ndarray):
        neg_feats_draws = [neg_feats_draws]
    composed, compose_cache = compose_with_cache(params, refs, tokens)
    pos_phi, pos_cache = project_image_with_cache(params, pos_feats)
    scale = 1.0 / (composed.shape[0] * len(neg_feats_draws))
    total = 0.0
    d_anchor_sum = np.zeros_like(composed)
    d_pos_sum = np.zeros_like(pos_phi)
    for neg_feats in neg_feats_draws:
        neg_phi, neg_cache = project_image_with_cache(params, neg_feats)
        losses, d_anchor, d_pos, d_neg = soft_triplet_loss(composed, pos_phi, neg_phi)
        total += float(losses.sum())
        d_anchor_sum += d_anchor
        d_pos_sum += d_pos
        project_image_backward(params, neg_cache, d_neg * scale, grads)
    compose_backward(params, compose_cache, d_anchor_sum * scale, grads)
    project_image_backward(params, pos_cache, d_pos_sum * scale, grads)
    return total * scale


def train(records: list[PairRecord], store: FeatureStore,
          composer_config: ComposerConfig | None = None, *,
          kind: str = "transformer", train_config: TrainConfig | None = None,
          vocab: Vocabulary | None = None) -> TrainResult:
    """Train a composer on labeled pairs with the soft triplet loss.

    Runs shuffled minibatches for the configured number of epochs; the
    learning rate decays linearly per step from its initial value toward
    zero with no warm-up.  Everything is seeded, so a fixed (seed, config,
    data) triple reproduces bit-identical parameters.
    """
    cfg = train_config or TrainConfig()
    labeled = [record for record in records if record.has_gold]
    if not labeled:
        raise DataError("no labeled records to train on")
    if vocab is None:
        vocab = Vocabulary.from_captions([record.caption for record in labeled])
    if composer_config is None:
        composer_config = ComposerConfig(
            kind=kind, feature_dim=store.dimension, vocab_size=len(vocab))
    elif composer_config.vocab_size < len(vocab):
        raise DataError("composer vocab_size smaller than the caption vocabulary")

    seeds = np.random.SeedSequence(cfg.rng_seed).spawn(3)
    params = init_parameters(composer_config,
                             rng_seed=np.random.default_rng(seeds[0]).integers(2**32))
    shuffle_rng = np.random.default_rng(seeds[1])
    negative_rng = np.random.default_rng(seeds[2])
    substitute_rng = np.random.default_rng(cfg.rng_seed + 1)

    corpus_ids = store.ids
    tokens_by_pair = {record.pair_id: vocab.encode(record.caption) for record in labeled}
    if cfg.optimizer == "sgd":
        optimizer = Sgd()
    else:
        optimizer = AdamW(params.flat.size, weight_decay=cfg.weight_decay)

    steps_per_epoch = (len(labeled) + cfg.batch_size - 1) // cfg.batch_size
    total_steps = max(1, cfg.epochs * steps_per_epoch)
    trace: list[TraceRow] = []
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(len(labeled))
        for start in range(0, len(labeled), cfg.batch_size):
            batch = [labeled[int(i)] for i in order[start:start + cfg.batch_size]]
            refs = store.rows64([record.reference for record in batch])
            if composer_config.kind == "random_image_text":
                rows = substitute_rng.integers(0, len(store), size=len(batch))
                refs = store.matrix[rows].astype(np.float64)
            tokens = [tokens_by_pair[record.pair_id] for record in batch]
            pos_feats = store.rows64([record.target_hard for record in batch])
            if cfg.negatives == "in_batch":
                pool = sorted({record.target_hard for record in batch}
                              | {record.reference for record in batch})
            else:
                pool = corpus_ids
            neg_draws = [
                store.rows64(sample_negatives(batch, pool, negative_rng))
                for _ in range(cfg.num_negatives)
            ]

            grads = params.block.zeros_like()
            loss = _batch_loss_and_grads(params, refs, tokens, pos_feats,
                                         neg_draws, grads)
            lr = cfg.learning_rate * (1.0 - step / total_steps)
            if not np.isfinite(loss) or not np.isfinite(grads.flat).all():
                worst = max(params.block.group_names(),
                            key=lambda name: float(np.abs(params[name]).max()),
                            default="")
                raise NumericalError(
                    f"non-finite loss at step {step} (lr {lr:.3e}, "
                    f"largest parameter group {worst!r})"
                )
            optimizer.step(params.flat, grads.flat, lr)
            trace.append(TraceRow(epoch=epoch, step=step, loss=loss, lr=lr))
            step += 1
    return TrainResult(params=params, vocab=vocab, trace=trace)


def write_trace_csv(trace: list[TraceRow], path: str | Path) -> None:
    lines = ["epoch,step,loss,lr"]
    lines += [f"{row.epoch},{row.step},{row.loss:.10g},{row.lr:.10g}" for row in trace]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class GradCheckReport:
    max_relative_error: dict[str, float]
    tolerance: float

    @property
    def worst(self) -> float:
        return max(self.max_relative_error.values(), default=0.0)

    def passed(self) -> bool:
        return all(err < self.tolerance for err in self.max_relative_error.values())

    def to_table(self) -> str:
        width = max((len(name) for name in self.max_relative_error), default=4)
        lines = [
            f"{name.ljust(width)}  {err:.3e}  "
            f"{'ok' if err < self.tolerance else 'FAIL'}"
            for name, err in self.max_relative_error.items()
        ]
        verdict = "pass" if self.passed() else "FAIL"
        lines.append(f"{'overall'.ljust(width)}  {self.worst:.3e}  {verdict}")
        return "\n".join(lines)


def grad_check(config: ComposerConfig, *, tolerance: float = 1e-4,
               step_size: float = 1e-4, batch_size: int = 4,
               num_tokens: int = 5, rng_seed: int = 7) -> GradCheckReport:
    """Compare analytic gradients of the mean triplet loss against central
    finite differences, coordinate by coordinate.

    The relative error |analytic - numeric| / max(|analytic|, |numeric|,
    1e-8) is reduced to a maximum per parameter group.  Failures are
    reported in the result, not raised.
    """
    rng = np.random.default_rng(rng_seed)
    params = init_parameters(config, rng_seed=rng_seed + 1)
    refs = rng.normal(size=(batch_size, config.feature_dim))
    pos = rng.normal(size=(batch_size, config.feature_dim))
    neg = rng.normal(size=(batch_size, config.feature_dim))
    tokens = [
        list(rng.integers(0, config.vocab_size, size=num_tokens))
        for _ in range(batch_size)
    ]

    def loss_value() -> float:
        composed = composers.compose(params, refs, tokens)
        pos_phi = composers.project_image(params, pos)
        neg_phi = composers.project_image(params, neg)
        losses, *_ = soft_triplet_loss(composed, pos_phi, neg_phi)
        return float(losses.mean())

    grads = params.block.zeros_like()
    _batch_loss_and_grads(params, refs, tokens, pos, neg, grads)

    flat = params.flat
    errors: dict[str, float] = {}
    offset = 0
    for name, shape in params.block.layout:
        size = int(np.prod(shape))
        worst = 0.0
        for i in range(offset, offset + size):
            original = flat[i]
            flat[i] = original + step_size
            up = loss_value()
            flat[i] = original - step_size
            down = loss_value()
            flat[i] = original
            numeric = (up - down) / (2.0 * step_size)
            analytic = grads.flat[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, abs(analytic - numeric) / denom)
        errors[name] = worst
        offset += size
    return GradCheckReport(max_relative_error=errors, tolerance=tolerance)
