"""Minibatch SGD over the combined loss.

The loop follows a fixed recipe: keep only training samples with at least
one positive label, expand the labels upward, derive the reliable-pair mask
(positives plus exclusivity-derived negatives), and take plain SGD steps on
the combined loss under a staged learning-rate schedule.  Single-threaded
execution under a fixed seed is byte-deterministic.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from ontolabel import losses, model
from ontolabel.dataset import Dataset
from ontolabel.losses import LossConfig
from ontolabel.model import ModelParams
from ontolabel.ontology import LabelOntology

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 128
    # (epochs, learning rate) stages, run in order.
    lr_schedule: tuple[tuple[int, float], ...] = ((10, 0.01), (5, 0.001))
    seed: int = 0
    momentum: float = 0.0
    # Train on expanded labels (ancestors added); turning this off is the
    # label-expansion ablation.
    expand_labels: bool = True
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        for epochs, rate in self.lr_schedule:
            if epochs < 1 or rate <= 0:
                raise ValueError("schedule stages need epochs >= 1 and rate > 0")

    @property
    def total_epochs(self) -> int:
        return sum(epochs for epochs, _ in self.lr_schedule)


@dataclass
class EpochStats:
    epoch: int
    weighted: float
    mined: float
    refined: float
    triplet: float
    total: float
    seconds: float


def training_rows(ds: Dataset, expand_labels: bool = True):
    """Train-split samples with at least one positive label, in dataset order."""
    rows = []
    for s in ds.split("train"):
        labels = s.expanded_labels if expand_labels else s.mined_labels
        if labels:
            rows.append(s)
    return rows


def reliable_mask(
    ontology: LabelOntology, labelsets, *, all_negatives: bool = False
) -> np.ndarray:
    """Boolean (samples, labels) mask of pairs whose target can be trusted.

    Positives are always reliable; negatives are reliable only when excluded
    by a positive under the closure.  ``all_negatives`` marks every pair
    reliable instead (the unrestricted-mining ablation).
    """
    n = len(labelsets)
    width = ontology.n_labels
    mask = np.zeros((n, width), dtype=bool)
    if all_negatives:
        mask[:] = True
        return mask
    for row, labels in enumerate(labelsets):
        for i in labels:
            mask[row, i] = True
        for i in ontology.reliable_negatives(labels):
            mask[row, i] = True
    return mask


def _matrices(ontology, rows, expand_labels):
    width = ontology.n_labels
    x = np.stack([s.features for s in rows])
    labelsets = [s.expanded_labels if expand_labels else s.mined_labels for s in rows]
    y = np.zeros((len(rows), width))
    for r, labels in enumerate(labelsets):
        for i in labels:
            y[r, i] = 1.0
    return x, y, labelsets


def train(
    ds: Dataset, ontology: LabelOntology, params: ModelParams, config: TrainConfig
) -> tuple[ModelParams, list[EpochStats]]:
    """Run the schedule and return the trained parameters plus per-epoch means.

    ``params`` is updated in place.  A non-finite loss aborts with the
    offending epoch and batch rather than clipping, so desk-scale bugs
    surface instead of hiding.
    """
    rows = training_rows(ds, config.expand_labels)
    if not rows:
        raise TrainingError("no training samples with at least one positive label")
    x_all, y_all, labelsets_all = _matrices(ontology, rows, config.expand_labels)
    reliable_all = reliable_mask(
        ontology, labelsets_all, all_negatives=config.loss.hard_mining_all_negatives
    )

    pos = y_all.sum(axis=0)
    beta_pos, beta_neg, degenerate = losses.beta_weights(
        pos, len(rows) - pos, config.loss.beta_clamp
    )
    if degenerate.any():
        names = [ontology.name_of(i) for i in np.flatnonzero(degenerate)]
        log.warning(
            "class weights undefined for %d label(s) (no positives or no negatives "
            "in the training split): %s", len(names), ", ".join(names)
        )

    rng = np.random.default_rng(config.seed)
    velocity = {name: np.zeros_like(arr) for name, arr in params.arrays().items()}
    history: list[EpochStats] = []
    epoch = 0
    for stage_epochs, rate in config.lr_schedule:
        for _ in range(stage_epochs):
            epoch += 1
            started = time.perf_counter()
            order = rng.permutation(len(rows))
            sums = np.zeros(5)
            n_batches = 0
            for lo in range(0, len(rows), config.batch_size):
                batch_idx = order[lo : lo + config.batch_size]
                cache = model.forward(params, x_all[batch_idx])
                result = losses.combined_loss(
                    cache,
                    [labelsets_all[i] for i in batch_idx],
                    y_all[batch_idx],
                    reliable_all[batch_idx],
                    beta_pos,
                    beta_neg,
                    config.loss,
                    rng=rng,
                )
                if not np.isfinite(result.total):
                    raise TrainingError(
                        f"non-finite loss in epoch {epoch}, batch {n_batches}"
                    )
                grads = model.backward(
                    params,
                    cache,
                    grad_scores=result.grad_scores,
                    grad_refined=result.grad_refined,
                    grad_embedding=result.grad_embedding,
                )
                _sgd_step(params, grads, rate, config.momentum, velocity)
                sums += (
                    result.weighted,
                    result.mined,
                    result.refined,
                    result.triplet,
                    result.total,
                )
                n_batches += 1
            means = sums / max(n_batches, 1)
            history.append(
                EpochStats(
                    epoch=epoch,
                    weighted=means[0],
                    mined=means[1],
                    refined=means[2],
                    triplet=means[3],
                    total=means[4],
                    seconds=time.perf_counter() - started,
                )
            )
    return params, history


def _sgd_step(params, grads, rate, momentum, velocity):
    for name, arr in params.arrays().items():
        g = grads[name]
        if momentum:
            v = velocity[name]
            v *= momentum
            v += g
            g = v
        arr -= rate * g
