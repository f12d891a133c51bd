"""Loss components and their combination.

Four terms are trained jointly:

* weighted cross-entropy on the raw confidences, with per-label positive and
  negative weights balancing the (sparse) positives against the negatives;
* a mined cross-entropy over lesion-label pairs drawn with probability
  proportional to a difficulty score, restricted to reliable pairs (expanded
  positives and exclusivity-derived negatives);
* the same weighted cross-entropy applied to the refined confidences;
* a multilabel triplet loss on the embedding, with similar/dissimilar picked
  by a label-set similarity criterion.

Every function that draws randomness takes an explicit generator and is
deterministic given it.  Losses return their gradient with respect to the
pre-squashing scores (or the embedding), leaving parameter gradients to the
model's backward pass.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ontolabel.ontology import LabelSet

log = logging.getLogger(__name__)

_EPS = 1e-12


@dataclass
class LossConfig:
    """Hyperparameters and switches for the combined loss.

    ``beta_clamp`` caps the class-balancing weights for stability.  ``gamma``
    is the focusing exponent of the difficulty score: higher values
    concentrate the mined pairs on harder examples.  ``hard_pair_draws`` and
    ``triplet_draws`` are the per-minibatch sample counts; ``sim_threshold``
    is the minimum label-set similarity for the "similar" member of a
    triplet, ``margin`` the hinge margin on embedding distances, and
    ``triplet_weight`` scales the triplet term, which is typically smaller
    than the others.
    """

    beta_clamp: float = 300.0
    gamma: float = 2.0
    hard_pair_draws: int = 10_000
    sim_threshold: float = 1.0
    margin: float = 0.1
    triplet_draws: int = 5000
    triplet_weight: float = 5.0
    triplet_retry: int = 10
    use_weighted_ce: bool = True
    use_hard_mining: bool = True
    use_refined_ce: bool = True
    use_triplet: bool = True
    # The mined CE normally reads the raw confidences; this flag moves it to
    # the refined ones instead.
    hard_mining_on_refined: bool = False
    # Mine over every non-positive pair instead of only reliable ones; hurts
    # recall when positives are missing, kept as an ablation switch.
    hard_mining_all_negatives: bool = False

    def __post_init__(self):
        if self.gamma <= 0:
            raise ValueError("gamma must be positive")
        for name in ("beta_clamp", "sim_threshold", "margin", "triplet_weight"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} must be finite")
        for name in ("hard_pair_draws", "triplet_draws", "triplet_retry"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


def beta_weights(pos: np.ndarray, neg: np.ndarray, clamp: float = 300.0):
    """Per-label class-balancing weights, clamped for stability.

    positive weight = (P + N) / (2 P), negative weight = (P + N) / (2 N); a
    label with P = N gets weight 1 on both sides.  Labels with no positives
    or no negatives have undefined weights: both fall back to 1 and the label
    is flagged in the returned mask so callers can report it.
    """
    pos = np.asarray(pos, dtype=np.float64)
    neg = np.asarray(neg, dtype=np.float64)
    degenerate = (pos <= 0) | (neg <= 0)
    total = pos + neg
    with np.errstate(divide="ignore", invalid="ignore"):
        beta_pos = np.where(degenerate, 1.0, total / (2.0 * pos))
        beta_neg = np.where(degenerate, 1.0, total / (2.0 * neg))
    return np.minimum(beta_pos, clamp), np.minimum(beta_neg, clamp), degenerate


def weighted_ce(sigma, targets, beta_pos, beta_neg):
    """Class-weighted binary cross-entropy, averaged over batch x labels.

    Returns the loss and its gradient with respect to the pre-squashing
    scores.  Confidences are clamped away from exactly 0 and 1.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    clamped = np.clip(sigma, _EPS, 1.0 - _EPS)
    scale = 1.0 / sigma.size
    loss = -scale * float(
        np.sum(beta_pos * targets * np.log(clamped))
        + np.sum(beta_neg * (1.0 - targets) * np.log1p(-clamped))
    )
    grad = scale * (beta_neg * (1.0 - targets) * clamped - beta_pos * targets * (1.0 - clamped))
    return loss, grad


def refined_ce(sigma_refined, targets, beta_pos, beta_neg):
    """Weighted cross-entropy on the refined confidences; same contract as
    ``weighted_ce``, gradient taken with respect to the refined scores."""
    return weighted_ce(sigma_refined, targets, beta_pos, beta_neg)


def mining_difficulty(sigma, targets, gamma: float) -> np.ndarray:
    """Per-pair difficulty: |confidence - target| ** gamma."""
    return np.abs(np.asarray(sigma) - np.asarray(targets)) ** gamma


def draw_hard_pairs(difficulty: np.ndarray, draws: int, rng) -> np.ndarray:
    """Sample pairs with replacement, probability proportional to difficulty.

    Returns an integer matrix of draw counts with the same shape; zero
    difficulty means zero draws, so the support is exactly the positive
    difficulties.
    """
    flat = np.asarray(difficulty, dtype=np.float64).ravel()
    counts = np.zeros(flat.size, dtype=np.int64)
    total = flat.sum()
    if total > 0.0 and draws > 0:
        picks = rng.choice(flat.size, size=draws, p=flat / total)
        counts = np.bincount(picks, minlength=flat.size)
    return counts.reshape(np.shape(difficulty))


def mined_pair_ce(sigma, targets, counts):
    """Unweighted mean cross-entropy over drawn pairs.

    A pair drawn k times contributes k terms.  Returns the loss and its
    gradient with respect to the pre-squashing scores; zero draws give a zero
    loss and gradient.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    total = int(counts.sum())
    if total == 0:
        return 0.0, np.zeros_like(sigma)
    clamped = np.clip(sigma, _EPS, 1.0 - _EPS)
    ce = -(targets * np.log(clamped) + (1.0 - targets) * np.log1p(-clamped))
    loss = float((counts * ce).sum() / total)
    grad = counts * (clamped - targets) / total
    return loss, grad


def hard_example_loss(sigma, targets, reliable, config: LossConfig, rng):
    """Difficulty-sampled cross-entropy restricted to reliable pairs.

    ``reliable`` marks the pairs whose target value can be trusted (expanded
    positives plus exclusivity-derived negatives); everything else is never
    sampled, so unknown labels are not pushed toward zero.  An empty reliable
    mask is flagged and contributes nothing.
    """
    reliable = np.asarray(reliable, dtype=bool)
    if not reliable.any():
        log.warning("hard example mining skipped: empty reliable mask")
        return 0.0, np.zeros_like(np.asarray(sigma, dtype=np.float64))
    difficulty = mining_difficulty(sigma, targets, config.gamma) * reliable
    counts = draw_hard_pairs(difficulty, config.hard_pair_draws, rng)
    return mined_pair_ce(sigma, targets, counts)


# ----------------------------------------------------------------------
# triplets


def similarity(a: LabelSet, b: LabelSet) -> float:
    """Label-set similarity: |intersection|^2 / |union|.

    Rewards shared positives while discounting disjoint ones; two empty sets
    are defined to have similarity 0.
    """
    inter = len(a & b)
    union = len(a | b)
    return 0.0 if union == 0 else inter * inter / union


def similarity_matrix(labelsets) -> np.ndarray:
    """Pairwise label-set similarity for a minibatch."""
    if not labelsets:
        return np.zeros((0, 0))
    width = labelsets[0].width
    members = np.zeros((len(labelsets), width))
    for i, ls in enumerate(labelsets):
        for j in ls:
            members[i, j] = 1.0
    inter = members @ members.T
    sizes = members.sum(axis=1)
    union = sizes[:, None] + sizes[None, :] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        sim = np.where(union > 0, inter * inter / union, 0.0)
    return sim


@dataclass
class TripletBatch:
    """Indices into the minibatch; every row satisfies
    sim(anchor, similar) >= threshold > nothing and
    sim(anchor, dissimilar) < sim(anchor, similar)."""

    anchor: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    similar: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    dissimilar: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    sim_ab: np.ndarray = field(default_factory=lambda: np.zeros(0))
    sim_ac: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self) -> int:
        return self.anchor.shape[0]


def sample_triplets(labelsets, config: LossConfig, rng) -> TripletBatch:
    """Draw up to ``triplet_draws`` (anchor, similar, dissimilar) triples.

    Per draw: a uniform anchor with a non-empty label set, a uniform similar
    member with similarity >= the threshold, then a uniform member strictly
    less similar than that.  A draw that finds no candidate retries a bounded
    number of times and is then skipped, so the batch may come back short or
    empty (e.g. when all label sets are identical there is never a valid
    dissimilar member).
    """
    n = len(labelsets)
    sim = similarity_matrix(labelsets)
    eligible = [i for i in range(n) if labelsets[i]]
    if not eligible:
        return TripletBatch()

    similar_cands = []
    orders = []
    n_smaller = np.zeros((n, n), dtype=np.int64)
    for a in range(n):
        row = sim[a]
        cands = np.flatnonzero(row >= config.sim_threshold)
        similar_cands.append(cands[cands != a])
        order = np.argsort(row, kind="mergesort")
        orders.append(order)
        sorted_row = row[order]
        n_smaller[a] = np.searchsorted(sorted_row, row, side="left")

    anchors, similars, dissimilars = [], [], []
    for _ in range(config.triplet_draws):
        for _ in range(max(config.triplet_retry, 1)):
            a = eligible[int(rng.integers(len(eligible)))]
            cands = similar_cands[a]
            if cands.size == 0:
                continue
            b = int(cands[int(rng.integers(cands.size))])
            smaller = int(n_smaller[a, b])
            if smaller == 0:
                continue
            c = int(orders[a][int(rng.integers(smaller))])
            anchors.append(a)
            similars.append(b)
            dissimilars.append(c)
            break
    anchors = np.asarray(anchors, dtype=np.int64)
    similars = np.asarray(similars, dtype=np.int64)
    dissimilars = np.asarray(dissimilars, dtype=np.int64)
    return TripletBatch(
        anchor=anchors,
        similar=similars,
        dissimilar=dissimilars,
        sim_ab=sim[anchors, similars] if len(anchors) else np.zeros(0),
        sim_ac=sim[anchors, dissimilars] if len(anchors) else np.zeros(0),
    )


def triplet_loss(embeddings: np.ndarray, triplets: TripletBatch, margin: float):
    """Mean hinge over triplets: max(0, d(A,B) - d(A,C) + margin).

    Distances are Euclidean on the (unit-norm) embeddings.  Returns the loss
    and its gradient with respect to the embeddings; clamped triplets
    contribute zero gradient, and an empty batch gives zero loss.
    """
    grad = np.zeros_like(embeddings)
    count = len(triplets)
    if count == 0:
        return 0.0, grad
    e_a = embeddings[triplets.anchor]
    e_b = embeddings[triplets.similar]
    e_c = embeddings[triplets.dissimilar]
    diff_ab = e_a - e_b
    diff_ac = e_a - e_c
    d_ab = np.linalg.norm(diff_ab, axis=1)
    d_ac = np.linalg.norm(diff_ac, axis=1)
    terms = d_ab - d_ac + margin
    active = terms > 0.0
    loss = float(terms[active].sum() / count)

    unit_ab = diff_ab[active] / np.maximum(d_ab[active], _EPS)[:, None]
    unit_ac = diff_ac[active] / np.maximum(d_ac[active], _EPS)[:, None]
    scale = 1.0 / count
    np.add.at(grad, triplets.anchor[active], scale * (unit_ab - unit_ac))
    np.add.at(grad, triplets.similar[active], -scale * unit_ab)
    np.add.at(grad, triplets.dissimilar[active], scale * unit_ac)
    return loss, grad


# ----------------------------------------------------------------------
# combination


@dataclass
class LossDraws:
    """Random draws of one loss evaluation, reusable to make the combined
    loss a deterministic function of the parameters (e.g. for gradient
    checks)."""

    hard_counts: np.ndarray | None = None
    triplets: TripletBatch | None = None


@dataclass
class LossBreakdown:
    total: float
    weighted: float
    mined: float
    refined: float
    triplet: float
    grad_scores: np.ndarray
    grad_refined: np.ndarray
    grad_embedding: np.ndarray
    draws: LossDraws


def combine_totals(weighted, mined, refined, triplet, triplet_weight) -> float:
    return float(weighted + mined + refined + triplet_weight * triplet)


def combined_loss(
    cache,
    labelsets,
    targets,
    reliable,
    beta_pos,
    beta_neg,
    config: LossConfig,
    rng=None,
    draws: LossDraws | None = None,
) -> LossBreakdown:
    """Evaluate every enabled component on one forward pass.

    ``cache`` is a model ForwardCache; ``labelsets`` the per-sample label
    sets used for triplet similarity; ``targets`` and ``reliable`` the dense
    target and reliable-pair matrices.  Fresh draws come from ``rng``;
    passing ``draws`` reuses previous ones instead.  Disabled components
    contribute zero loss and zero gradient.
    """
    grad_scores = np.zeros_like(cache.scores)
    grad_refined = np.zeros_like(cache.refined)
    grad_embedding = np.zeros_like(cache.embedding)
    weighted = mined = refined = triplet = 0.0
    out_draws = LossDraws()

    if config.use_weighted_ce:
        weighted, g = weighted_ce(cache.sigma_scores, targets, beta_pos, beta_neg)
        grad_scores += g

    if config.use_hard_mining:
        sigma = cache.sigma_refined if config.hard_mining_on_refined else cache.sigma_scores
        if draws is not None and draws.hard_counts is not None:
            counts = draws.hard_counts
        else:
            reliable_arr = np.asarray(reliable, dtype=bool)
            if not reliable_arr.any():
                log.warning("hard example mining skipped: empty reliable mask")
                counts = np.zeros_like(sigma, dtype=np.int64)
            else:
                difficulty = mining_difficulty(sigma, targets, config.gamma) * reliable_arr
                counts = draw_hard_pairs(difficulty, config.hard_pair_draws, rng)
        out_draws.hard_counts = counts
        mined, g = mined_pair_ce(sigma, targets, counts)
        if config.hard_mining_on_refined:
            grad_refined += g
        else:
            grad_scores += g

    if config.use_refined_ce:
        refined, g = refined_ce(cache.sigma_refined, targets, beta_pos, beta_neg)
        grad_refined += g

    if config.use_triplet:
        if draws is not None and draws.triplets is not None:
            batch = draws.triplets
        else:
            batch = sample_triplets(labelsets, config, rng)
        out_draws.triplets = batch
        triplet, g = triplet_loss(cache.embedding, batch, config.margin)
        grad_embedding += config.triplet_weight * g

    total = combine_totals(weighted, mined, refined, triplet, config.triplet_weight)
    return LossBreakdown(
        total=total,
        weighted=weighted,
        mined=mined,
        refined=refined,
        triplet=triplet,
        grad_scores=grad_scores,
        grad_refined=grad_refined,
        grad_embedding=grad_embedding,
        draws=out_draws,
    )
