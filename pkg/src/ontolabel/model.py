"""Differentiable scorer over supplied feature vectors.

One rectified hidden layer feeds three heads: raw per-label scores, refined
scores obtained by multiplying the score vector with a learned square matrix
(identity at initialization, so refinement starts as a no-op), and a
unit-normalized embedding for metric learning.  Gradients are hand-derived
and exact; a finite-difference check in the test suite covers every
parameter.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from ontolabel.ontology import LabelOntology, LabelSet

ARRAY_ORDER = ("w_hidden", "b_hidden", "w_score", "b_score", "w_refine", "w_embed", "b_embed")

_NORM_EPS = 1e-12


@dataclass
class ModelParams:
    w_hidden: np.ndarray  # (dim, hidden)
    b_hidden: np.ndarray  # (hidden,)
    w_score: np.ndarray   # (hidden, n_labels)
    b_score: np.ndarray   # (n_labels,)
    w_refine: np.ndarray  # (n_labels, n_labels); row c weighs every raw score in refined score c
    w_embed: np.ndarray   # (hidden, embed_dim)
    b_embed: np.ndarray   # (embed_dim,)

    @classmethod
    def init(cls, dim: int, n_labels: int, hidden: int = 256, embed_dim: int = 256, seed: int = 0):
        """Small random weights, zero biases, identity refinement matrix."""
        rng = np.random.default_rng(seed)
        return cls(
            w_hidden=rng.normal(scale=np.sqrt(2.0 / dim), size=(dim, hidden)),
            b_hidden=np.zeros(hidden),
            w_score=rng.normal(scale=np.sqrt(1.0 / hidden), size=(hidden, n_labels)),
            b_score=np.zeros(n_labels),
            w_refine=np.eye(n_labels),
            w_embed=rng.normal(scale=np.sqrt(1.0 / hidden), size=(hidden, embed_dim)),
            b_embed=np.zeros(embed_dim),
        )

    @property
    def dims(self) -> tuple[int, int, int, int]:
        """(dim, hidden, n_labels, embed_dim)"""
        return (
            self.w_hidden.shape[0],
            self.w_hidden.shape[1],
            self.w_score.shape[1],
            self.w_embed.shape[1],
        )

    def arrays(self) -> dict[str, np.ndarray]:
        """Parameter arrays in fixed order; the arrays themselves, not copies."""
        return {name: getattr(self, name) for name in ARRAY_ORDER}

    def copy(self) -> "ModelParams":
        return ModelParams(**{name: arr.copy() for name, arr in self.arrays().items()})


def zero_grads(params: ModelParams) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in params.arrays().items()}


@dataclass
class ForwardCache:
    inputs: np.ndarray
    pre_hidden: np.ndarray
    hidden: np.ndarray
    scores: np.ndarray          # raw scores, before any squashing
    sigma_scores: np.ndarray
    refined: np.ndarray         # refinement matrix applied to the raw scores
    sigma_refined: np.ndarray
    embed_raw: np.ndarray
    embed_norms: np.ndarray     # (batch, 1)
    embedding: np.ndarray       # unit rows


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def forward(params: ModelParams, batch: np.ndarray) -> ForwardCache:
    """Run the network on a (batch, dim) matrix of feature vectors."""
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.w_hidden.shape[0]:
        raise ValueError(
            f"expected input of shape (batch, {params.w_hidden.shape[0]}), got {x.shape}"
        )
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite values in the input batch")
    pre_hidden = x @ params.w_hidden + params.b_hidden
    hidden = np.maximum(pre_hidden, 0.0)
    scores = hidden @ params.w_score + params.b_score
    refined = scores @ params.w_refine.T
    embed_raw = hidden @ params.w_embed + params.b_embed
    norms = np.linalg.norm(embed_raw, axis=1, keepdims=True)
    embedding = embed_raw / np.maximum(norms, _NORM_EPS)
    return ForwardCache(
        inputs=x,
        pre_hidden=pre_hidden,
        hidden=hidden,
        scores=scores,
        sigma_scores=sigmoid(scores),
        refined=refined,
        sigma_refined=sigmoid(refined),
        embed_raw=embed_raw,
        embed_norms=norms,
        embedding=embedding,
    )


def backward(
    params: ModelParams,
    cache: ForwardCache,
    grad_scores: np.ndarray | None = None,
    grad_refined: np.ndarray | None = None,
    grad_embedding: np.ndarray | None = None,
) -> dict[str, np.ndarray]:
    """Exact parameter gradients for upstream gradients on the three heads.

    The rectifier uses subgradient 0 at exactly zero.  The embedding gradient
    is taken through the unit normalization.
    """
    if grad_scores is None:
        grad_scores = np.zeros_like(cache.scores)
    if grad_refined is None:
        grad_refined = np.zeros_like(cache.refined)
    if grad_embedding is None:
        grad_embedding = np.zeros_like(cache.embedding)

    grads = zero_grads(params)

    # refinement head: refined = scores @ w_refine.T
    grads["w_refine"] = grad_refined.T @ cache.scores
    g_scores = grad_scores + grad_refined @ params.w_refine

    grads["w_score"] = cache.hidden.T @ g_scores
    grads["b_score"] = g_scores.sum(axis=0)
    g_hidden = g_scores @ params.w_score.T

    # embedding head: e = u / max(|u|, eps)
    norms = np.maximum(cache.embed_norms, _NORM_EPS)
    inner = (grad_embedding * cache.embedding).sum(axis=1, keepdims=True)
    g_embed_raw = (grad_embedding - cache.embedding * inner) / norms
    grads["w_embed"] = cache.hidden.T @ g_embed_raw
    grads["b_embed"] = g_embed_raw.sum(axis=0)
    g_hidden = g_hidden + g_embed_raw @ params.w_embed.T

    g_pre = g_hidden * (cache.pre_hidden > 0.0)
    grads["w_hidden"] = cache.inputs.T @ g_pre
    grads["b_hidden"] = g_pre.sum(axis=0)
    return grads


def predict(
    params: ModelParams,
    features: np.ndarray,
    thresholds: np.ndarray,
    ontology: LabelOntology,
    *,
    use_refined: bool = True,
    expand: bool = True,
) -> tuple[np.ndarray, list[LabelSet]]:
    """Confidences and thresholded label decisions for a feature matrix.

    A label is decided positive when its confidence is >= its threshold
    (boundary counts as positive); decisions are expanded upward afterwards
    so every decided label brings its ancestors along.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    if thresholds.shape != (ontology.n_labels,):
        raise ValueError(f"expected {ontology.n_labels} thresholds, got shape {thresholds.shape}")
    if np.any(thresholds <= 0.0) or np.any(thresholds > 1.0):
        raise ValueError("thresholds must lie in (0, 1]")
    cache = forward(params, np.atleast_2d(features))
    confidences = cache.sigma_refined if use_refined else cache.sigma_scores
    decisions = []
    for row in confidences >= thresholds:
        decided = LabelSet.from_array(row)
        decisions.append(ontology.expand(decided) if expand else decided)
    return confidences, decisions


# ----------------------------------------------------------------------
# checkpoints: a small deterministic container (text header + raw float64),
# so identical runs produce byte-identical files.

CHECKPOINT_MAGIC = "ontolabel-checkpoint"
CHECKPOINT_VERSION = 1


def save_checkpoint(path, params: ModelParams, label_names, thresholds=None) -> None:
    dim, hidden, n_labels, embed_dim = params.dims
    label_names = list(label_names)
    if len(label_names) != n_labels:
        raise ValueError("label name count does not match the score head width")
    header = {
        "dim": dim,
        "hidden": hidden,
        "n_labels": n_labels,
        "embed_dim": embed_dim,
        "labels": label_names,
        "thresholds": None if thresholds is None else [float(t) for t in thresholds],
    }
    with open(path, "wb") as handle:
        handle.write(f"{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\n".encode("ascii"))
        handle.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for name in ARRAY_ORDER:
            handle.write(np.ascontiguousarray(getattr(params, name), dtype="<f8").tobytes())


def load_checkpoint(path) -> tuple[ModelParams, list[str], np.ndarray | None]:
    with open(path, "rb") as handle:
        magic = handle.readline().decode("ascii").split()
        if len(magic) != 2 or magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {magic[1]}")
        header = json.loads(handle.readline().decode("utf-8"))
        dim, hidden = header["dim"], header["hidden"]
        n_labels, embed_dim = header["n_labels"], header["embed_dim"]
        shapes = {
            "w_hidden": (dim, hidden),
            "b_hidden": (hidden,),
            "w_score": (hidden, n_labels),
            "b_score": (n_labels,),
            "w_refine": (n_labels, n_labels),
            "w_embed": (hidden, embed_dim),
            "b_embed": (embed_dim,),
        }
        arrays = {}
        for name in ARRAY_ORDER:
            shape = shapes[name]
            count = int(np.prod(shape))
            buf = handle.read(count * 8)
            if len(buf) != count * 8:
                raise ValueError(f"{path}: truncated checkpoint while reading {name}")
            arrays[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
    params = ModelParams(**arrays)
    thresholds = header["thresholds"]
    return (
        params,
        list(header["labels"]),
        None if thresholds is None else np.asarray(thresholds, dtype=np.float64),
    )
