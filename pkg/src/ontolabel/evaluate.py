"""Per-label metrics, threshold calibration, and embedding retrieval.

All averages are per-class: every evaluated label counts once, so frequent
labels cannot drown out rare ones.  Labels without positives in the scored
split are excluded from the averages and listed in the report; labels
without negatives keep their precision/recall/F1 but have no defined AUC.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ontolabel import model
from ontolabel.dataset import Dataset, Sample
from ontolabel.model import ModelParams
from ontolabel.ontology import LabelSet

log = logging.getLogger(__name__)


def _average_ranks(x: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank."""
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    boundary = np.empty(len(sx), dtype=bool)
    if len(sx):
        boundary[0] = True
        boundary[1:] = sx[1:] != sx[:-1]
    group = np.cumsum(boundary) - 1
    counts = np.bincount(group)
    ends = np.cumsum(counts)
    starts = ends - counts
    avg = (starts + 1 + ends) / 2.0
    ranks = np.empty(len(sx))
    ranks[order] = avg[group]
    return ranks


def auc(scores, labels) -> float:
    """Rank-statistic ROC AUC: concordant pairs plus half the ties, over P*N.

    Raises ValueError on single-class input, where the value is undefined.
    """
    scores = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels).astype(bool)
    pos = int(y.sum())
    neg = len(y) - pos
    if pos == 0 or neg == 0:
        raise ValueError("AUC undefined: needs at least one positive and one negative")
    ranks = _average_ranks(scores)
    return float((ranks[y].sum() - pos * (pos + 1) / 2.0) / (pos * neg))


def calibrate_thresholds(scores, labels) -> tuple[np.ndarray, list[int]]:
    """Per-label thresholds maximizing F1 on the given (validation) scores.

    Candidates are the midpoints between adjacent distinct scores plus two
    boundary sentinels (below every score: decide everything positive; above
    every score: decide nothing); ties break toward the lowest candidate.
    All results stay inside (0, 1].  A label without positives gets the
    sentinel 1.0 (confidences never reach it, so the label never fires) and
    is returned in the flagged list.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError("scores and labels must be matching (samples, labels) matrices")
    n, width = scores.shape
    if n == 0:
        raise ValueError("cannot calibrate on an empty split")
    thresholds = np.ones(width)
    flagged = []
    for c in range(width):
        col = scores[:, c]
        y = labels[:, c] > 0.5
        n_pos = int(y.sum())
        if n_pos == 0:
            flagged.append(c)
            continue
        order = np.argsort(col, kind="mergesort")
        sorted_scores = col[order]
        uniq = np.unique(sorted_scores)
        cands = np.concatenate(
            ([uniq[0] / 2.0], (uniq[:-1] + uniq[1:]) / 2.0, [(uniq[-1] + 1.0) / 2.0])
        )
        cands = np.maximum(cands, np.nextafter(0.0, 1.0))  # keep inside (0, 1]
        suffix_pos = np.concatenate((np.cumsum(y[order][::-1])[::-1], [0]))
        idx = np.searchsorted(sorted_scores, cands, side="left")
        predicted = n - idx
        tp = suffix_pos[idx]
        f1 = 2.0 * tp / (predicted + n_pos)
        thresholds[c] = cands[int(np.argmax(f1))]
    if flagged:
        log.warning("no validation positives for %d label(s); thresholds set to 1.0", len(flagged))
    return thresholds, flagged


def prf1(decided, truth, n_labels: int):
    """Per-label precision, recall, F1 from decided and true label sets.

    Zero denominators follow the usual conventions: precision and recall are
    0 when undefined, and F1 is 0 when precision + recall is 0.
    """
    d = np.zeros((len(decided), n_labels), dtype=bool)
    t = np.zeros((len(truth), n_labels), dtype=bool)
    for row, labels in enumerate(decided):
        for i in labels:
            d[row, i] = True
    for row, labels in enumerate(truth):
        for i in labels:
            t[row, i] = True
    tp = (d & t).sum(axis=0).astype(np.float64)
    fp = (d & ~t).sum(axis=0).astype(np.float64)
    fn = (~d & t).sum(axis=0).astype(np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
        recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
        f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
    return precision, recall, f1


# ----------------------------------------------------------------------
# report


@dataclass
class LabelEval:
    label_id: int
    name: str
    category: str
    positives: int
    auc: float | None
    precision: float
    recall: float
    f1: float
    threshold: float


@dataclass
class EvalReport:
    split: str
    rows: list[LabelEval]
    macro_auc: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    category_auc: dict[str, float | None]
    excluded: list[tuple[str, str]] = field(default_factory=list)
    acg: float | None = None
    acg_k: int | None = None


def _truth_sets(rows: list[Sample], truth: str):
    if truth not in ("auto", "clean", "expanded"):
        raise ValueError(f"unknown truth source {truth!r}")
    if truth == "clean" or (truth == "auto" and all(s.clean_labels is not None for s in rows)):
        missing = [s.lesion_id for s in rows if s.clean_labels is None]
        if missing:
            raise ValueError(f"clean labels requested but missing for {missing[0]} and others")
        return [s.clean_labels for s in rows]
    return [s.expanded_labels for s in rows]


def evaluate_split(
    ds: Dataset,
    split: str,
    params: ModelParams,
    thresholds: np.ndarray,
    *,
    use_refined: bool = True,
    expand_decisions: bool = True,
    truth: str = "auto",
) -> EvalReport:
    """Score one split and aggregate per-label and macro metrics.

    Confidences come from the refined scores unless ``use_refined`` is off
    (the refinement ablation reads the raw ones).  Decisions and truth sets
    are both upward-closed label sets; thresholded decisions are expanded
    before counting unless ``expand_decisions`` is off.
    """
    rows = ds.split(split)
    if not rows:
        raise ValueError(f"split {split!r} is empty")
    ontology = ds.ontology
    width = ontology.n_labels
    truth_sets = _truth_sets(rows, truth)

    cache = model.forward(params, np.stack([s.features for s in rows]))
    scores = cache.sigma_refined if use_refined else cache.sigma_scores

    decided = []
    for row in scores >= np.asarray(thresholds):
        labels = LabelSet.from_array(row)
        decided.append(ontology.expand(labels) if expand_decisions else labels)

    t = np.zeros((len(rows), width), dtype=bool)
    for r, labels in enumerate(truth_sets):
        for i in labels:
            t[r, i] = True
    precision, recall, f1 = prf1(decided, truth_sets, width)

    report_rows: list[LabelEval] = []
    excluded: list[tuple[str, str]] = []
    aucs: dict[int, float] = {}
    for c in range(width):
        n_pos = int(t[:, c].sum())
        name = ontology.name_of(c)
        if n_pos == 0:
            excluded.append((name, "no positives in split"))
            continue
        label_auc = None
        if n_pos < len(rows):
            label_auc = auc(scores[:, c], t[:, c])
            aucs[c] = label_auc
        else:
            excluded.append((name, "no negatives in split; AUC undefined"))
        report_rows.append(
            LabelEval(
                label_id=c,
                name=name,
                category=ontology.labels[c].category,
                positives=n_pos,
                auc=label_auc,
                precision=float(precision[c]),
                recall=float(recall[c]),
                f1=float(f1[c]),
                threshold=float(thresholds[c]),
            )
        )

    evaluated = [r.label_id for r in report_rows]
    macro_auc = float(np.mean([aucs[c] for c in aucs])) if aucs else float("nan")
    macro_p = float(np.mean([precision[c] for c in evaluated])) if evaluated else float("nan")
    macro_r = float(np.mean([recall[c] for c in evaluated])) if evaluated else float("nan")
    macro_f = float(np.mean([f1[c] for c in evaluated])) if evaluated else float("nan")

    category_auc: dict[str, float | None] = {}
    for category in sorted({lab.category for lab in ontology.labels}):
        values = [
            aucs[c] for c in aucs if ontology.labels[c].category == category
        ]
        category_auc[category] = float(np.mean(values)) if values else None

    return EvalReport(
        split=split,
        rows=report_rows,
        macro_auc=macro_auc,
        macro_precision=macro_p,
        macro_recall=macro_r,
        macro_f1=macro_f,
        category_auc=category_auc,
        excluded=excluded,
    )


def _fmt(value) -> str:
    return "nan" if value is None else f"{value:.6f}"


def render_text(report: EvalReport) -> str:
    lines = [f"evaluation on split '{report.split}'", ""]
    lines.append(f"{'label':<28} {'cat':<10} {'pos':>5} {'auc':>9} {'prec':>9} {'rec':>9} {'f1':>9} {'thr':>9}")
    for r in report.rows:
        lines.append(
            f"{r.name:<28} {r.category:<10} {r.positives:>5} {_fmt(r.auc):>9} "
            f"{_fmt(r.precision):>9} {_fmt(r.recall):>9} {_fmt(r.f1):>9} {_fmt(r.threshold):>9}"
        )
    lines.append("")
    lines.append(f"macro_auc       {_fmt(report.macro_auc)}")
    lines.append(f"macro_precision {_fmt(report.macro_precision)}")
    lines.append(f"macro_recall    {_fmt(report.macro_recall)}")
    lines.append(f"macro_f1        {_fmt(report.macro_f1)}")
    for category, value in report.category_auc.items():
        lines.append(f"auc[{category}] {_fmt(value)}")
    if report.acg is not None:
        lines.append(f"acg@{report.acg_k} {_fmt(report.acg)}")
    if report.excluded:
        lines.append("")
        lines.append("excluded from macro averages:")
        for name, reason in report.excluded:
            lines.append(f"  {name}: {reason}")
    return "\n".join(lines) + "\n"


def render_kv(report: EvalReport) -> str:
    """Machine-readable key/value lines for regression checks."""
    def key(name):
        return name.replace(" ", "_")

    lines = [
        f"split {report.split}",
        f"macro_auc {_fmt(report.macro_auc)}",
        f"macro_precision {_fmt(report.macro_precision)}",
        f"macro_recall {_fmt(report.macro_recall)}",
        f"macro_f1 {_fmt(report.macro_f1)}",
    ]
    for category, value in report.category_auc.items():
        lines.append(f"category_auc.{key(category)} {_fmt(value)}")
    if report.acg is not None:
        lines.append(f"acg.k{report.acg_k} {_fmt(report.acg)}")
    for r in report.rows:
        base = f"label.{key(r.name)}"
        lines.append(f"{base}.positives {r.positives}")
        lines.append(f"{base}.auc {_fmt(r.auc)}")
        lines.append(f"{base}.precision {_fmt(r.precision)}")
        lines.append(f"{base}.recall {_fmt(r.recall)}")
        lines.append(f"{base}.f1 {_fmt(r.f1)}")
        lines.append(f"{base}.threshold {_fmt(r.threshold)}")
    for name, reason in report.excluded:
        lines.append(f"excluded.{key(name)} {reason}")
    return "\n".join(lines) + "\n"


# ----------------------------------------------------------------------
# retrieval


def embeddings_of(params: ModelParams, samples: list[Sample]) -> np.ndarray:
    return model.forward(params, np.stack([s.features for s in samples])).embedding


def retrieve(query: Sample, gallery: list[Sample], params: ModelParams, k: int) -> list[str]:
    """Lesion ids of the k nearest gallery embeddings, never from the query's
    patient.  Returns fewer than k (with a warning) when the gallery runs out."""
    if k < 1:
        raise ValueError("k must be positive")
    keep = [s for s in gallery if s.patient_id != query.patient_id]
    if not keep:
        log.warning("retrieval gallery empty after patient exclusion for %s", query.lesion_id)
        return []
    emb = embeddings_of(params, keep)
    q = embeddings_of(params, [query])[0]
    dist = np.linalg.norm(emb - q, axis=1)
    order = np.lexsort((np.arange(len(keep)), dist))
    if len(keep) < k:
        log.warning(
            "retrieval gallery for %s has only %d candidates (requested %d)",
            query.lesion_id, len(keep), k,
        )
    return [keep[i].lesion_id for i in order[:k]]


def acg(query_labels: LabelSet, retrieved_labelsets, k: int) -> float:
    """Average cumulative gain: mean count of shared labels over the top k."""
    take = list(retrieved_labelsets)[:k]
    if not take:
        return 0.0
    return float(np.mean([len(query_labels & labels) for labels in take]))


def retrieval_report(
    ds: Dataset,
    params: ModelParams,
    k: int,
    *,
    query_split: str = "test",
    gallery_split: str = "train",
    truth: str = "auto",
) -> tuple[float, list[tuple[str, float, list[str]]]]:
    """ACG@k over every query in a split against a gallery split.

    Same-patient gallery lesions are excluded per query.  Label sets for the
    gain follow ``truth`` (clean when available, else expanded).
    """
    queries = ds.split(query_split)
    gallery = ds.split(gallery_split)
    if not queries or not gallery:
        raise ValueError("query and gallery splits must both be non-empty")
    q_truth = _truth_sets(queries, truth)
    g_truth = _truth_sets(gallery, truth)
    labels_by_id = {s.lesion_id: t for s, t in zip(gallery, g_truth)}

    q_emb = embeddings_of(params, queries)
    g_emb = embeddings_of(params, gallery)
    g_patients = np.array([s.patient_id for s in gallery])

    rows = []
    gains = []
    for qi, query in enumerate(queries):
        dist = np.linalg.norm(g_emb - q_emb[qi], axis=1)
        dist = np.where(g_patients == query.patient_id, np.inf, dist)
        order = np.lexsort((np.arange(len(gallery)), dist))
        picked = [gallery[i].lesion_id for i in order if np.isfinite(dist[i])][:k]
        gain = acg(q_truth[qi], [labels_by_id[lid] for lid in picked], k)
        gains.append(gain)
        rows.append((query.lesion_id, gain, picked))
    return float(np.mean(gains)), rows
