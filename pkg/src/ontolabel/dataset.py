"""Sample containers, synthetic benchmark generation, vocabulary filtering, file I/O.

A sample is one lesion record: a feature vector, a patient id, a split, the
labels mined for it, and their upward expansion.  Synthetic datasets carry an
extra clean label set, the uncorrupted ground truth that real corpora do not
have; evaluation against it stands in for a hand-labeled test set.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass

import numpy as np

from ontolabel.ontology import LabelOntology, LabelSet
from ontolabel.textmine import RELEVANCE_BY_NAME

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
DEFAULT_SPLIT_RATIOS = (0.8, 0.1, 0.1)


class DataFormatError(ValueError):
    """A dataset or label file could not be parsed; message carries the line."""


@dataclass(frozen=True)
class Sample:
    lesion_id: str
    patient_id: str
    split: str
    features: np.ndarray
    mined_labels: LabelSet
    expanded_labels: LabelSet
    clean_labels: LabelSet | None = None


def make_sample(ontology, lesion_id, patient_id, split, features, mined, clean=None) -> Sample:
    """Build a sample, deriving the expanded labels from the mined ones."""
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")
    features = np.asarray(features, dtype=np.float64)
    return Sample(lesion_id, patient_id, split, features, mined, ontology.expand(mined), clean)


@dataclass
class Dataset:
    ontology: LabelOntology
    samples: list[Sample]
    dim: int

    def __post_init__(self):
        width = self.ontology.n_labels
        patient_split: dict[str, str] = {}
        for s in self.samples:
            if s.mined_labels.width != width or s.expanded_labels.width != width:
                raise ValueError(f"sample {s.lesion_id}: label set width != ontology size")
            if s.clean_labels is not None and s.clean_labels.width != width:
                raise ValueError(f"sample {s.lesion_id}: clean label width != ontology size")
            if s.split not in SPLITS:
                raise ValueError(f"sample {s.lesion_id}: unknown split {s.split!r}")
            if s.features.shape != (self.dim,):
                raise ValueError(f"sample {s.lesion_id}: feature length != {self.dim}")
            if s.expanded_labels.bits != self.ontology.expand(s.mined_labels).bits:
                raise ValueError(f"sample {s.lesion_id}: expanded labels are not expand(mined)")
            prior = patient_split.setdefault(s.patient_id, s.split)
            if prior != s.split:
                raise ValueError(
                    f"patient {s.patient_id} appears in splits {prior!r} and {s.split!r}"
                )

    def split(self, name: str) -> list[Sample]:
        if name not in SPLITS:
            raise ValueError(f"unknown split {name!r}")
        return [s for s in self.samples if s.split == name]

    def __len__(self) -> int:
        return len(self.samples)


def assign_split(patient_id: str, ratios=DEFAULT_SPLIT_RATIOS) -> str:
    """Stable patient-level split: hashing the id decides, so the same patient
    lands in the same split in every run and can never straddle two splits."""
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios) or sum(ratios) <= 0:
        raise ValueError("ratios must be three non-negative numbers with a positive sum")
    digest = hashlib.sha256(patient_id.encode("utf-8")).digest()
    u = int.from_bytes(digest[:8], "big") / 2**64
    total = float(sum(ratios))
    edge = 0.0
    for name, r in zip(SPLITS, ratios):
        edge += r / total
        if u < edge:
            return name
    return SPLITS[-1]


# ----------------------------------------------------------------------
# synthetic generation


@dataclass(frozen=True)
class Corruption:
    """Report-style label noise applied when deriving mined labels from clean ones.

    Each non-leaf ancestor is dropped with ``p_drop_parent`` (reports often
    omit coarse labels that expansion can restore), each leaf with
    ``p_drop_leaf`` (a missing positive that nothing can restore), and with
    ``p_inject`` one extra label is added, drawn only from labels that do not
    conflict with the clean set so reliable negatives stay truthful.
    """

    p_drop_parent: float = 0.0
    p_drop_leaf: float = 0.0
    p_inject: float = 0.0

    def __post_init__(self):
        for name in ("p_drop_parent", "p_drop_leaf", "p_inject"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {value}")


def generate_synthetic(
    ontology: LabelOntology,
    n_patients: int,
    lesions_per_patient: int,
    dim: int,
    corruption: Corruption,
    seed: int,
    *,
    split_ratios=DEFAULT_SPLIT_RATIOS,
    feature_noise: float = 1.0,
    prototype_scale: float = 1.0,
    parent_prototype_scale: float = 1.0,
    mean_extra_leaves: float = 0.9,
    max_leaves: int = 4,
    tail_exponent: float = 1.1,
) -> Dataset:
    """Ontology-consistent synthetic benchmark, byte-deterministic under ``seed``.

    Clean label sets are built by picking leaf labels that do not conflict
    under the exclusivity closure and expanding them upward.  Features are
    the sum of one Gaussian prototype per clean label plus isotropic noise,
    which makes labels linearly separable in expectation: end-to-end runs are
    sensitive to the training machinery rather than to feature quality.  Leaf
    popularity follows a power law, so per-label positives are sparse and
    imbalanced like a mined corpus.  Mined labels are the clean ones after
    ``corruption``.

    ``parent_prototype_scale`` shrinks the prototypes of non-leaf labels:
    coarse labels then carry little direct feature signal and must be learned
    from supervision, the way a context label depends on its parts.
    """
    rng = np.random.default_rng(seed)
    n_labels = ontology.n_labels
    leaves = ontology.leaves()
    if not leaves:
        raise ValueError("ontology has no leaf labels to sample from")

    prototypes = rng.normal(scale=prototype_scale, size=(n_labels, dim))
    for i in range(n_labels):
        if ontology.children_of(i):
            prototypes[i] *= parent_prototype_scale
    perm = rng.permutation(len(leaves))
    weights = np.zeros(len(leaves))
    weights[perm] = (np.arange(len(leaves)) + 1.0) ** -tail_exponent
    weights /= weights.sum()

    anc_bits = [ontology.ancestors(i).bits | (1 << i) for i in range(n_labels)]
    leaf_mask = 0
    for i in leaves:
        leaf_mask |= 1 << i

    samples: list[Sample] = []
    lesion_counter = 0
    for p in range(n_patients):
        patient_id = f"P{p:05d}"
        split = assign_split(patient_id, split_ratios)
        for _ in range(lesions_per_patient):
            lesion_id = f"L{lesion_counter:06d}"
            lesion_counter += 1

            target = 1 + min(int(rng.poisson(mean_extra_leaves)), max_leaves - 1)
            clean_bits = 0
            picked = 0
            attempts = 0
            while picked < target and attempts < 8 * max_leaves:
                attempts += 1
                cand = int(rng.choice(leaves, p=weights))
                if (clean_bits >> cand) & 1:
                    continue
                trial = clean_bits | anc_bits[cand]
                if ontology.has_exclusive_conflict(LabelSet(n_labels, trial)):
                    continue
                clean_bits = trial
                picked += 1
            clean = LabelSet(n_labels, clean_bits)

            features = prototypes[clean.ids()].sum(axis=0)
            features = features + rng.normal(scale=feature_noise, size=dim)

            mined_bits = 0
            for i in clean:
                is_leaf = bool((leaf_mask >> i) & 1)
                p_drop = corruption.p_drop_leaf if is_leaf else corruption.p_drop_parent
                if rng.random() >= p_drop:
                    mined_bits |= 1 << i
            if rng.random() < corruption.p_inject:
                candidates = []
                for z in range(n_labels):
                    if (clean_bits >> z) & 1:
                        continue
                    trial = clean_bits | anc_bits[z]
                    if not ontology.has_exclusive_conflict(LabelSet(n_labels, trial)):
                        candidates.append(z)
                if candidates:
                    mined_bits |= 1 << int(rng.choice(candidates))

            samples.append(
                make_sample(
                    ontology,
                    lesion_id,
                    patient_id,
                    split,
                    features,
                    LabelSet(n_labels, mined_bits),
                    clean,
                )
            )
    return Dataset(ontology, samples, dim)


# ----------------------------------------------------------------------
# vocabulary filtering


def class_frequencies(ds: Dataset, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Per-label positive and negative counts over the expanded labels of a split."""
    rows = ds.split(split)
    pos = np.zeros(ds.ontology.n_labels, dtype=np.int64)
    for s in rows:
        for i in s.expanded_labels:
            pos[i] += 1
    return pos, len(rows) - pos


def restrict_ontology(ontology: LabelOntology, survivors: list[int]) -> LabelOntology:
    """Project the ontology onto a subset of labels, keeping dense new ids.

    Reachability is preserved by connecting every survivor to each of its
    surviving ancestors, and inherited exclusivity is preserved by projecting
    the full closure, so expansion and reliable negatives on the restricted
    ontology agree with the originals wherever both are defined.
    """
    remap = {old: new for new, old in enumerate(survivors)}
    labels = [
        type(ontology.labels[old])(new, ontology.labels[old].name, ontology.labels[old].category)
        for new, old in enumerate(survivors)
    ]
    edges = []
    for new, old in enumerate(survivors):
        for anc in ontology.ancestors(old):
            if anc in remap:
                edges.append((new, remap[anc]))
    exclusive = [
        (remap[a], remap[b])
        for a, b in ontology.exclusivity_closure()
        if a in remap and b in remap
    ]
    synonyms = [
        (phrase, remap[i]) for phrase, i in ontology.synonym_entries if i in remap
    ]
    return LabelOntology(labels, edges, exclusive, synonyms)


def _project(labels: LabelSet, remap: dict[int, int], width: int) -> LabelSet:
    return LabelSet.from_ids(width, (remap[i] for i in labels if i in remap))


def restrict_dataset(ds: Dataset, survivors: list[int]) -> tuple[Dataset, dict[int, int]]:
    """Drop all labels outside ``survivors`` and remap ids densely."""
    remap = {old: new for new, old in enumerate(survivors)}
    new_ont = restrict_ontology(ds.ontology, survivors)
    width = new_ont.n_labels
    new_samples = []
    for s in ds.samples:
        clean = None if s.clean_labels is None else _project(s.clean_labels, remap, width)
        new_samples.append(
            make_sample(
                new_ont,
                s.lesion_id,
                s.patient_id,
                s.split,
                s.features,
                _project(s.mined_labels, remap, width),
                clean,
            )
        )
    return Dataset(new_ont, new_samples, ds.dim), remap


def filter_vocabulary(
    ds: Dataset, min_train: int = 10, min_val: int = 2, min_test: int = 2
) -> tuple[Dataset, dict[int, int]]:
    """Drop labels too rare to learn or evaluate; remap the rest densely.

    Occurrences are counted on the expanded labels of each split, since those
    are the supervision the trainer sees (parent labels are mostly reached
    through expansion).  Mined labels are re-expanded under the restricted
    ontology.  Raises ValueError when nothing survives.
    """
    counts = {name: class_frequencies(ds, name)[0] for name in SPLITS}
    survivors = [
        c
        for c in range(ds.ontology.n_labels)
        if counts["train"][c] >= min_train
        and counts["val"][c] >= min_val
        and counts["test"][c] >= min_test
    ]
    if not survivors:
        raise ValueError("vocabulary filtering removed every label")
    dropped = ds.ontology.n_labels - len(survivors)
    if dropped:
        log.info("vocabulary filter dropped %d of %d labels", dropped, ds.ontology.n_labels)
    return restrict_dataset(ds, survivors)


# ----------------------------------------------------------------------
# file formats
#
# Dataset file: one record per line, tab-separated fields
#   lesion_id  patient_id  split  comma-separated-label-ids  comma-separated-features
# Label file: one (lesion, label, relevance) row per line, tab-separated
#   lesion_id  label_id  relevance
# Both UTF-8, '#' comments allowed.


def write_dataset(ds: Dataset, path) -> None:
    with open(path, "w", encoding="utf-8") as handle:
        for s in ds.samples:
            ids = ",".join(str(i) for i in s.mined_labels.ids())
            feats = ",".join(repr(float(v)) for v in s.features)
            handle.write(f"{s.lesion_id}\t{s.patient_id}\t{s.split}\t{ids}\t{feats}\n")


def write_labels(records, path) -> None:
    """Write (lesion_id, label_id, relevance) rows."""
    with open(path, "w", encoding="utf-8") as handle:
        for lesion_id, label_id, relevance in records:
            handle.write(f"{lesion_id}\t{label_id}\t{relevance}\n")


def load_labels(path) -> list[tuple[str, int, str]]:
    records = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise DataFormatError(f"{path}:{lineno}: expected 3 tab-separated fields")
            lesion_id, label_str, relevance = parts
            try:
                label_id = int(label_str)
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad label id {label_str!r}") from None
            if relevance not in RELEVANCE_BY_NAME:
                raise DataFormatError(f"{path}:{lineno}: unknown relevance {relevance!r}")
            records.append((lesion_id, label_id, relevance))
    return records


def _group_labels(records, *, include_uncertain=True, include_irrelevant=False):
    allowed = {"relevant"}
    if include_uncertain:
        allowed.add("uncertain")
    if include_irrelevant:
        allowed.add("uncertain")
        allowed.add("irrelevant")
    grouped: dict[str, set[int]] = {}
    for lesion_id, label_id, relevance in records:
        grouped.setdefault(lesion_id, set())
        if relevance in allowed:
            grouped[lesion_id].add(label_id)
    return grouped


def load_dataset(
    path,
    ontology: LabelOntology,
    *,
    label_file=None,
    clean_file=None,
    include_uncertain: bool = True,
    include_irrelevant: bool = False,
) -> Dataset:
    """Read a dataset file, optionally joining label files on lesion_id.

    When ``label_file`` is given its rows replace the inline label column,
    filtered by relevance (relevant labels always; uncertain by default;
    irrelevant only when asked, which disables the relevance filter).
    ``clean_file`` attaches ground-truth label sets the same way, ignoring
    relevance.
    """
    width = ontology.n_labels
    mined_by_lesion = None
    if label_file is not None:
        mined_by_lesion = _group_labels(
            load_labels(label_file),
            include_uncertain=include_uncertain,
            include_irrelevant=include_irrelevant,
        )
    clean_by_lesion = None
    if clean_file is not None:
        clean_by_lesion = _group_labels(
            load_labels(clean_file), include_uncertain=True, include_irrelevant=True
        )

    samples = []
    with open(path, "r", encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, 1):
            line = raw.rstrip("\n")
            if not line.strip() or line.lstrip().startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) != 5:
                raise DataFormatError(f"{path}:{lineno}: expected 5 tab-separated fields")
            lesion_id, patient_id, split, ids_str, feats_str = parts
            if split not in SPLITS:
                raise DataFormatError(f"{path}:{lineno}: unknown split {split!r}")
            try:
                inline_ids = [int(v) for v in ids_str.split(",") if v != ""]
                features = np.array(
                    [float(v) for v in feats_str.split(",")] if feats_str else [],
                    dtype=np.float64,
                )
            except ValueError:
                raise DataFormatError(f"{path}:{lineno}: bad numeric field") from None
            if mined_by_lesion is not None:
                mined_ids = sorted(mined_by_lesion.get(lesion_id, ()))
            else:
                mined_ids = inline_ids
            try:
                mined = LabelSet.from_ids(width, mined_ids)
                clean = None
                if clean_by_lesion is not None:
                    clean = LabelSet.from_ids(width, sorted(clean_by_lesion.get(lesion_id, ())))
            except ValueError as exc:
                raise DataFormatError(f"{path}:{lineno}: {exc}") from None
            samples.append(
                make_sample(ontology, lesion_id, patient_id, split, features, mined, clean)
            )
    if not samples:
        raise DataFormatError(f"{path}: no records")
    dim = samples[0].features.shape[0]
    return Dataset(ontology, samples, dim)
