"""Ontology-guided multilabel annotation over feature vectors."""

__version__ = "0.1.0"

from ontolabel.dataset import Corruption, Dataset, Sample, generate_synthetic
from ontolabel.losses import LossConfig
from ontolabel.model import ModelParams
from ontolabel.ontology import LabelOntology, LabelSet, OntologyError, load_ontology
from ontolabel.trainer import TrainConfig, train

__all__ = [
    "Corruption",
    "Dataset",
    "LabelOntology",
    "LabelSet",
    "LossConfig",
    "ModelParams",
    "OntologyError",
    "Sample",
    "TrainConfig",
    "generate_synthetic",
    "load_ontology",
    "train",
]
