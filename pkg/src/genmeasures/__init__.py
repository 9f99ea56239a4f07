from .common import GenMeasuresError
from .evaluation import ZooEntry, conditional_mi_score, rank_correlation
from .measures import MEASURES, MeasureContext, compute_measures
from .network import LabeledDataset, Network, forward, vjp

__all__ = (
    "MEASURES",
    "GenMeasuresError",
    "LabeledDataset",
    "MeasureContext",
    "Network",
    "ZooEntry",
    "compute_measures",
    "conditional_mi_score",
    "forward",
    "rank_correlation",
    "vjp",
)
