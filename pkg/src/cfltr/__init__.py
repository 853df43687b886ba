"""Counterfactual learning to rank: unbiased IPS estimators, SVM PropDCG trained
with the convex-concave procedure, Deep PropDCG and a click-simulation harness."""

__version__ = "0.1.0"

from .ltr_core import DataError, Dataset, LinearModel, QueryInstance, Ranking, load_svmlight
from .metrics import AVG_RANK, DCG, DCG_LN, ClickLog, ClickRecord, RankWeighting, ips_risk, snips_risk

__all__ = [
    "AVG_RANK", "DCG", "DCG_LN", "ClickLog", "ClickRecord", "DataError", "Dataset",
    "LinearModel", "QueryInstance", "Ranking", "RankWeighting", "ips_risk", "load_svmlight",
    "snips_risk", "__version__",
]
