"""Proxy metrics for cell-based architecture search, computed on tiny CNNs trained from scratch."""

__version__ = "0.1.0"

from .errors import STNASError  # noqa: E402
from .space import CellGenotype, MacroConfig, build_network, build_supernet, count_params  # noqa: E402
from .metrics import MetricVector, ScoreConfig, score_network  # noqa: E402
from .trainer import TrainConfig, short_train  # noqa: E402

__all__ = ["STNASError", "CellGenotype", "MacroConfig", "build_network", "build_supernet", "count_params",
           "MetricVector", "ScoreConfig", "score_network", "TrainConfig", "short_train", "__version__"]
