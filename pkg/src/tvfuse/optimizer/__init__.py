"""Sequential coefficient search with Pareto-based model selection."""

from .pareto import pareto_frontier, select_knee, select_max_consistency
from .search import SearchResult, TrialRecord, load_trial_log, run_search
from .tpe import SearchSpace, TpeConfig, tpe_suggest

__all__ = [
    "SearchResult",
    "SearchSpace",
    "TpeConfig",
    "TrialRecord",
    "load_trial_log",
    "pareto_frontier",
    "run_search",
    "select_knee",
    "select_max_consistency",
    "tpe_suggest",
]
