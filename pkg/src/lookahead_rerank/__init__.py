"""Generative list reranking with a lookahead list-value model and dense distillation."""
from .config import ExperimentConfig, load_config
from .data import EnvSpec, ExposureRecord, RequestBatch, RerankConfig, RerankRequest
from .evaluator import LookaheadEvaluator
from .generator import OnlineGenerator
from .miner import LookaheadMiner, SupervisionRecord, build_supervision_dataset
from .pipeline import run_ablations, run_pipeline, run_sweep

__version__ = "0.1.0"

__all__ = [
    "EnvSpec",
    "ExperimentConfig",
    "ExposureRecord",
    "LookaheadEvaluator",
    "LookaheadMiner",
    "OnlineGenerator",
    "RequestBatch",
    "RerankConfig",
    "RerankRequest",
    "SupervisionRecord",
    "build_supervision_dataset",
    "load_config",
    "run_ablations",
    "run_pipeline",
    "run_sweep",
]
