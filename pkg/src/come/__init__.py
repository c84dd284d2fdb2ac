"""Collaborative multi-expert training for long-tailed graph classification."""

from .config import TrainConfig, load_config
from .expert import ExpertBank, load_checkpoint, save_checkpoint
from .graphs import Graph, build_splits, generate_motif_corpus, ingest_tu, load_jsonl, save_jsonl
from .train import Metrics, evaluate, load_dataset, run_ablation, train

__all__ = [
    "ExpertBank", "Graph", "Metrics", "TrainConfig", "build_splits", "evaluate",
    "generate_motif_corpus", "ingest_tu", "load_checkpoint", "load_config", "load_dataset",
    "load_jsonl", "run_ablation", "save_checkpoint", "save_jsonl", "train",
]
__version__ = "0.1.0"
