"""Trojan injection and low-rank activation-filter removal for small decoder-only LMs."""
from .estimators import LowRankActivationFilter, TrojanLM
from .filters import CONTROLS, Control, FilterParams, FilterSpec, init_filter, train_filter
from .harness import (
    ExperimentCoordinate,
    FullCoordinate,
    SampleRow,
    Thresholds,
    run_full_coordinate,
    run_grid,
    summarize,
)
from .hooks import Action, HookPoint, Intervention, Location
from .metrics import ClipPolicy, edit_distance_similarity, exact_match, prefix_match_similarity, score_completion
from .model import GenerationConfig, ModelConfig, OptimizerConfig, TinyTransformer, generate, load_model, save_model
from .trojans import Trojan, build_poisoned_dataset, load_trojans, verify_injection
from .vocab import Vocabulary

__version__ = "0.1.0"

__all__ = [
    "Action",
    "build_poisoned_dataset",
    "ClipPolicy",
    "Control",
    "CONTROLS",
    "edit_distance_similarity",
    "exact_match",
    "ExperimentCoordinate",
    "FilterParams",
    "FilterSpec",
    "FullCoordinate",
    "generate",
    "GenerationConfig",
    "HookPoint",
    "init_filter",
    "Intervention",
    "load_model",
    "load_trojans",
    "Location",
    "LowRankActivationFilter",
    "ModelConfig",
    "OptimizerConfig",
    "prefix_match_similarity",
    "run_full_coordinate",
    "run_grid",
    "SampleRow",
    "save_model",
    "score_completion",
    "summarize",
    "Thresholds",
    "TinyTransformer",
    "train_filter",
    "Trojan",
    "TrojanLM",
    "verify_injection",
    "Vocabulary",
]
