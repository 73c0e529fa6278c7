"""Soft-prompt unlearning on a small numpy transformer.

A trainable block of prompt embeddings is prepended to every input of a
frozen language model and optimised so that examples from a forget set
lose their label association while everything else keeps its predictions.
"""
from .autodiff import Tensor, no_grad
from .baselines import BaselineConfig, run_ga, run_ga_gd, run_ga_kl, run_rl, search_lr
from .data import (
    Example,
    UnlearnSplit,
    generate_synthetic,
    kmeans_cosine,
    load_jsonl,
    make_corpus,
    partition_by_clusters,
    partition_by_entities,
    save_jsonl,
    subsample_forget,
)
from .evaluation import MetricsReport, accuracy, evaluate_matrix, export_embeddings, weighted_f1
from .lm import ModelConfig, TinyLM, Vocabulary, train_base
from .prompt_unlearn import (
    GenericAssignment,
    PromptBank,
    UnlearnConfig,
    assign_generic,
    count_trainable,
    init_prompt,
    prepend,
    total_loss,
    unlearn_train,
)

__all__ = [
    "BaselineConfig",
    "Example",
    "GenericAssignment",
    "MetricsReport",
    "ModelConfig",
    "PromptBank",
    "Tensor",
    "TinyLM",
    "UnlearnConfig",
    "UnlearnSplit",
    "Vocabulary",
    "accuracy",
    "assign_generic",
    "count_trainable",
    "evaluate_matrix",
    "export_embeddings",
    "generate_synthetic",
    "init_prompt",
    "kmeans_cosine",
    "load_jsonl",
    "make_corpus",
    "no_grad",
    "partition_by_clusters",
    "partition_by_entities",
    "prepend",
    "run_ga",
    "run_ga_gd",
    "run_ga_kl",
    "run_rl",
    "save_jsonl",
    "search_lr",
    "subsample_forget",
    "total_loss",
    "train_base",
    "unlearn_train",
    "weighted_f1",
]

__version__ = "0.1.0"
