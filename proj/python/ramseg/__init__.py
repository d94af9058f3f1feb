"""Retrieval-augmented few-shot segmentation."""

import atexit

from ._core import (
    REFERENCE_DIM,
    Backbone,
    Engine,
    FlatIndex,
    Pipeline,
    RamsegError,
    cli_main,
    dice,
    embed_image,
    engine_available,
    make_backbone,
    normalize_embedding,
    preprocess_for_embedding,
    preprocess_for_segmentation,
    read_image,
    read_labels,
    register_backbone,
    register_engine,
    report_to_markdown,
    rle_decode,
    rle_encode,
    run_ablation,
    run_eval,
    unregister_backbone,
    unregister_engine,
    write_image,
    write_labels,
    write_synthetic_dataset,
)
from ._core import _clear_python_registrations
from . import pretrained

atexit.register(_clear_python_registrations)
pretrained.register_available()

__all__ = [
    "REFERENCE_DIM",
    "Backbone",
    "Engine",
    "FlatIndex",
    "Pipeline",
    "RamsegError",
    "cli_main",
    "dice",
    "embed_image",
    "engine_available",
    "make_backbone",
    "normalize_embedding",
    "preprocess_for_embedding",
    "preprocess_for_segmentation",
    "read_image",
    "read_labels",
    "register_backbone",
    "register_engine",
    "report_to_markdown",
    "rle_decode",
    "rle_encode",
    "run_ablation",
    "run_eval",
    "unregister_backbone",
    "unregister_engine",
    "write_image",
    "write_labels",
    "write_synthetic_dataset",
]
