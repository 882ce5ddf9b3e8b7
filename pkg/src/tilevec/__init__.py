"""Tile-aligned vector memory engine with simulated heterogeneous backends."""

from .buffers import FP16, FP32, MatrixBuffer, TileMajor, TileSpec
from .config import EngineConfig, load_config
from .corpus import Corpus, SyntheticSpec, ingest, synthetic_corpus
from .costmodel import CostModel, Heatmap, PipelineMode
from .errors import EngineError, InputError, InvariantViolation
from .fp16 import Fp16Scalar, fp16_to_fp32, fp32_to_fp16
from .index import EmbeddingRecord, SearchParams, VectorIndex, align_params
from .scheduler import (Engine, Template, TemplateName, WorkloadSnapshot,
                        make_template, merge_topk, select_template)

__version__ = "0.1.0"

__all__ = [
    "Corpus", "CostModel", "EmbeddingRecord", "Engine", "EngineConfig",
    "EngineError", "FP16", "FP32", "Fp16Scalar", "Heatmap", "InputError",
    "InvariantViolation", "MatrixBuffer", "PipelineMode", "SearchParams",
    "SyntheticSpec", "Template", "TemplateName", "TileMajor", "TileSpec",
    "VectorIndex", "WorkloadSnapshot", "align_params", "fp16_to_fp32",
    "fp32_to_fp16", "ingest", "load_config", "make_template", "merge_topk",
    "select_template", "synthetic_corpus",
]
