"""Chunk-centric training for variable-length sequence batches, at desk scale.

Chunks are built from a batch (:mod:`.chunker`), scheduled under a retained
activation budget ``k`` (:mod:`.scheduler`), timed on a simulated 1F1B
pipeline (:mod:`.pipeline`), sized against a calibrated memory model
(:mod:`.memory`, :mod:`.tuner`) and checked numerically against full-batch
training on a toy transformer (:mod:`.kernel`).
"""

__version__ = "0.1.0"

from ._validation import ValidationError
from .chunker import Chunk, ChunkConstructor, ChunkPlan, ChunkSegment, construct_chunks
from .dataset import (PRESETS, LMSYS_LENGTHS, EVAL_LENGTHS, Batch, DistributionSpec, LongTailSampler,
                      SequenceRecord, SequenceSet, batch_from_lengths, distribution_report, load_lengths,
                      sample_batch, synthesize)
from .kernel import (GradientSet, StateStore, ToyModelConfig, ToyModelParams, backward_full,
                     finite_diff_grads, forward_full, init_model, run_plan)
from .memory import MemoryModel, MemoryModelCoefficients, calibrate, predict_peak
from .pipeline import (CostModel, PipelineConfig, PipelineTrace, bubble_ratio, export_trace,
                       simulate_1f1b, simulate_state_aware_1f1b)
from .scheduler import ChunkScheduler, ExecEvent, ExecutionPlan, schedule_group, schedule_step, validate_plan
from .tuner import ChunkSizeKTuner, TunerResult, grid_search

__all__ = [
    "Batch", "Chunk", "ChunkConstructor", "ChunkPlan", "ChunkScheduler", "ChunkSegment",
    "ChunkSizeKTuner", "CostModel", "DistributionSpec", "ExecEvent", "ExecutionPlan", "GradientSet",
    "LongTailSampler", "MemoryModel", "MemoryModelCoefficients", "PRESETS", "PipelineConfig",
    "PipelineTrace", "SequenceRecord", "SequenceSet", "StateStore", "LMSYS_LENGTHS", "EVAL_LENGTHS",
    "ToyModelConfig", "ToyModelParams", "TunerResult", "ValidationError", "backward_full",
    "batch_from_lengths", "bubble_ratio", "calibrate", "construct_chunks", "distribution_report",
    "export_trace", "finite_diff_grads", "forward_full", "grid_search", "init_model", "load_lengths",
    "predict_peak", "run_plan", "sample_batch", "schedule_group", "schedule_step",
    "simulate_1f1b", "simulate_state_aware_1f1b", "synthesize", "validate_plan",
]
