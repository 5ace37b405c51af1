"""Reduction-based attention kit: tensor kernels with reverse-mode
differentiation, the attention ops and their oracles, the model family,
cost counters, and a micro-benchmark harness."""

from . import ops
from .attention import (CostReport, LocalContextConfig, LocalContextWeights,
                        QkvBundle, ReductionSet, attention_reductions,
                        closed_form_oracle, flop_count_attention,
                        multi_scale_local_context, random_bundle,
                        record_attention_graph, reduce_former_attention,
                        relu_linear_attention, scan_graph_kinds)
from .bench import (BenchRow, BenchSpec, ScalingResult, compare_attention,
                    run_bench, scaling_study)
from .graph import (Graph, GraphError, Node, UnregisteredOpError, backward,
                    finite_diff_check)
from .model import (Model, TrainingDivergedError, VariantConfig, build_variant,
                    config_from_lines, config_to_lines, cost_report,
                    count_macs, count_params, forward, make_toy_batch,
                    predict_logits, record_block_graph, stage_table,
                    toy_config, train_toy)
from .tensor import Rng, ShapeError, Tensor
from .weights import (BadMagicError, ChecksumError, TruncatedFileError,
                      VersionMismatchError, WeightsError, load_weights,
                      save_weights)

__version__ = "0.1.0"

__all__ = [
    "ops", "Tensor", "Rng", "ShapeError",
    "Graph", "Node", "GraphError", "UnregisteredOpError",
    "backward", "finite_diff_check",
    "LocalContextConfig", "LocalContextWeights", "QkvBundle", "ReductionSet",
    "CostReport", "attention_reductions", "multi_scale_local_context",
    "reduce_former_attention", "closed_form_oracle", "relu_linear_attention",
    "flop_count_attention", "random_bundle", "record_attention_graph",
    "scan_graph_kinds",
    "VariantConfig", "Model", "build_variant", "forward", "predict_logits",
    "count_params", "count_macs", "cost_report", "stage_table",
    "record_block_graph", "toy_config", "make_toy_batch", "train_toy",
    "TrainingDivergedError", "config_to_lines", "config_from_lines",
    "save_weights", "load_weights", "WeightsError", "BadMagicError",
    "VersionMismatchError", "TruncatedFileError", "ChecksumError",
    "BenchSpec", "BenchRow", "ScalingResult", "run_bench", "scaling_study",
    "compare_attention",
    "__version__",
]
