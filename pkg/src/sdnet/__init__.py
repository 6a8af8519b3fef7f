"""Multi-exit convolutional network engine.

Builds small conv nets from text descriptions, attaches internal
classifier heads at chosen inference-cost fractions, trains them in three
regimes, runs confidence-based early-exit inference, and quantifies
overthinking and confusion from prediction traces.
"""

from .analysis import (
    confidence_indicator_report,
    confusion_histogram,
    confusion_normalize,
    confusion_scores,
    confusion_unbounded,
    cumulative_accuracy,
    error_indicator_report,
    ideal_exit_analysis,
    overthinking_report,
    per_head_accuracy,
)
from .autodiff import Parameter, Tensor, adam_update
from .checkpoint import load_checkpoint, save_checkpoint
from .cost import DEFAULT_TARGETS, build_cost_profile, layer_flops, select_placements
from .data import (
    LabeledDataset,
    TriggerSpec,
    UnlabeledImages,
    apply_trigger,
    augment_batch,
    load_idx,
    poison,
    save_idx,
    split_holdout,
    synthetic_shapes,
)
from .errors import ConfigurationError, DataError, InternalError, NumericError, SdnetError
from .exits import (
    DEFAULT_Q_GRID,
    ExitPolicy,
    PredictionTrace,
    calibrate_threshold,
    early_exit,
    evaluate_policy,
    forward_trace,
    trace_dataset,
)
from .graph import Backbone, LayerSpec, NetworkGraph, infer_shapes, load_architecture, parse_architecture
from .sdn import InternalClassifier, SdnModel, attach_ics, build_sdn, parameter_counts, reduction_geometry
from .trainer import TauSchedule, TrainConfig, sdn_loss, tau_at, train

__version__ = "0.1.0"
