"""Test-time adaptation with reparameterized learnable activations."""

from .activation import ActParams, BaseActivationKind, Granularity, actta_forward, make_act_params
from .adapt import AdaptConfig, Adapter, RunMetrics, Selection, adapt_step, run_continual, run_episode, select_samples
from .config import ExperimentConfig
from .network import Model, ParamGroupSelection, build_mlp, load_checkpoint, save_checkpoint
from .shiftgen import CorruptionSpec, DatasetSpec, LabeledBatch, generate, make_stream, with_scale
from .sweep import SweepContext, SweepGrid, sweep
from .tensor import Tensor, backward, finite_diff_grad, no_grad
from .training import pretrain

__version__ = "0.1.0"

__all__ = [
    "ActParams", "AdaptConfig", "Adapter", "BaseActivationKind", "CorruptionSpec", "DatasetSpec",
    "ExperimentConfig", "Granularity", "LabeledBatch", "Model", "ParamGroupSelection", "RunMetrics",
    "Selection", "SweepContext", "SweepGrid", "Tensor", "actta_forward", "adapt_step", "backward",
    "build_mlp", "finite_diff_grad", "generate", "load_checkpoint", "make_act_params", "make_stream",
    "no_grad", "pretrain", "run_continual", "run_episode", "save_checkpoint", "select_samples", "sweep",
    "with_scale",
]
