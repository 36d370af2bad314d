"""Online test-time adaptation by entropy minimisation.

Each incoming batch is first predicted, then used for one (or more)
unsupervised updates of the selected parameter groups. Error is always
measured on the prediction made *before* that batch's update.
"""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .activation import actta_backward_partials
from .errors import ContractError, NoSelectedSamples, NumericError
from .network import ACTIVATION_GROUPS, Model
from .optim import SGD, Adam, Optimizer, ParamGroup
from .shiftgen import CorruptionSpec, LabeledBatch
from .tensor import Tensor, backward, exp, log_softmax, mul, no_grad, tsum

PASS_THROUGH_TAU = 1e-3
SMALL_BATCH = 16
SMALL_BATCH_LR_SCALE = 0.1

METRICS_COLUMNS = (
    "run_id",
    "schedule_kind",
    "corruption_kind",
    "severity",
    "batch_index",
    "target_error",
    "mean_entropy",
    "selected_fraction",
    "pass_through_ratio",
    "source_error",
    "step_wall_time_s",
    "status",
)


@dataclass(frozen=True)
class Selection:
    """Entropy-threshold sample filter; threshold is ``e0_factor * ln C``."""

    e0_factor: float = 0.4
    weighting: bool = True

    def __post_init__(self):
        if not 0.0 < self.e0_factor <= 1.0:
            raise ContractError(f"e0_factor must lie in (0, 1], got {self.e0_factor}")


@dataclass(frozen=True)
class AdaptConfig:
    optimizer: str = "adam"
    momentum: float = 0.9
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    base_lr: float = 1e-3
    group_lr_multipliers: Dict[str, float] = field(
        default_factory=lambda: {g: 10.0 for g in sorted(ACTIVATION_GROUPS)}
    )
    batch_size: int = 64
    selection: Optional[Selection] = None
    schedule: str = "episodic"
    steps_per_batch: int = 1
    seed: int = 0
    adapt: bool = True
    small_batch_scaling: bool = True
    pass_through_tau: float = PASS_THROUGH_TAU

    def __post_init__(self):
        if self.optimizer not in ("adam", "sgd"):
            raise ContractError(f"optimizer must be 'adam' or 'sgd', got {self.optimizer!r}")
        if self.base_lr < 0:
            raise ContractError(f"base_lr must be >= 0, got {self.base_lr}")
        if self.batch_size < 1:
            raise ContractError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.steps_per_batch < 1:
            raise ContractError(f"steps_per_batch must be >= 1, got {self.steps_per_batch}")
        if self.schedule not in ("episodic", "continual"):
            raise ContractError(f"schedule must be 'episodic' or 'continual', got {self.schedule!r}")
        for g, m in self.group_lr_multipliers.items():
            if not m > 0:
                raise ContractError(f"lr multiplier for {g!r} must be positive, got {m}")

    def effective_lr(self, group: str) -> float:
        lr = self.base_lr * float(self.group_lr_multipliers.get(group, 1.0))
        if self.small_batch_scaling and self.batch_size < SMALL_BATCH:
            lr *= SMALL_BATCH_LR_SCALE
        return lr


@dataclass
class StepRecord:
    target_error: float
    mean_entropy: float
    selected_fraction: float
    pass_through_ratio: float
    layer_pass_through: List[float]
    step_wall_time: float
    status: str
    source_error: float = math.nan
    segment: int = 0
    corruption_kind: str = ""
    severity: int = 0


@dataclass
class RunMetrics:
    records: List[StepRecord] = field(default_factory=list)
    initial_source_error: float = math.nan
    segment_target_errors: List[float] = field(default_factory=list)
    segment_source_errors: List[float] = field(default_factory=list)
    segment_labels: List[str] = field(default_factory=list)

    @property
    def target_error(self) -> float:
        errs = [r.target_error for r in self.records]
        return float(np.mean(errs)) if errs else math.nan

    def entropy_window(self, start: int, stop: int) -> float:
        """Mean recorded entropy over batches ``start..stop-1`` (0-based)."""
        return float(np.mean([r.mean_entropy for r in self.records[start:stop]]))

    def mean(self, attr: str) -> float:
        return float(np.mean([getattr(r, attr) for r in self.records]))

    def layer_pass_through(self) -> np.ndarray:
        return np.mean([r.layer_pass_through for r in self.records], axis=0)

    def to_rows(self, run_id: str, schedule_kind: str) -> List[dict]:
        rows = []
        for i, r in enumerate(self.records):
            rows.append(
                {
                    "run_id": run_id,
                    "schedule_kind": schedule_kind,
                    "corruption_kind": r.corruption_kind,
                    "severity": r.severity,
                    "batch_index": i,
                    "target_error": r.target_error,
                    "mean_entropy": r.mean_entropy,
                    "selected_fraction": r.selected_fraction,
                    "pass_through_ratio": r.pass_through_ratio,
                    "source_error": r.source_error,
                    "step_wall_time_s": r.step_wall_time,
                    "status": r.status,
                }
            )
        return rows


# ---------------------------------------------------------------------------
# objective and selection


def prediction_entropy(logits) -> np.ndarray:
    """Per-sample Shannon entropy (nats) of ``softmax(logits)``."""
    z = np.asarray(logits.data if isinstance(logits, Tensor) else logits, dtype=np.float64)
    z = z - z.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    h = -(np.exp(logp) * logp).sum(axis=1)
    return np.clip(h, 0.0, math.log(z.shape[1]))


def entropy_loss(logits: Tensor, weights: Optional[np.ndarray] = None) -> Tensor:
    """Mean prediction entropy, optionally weighted.

    With weights, the sum of ``w_i * H_i`` is divided by the number of
    samples with non-zero weight. Raises :class:`NoSelectedSamples` when no
    weight is positive.
    """
    if logits.ndim != 2 or logits.shape[1] < 2:
        raise ContractError(f"entropy_loss needs [batch, C>=2] logits, got {logits.shape}")
    n = logits.shape[0]
    if weights is None:
        weights = np.ones(n)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (n,):
        raise ContractError(f"weights shape {weights.shape} does not match batch {n}")
    count = int(np.count_nonzero(weights > 0))
    if count == 0:
        raise NoSelectedSamples("no samples selected for the update")
    lsm = log_softmax(logits)
    per_sample = -tsum(mul(exp(lsm), lsm), axis=1)
    return tsum(mul(per_sample, Tensor(weights / count)))


def select_samples(logits, e0_factor: float = 0.4, weighting: bool = True) -> Tuple[np.ndarray, np.ndarray]:
    """Keep samples whose entropy is below ``e0_factor * ln C``.

    Returns the boolean mask and per-sample weights (zero where masked
    out; ``exp(E0 - H)`` or 1 where kept).
    """
    if not 0.0 < e0_factor <= 1.0:
        raise ContractError(f"e0_factor must lie in (0, 1], got {e0_factor}")
    h = prediction_entropy(logits)
    n_classes = np.shape(logits.data if isinstance(logits, Tensor) else logits)[1]
    e0 = e0_factor * math.log(n_classes)
    mask = h < e0
    w = np.exp(e0 - h) if weighting else np.ones_like(h)
    return mask, np.where(mask, w, 0.0)


# ---------------------------------------------------------------------------
# gradient flow


def pass_through_from_inputs(model: Model, inputs: Sequence[np.ndarray], tau: float = PASS_THROUGH_TAU) -> List[float]:
    out = []
    for layer, x in zip(model.activation_layers(), inputs):
        d_x = actta_backward_partials(x, layer.act).d_x
        out.append(float(np.mean(np.abs(d_x) > tau)))
    return out


def pass_through_ratio(model: Model, batch, train_mode: bool = True, tau: float = PASS_THROUGH_TAU) -> List[float]:
    """Per activation layer, the fraction of inputs whose local slope exceeds ``tau``."""
    x = batch.x if isinstance(batch, LabeledBatch) else batch
    captured: list = []
    with no_grad():
        model.forward(x, train_mode=train_mode, capture=captured)
    return pass_through_from_inputs(model, captured, tau)


# ---------------------------------------------------------------------------
# engine


def build_optimizer(model: Model, config: AdaptConfig) -> Optimizer:
    by_group: Dict[str, list] = {}
    for _, group, t in model.trainable_parameters():
        by_group.setdefault(group, []).append(t)
    if not by_group:
        raise ContractError("no trainable parameters; call set_trainable with a non-empty selection first")
    groups = [ParamGroup(params, config.effective_lr(g), g) for g, params in sorted(by_group.items())]
    if config.optimizer == "sgd":
        return SGD(groups, momentum=config.momentum)
    return Adam(groups, betas=config.betas, eps=config.eps)


def evaluate(model: Model, x, y=None, train_mode: bool = False) -> Tuple[np.ndarray, float]:
    """Pure forward pass: returns logits and error (NaN without labels)."""
    if isinstance(x, LabeledBatch):
        x, y = x.x, (x.y if y is None else y)
    with no_grad():
        logits = model.forward(x, train_mode=train_mode).data
    err = float(np.mean(logits.argmax(axis=1) != np.asarray(y))) if y is not None else math.nan
    return logits, err


class Adapter:
    """Stateful online adapter: a model, its optimiser, and the config."""

    def __init__(self, model: Model, config: AdaptConfig):
        self.model = model
        self.config = config
        self.optimizer: Optional[Optimizer] = build_optimizer(model, config) if config.adapt else None

    def _params(self) -> List[Tensor]:
        return [t for _, _, t in self.model.trainable_parameters()]

    def step(self, batch, labels=None) -> StepRecord:
        """Predict on ``batch``, then adapt on it."""
        if isinstance(batch, LabeledBatch):
            x, labels = batch.x, batch.y if labels is None else labels
        else:
            x = batch.data if isinstance(batch, Tensor) else np.asarray(batch, dtype=np.float64)
        cfg = self.config
        t0 = time.perf_counter()

        if not cfg.adapt:
            captured: list = []
            with no_grad():
                logits_t = self.model.forward(x, train_mode=False, capture=captured)
            logits = logits_t.data
            record = self._record(logits, labels, captured, 1.0, "frozen")
            record.step_wall_time = time.perf_counter() - t0
            return record

        status = "ok"
        selected = 1.0
        record = None
        for k in range(cfg.steps_per_batch):
            captured = []
            self.model.zero_grad()
            logits_t = self.model.forward(x, train_mode=True, capture=captured)
            weights = None
            if cfg.selection is not None:
                mask, weights = select_samples(logits_t, cfg.selection.e0_factor, cfg.selection.weighting)
                if k == 0:
                    selected = float(mask.mean())
            if k == 0:
                record = self._record(logits_t.data, labels, captured, selected, status)
            try:
                loss = entropy_loss(logits_t, weights)
                if not np.isfinite(loss.item()):
                    raise NumericError("non-finite adaptation loss")
                backward(loss)
                params = self._params()
                if not all(p.grad is None or np.isfinite(p.grad).all() for p in params):
                    raise NumericError("non-finite gradient")
                saved = [p.data for p in params]
                self.optimizer.step()
                if not all(np.isfinite(p.data).all() for p in params):
                    for p, d in zip(params, saved):
                        p.data = d
                    raise NumericError("non-finite parameter after update")
            except NoSelectedSamples:
                status = "skipped"
                break
            except NumericError:
                status = "aborted"
                break
            finally:
                self.model.zero_grad()
        record.status = status
        record.step_wall_time = time.perf_counter() - t0
        return record

    def _record(self, logits, labels, captured, selected, status) -> StepRecord:
        err = float(np.mean(logits.argmax(axis=1) != np.asarray(labels))) if labels is not None else math.nan
        if not np.isfinite(logits).all():
            ent = math.nan
        else:
            ent = float(np.mean(prediction_entropy(logits)))
        layers = pass_through_from_inputs(self.model, captured, self.config.pass_through_tau)
        return StepRecord(
            target_error=err,
            mean_entropy=ent,
            selected_fraction=selected,
            pass_through_ratio=float(np.mean(layers)) if layers else math.nan,
            layer_pass_through=layers,
            step_wall_time=0.0,
            status=status,
        )


def adapt_step(model: Model, batch, config: AdaptConfig, adapter: Optional[Adapter] = None) -> StepRecord:
    """One predict-then-adapt step. Pass ``adapter`` to keep optimiser state."""
    adapter = adapter or Adapter(model, config)
    return adapter.step(batch)


def _tag(records: List[StepRecord], corruption: Optional[CorruptionSpec], segment: int) -> None:
    for r in records:
        r.segment = segment
        if corruption is not None:
            r.corruption_kind = corruption.kind
            r.severity = corruption.severity
        else:
            r.corruption_kind = "none"


def run_episode(
    model: Model,
    stream: Sequence[LabeledBatch],
    config: AdaptConfig,
    snapshot=None,
    corruption: Optional[CorruptionSpec] = None,
) -> RunMetrics:
    """Adapt sequentially over ``stream``.

    With an episodic schedule the model is first restored from
    ``snapshot`` (when given), so each episode starts from the source model.
    """
    if config.schedule == "episodic" and snapshot is not None:
        model.restore(snapshot)
    adapter = Adapter(model, config)
    metrics = RunMetrics()
    metrics.records = [adapter.step(b) for b in stream]
    _tag(metrics.records, corruption, 0)
    metrics.segment_target_errors = [metrics.target_error]
    metrics.segment_labels = [_label(corruption)]
    return metrics


def _label(c: Optional[CorruptionSpec]) -> str:
    return "none" if c is None else f"{c.kind}@{c.severity}"


def run_continual(
    model: Model,
    segments: Sequence[Tuple[Optional[CorruptionSpec], Sequence[LabeledBatch]]],
    config: AdaptConfig,
    source_probe: Optional[LabeledBatch] = None,
) -> RunMetrics:
    """Adapt across consecutive corruption segments without resetting.

    After each segment the source probe is scored in eval mode (running
    statistics, no gradient) and stored on that segment's last record.
    """
    config = replace(config, schedule="continual")
    adapter = Adapter(model, config)
    metrics = RunMetrics()
    if source_probe is not None:
        metrics.initial_source_error = evaluate(model, source_probe.x, source_probe.y)[1]
    for i, (corruption, stream) in enumerate(segments):
        recs = [adapter.step(b) for b in stream]
        _tag(recs, corruption, i)
        metrics.segment_target_errors.append(float(np.mean([r.target_error for r in recs])) if recs else math.nan)
        metrics.segment_labels.append(_label(corruption))
        if source_probe is not None:
            src = evaluate(model, source_probe.x, source_probe.y)[1]
            metrics.segment_source_errors.append(src)
            if recs:
                recs[-1].source_error = src
        metrics.records.extend(recs)
    return metrics


# ---------------------------------------------------------------------------
# metrics CSV


def _fmt(v) -> str:
    if isinstance(v, float):
        return "" if math.isnan(v) else repr(v)
    return str(v)


def metrics_csv(rows: Sequence[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in METRICS_COLUMNS])
    return buf.getvalue()
