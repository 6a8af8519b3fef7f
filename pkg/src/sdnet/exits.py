"""Confidence-based early-exit inference.

A trace records every head's probability vector for one sample plus the
cumulative FLOPs of exiting at each head.  The exit policy scans heads in
order and stops at the first whose top probability strictly exceeds the
threshold q; if none does, it falls back to the most confident head
(earlier head on ties) at full-network cost.  Cost fractions are relative
to the final exit, which already includes every head's overhead.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, softmax
from .data import LabeledDataset, UnlabeledImages
from .errors import ConfigurationError, DataError
from .sdn import SdnModel

DEFAULT_Q_GRID = tuple([0.0] + [round(i / 100, 2) for i in range(1, 100)] + [1.0])


@dataclass(frozen=True)
class PredictionTrace:
    """All head probability vectors for one sample, internal heads first."""

    probs: np.ndarray  # (num_heads, K), rows sum to 1
    exit_flops: tuple[int, ...]  # cumulative cost of exiting at each head

    def __post_init__(self):
        if self.probs.ndim != 2 or len(self.probs) != len(self.exit_flops):
            raise DataError(
                f"trace needs one cost per head: probs {self.probs.shape}, "
                f"{len(self.exit_flops)} costs"
            )
        if any(b <= a for a, b in zip(self.exit_flops, self.exit_flops[1:])):
            raise DataError(f"exit costs must strictly increase, got {self.exit_flops}")

    @property
    def num_heads(self) -> int:
        return len(self.probs)

    @property
    def confidences(self) -> np.ndarray:
        return self.probs.max(axis=1)

    @property
    def predictions(self) -> np.ndarray:
        return self.probs.argmax(axis=1)

    @property
    def full_cost(self) -> int:
        return self.exit_flops[-1]


@dataclass(frozen=True)
class ExitPolicy:
    q: float
    feasible: bool = True  # False when even exiting at the first head busts the budget

    def __post_init__(self):
        if not (0.0 <= self.q <= 1.0):
            raise ConfigurationError(f"threshold q={self.q} outside [0, 1]")


@dataclass(frozen=True)
class ExitDecision:
    label: int
    head: int
    flops: int


def _trace_probs(model: SdnModel, images: np.ndarray) -> np.ndarray:
    """(n, num_heads, K) softmax outputs for a batch of images."""
    logits = model.forward_heads(Tensor(images))
    return np.stack([softmax(l).data for l in logits], axis=1)


def forward_trace(model: SdnModel, x) -> PredictionTrace:
    """Trace a single sample (C,H,W array or Tensor) through every head."""
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim == 3:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[0] != 1 or arr.shape[1:] != tuple(model.backbone.graph.input_shape):
        raise DataError(
            f"sample shape {arr.shape} does not match model input "
            f"{model.backbone.graph.input_shape}"
        )
    probs = _trace_probs(model, arr)[0]
    return PredictionTrace(probs=probs, exit_flops=tuple(model.exit_costs()))


def trace_dataset(model: SdnModel, images: np.ndarray, batch_size: int = 128) -> list[PredictionTrace]:
    """Traces for many samples; batching changes nothing semantically."""
    costs = tuple(model.exit_costs())
    out = []
    for start in range(0, len(images), batch_size):
        block = _trace_probs(model, images[start : start + batch_size])
        out.extend(PredictionTrace(probs=p, exit_flops=costs) for p in block)
    return out


def early_exit(trace: PredictionTrace, policy: ExitPolicy) -> ExitDecision:
    """First head whose confidence strictly exceeds q, else the most
    confident head at full cost."""
    conf = trace.confidences
    for head in range(trace.num_heads):
        if conf[head] > policy.q:
            return ExitDecision(
                label=int(trace.predictions[head]),
                head=head,
                flops=trace.exit_flops[head],
            )
    best = int(conf.argmax())  # argmax keeps the earlier head on ties
    return ExitDecision(label=int(trace.predictions[best]), head=best, flops=trace.full_cost)


def _exit_costs_for_grid(traces: list[PredictionTrace], q_grid) -> np.ndarray:
    """(len(grid),) average exit cost per threshold, fallback at full cost."""
    conf = np.stack([t.confidences for t in traces])  # (n, heads)
    costs = np.asarray(traces[0].exit_flops, dtype=np.float64)
    full = costs[-1]
    grid = np.asarray(q_grid, dtype=np.float64)
    out = np.empty(len(grid))
    for j, q in enumerate(grid):
        exceeds = conf > q
        first = np.where(exceeds.any(axis=1), exceeds.argmax(axis=1), -1)
        sample_cost = np.where(first >= 0, costs[first], full)
        out[j] = sample_cost.mean()
    return out


def calibrate_threshold(model: SdnModel, holdout: UnlabeledImages, budget_fraction: float,
                        q_grid=DEFAULT_Q_GRID, batch_size: int = 128) -> ExitPolicy:
    """Largest grid q whose estimated mean exit cost on the unlabeled holdout
    stays within budget_fraction of the full-network cost.

    If even the cheapest behavior (q = 0, always exit at the first head)
    exceeds the budget, returns q = 0 flagged infeasible.  No labels are
    consumed: the holdout type does not carry any.
    """
    if len(holdout) == 0:
        raise ConfigurationError("cannot calibrate on an empty holdout")
    if not (0.0 < budget_fraction <= 1.0):
        raise ConfigurationError(f"budget fraction {budget_fraction} outside (0, 1]")
    grid = sorted(set(float(q) for q in q_grid))
    if not grid:
        raise ConfigurationError("empty threshold grid")
    traces = trace_dataset(model, holdout.images, batch_size=batch_size)
    budget = budget_fraction * traces[0].full_cost
    avg_costs = _exit_costs_for_grid(traces, grid)
    feasible = [q for q, cost in zip(grid, avg_costs) if cost <= budget]
    if not feasible:
        return ExitPolicy(q=0.0, feasible=False)
    return ExitPolicy(q=max(feasible))


@dataclass
class PolicyEvaluation:
    accuracy: float
    avg_cost_fraction: float
    exit_counts: list[int]  # per head, fallbacks counted at the emitted head
    decisions: list[ExitDecision]

    def to_json(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "avg_cost_fraction": self.avg_cost_fraction,
            "exit_counts": self.exit_counts,
        }


def evaluate_policy(model: SdnModel, dataset: LabeledDataset, policy: ExitPolicy,
                    batch_size: int = 128) -> PolicyEvaluation:
    """Apply the policy per sample; the reported average cost includes every
    traversed head's overhead and is a fraction of the full-network cost."""
    traces = trace_dataset(model, dataset.images, batch_size=batch_size)
    return evaluate_policy_traces(traces, dataset.labels, policy)


def evaluate_policy_traces(traces: list[PredictionTrace], labels, policy: ExitPolicy) -> PolicyEvaluation:
    labels = np.asarray(labels)
    if len(traces) != len(labels):
        raise DataError(f"{len(traces)} traces but {len(labels)} labels")
    num_heads = traces[0].num_heads
    full = traces[0].full_cost
    counts = [0] * num_heads
    correct = 0
    cost_sum = 0.0
    decisions = []
    for trace, label in zip(traces, labels):
        d = early_exit(trace, policy)
        decisions.append(d)
        counts[d.head] += 1
        correct += int(d.label == int(label))
        cost_sum += d.flops
    n = len(traces)
    return PolicyEvaluation(
        accuracy=correct / n,
        avg_cost_fraction=cost_sum / (n * full),
        exit_counts=counts,
        decisions=decisions,
    )
