"""FLOPs accounting and placement selection by inference-cost fraction.

Counting convention: one multiply-accumulate is 2 FLOPs; conv and fc bias
additions are excluded; pooling costs kernel^2 per output element; relu
costs one per element; flatten is free.  Head overhead is charged for
every head an input passes, so reported costs are honest about the
attached classifiers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError
from .graph import LayerSpec, NetworkGraph, infer_shapes

DEFAULT_TARGETS = (0.15, 0.30, 0.45, 0.60, 0.75, 0.90)


@dataclass(frozen=True)
class CostProfile:
    """Per-layer FLOPs and the cumulative fraction of the backbone total."""

    layer_flops: tuple[int, ...]
    fractions: tuple[float, ...]
    total: int

    def __post_init__(self):
        if any(f < 0 for f in self.layer_flops):
            raise ConfigurationError("negative layer cost")
        if any(b < a for a, b in zip(self.fractions, self.fractions[1:])):
            raise ConfigurationError("cost fractions must be nondecreasing")
        if self.fractions and self.fractions[-1] != 1.0:
            raise ConfigurationError(f"final cost fraction must be 1.0, got {self.fractions[-1]}")

    def cumulative_flops(self, index: int) -> int:
        return int(sum(self.layer_flops[: index + 1]))


def layer_flops(spec: LayerSpec, input_shape) -> int:
    """FLOPs one layer spends consuming ``input_shape``."""
    if spec.kind == "conv":
        c, h, w = input_shape
        k, s, p = spec.kernel, spec.stride, spec.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        return 2 * k * k * c * spec.channels * ho * wo
    if spec.kind == "maxpool":
        c, h, w = input_shape
        k, s = spec.kernel, spec.stride
        ho = (h - k) // s + 1
        wo = (w - k) // s + 1
        return k * k * c * ho * wo
    if spec.kind == "relu":
        return int(np.prod(input_shape))
    if spec.kind == "flatten":
        return 0
    if spec.kind == "fc":
        return 2 * int(input_shape[0]) * spec.units
    raise ConfigurationError(f"unknown layer kind {spec.kind}")


def build_cost_profile(graph: NetworkGraph) -> CostProfile:
    shapes = infer_shapes(graph)
    flops = []
    cur = tuple(graph.input_shape)
    for i, spec in enumerate(graph.layers):
        flops.append(layer_flops(spec, cur))
        cur = shapes[i]
    total = sum(flops)
    running = np.cumsum(flops)
    fractions = tuple(float(v) / total for v in running)
    return CostProfile(layer_flops=tuple(flops), fractions=fractions, total=total)


def eligible_placements(graph: NetworkGraph) -> list[int]:
    """Layer indices that may host a head: conv / pool / relu before flatten."""
    out = []
    for i, spec in enumerate(graph.layers):
        if spec.kind == "flatten":
            break
        if spec.kind in ("conv", "maxpool", "relu"):
            out.append(i)
    return out


def select_placements(profile: CostProfile, eligible, targets) -> list[int]:
    """For each target fraction, the eligible layer whose cumulative cost is
    closest; ties break toward the earlier layer.  Deduplicated ascending."""
    eligible = sorted(set(eligible))
    if not eligible:
        raise ConfigurationError("no eligible layers to place heads on")
    for t in targets:
        if not (0.0 < t < 1.0):
            raise ConfigurationError(f"placement target {t} outside (0, 1)")
    if list(targets) != sorted(targets):
        raise ConfigurationError("placement targets must be sorted ascending")
    chosen = []
    for t in targets:
        best = min(eligible, key=lambda i: (abs(profile.fractions[i] - t), i))
        if best not in chosen:
            chosen.append(best)
    return sorted(chosen)


def reduction_pool_flops(channels: int, geometry: tuple[int, int] | None) -> int:
    if geometry is None:
        return 0
    kernel, _ = geometry
    return kernel * kernel * channels * 4 * 4


def ic_head_flops(channels: int, reduced_h: int, reduced_w: int,
                  geometry: tuple[int, int] | None, num_classes: int) -> int:
    """Cost of one head: its reduction pool plus the fc readout."""
    return reduction_pool_flops(channels, geometry) + 2 * (channels * reduced_h * reduced_w) * num_classes


def sdn_exit_costs(profile: CostProfile, placements, head_flops) -> list[int]:
    """Cumulative FLOPs at each exit, heads included, final exit last.

    Exit i pays the backbone prefix through its placement plus every head
    up to and including its own; the final exit pays the whole backbone
    plus all heads.
    """
    if len(placements) != len(head_flops):
        raise ConfigurationError("placements and head costs must align")
    costs = []
    head_running = 0
    for layer_index, hf in zip(placements, head_flops):
        head_running += hf
        costs.append(profile.cumulative_flops(layer_index) + head_running)
    costs.append(profile.total + head_running)
    if any(b <= a for a, b in zip(costs, costs[1:])):
        raise ConfigurationError(f"exit costs must strictly increase, got {costs}")
    return costs
