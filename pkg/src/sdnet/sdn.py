"""Attaching internal classifier heads to a backbone.

A head is a feature reduction (learnable max/avg mixed pooling down to at
most 4x4) followed by a single fully connected readout.  Attachment never
touches backbone parameters, so the final prediction is unchanged for any
input.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .cost import CostProfile, build_cost_profile, eligible_placements, ic_head_flops, sdn_exit_costs, select_placements
from .errors import ConfigurationError
from .graph import Backbone, glorot_uniform

REDUCED_LIMIT = 4


def reduction_geometry(feature_shape) -> tuple[int, int] | None:
    """Pooling (kernel, stride) that maps an HxH feature map to exactly 4x4.

    Maps already at or below 4x4 are passed through (None).  The base rule
    is kernel = ceil(H/4), stride = floor(H/4); when dropped tail rows would
    leave more than four windows the kernel widens to H - 3*stride so the
    output is exactly 4x4 for every H.
    """
    c, h, w = feature_shape
    if h != w:
        raise ConfigurationError(f"head reduction needs a square feature map, got {h}x{w}")
    if h <= REDUCED_LIMIT:
        return None
    stride = h // REDUCED_LIMIT
    kernel = math.ceil(h / REDUCED_LIMIT)
    if (h - kernel) // stride + 1 != REDUCED_LIMIT:
        kernel = h - (REDUCED_LIMIT - 1) * stride
    assert (h - kernel) // stride + 1 == REDUCED_LIMIT
    return kernel, stride


def reduced_shape(feature_shape) -> tuple[int, int, int]:
    c, h, w = feature_shape
    geom = reduction_geometry(feature_shape)
    if geom is None:
        return (c, h, w)
    return (c, REDUCED_LIMIT, REDUCED_LIMIT)


@dataclass
class InternalClassifier:
    """One head: placement layer index, reduction geometry, mix + fc weights."""

    placement: int
    feature_shape: tuple[int, int, int]
    geometry: tuple[int, int] | None
    mix: Parameter
    fc_weight: Parameter
    fc_bias: Parameter
    _ws: dict = field(default_factory=dict)

    @property
    def reduced(self) -> tuple[int, int, int]:
        return reduced_shape(self.feature_shape)

    @property
    def fc_in(self) -> int:
        return int(np.prod(self.reduced))

    def forward(self, activation: Tensor) -> Tensor:
        x = activation
        if self.geometry is not None:
            k, s = self.geometry
            x = ad.mixed_pool2d(x, k, s, self.mix)
        x = ad.flatten(x)
        return ad.linear(x, self.fc_weight, self.fc_bias)

    def parameter_count(self) -> int:
        return self.mix.size + self.fc_weight.size + self.fc_bias.size

    def head_flops(self, num_classes: int) -> int:
        c, rh, rw = self.reduced
        return ic_head_flops(c, rh, rw, self.geometry, num_classes)

    def named_parameters(self, prefix: str) -> dict[str, Parameter]:
        return {
            f"{prefix}.mix": self.mix,
            f"{prefix}.fc.weight": self.fc_weight,
            f"{prefix}.fc.bias": self.fc_bias,
        }


@dataclass
class SdnModel:
    """A backbone plus its ordered internal classifiers.

    Head parameters are namespaced ``ic{i}.`` (1-based) in checkpoints;
    backbone parameters keep their own names.
    """

    backbone: Backbone
    ics: list[InternalClassifier]
    cost_profile: CostProfile

    def __post_init__(self):
        places = [ic.placement for ic in self.ics]
        if places != sorted(set(places)):
            raise ConfigurationError(f"head placements must be strictly ascending, got {places}")
        if not self.ics:
            raise ConfigurationError("an SDN needs at least one internal classifier")

    @property
    def num_classes(self) -> int:
        return self.backbone.graph.num_classes

    @property
    def num_ics(self) -> int:
        return len(self.ics)

    def placement_fractions(self) -> list[float]:
        return [self.cost_profile.fractions[ic.placement] for ic in self.ics]

    def exit_costs(self) -> list[int]:
        heads = [ic.head_flops(self.num_classes) for ic in self.ics]
        return sdn_exit_costs(self.cost_profile, [ic.placement for ic in self.ics], heads)

    def forward_heads(self, x: Tensor) -> list[Tensor]:
        """Logits from every head, internal first, final classifier last."""
        final, taps = self.backbone.forward_collect(x, {ic.placement for ic in self.ics})
        outs = [ic.forward(taps[ic.placement]) for ic in self.ics]
        outs.append(final)
        return outs

    def named_parameters(self) -> dict[str, Parameter]:
        params = self.backbone.named_parameters()
        for i, ic in enumerate(self.ics, start=1):
            params.update(ic.named_parameters(f"ic{i}"))
        return params

    def freeze_backbone(self) -> None:
        self.backbone.freeze()

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for name, param in self.named_parameters().items():
            if name not in state:
                raise ConfigurationError(f"checkpoint is missing parameter {name}")
            if state[name].shape != param.data.shape:
                raise ConfigurationError(
                    f"checkpoint parameter {name} has shape {state[name].shape}, "
                    f"expected {param.data.shape}"
                )
            param.data[...] = state[name]
        self.backbone.trained = True


def attach_ics(backbone: Backbone, placements, seed: int = 0) -> SdnModel:
    """Build heads at the given layer indices; the backbone is untouched."""
    graph = backbone.graph
    allowed = set(eligible_placements(graph))
    rng = np.random.default_rng(seed)
    ics = []
    for placement in placements:
        if placement not in allowed:
            raise ConfigurationError(
                f"layer {placement} cannot host a head (must be conv/pool/relu before flatten)"
            )
        feat = backbone.shapes[placement]
        geom = reduction_geometry(feat)
        c, rh, rw = reduced_shape(feat)
        if rh > REDUCED_LIMIT or rw > REDUCED_LIMIT:
            raise ConfigurationError(f"reduced map {rh}x{rw} exceeds {REDUCED_LIMIT}x{REDUCED_LIMIT}")
        d_in = c * rh * rw
        k = graph.num_classes
        ics.append(
            InternalClassifier(
                placement=placement,
                feature_shape=tuple(feat),
                geometry=geom,
                mix=Parameter(0.0),
                fc_weight=Parameter(glorot_uniform(rng, (d_in, k), d_in, k)),
                fc_bias=Parameter(np.zeros(k)),
            )
        )
    return SdnModel(backbone=backbone, ics=ics, cost_profile=build_cost_profile(graph))


def build_sdn(backbone: Backbone, targets=None, seed: int = 0) -> SdnModel:
    """Attach heads at the layers closest to the target cost fractions."""
    from .cost import DEFAULT_TARGETS

    targets = DEFAULT_TARGETS if targets is None else tuple(targets)
    profile = build_cost_profile(backbone.graph)
    placements = select_placements(profile, eligible_placements(backbone.graph), targets)
    return attach_ics(backbone, placements, seed=seed)


def parameter_counts(model: SdnModel) -> tuple[int, int]:
    """(backbone parameter count, total head parameter count)."""
    return model.backbone.parameter_count(), sum(ic.parameter_count() for ic in model.ics)
