"""Declarative backbone descriptions and their parameterized instances.

A backbone is an ordered list of layers (conv / maxpool / relu / flatten /
fc) ending in a fully connected classifier.  The text format is one layer
per line with a header giving the input shape and class count:

    input 1 28 28 classes 10
    conv 16 3 1 1        # out_channels kernel stride padding
    relu
    maxpool 2 2          # kernel stride
    flatten
    fc 10

``#`` starts a comment.  The final line must be the classifier fc.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .errors import ConfigurationError, InternalError

LAYER_KINDS = ("conv", "maxpool", "relu", "flatten", "fc")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    padding: int = 0
    units: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {self.kind!r}")
        if self.kind == "conv" and (self.channels < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise ConfigurationError(f"bad conv geometry: {self}")
        if self.kind == "maxpool" and (self.kernel < 1 or self.stride < 1):
            raise ConfigurationError(f"bad maxpool geometry: {self}")
        if self.kind == "fc" and self.units < 1:
            raise ConfigurationError(f"bad fc geometry: {self}")

    def describe(self) -> str:
        if self.kind == "conv":
            return f"conv {self.channels} {self.kernel} {self.stride} {self.padding}"
        if self.kind == "maxpool":
            return f"maxpool {self.kernel} {self.stride}"
        if self.kind == "fc":
            return f"fc {self.units}"
        return self.kind


@dataclass(frozen=True)
class NetworkGraph:
    """Backbone description: input shape (C, H, W), class count, layers."""

    input_shape: tuple[int, int, int]
    num_classes: int
    layers: tuple[LayerSpec, ...]

    def __post_init__(self):
        if len(self.input_shape) != 3 or any(d < 1 for d in self.input_shape):
            raise ConfigurationError(f"bad input shape {self.input_shape}")
        if self.num_classes < 2:
            raise ConfigurationError(f"need at least 2 classes, got {self.num_classes}")
        if len(self.layers) < 3:
            raise ConfigurationError("need at least 2 internal layers plus a final classifier")
        last = self.layers[-1]
        if last.kind != "fc" or last.units != self.num_classes:
            raise ConfigurationError(
                f"last layer must be fc with {self.num_classes} units, got {last.describe()}"
            )
        seen_flatten = False
        for i, spec in enumerate(self.layers):
            if spec.kind == "flatten":
                seen_flatten = True
            if spec.kind == "fc" and not seen_flatten:
                raise ConfigurationError(f"layer {i}: fc before flatten")
            if spec.kind in ("conv", "maxpool") and seen_flatten:
                raise ConfigurationError(f"layer {i}: {spec.kind} after flatten")
        infer_shapes(self)  # raises if any layer cannot consume its input

    @property
    def final_index(self) -> int:
        return len(self.layers) - 1


def _layer_output_shape(spec: LayerSpec, shape, index: int):
    if spec.kind in ("conv", "maxpool"):
        if len(shape) != 3:
            raise ConfigurationError(f"layer {index} ({spec.kind}) needs a C,H,W input, got {shape}")
        c, h, w = shape
        if spec.kind == "conv":
            k, s, p = spec.kernel, spec.stride, spec.padding
            if k > h + 2 * p or k > w + 2 * p:
                raise ConfigurationError(
                    f"layer {index} (conv) kernel {k} cannot consume input {shape} with padding {p}"
                )
            return (spec.channels, (h + 2 * p - k) // s + 1, (w + 2 * p - k) // s + 1)
        k, s = spec.kernel, spec.stride
        if k > h or k > w:
            raise ConfigurationError(
                f"layer {index} (maxpool) kernel {k} cannot consume input {shape}"
            )
        return (c, (h - k) // s + 1, (w - k) // s + 1)
    if spec.kind == "relu":
        return tuple(shape)
    if spec.kind == "flatten":
        return (int(np.prod(shape)),)
    if spec.kind == "fc":
        if len(shape) != 1:
            raise ConfigurationError(f"layer {index} (fc) needs a flat input, got {shape}")
        return (spec.units,)
    raise InternalError(f"unhandled layer kind {spec.kind}")


def infer_shapes(graph: NetworkGraph) -> list[tuple[int, ...]]:
    """Output shape after each layer; raises naming the offending layer."""
    shapes = []
    cur: tuple = tuple(graph.input_shape)
    for i, spec in enumerate(graph.layers):
        cur = _layer_output_shape(spec, cur, i)
        shapes.append(cur)
    return shapes


def parse_architecture(text: str) -> NetworkGraph:
    lines = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if line:
            lines.append(line)
    if not lines:
        raise ConfigurationError("empty architecture description")
    head = lines[0].split()
    if len(head) != 6 or head[0] != "input" or head[4] != "classes":
        raise ConfigurationError(
            f"architecture header must be 'input C H W classes K', got {lines[0]!r}"
        )
    try:
        c, h, w, k = int(head[1]), int(head[2]), int(head[3]), int(head[5])
    except ValueError as e:
        raise ConfigurationError(f"bad architecture header {lines[0]!r}: {e}") from e
    layers = []
    for line in lines[1:]:
        parts = line.split()
        kind, args = parts[0], parts[1:]
        try:
            if kind == "conv":
                ch, kk, ss, pp = (int(a) for a in args)
                layers.append(LayerSpec("conv", channels=ch, kernel=kk, stride=ss, padding=pp))
            elif kind == "maxpool":
                kk, ss = (int(a) for a in args)
                layers.append(LayerSpec("maxpool", kernel=kk, stride=ss))
            elif kind == "relu":
                layers.append(LayerSpec("relu"))
            elif kind == "flatten":
                layers.append(LayerSpec("flatten"))
            elif kind == "fc":
                (units,) = (int(a) for a in args)
                layers.append(LayerSpec("fc", units=units))
            else:
                raise ConfigurationError(f"unknown layer line {line!r}")
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"bad layer line {line!r}: {e}") from e
    return NetworkGraph(input_shape=(c, h, w), num_classes=k, layers=tuple(layers))


def load_architecture(path) -> NetworkGraph:
    return parse_architecture(Path(path).read_text())


def format_architecture(graph: NetworkGraph) -> str:
    c, h, w = graph.input_shape
    lines = [f"input {c} {h} {w} classes {graph.num_classes}"]
    lines += [spec.describe() for spec in graph.layers]
    return "\n".join(lines) + "\n"


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class Backbone:
    """A NetworkGraph instantiated with parameters.

    Layer parameters are named ``layer{i}.weight`` / ``layer{i}.bias``.
    Each layer owns a scratch workspace so repeated forward passes reuse
    warm buffers (see autodiff.conv2d).
    """

    graph: NetworkGraph
    params: dict[str, Parameter]
    shapes: list[tuple[int, ...]]
    trained: bool = False
    _ws: list[dict] = field(default_factory=list)

    @classmethod
    def build(cls, graph: NetworkGraph, seed: int = 0) -> "Backbone":
        rng = np.random.default_rng(seed)
        shapes = infer_shapes(graph)
        params: dict[str, Parameter] = {}
        cur = tuple(graph.input_shape)
        for i, spec in enumerate(graph.layers):
            if spec.kind == "conv":
                cin = cur[0]
                k = spec.kernel
                fan_in = cin * k * k
                fan_out = spec.channels * k * k
                params[f"layer{i}.weight"] = Parameter(
                    glorot_uniform(rng, (spec.channels, cin, k, k), fan_in, fan_out),
                    name=f"layer{i}.weight",
                )
                params[f"layer{i}.bias"] = Parameter(
                    np.zeros(spec.channels), name=f"layer{i}.bias"
                )
            elif spec.kind == "fc":
                d_in = cur[0]
                params[f"layer{i}.weight"] = Parameter(
                    glorot_uniform(rng, (d_in, spec.units), d_in, spec.units),
                    name=f"layer{i}.weight",
                )
                params[f"layer{i}.bias"] = Parameter(np.zeros(spec.units), name=f"layer{i}.bias")
            cur = shapes[i]
        return cls(graph=graph, params=params, shapes=shapes, _ws=[{} for _ in graph.layers])

    def apply_layer(self, index: int, x: Tensor) -> Tensor:
        spec = self.graph.layers[index]
        if spec.kind == "conv":
            return ad.conv2d(
                x,
                self.params[f"layer{index}.weight"],
                self.params[f"layer{index}.bias"],
                stride=spec.stride,
                padding=spec.padding,
                ws=self._ws[index],
            )
        if spec.kind == "maxpool":
            return ad.max_pool2d(x, spec.kernel, spec.stride)
        if spec.kind == "relu":
            return ad.relu(x)
        if spec.kind == "flatten":
            return ad.flatten(x)
        if spec.kind == "fc":
            return ad.linear(
                x, self.params[f"layer{index}.weight"], self.params[f"layer{index}.bias"]
            )
        raise InternalError(f"unhandled layer kind {spec.kind}")

    def forward_range(self, x: Tensor, start: int, stop: int) -> Tensor:
        """Apply layers [start, stop); composes bit-exactly with itself."""
        n = len(self.graph.layers)
        if not (0 <= start <= stop <= n):
            raise InternalError(f"forward range [{start}, {stop}) out of [0, {n}]")
        for i in range(start, stop):
            x = self.apply_layer(i, x)
        return x

    def forward_to(self, x: Tensor, layer_index: int) -> Tensor:
        """Activation after ``layer_index``."""
        if not (0 <= layer_index < len(self.graph.layers)):
            raise InternalError(f"layer index {layer_index} out of range")
        return self.forward_range(x, 0, layer_index + 1)

    def forward(self, x: Tensor) -> Tensor:
        """Final-classifier logits."""
        return self.forward_range(x, 0, len(self.graph.layers))

    def forward_collect(self, x: Tensor, taps) -> tuple[Tensor, dict[int, Tensor]]:
        """One pass returning final logits plus activations after each tap index."""
        taps = set(taps)
        grabbed: dict[int, Tensor] = {}
        for i in range(len(self.graph.layers)):
            x = self.apply_layer(i, x)
            if i in taps:
                grabbed[i] = x
        return x, grabbed

    def named_parameters(self) -> dict[str, Parameter]:
        return dict(self.params)

    def parameter_count(self) -> int:
        return sum(p.size for p in self.params.values())

    def freeze(self) -> None:
        for p in self.params.values():
            p.freeze()

    def unfreeze(self) -> None:
        for p in self.params.values():
            p.unfreeze()

    def load_state(self, state: dict[str, np.ndarray], prefix: str = "") -> None:
        for name, param in self.params.items():
            key = prefix + name
            if key not in state:
                raise ConfigurationError(f"checkpoint is missing parameter {key}")
            value = state[key]
            if value.shape != param.data.shape:
                raise ConfigurationError(
                    f"checkpoint parameter {key} has shape {value.shape}, expected {param.data.shape}"
                )
            param.data[...] = value
        self.trained = True
