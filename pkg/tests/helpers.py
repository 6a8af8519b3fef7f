"""Shared test utilities: finite-difference gradient oracle, naive FLOPs
counting, random graphs and synthetic traces."""

import numpy as np

from sdnet.errors import ConfigurationError
from sdnet.exits import PredictionTrace
from sdnet.graph import LayerSpec, NetworkGraph


def numerical_grad(f, arr, h=1e-4):
    """Central-difference gradient of scalar-valued f with respect to arr,
    perturbing arr in place."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def assert_grad_close(analytic, numeric, rtol=1e-4, atol=1e-8, what=""):
    analytic = np.asarray(analytic)
    diff = np.abs(analytic - numeric)
    tol = rtol * np.maximum(np.abs(analytic), np.abs(numeric)) + atol
    worst = (diff - tol).max()
    assert (diff <= tol).all(), (
        f"{what}: gradient mismatch, worst excess {worst:.3g}, "
        f"max analytic {np.abs(analytic).max():.3g}, max numeric {np.abs(numeric).max():.3g}"
    )


def naive_layer_flops(spec: LayerSpec, input_shape) -> int:
    """Count operations one output element at a time."""
    total = 0
    if spec.kind == "conv":
        c, h, w = input_shape
        k, s, p = spec.kernel, spec.stride, spec.padding
        ho = (h + 2 * p - k) // s + 1
        wo = (w + 2 * p - k) // s + 1
        for _ in range(spec.channels):
            for _ in range(ho):
                for _ in range(wo):
                    total += 2 * k * k * c  # one MAC per kernel cell per input channel
    elif spec.kind == "maxpool":
        c, h, w = input_shape
        k, s = spec.kernel, spec.stride
        ho = (h - k) // s + 1
        wo = (w - k) // s + 1
        for _ in range(c):
            for _ in range(ho):
                for _ in range(wo):
                    total += k * k
    elif spec.kind == "relu":
        total = int(np.prod(input_shape))
    elif spec.kind == "fc":
        for _ in range(input_shape[0]):
            for _ in range(spec.units):
                total += 2
    return total


def random_small_graph(rng) -> NetworkGraph:
    """A random valid conv/relu/pool stack of at most six layers."""
    layers = []
    h = int(rng.integers(6, 11))
    c = int(rng.integers(1, 4))
    for _ in range(int(rng.integers(1, 4))):
        kind = rng.choice(["conv", "relu", "maxpool"])
        if kind == "conv":
            layers.append(LayerSpec("conv", channels=int(rng.integers(1, 5)), kernel=3,
                                    stride=1, padding=1))
        elif kind == "relu":
            layers.append(LayerSpec("relu"))
        else:
            layers.append(LayerSpec("maxpool", kernel=2, stride=2))
    layers.append(LayerSpec("flatten"))
    layers.append(LayerSpec("fc", units=3))
    try:
        return NetworkGraph(input_shape=(c, h, h), num_classes=3, layers=tuple(layers))
    except ConfigurationError:
        return random_small_graph(rng)  # too much pooling for the input; redraw


def make_trace(prob_rows, costs=None):
    probs = np.asarray(prob_rows, dtype=np.float64)
    if costs is None:
        costs = tuple(100 * (i + 1) for i in range(len(probs)))
    return PredictionTrace(probs=probs, exit_flops=tuple(costs))


def random_traces(rng, n, heads, k, costs=None):
    """Random valid trace set: rows are softmax-normalized."""
    raw = rng.random((n, heads, k)) + 1e-3
    probs = raw / raw.sum(axis=2, keepdims=True)
    if costs is None:
        costs = tuple(100 * (i + 1) for i in range(heads))
    return [PredictionTrace(probs=p, exit_flops=tuple(costs)) for p in probs]
