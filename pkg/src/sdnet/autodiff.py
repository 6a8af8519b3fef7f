"""Dense float64 tensors with reverse-mode differentiation.

Covers exactly the operations the engine needs: 2d convolution, max /
average / mixed pooling, relu, flatten, fully connected layers, softmax,
cross-entropy (standalone and fused with softmax) and the Adam update.
Everything is double precision and deterministic: the same inputs and
parameters produce bit-identical outputs.

Ops that move a lot of memory (convolution) accept an optional ``ws``
dict used as a scratch workspace.  Reusing one dict per layer instance
avoids re-faulting large freshly mmapped buffers on every batch, which
dominates runtime on small machines.  Workspace contents carry no
semantic state, but a layer's backward pass must run before its next
forward pass whenever a workspace is shared between them.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigurationError, DataError, InternalError, NumericError

DTYPE = np.float64


class Tensor:
    """A dense n-d float64 array with an optional gradient slot.

    Operations link tensors into a tape; ``backward()`` replays the tape in
    reverse topological order and accumulates gradients on every tensor
    that ``requires_grad``.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backprop")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=DTYPE)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple = ()
        self._backprop = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=DTYPE)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self) -> None:
        """Propagate gradients from this tensor back through the tape."""
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._backprop is not None and node.grad is not None:
                node._backprop(node.grad)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, c: float) -> "Tensor":
        return scale(self, c)

    __rmul__ = __mul__

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


class Parameter(Tensor):
    """A learnable tensor with Adam moment accumulators and a freeze flag.

    Frozen parameters never receive optimizer updates and do not request
    gradients, so backpropagation prunes everything that only feeds them.
    """

    __slots__ = ("m", "v", "frozen", "name")

    def __init__(self, data, name: str = "", frozen: bool = False):
        super().__init__(data, requires_grad=not frozen)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.frozen = frozen
        self.name = name

    def freeze(self) -> None:
        self.frozen = True
        self.requires_grad = False

    def unfreeze(self) -> None:
        self.frozen = False
        self.requires_grad = True


def _result(data: np.ndarray, parents: tuple, backprop) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backprop = backprop
    return out


def _ws_buf(ws: dict | None, key: tuple, shape: tuple[int, ...]) -> np.ndarray:
    """Fetch (or lazily create) a persistent scratch array."""
    if ws is None:
        return np.zeros(shape, dtype=DTYPE)
    buf = ws.get(key)
    if buf is None or buf.shape != shape:
        buf = np.zeros(shape, dtype=DTYPE)
        ws[key] = buf
    return buf


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise InternalError(f"add shape mismatch: {a.data.shape} vs {b.data.shape}")

    def backprop(g):
        if a.requires_grad:
            a.accumulate_grad(g)
        if b.requires_grad:
            b.accumulate_grad(g)

    return _result(a.data + b.data, (a, b), backprop)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)

    def backprop(g):
        if a.requires_grad:
            a.accumulate_grad(g * c)

    return _result(a.data * c, (a,), backprop)


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride: int = 1,
    padding: int = 0,
    ws: dict | None = None,
) -> Tensor:
    """2d convolution, NCHW input and OIKK weights.

    Output height is (H + 2*padding - K) // stride + 1.  The forward pass
    gathers kernel windows into a channels-last column matrix and runs one
    matrix product; the backward pass reuses the gathered columns for the
    weight gradient and scatters the column gradient back per kernel offset.
    """
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ConfigurationError(
            f"conv2d expects 4d input and weights, got {x.data.shape} and {weight.data.shape}"
        )
    n, c, h, w = x.data.shape
    o, ci, kh, kw = weight.data.shape
    if ci != c:
        raise ConfigurationError(
            f"conv2d channel mismatch: input shape {x.data.shape} has {c} channels, "
            f"weight shape {weight.data.shape} expects {ci}"
        )
    if kh != kw:
        raise ConfigurationError(f"conv2d supports square kernels only, got {kh}x{kw}")
    k, s, p = kh, int(stride), int(padding)
    hp, wp = h + 2 * p, w + 2 * p
    if k > hp or k > wp:
        raise ConfigurationError(
            f"conv2d kernel {k} does not fit padded input {hp}x{wp} "
            f"(input shape {x.data.shape}, weight shape {weight.data.shape})"
        )
    ho = (hp - k) // s + 1
    wo = (wp - k) // s + 1
    if bias is not None and bias.data.shape != (o,):
        raise ConfigurationError(
            f"conv2d bias shape {bias.data.shape} does not match {o} output channels"
        )

    # Channels-last padded copy so window gathers read contiguous pixels.
    xpad = _ws_buf(ws, ("conv.xpad", n, hp, wp, c), (n, hp, wp, c))
    if p:
        xpad.fill(0.0)
    xpad[:, p : p + h, p : p + w, :] = x.data.transpose(0, 2, 3, 1)

    cols = _ws_buf(ws, ("conv.cols", n, ho, wo, c, k, k), (n, ho, wo, c, k, k))
    win = sliding_window_view(xpad, (k, k), axis=(1, 2))[:, ::s, ::s]
    np.copyto(cols, win)
    cols2 = cols.reshape(n * ho * wo, c * k * k)

    wflat = weight.data.reshape(o, c * k * k)
    out = cols2 @ wflat.T
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, o).transpose(0, 3, 1, 2).copy()

    def backprop(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, o)
        if bias is not None and bias.requires_grad:
            bias.accumulate_grad(g2.sum(axis=0))
        if weight.requires_grad:
            weight.accumulate_grad((g2.T @ cols2).reshape(weight.data.shape))
        if x.requires_grad:
            dcols = _ws_buf(ws, ("conv.dcols", n, ho, wo, c, k, k), (n, ho, wo, c, k, k))
            np.dot(g2, wflat, out=dcols.reshape(n * ho * wo, c * k * k))
            dxpad = _ws_buf(ws, ("conv.dxpad", n, hp, wp, c), (n, hp, wp, c))
            dxpad.fill(0.0)
            he = s * (ho - 1) + 1
            we = s * (wo - 1) + 1
            for ky in range(k):
                for kx in range(k):
                    dxpad[:, ky : ky + he : s, kx : kx + we : s, :] += dcols[:, :, :, :, ky, kx]
            x.accumulate_grad(dxpad[:, p : p + h, p : p + w, :].transpose(0, 3, 1, 2))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _result(out, parents, backprop)


def _pool_windows(x: Tensor, kernel: int, stride: int) -> tuple:
    if x.data.ndim != 4:
        raise ConfigurationError(f"pooling expects NCHW input, got shape {x.data.shape}")
    n, c, h, w = x.data.shape
    k, s = int(kernel), int(stride)
    if k > h or k > w:
        raise ConfigurationError(
            f"pooling kernel {k} larger than input spatial dims {h}x{w}"
        )
    ho = (h - k) // s + 1
    wo = (w - k) // s + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::s, ::s]
    flat = np.ascontiguousarray(win).reshape(n, c, ho, wo, k * k)
    return n, c, h, w, k, s, ho, wo, flat


def _scatter_max(x: Tensor, arg: np.ndarray, g: np.ndarray, k: int, s: int) -> None:
    n, c, h, w = x.data.shape
    ho, wo = g.shape[2], g.shape[3]
    ky, kx = arg // k, arg % k
    hh = np.arange(ho)[:, None] * s
    ww = np.arange(wo)[None, :] * s
    rows = hh[None, None] + ky
    colz = ww[None, None] + kx
    nn = np.arange(n)[:, None, None, None]
    cc = np.arange(c)[None, :, None, None]
    idx = ((nn * c + cc) * h + rows) * w + colz
    dx = np.zeros(n * c * h * w, dtype=DTYPE)
    np.add.at(dx, idx.ravel(), g.ravel())
    x.accumulate_grad(dx.reshape(n, c, h, w))


def _scatter_avg(x: Tensor, g: np.ndarray, k: int, s: int) -> None:
    n, c, h, w = x.data.shape
    ho, wo = g.shape[2], g.shape[3]
    share = g / (k * k)
    dx = np.zeros((n, c, h, w), dtype=DTYPE)
    he = s * (ho - 1) + 1
    we = s * (wo - 1) + 1
    for ky in range(k):
        for kx in range(k):
            dx[:, :, ky : ky + he : s, kx : kx + we : s] += share
    x.accumulate_grad(dx)


def max_pool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    n, c, h, w, k, s, ho, wo, flat = _pool_windows(x, kernel, stride)
    out = flat.max(axis=-1)
    arg = flat.argmax(axis=-1)

    def backprop(g):
        if x.requires_grad:
            _scatter_max(x, arg, g, k, s)

    return _result(out, (x,), backprop)


def avg_pool2d(x: Tensor, kernel: int, stride: int) -> Tensor:
    n, c, h, w, k, s, ho, wo, flat = _pool_windows(x, kernel, stride)
    out = flat.mean(axis=-1)

    def backprop(g):
        if x.requires_grad:
            _scatter_avg(x, g, k, s)

    return _result(out, (x,), backprop)


def mixed_pool2d(x: Tensor, kernel: int, stride: int, mix: Tensor) -> Tensor:
    """Learnable blend of max and average pooling over the same windows.

    output = m * maxpool + (1 - m) * avgpool with m = sigmoid(mix).
    ``mix`` is a scalar; its gradient is sum(g * (max - avg)) * m * (1 - m).
    """
    if mix.data.size != 1:
        raise ConfigurationError(f"mix parameter must be scalar, got shape {mix.data.shape}")
    n, c, h, w, k, s, ho, wo, flat = _pool_windows(x, kernel, stride)
    mx = flat.max(axis=-1)
    arg = flat.argmax(axis=-1)
    av = flat.mean(axis=-1)
    m = 1.0 / (1.0 + np.exp(-float(mix.data)))
    out = m * mx + (1.0 - m) * av

    def backprop(g):
        if mix.requires_grad:
            dm = float((g * (mx - av)).sum()) * m * (1.0 - m)
            mix.accumulate_grad(np.full_like(mix.data, dm))
        if x.requires_grad:
            _scatter_max(x, arg, m * g, k, s)
            _scatter_avg(x, (1.0 - m) * g, k, s)

    return _result(out, (x, mix), backprop)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0  # gradient at exactly 0 is defined as 0
    out = np.where(mask, x.data, 0.0)

    def backprop(g):
        if x.requires_grad:
            x.accumulate_grad(g * mask)

    return _result(out, (x,), backprop)


def flatten(x: Tensor) -> Tensor:
    n = x.data.shape[0]
    out = x.data.reshape(n, -1)

    def backprop(g):
        if x.requires_grad:
            x.accumulate_grad(g.reshape(x.data.shape))

    return _result(out, (x,), backprop)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Fully connected layer: x @ weight + bias, shapes (N,D) (D,K) (K,)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ConfigurationError(
            f"linear expects 2d input and weights, got {x.data.shape} and {weight.data.shape}"
        )
    if x.data.shape[1] != weight.data.shape[0]:
        raise ConfigurationError(
            f"linear dimension mismatch: input {x.data.shape} vs weights {weight.data.shape}"
        )
    if bias.data.shape != (weight.data.shape[1],):
        raise ConfigurationError(
            f"linear bias shape {bias.data.shape} does not match weights {weight.data.shape}"
        )
    out = x.data @ weight.data + bias.data

    def backprop(g):
        if x.requires_grad:
            x.accumulate_grad(g @ weight.data.T)
        if weight.requires_grad:
            weight.accumulate_grad(x.data.T @ g)
        if bias.requires_grad:
            bias.accumulate_grad(g.sum(axis=0))

    return _result(out, (x, weight, bias), backprop)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max-subtraction; rows sum to 1."""
    if not np.isfinite(logits.data).all():
        raise NumericError("softmax received non-finite logits")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=-1, keepdims=True)

    def backprop(g):
        if logits.requires_grad:
            dot = (g * p).sum(axis=-1, keepdims=True)
            logits.accumulate_grad(p * (g - dot))

    return _result(p, (logits,), backprop)


def _check_labels(labels, k: int) -> np.ndarray:
    lab = np.asarray(labels, dtype=np.int64)
    if lab.ndim != 1:
        raise DataError(f"labels must be a 1d sequence, got shape {lab.shape}")
    if lab.size and (lab.min() < 0 or lab.max() >= k):
        raise DataError(f"label out of range [0, {k}): found {int(lab.min())}..{int(lab.max())}")
    return lab


def cross_entropy(probabilities: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood from probability rows, clamped at 1e-12."""
    n, k = probabilities.data.shape
    lab = _check_labels(labels, k)
    if lab.size != n:
        raise DataError(f"{lab.size} labels for {n} probability rows")
    raw = probabilities.data[np.arange(n), lab]
    picked = np.maximum(raw, 1e-12)
    loss = -np.log(picked).mean()

    def backprop(g):
        if probabilities.requires_grad:
            dp = np.zeros_like(probabilities.data)
            # the clamp kills the gradient where it is active
            dp[np.arange(n), lab] = np.where(raw >= 1e-12, -float(g) / (picked * n), 0.0)
            probabilities.accumulate_grad(dp)

    return _result(loss, (probabilities,), backprop)


def softmax_cross_entropy(logits: Tensor, labels) -> tuple[Tensor, np.ndarray]:
    """Fused softmax + cross-entropy.

    Returns (loss, probabilities).  The fused backward pass is
    (p - onehot) / N, avoiding the cancellation of the chained form.
    """
    if not np.isfinite(logits.data).all():
        raise NumericError("softmax received non-finite logits")
    n, k = logits.data.shape
    lab = _check_labels(labels, k)
    if lab.size != n:
        raise DataError(f"{lab.size} labels for {n} logit rows")
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    sums = e.sum(axis=-1, keepdims=True)
    p = e / sums
    logp = z - np.log(sums)
    loss = -logp[np.arange(n), lab].mean()

    def backprop(g):
        if logits.requires_grad:
            d = p.copy()
            d[np.arange(n), lab] -= 1.0
            logits.accumulate_grad(d * (float(g) / n))

    return _result(loss, (logits,), backprop), p


def adam_update(
    param: Parameter,
    grad: np.ndarray,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    step: int = 1,
) -> Parameter:
    """Bias-corrected Adam step, mutating ``param`` in place.

    Frozen parameters are returned unchanged, moments untouched.
    """
    if param.frozen:
        return param
    if step < 1:
        raise InternalError(f"adam step must be >= 1, got {step}")
    g = np.asarray(grad, dtype=DTYPE)
    if g.shape != param.data.shape:
        raise InternalError(
            f"adam gradient shape {g.shape} does not match parameter {param.data.shape}"
        )
    param.m *= beta1
    param.m += (1.0 - beta1) * g
    param.v *= beta2
    param.v += (1.0 - beta2) * np.square(g)
    mhat = param.m / (1.0 - beta1**step)
    vhat = param.v / (1.0 - beta2**step)
    param.data -= lr * mhat / (np.sqrt(vhat) + eps)
    return param
