"""Dense NCHW tensor kernels with hand-written backward passes.

Tensors are plain ``numpy`` arrays of rank 4 laid out as
(batch, channels, height, width).  Every function here is pure: nothing is
mutated in place, and batch-norm returns its updated running statistics
instead of writing them back.
"""

from dataclasses import dataclass, replace

import numpy as np
from . import _kernels
from .errors import DivisibilityError, LabelError, ShapeError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.99


def check_tensor4(x, name="input"):
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{name} must be rank 4 (batch, channels, height, width), got shape {x.shape}", dim="rank")
    for dim, size in zip(("batch", "channels", "height", "width"), x.shape):
        if size < 1:
            raise ShapeError(f"{name} {dim} must be >= 1, got {size}", dim=dim)
    return x


@dataclass(frozen=True)
class ConvWeights:
    """Grouped convolution parameters.

    ``kernel`` has shape (out_channels, in_channels_per_group, kh, kw); output
    block g only ever sees input block g.
    """

    kernel: np.ndarray
    bias: np.ndarray | None = None
    groups: int = 1

    def __post_init__(self):
        if self.kernel.ndim != 4:
            raise ShapeError(f"kernel must be rank 4, got shape {self.kernel.shape}", dim="kernel")
        if self.groups < 1:
            raise DivisibilityError(f"groups must be >= 1, got {self.groups}")
        if self.out_channels % self.groups:
            raise DivisibilityError(
                f"out_channels {self.out_channels} not divisible by groups {self.groups}"
            )
        if self.bias is not None and self.bias.shape != (self.out_channels,):
            raise ShapeError(
                f"bias must have shape ({self.out_channels},), got {self.bias.shape}", dim="bias"
            )

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels_per_group(self):
        return self.kernel.shape[1]

    @property
    def in_channels(self):
        return self.kernel.shape[1] * self.groups

    @property
    def kernel_size(self):
        return self.kernel.shape[2], self.kernel.shape[3]


def conv_output_hw(h, w, kernel_hw, stride, padding):
    kh, kw = kernel_hw
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel {kh}x{kw} with padding {padding}", dim="height")
    return ho, wo


def _check_conv_args(x, w, stride, padding):
    x = check_tensor4(x)
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if padding < 0:
        raise ValueError(f"padding must be >= 0, got {padding}")
    c = x.shape[1]
    if c % w.groups:
        raise DivisibilityError(f"input channels {c} not divisible by groups {w.groups}")
    if c != w.in_channels:
        raise ShapeError(
            f"channels: input has {c}, weights expect {w.groups} x {w.in_channels_per_group} = {w.in_channels}",
            dim="channels",
        )
    return x


def phase_split(x, padding, stride):
    """Zero-padded input split into stride phases, the layout the kernels read."""
    b, c, h, w = x.shape
    hq = -(-(h + 2 * padding) // stride)
    wq = -(-(w + 2 * padding) // stride)
    out = np.zeros((b, c * stride * stride, hq, wq), dtype=x.dtype)
    _kernels.pad_phase_split(np.ascontiguousarray(x), padding, stride, out)
    return out


def _kernel_dtype(*dtypes):
    dtype = np.result_type(*dtypes)
    return dtype if dtype in (np.float32, np.float64) else np.dtype(np.float64)


def conv2d_forward(x, w, stride=1, padding=0):
    x = _check_conv_args(x, w, stride, padding)
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], w.kernel_size, stride, padding)
    dtype = _kernel_dtype(x.dtype, w.kernel.dtype)
    xph = phase_split(x.astype(dtype, copy=False), padding, stride)
    return conv2d_forward_phased(xph, w, stride, (ho, wo))


def conv2d_forward_phased(xph, w, stride, out_hw):
    """Forward pass on an input already prepared by :func:`phase_split`."""
    dtype = xph.dtype
    acc = np.zeros((xph.shape[0], w.out_channels) + tuple(out_hw))
    _kernels.conv_fwd(xph, np.ascontiguousarray(w.kernel, dtype=dtype), acc, stride, w.groups)
    if w.bias is not None:
        acc += w.bias.reshape(1, -1, 1, 1)
    return acc.astype(dtype, copy=False)


def conv2d_backward(x, w, stride, padding, grad_output, input_grad=True):
    """Return (grad_input, grad_kernel, grad_bias) for :func:`conv2d_forward`.

    ``grad_bias`` is ``None`` when the weights carry no bias; ``grad_input``
    is ``None`` when ``input_grad`` is false (first layer of a network).
    """
    x = _check_conv_args(x, w, stride, padding)
    ho, wo = conv_output_hw(x.shape[2], x.shape[3], w.kernel_size, stride, padding)
    expected = (x.shape[0], w.out_channels, ho, wo)
    grad_output = np.asarray(grad_output)
    if grad_output.shape != expected:
        dims = ("batch", "channels", "height", "width")
        bad = next((d for d, a, e in zip(dims, grad_output.shape, expected) if a != e), "rank")
        raise ShapeError(f"{bad}: grad_output shape {grad_output.shape} != forward output shape {expected}", dim=bad)
    dtype = _kernel_dtype(x.dtype, w.kernel.dtype, grad_output.dtype)
    xph = phase_split(x.astype(dtype, copy=False), padding, stride)
    return conv2d_backward_phased(xph, x.shape, w, stride, padding, grad_output, input_grad)


def conv2d_backward_phased(xph, x_shape, w, stride, padding, grad_output, input_grad=True):
    dtype = xph.dtype
    go = np.ascontiguousarray(grad_output, dtype=dtype)
    gk = np.zeros(w.kernel.shape)
    _kernels.conv_bwd_kernel(xph, go, gk, stride, w.groups)
    grad_bias = None
    if w.bias is not None:
        grad_bias = go.sum(axis=(0, 2, 3), dtype=np.float64).astype(dtype)
    grad_input = None
    if input_grad:
        dph = np.zeros(xph.shape)
        _kernels.conv_bwd_input(go, np.ascontiguousarray(w.kernel, dtype=dtype), dph, stride, w.groups)
        grad_input = np.empty(x_shape, dtype=dtype)
        _kernels.phase_merge_crop(dph, padding, stride, grad_input)
    return grad_input, gk.astype(dtype, copy=False), grad_bias


def reorder_permutation(n, groups):
    """Source channel for every output position of :func:`channel_reorder`."""
    if groups < 1 or n % groups:
        raise DivisibilityError(f"{n} channels not divisible by {groups} groups")
    return np.arange(n).reshape(groups, n // groups).T.reshape(-1)


def channel_reorder(x, groups):
    x = check_tensor4(x)
    b, n, h, w = x.shape
    if groups < 1 or n % groups:
        raise DivisibilityError(f"{n} channels not divisible by {groups} groups")
    return x.reshape(b, groups, n // groups, h, w).swapaxes(1, 2).reshape(b, n, h, w)


def channel_reorder_backward(grad_output, groups):
    n = grad_output.shape[1]
    return channel_reorder(grad_output, n // groups)


@dataclass(frozen=True)
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = BN_EPSILON
    momentum: float = BN_MOMENTUM

    @classmethod
    def fresh(cls, channels, dtype=np.float64, **kw):
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
            **kw,
        )

    def __post_init__(self):
        n = self.gamma.shape[0]
        for name in ("beta", "running_mean", "running_var"):
            if getattr(self, name).shape != (n,):
                raise ShapeError(f"{name} length differs from gamma length {n}", dim="channels")
        if np.any(self.running_var < 0):
            raise ValueError("running_var must be non-negative")
        if self.epsilon <= 0 or not 0 < self.momentum < 1:
            raise ValueError("epsilon must be > 0 and momentum in (0, 1)")

    @property
    def channels(self):
        return self.gamma.shape[0]


def batchnorm_forward(x, state, training):
    """Returns ``(output, new_state, cache)``; ``cache`` feeds the backward pass."""
    x = check_tensor4(x)
    if x.shape[1] != state.channels:
        raise ShapeError(f"channels: input has {x.shape[1]}, batch-norm state has {state.channels}", dim="channels")
    shape = (1, -1, 1, 1)
    if training:
        mean = x.mean(axis=(0, 2, 3))
        var = x.var(axis=(0, 2, 3))
        m = state.momentum
        new_state = replace(
            state,
            running_mean=m * state.running_mean + (1 - m) * mean,
            running_var=m * state.running_var + (1 - m) * var,
        )
    else:
        mean, var = state.running_mean, state.running_var
        new_state = state
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = (x - mean.reshape(shape)) * inv_std.reshape(shape)
    out = xhat * state.gamma.reshape(shape) + state.beta.reshape(shape)
    return out, new_state, (xhat, inv_std, state.gamma, training)


def batchnorm_backward(grad_output, cache):
    """Returns ``(grad_input, grad_gamma, grad_beta)``."""
    xhat, inv_std, gamma, training = cache
    shape = (1, -1, 1, 1)
    grad_gamma = (grad_output * xhat).sum(axis=(0, 2, 3))
    grad_beta = grad_output.sum(axis=(0, 2, 3))
    dxhat = grad_output * gamma.reshape(shape)
    if not training:
        return dxhat * inv_std.reshape(shape), grad_gamma, grad_beta
    n = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    grad_input = (inv_std.reshape(shape) / n) * (
        n * dxhat
        - dxhat.sum(axis=(0, 2, 3)).reshape(shape)
        - xhat * (dxhat * xhat).sum(axis=(0, 2, 3)).reshape(shape)
    )
    return grad_input, grad_gamma, grad_beta


def batchnorm_relu_forward(x, state, training):
    """Fused ``relu(batchnorm(x))``; same contract as :func:`batchnorm_forward`."""
    x = np.ascontiguousarray(check_tensor4(x))
    if x.shape[1] != state.channels:
        raise ShapeError(f"channels: input has {x.shape[1]}, batch-norm state has {state.channels}", dim="channels")
    if training:
        mean, var = _kernels.channel_moments(x)
        m = state.momentum
        new_state = replace(
            state,
            running_mean=m * state.running_mean + (1 - m) * mean,
            running_var=m * state.running_var + (1 - m) * var,
        )
    else:
        mean, var = state.running_mean, state.running_var
        new_state = state
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    _kernels.bn_relu_fwd(x, mean, inv_std, state.gamma, state.beta, xhat, out)
    return out, new_state, (out, xhat, inv_std, state.gamma, training)


def batchnorm_relu_backward(grad_output, cache):
    out, xhat, inv_std, gamma, training = cache
    gx = np.empty_like(out)
    gg, gb = _kernels.bn_relu_bwd(np.ascontiguousarray(grad_output, dtype=out.dtype), out, xhat, inv_std, gamma, training, gx)
    return gx, gg, gb


def relu_forward(x):
    return np.maximum(x, 0)


def relu_backward(x, grad_output):
    # subgradient at exactly 0 is taken as 0
    return np.where(x > 0, grad_output, 0)


def softmax_channels(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def softmax_ce_per_tile(logits, labels):
    """Mean per-tile categorical cross-entropy and its gradient.

    ``labels`` is an integer array (batch, rows, cols) with values in {0, 1, 2}.
    """
    logits = check_tensor4(logits, "logits")
    labels = np.asarray(labels)
    b, k, rows, cols = logits.shape
    if labels.shape != (b, rows, cols):
        raise ShapeError(f"labels shape {labels.shape} != {(b, rows, cols)}", dim="labels")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise LabelError(f"labels must lie in [0, {k - 1}]")
    labels = labels.astype(np.intp)
    z = logits - logits.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(z).sum(axis=1, keepdims=True))
    log_p = z - log_norm
    picked = np.take_along_axis(log_p, labels[:, None], axis=1)
    n = b * rows * cols
    loss = float(-picked.sum() / n)
    grad = np.exp(log_p)
    np.put_along_axis(grad, labels[:, None], np.take_along_axis(grad, labels[:, None], axis=1) - 1, axis=1)
    return loss, grad / n


def concat_channels(a, b):
    a = check_tensor4(a, "a")
    b = check_tensor4(b, "b")
    for dim, i in (("batch", 0), ("height", 2), ("width", 3)):
        if a.shape[i] != b.shape[i]:
            raise ShapeError(f"{dim}: {a.shape[i]} vs {b.shape[i]}", dim=dim)
    return np.concatenate([a, b], axis=1)


def split_channels(x, first):
    return x[:, :first], x[:, first:]
