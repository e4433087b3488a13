"""Forward and backward kernels for the layers of the segmentation network.

Tensors are plain ``numpy`` arrays in NCHW layout. Production code runs in
float32; every kernel is dtype-generic so gradient checks can run the same code
in float64.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ContractError, CorruptIndexError, DegenerateBatchError

Tensor = np.ndarray

BACKGROUND = 0
AIRCRAFT = 1

LOG_CLAMP = 1e-12


# --------------------------------------------------------------------------- conv


def _check_conv(x: Tensor, w: Tensor) -> None:
    if x.ndim != 4:
        raise ContractError(f"conv input must be NCHW, got shape {x.shape}")
    if w.ndim != 4 or w.shape[2:] != (3, 3):
        raise ContractError(f"conv kernel must be [Cout, Cin, 3, 3], got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ContractError(
            f"input has {x.shape[1]} channels but kernel expects {w.shape[1]}"
        )


def _im2col(x: Tensor) -> Tensor:
    """Return a (N, H, W, C, 3, 3) view-backed copy of zero-padded 3x3 patches."""
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    # sliding_window_view gives (N, C, H, W, 3, 3)
    return sliding_window_view(xp, (3, 3), axis=(2, 3)).transpose(0, 2, 3, 1, 4, 5)


def conv2d_forward(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """3x3 convolution, stride 1, zero padding 1 (output keeps the input size)."""
    _check_conv(x, w)
    if b.shape != (w.shape[0],):
        raise ContractError(f"bias shape {b.shape} does not match {w.shape[0]} filters")
    n, _, h, wd = x.shape
    cols = _im2col(x).reshape(n * h * wd, -1)
    out = cols @ w.reshape(w.shape[0], -1).T
    out += b
    return np.ascontiguousarray(out.reshape(n, h, wd, -1).transpose(0, 3, 1, 2))


def conv2d_backward(
    x: Tensor, w: Tensor, grad_out: Tensor
) -> tuple[Tensor, Tensor, Tensor]:
    _check_conv(x, w)
    expected = (x.shape[0], w.shape[0], x.shape[2], x.shape[3])
    if grad_out.shape != expected:
        raise ContractError(f"grad_out shape {grad_out.shape}, expected {expected}")
    n, _, h, wd = x.shape
    cout = w.shape[0]
    g = grad_out.transpose(0, 2, 3, 1).reshape(n * h * wd, cout)
    cols = _im2col(x).reshape(n * h * wd, -1)
    grad_w = (g.T @ cols).reshape(w.shape)
    grad_b = g.sum(axis=0)
    # Transposed conv at stride 1 is a conv with the spatially flipped,
    # channel-swapped kernel.
    w_t = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    grad_x = conv2d_forward(grad_out, w_t, np.zeros(w_t.shape[0], dtype=x.dtype))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------- batchnorm


@dataclass
class BatchNormState:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1

    @classmethod
    def fresh(cls, channels: int, dtype=np.float32) -> "BatchNormState":
        return cls(
            gamma=np.ones(channels, dtype),
            beta=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]

    def astype(self, dtype) -> "BatchNormState":
        return BatchNormState(
            self.gamma.astype(dtype),
            self.beta.astype(dtype),
            self.running_mean.astype(dtype),
            self.running_var.astype(dtype),
            self.eps,
            self.momentum,
        )


@dataclass
class BatchNormCache:
    xhat: Tensor
    inv_std: np.ndarray


def batchnorm_forward(
    x: Tensor, state: BatchNormState, training: bool
) -> tuple[Tensor, BatchNormCache | None]:
    """Per-channel batch normalisation.

    In training mode the batch statistics (population variance over N, H, W)
    are used and the running estimates are updated in place; the returned
    cache feeds :func:`batchnorm_backward`. Inference mode uses the running
    estimates and returns no cache.
    """
    if x.ndim != 4 or x.shape[1] != state.channels:
        raise ContractError(
            f"batchnorm expects {state.channels} channels, got shape {x.shape}"
        )
    shape = (1, -1, 1, 1)
    if not training:
        inv_std = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (x - state.running_mean.reshape(shape)) * inv_std.reshape(shape)
        return (state.gamma.reshape(shape) * xhat + state.beta.reshape(shape)).astype(
            x.dtype, copy=False
        ), None

    count = x.shape[0] * x.shape[2] * x.shape[3]
    if count < 2:
        raise DegenerateBatchError(
            "training-mode batchnorm needs at least 2 values per channel"
        )
    mean = x.mean(axis=(0, 2, 3))
    centered = x - mean.reshape(shape)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(x.dtype)
    xhat = centered * inv_std.reshape(shape)
    out = state.gamma.reshape(shape) * xhat + state.beta.reshape(shape)

    m = state.momentum
    state.running_mean[...] = (1 - m) * state.running_mean + m * mean
    state.running_var[...] = (1 - m) * state.running_var + m * var
    return out, BatchNormCache(xhat=xhat, inv_std=inv_std)


def batchnorm_backward(
    state: BatchNormState, grad_out: Tensor, cache: BatchNormCache | None
) -> tuple[Tensor, np.ndarray, np.ndarray]:
    if cache is None:
        raise ContractError("batchnorm_backward needs the cache of a training forward")
    if grad_out.shape != cache.xhat.shape:
        raise ContractError(
            f"grad_out shape {grad_out.shape} != forward shape {cache.xhat.shape}"
        )
    shape = (1, -1, 1, 1)
    xhat = cache.xhat
    grad_beta = grad_out.sum(axis=(0, 2, 3))
    grad_gamma = (grad_out * xhat).sum(axis=(0, 2, 3))
    count = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    g = grad_out * state.gamma.reshape(shape)
    grad_x = (
        g
        - (grad_beta * state.gamma / count).reshape(shape)
        - xhat * (grad_gamma * state.gamma / count).reshape(shape)
    ) * cache.inv_std.reshape(shape)
    return grad_x.astype(grad_out.dtype, copy=False), grad_gamma, grad_beta


# --------------------------------------------------------------------------- relu


def relu(x: Tensor) -> Tensor:
    return np.maximum(x, 0)


def relu_backward(x: Tensor, grad_out: Tensor) -> Tensor:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


# -------------------------------------------------------------------- max pooling


def maxpool2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Disjoint 2x2 max pooling.

    Returns the pooled tensor and, for every pooled element, the flat
    row-major offset ``row * W + col`` of its argmax inside the input plane.
    Ties resolve to the smallest offset.
    """
    if x.ndim != 4:
        raise ContractError(f"maxpool input must be NCHW, got {x.shape}")
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"maxpool2x2 needs even H and W, got {h}x{w}")
    ho, wo = h // 2, w // 2
    # windows[..., k] with k = 2*dy + dx, which is row-major order inside the window
    windows = x.reshape(n, c, ho, 2, wo, 2).transpose(0, 1, 2, 4, 3, 5).reshape(
        n, c, ho, wo, 4
    )
    k = windows.argmax(axis=-1)
    out = np.take_along_axis(windows, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(ho).reshape(ho, 1) + k // 2
    cols = 2 * np.arange(wo).reshape(1, wo) + k % 2
    return out, (rows * w + cols).astype(np.int64)


def maxunpool2x2(x: Tensor, indices: np.ndarray, out_h: int, out_w: int) -> Tensor:
    """Scatter ``x`` back to the memorised argmax positions; zeros elsewhere."""
    if x.shape != indices.shape:
        raise ContractError(f"unpool input {x.shape} and indices {indices.shape} differ")
    n, c, h, w = x.shape
    if (out_h // 2, out_w // 2) != (h, w) or out_h % 2 or out_w % 2:
        raise ContractError(f"cannot unpool {h}x{w} into {out_h}x{out_w}")
    rows, cols = np.divmod(indices, out_w)
    win_r = np.arange(h).reshape(h, 1)
    win_c = np.arange(w).reshape(1, w)
    if (
        indices.min(initial=0) < 0
        or indices.max(initial=0) >= out_h * out_w
        or np.any(rows // 2 != win_r)
        or np.any(cols // 2 != win_c)
    ):
        raise CorruptIndexError("pool index outside its 2x2 window")
    out = np.zeros((n, c, out_h * out_w), dtype=x.dtype)
    np.put_along_axis(out, indices.reshape(n, c, -1), x.reshape(n, c, -1), axis=-1)
    return out.reshape(n, c, out_h, out_w)


def maxpool2x2_backward(grad_out: Tensor, indices: np.ndarray, in_h: int, in_w: int) -> Tensor:
    return maxunpool2x2(grad_out, indices, in_h, in_w)


def maxunpool2x2_backward(grad_out: Tensor, indices: np.ndarray) -> Tensor:
    n, c = grad_out.shape[:2]
    flat = grad_out.reshape(n, c, -1)
    return np.take_along_axis(flat, indices.reshape(n, c, -1), axis=-1).reshape(
        indices.shape
    )


# ------------------------------------------------------------------ softmax / loss


def softmax_pixelwise(logits: Tensor) -> Tensor:
    if logits.ndim != 4 or logits.shape[1] != 2:
        raise ContractError(f"softmax expects [N, 2, H, W], got {logits.shape}")
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def weighted_cross_entropy(
    probs: Tensor, labels: np.ndarray, class_weights, normalization: str = "pixel"
) -> tuple[float, Tensor]:
    """Class-weighted pixel cross entropy.

    ``labels`` is an (N, H, W) array of class ids (0 background, 1 aircraft).
    With ``normalization="pixel"`` the weighted sum is divided by the pixel
    count N*H*W; with ``"image"`` it is divided by the batch size N only.
    Returns the loss and its gradient with respect to the pre-softmax logits.
    """
    if probs.ndim != 4 or labels.shape != (probs.shape[0],) + probs.shape[2:]:
        raise ContractError(f"labels {labels.shape} do not match probs {probs.shape}")
    if normalization == "pixel":
        denom = labels.size
    elif normalization == "image":
        denom = labels.shape[0]
    else:
        raise ContractError(f"unknown loss normalization {normalization!r}")
    weights = np.asarray(class_weights, dtype=probs.dtype)
    lab = labels.astype(np.int64)
    pixel_w = weights[lab]
    p_true = np.take_along_axis(probs, lab[:, None], axis=1)[:, 0]
    loss = float(-(pixel_w * np.log(np.maximum(p_true, LOG_CLAMP))).sum() / denom)

    onehot = np.zeros_like(probs)
    np.put_along_axis(onehot, lab[:, None], 1, axis=1)
    grad = (probs - onehot) * (pixel_w / denom)[:, None]
    return loss, grad.astype(probs.dtype, copy=False)


# ------------------------------------------------------------------ init / optim


def msra_init(shape, rng: np.random.Generator, dtype=np.float32) -> Tensor:
    """He/MSRA normal init: zero mean, variance 2 / fan_in."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 4:
        raise ContractError(f"msra_init expects a conv weight shape, got {shape}")
    fan_in = shape[1] * shape[2] * shape[3]
    std = np.sqrt(2.0 / fan_in)
    return (rng.standard_normal(shape) * std).astype(dtype)


@dataclass
class SgdState:
    learn_rate: float = 0.001
    momentum: float = 0.9
    l2: float = 0.0005
    velocity: list[np.ndarray] = field(default_factory=list)
    decay: list[bool] = field(default_factory=list)

    @classmethod
    def for_params(cls, params, decay=None, **kw) -> "SgdState":
        params = list(params)
        return cls(
            velocity=[np.zeros_like(p) for p in params],
            decay=list(decay) if decay is not None else [True] * len(params),
            **kw,
        )


def sgd_momentum_step(params, grads, state: SgdState):
    """One in-place SGD-with-momentum update.

    ``g = grad + l2 * param`` (only for parameters flagged in ``state.decay``),
    ``v = momentum * v + g``, ``param -= learn_rate * v``.
    """
    params = list(params)
    grads = list(grads)
    if not (len(params) == len(grads) == len(state.velocity) == len(state.decay)):
        raise ContractError("params, grads, velocity and decay flags differ in length")
    for p, g, v, decay in zip(params, grads, state.velocity, state.decay):
        if p.shape != g.shape or p.shape != v.shape:
            raise ContractError(f"shape mismatch: param {p.shape}, grad {g.shape}, velocity {v.shape}")
        if decay and state.l2:
            g = g + state.l2 * p
        v *= state.momentum
        v += g
        p -= state.learn_rate * v
    return params, state
