"""Differentiable primitives used by the DcardNet graph."""

import numpy as np

from dcardnet import kernels
from dcardnet.tensor import Function, Tensor


class ShapeError(ValueError):
    pass


def _typed(x, value):
    return x.dtype.type(value)


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


class Conv2d(Function):
    def forward(self, x, w, b=None, stride=1, pad=0):
        N, C, H, W = x.shape
        Cout, Cin, kh, kw = w.shape
        self.x_shape, self.w_shape = x.shape, w.shape
        self.geom = (kh, kw, stride, pad)
        OH, OW = kernels.out_size(H, kh, stride, pad), kernels.out_size(W, kw, stride, pad)
        self.pointwise = kh == 1 and kw == 1 and stride == 1 and pad == 0
        if self.pointwise:
            cols = x.reshape(N, C, H * W)
        else:
            cols = kernels.im2col(x, kh, kw, stride, pad)
        self.cols = cols
        self.wmat = w.reshape(Cout, Cin * kh * kw)
        out = np.matmul(self.wmat, cols)
        if b is not None:
            out += b[None, :, None]
        return out.reshape(N, Cout, OH, OW)

    def backward(self, grad):
        N, Cout = grad.shape[:2]
        g = grad.reshape(N, Cout, -1)
        dw = np.matmul(g, self.cols.transpose(0, 2, 1)).sum(axis=0).reshape(self.w_shape)
        dx = None
        if self.needs_grad[0]:
            dcols = np.matmul(self.wmat.T, g)
            if self.pointwise:
                dx = dcols.reshape(self.x_shape)
            else:
                dx = kernels.col2im(dcols, self.x_shape, *self.geom)
        if len(self.needs_grad) == 3:
            return dx, dw, g.sum(axis=(0, 2))
        return dx, dw


def conv2d(x, weight, bias=None, stride=1, pad=0):
    """2-D cross-correlation of an N x Cin x H x W tensor with a Cout x Cin x k x k kernel.

    Output spatial size is ``floor((H + 2*pad - k) / stride) + 1``.
    """
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeError(f"conv2d expects 4-d input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(f"conv2d channel mismatch: input has {x.shape[1]}, weight expects {weight.shape[1]}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeError(f"conv2d bias shape {bias.shape} != ({weight.shape[0]},)")
    k = weight.shape[2]
    oh = kernels.out_size(x.shape[2], k, stride, pad)
    ow = kernels.out_size(x.shape[3], weight.shape[3], stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"conv2d output size {oh}x{ow} is not positive for input {x.shape}")
    if bias is None:
        return Conv2d.apply(x, weight, stride=stride, pad=pad)
    return Conv2d.apply(x, weight, bias, stride=stride, pad=pad)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------


class MaxPool2d(Function):
    def forward(self, x, k, stride, pad):
        self.x_shape = x.shape
        out, self.argmax = kernels.maxpool_forward(x, k, stride, pad)
        return out

    def backward(self, grad):
        return (kernels.maxpool_backward(grad, self.argmax, self.x_shape),)


class AvgPool2d(Function):
    def forward(self, x, k, stride, pad):
        self.x_shape = x.shape
        self.geom = (k, stride, pad)
        return kernels.avgpool_forward(x, k, stride, pad)

    def backward(self, grad):
        return (kernels.avgpool_backward(grad, self.x_shape, *self.geom),)


class GlobalAvgPool(Function):
    def forward(self, x):
        self.x_shape = x.shape
        return x.mean(axis=(2, 3))

    def backward(self, grad):
        N, C, H, W = self.x_shape
        g = grad * _typed(grad, 1.0 / (H * W))
        return (np.broadcast_to(g[:, :, None, None], self.x_shape).copy(),)


def pool2d(x, mode, k=2, stride=2, pad=0):
    """Max, average or global-average pooling.

    ``max`` routes the gradient to the first maximal element in scan order.
    ``avg`` divides by k*k, counting padded taps as zeros. ``global_avg``
    ignores k/stride/pad and returns an N x C tensor.
    """
    if x.ndim != 4:
        raise ShapeError(f"pool2d expects a 4-d input, got {x.shape}")
    if mode == "global_avg":
        return GlobalAvgPool.apply(x)
    if mode not in ("max", "avg"):
        raise ValueError(f"unknown pool mode {mode!r}")
    if pad > k // 2:
        raise ValueError(f"pad {pad} too large for kernel {k}")
    oh = kernels.out_size(x.shape[2], k, stride, pad)
    ow = kernels.out_size(x.shape[3], k, stride, pad)
    if oh <= 0 or ow <= 0:
        raise ShapeError(f"pool2d output size {oh}x{ow} is not positive for input {x.shape}")
    fn = MaxPool2d if mode == "max" else AvgPool2d
    return fn.apply(x, k=k, stride=stride, pad=pad)


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------


class BatchNormState:
    """Per-channel running mean/variance shared across forward calls."""

    def __init__(self, channels, dtype=np.float32):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.recorded = False
        self._sums = None

    def begin_calibration(self):
        """Start accumulating exact per-channel sums (see ``batch_norm`` calibrate mode)."""
        C = self.running_mean.shape[0]
        self._sums = [0, np.zeros(C), np.zeros(C)]

    def accumulate(self, x):
        n, s1, s2 = self._sums
        x64 = x.astype(np.float64)
        self._sums = [n + x.size // x.shape[1], s1 + x64.sum(axis=(0, 2, 3)), s2 + (x64 * x64).sum(axis=(0, 2, 3))]

    def end_calibration(self):
        """Replace the running statistics by the accumulated mean and unbiased variance."""
        n, s1, s2 = self._sums
        if n < 2:
            raise ValueError("calibration saw fewer than 2 values per channel")
        mean = s1 / n
        var = np.maximum(s2 - n * mean * mean, 0.0) / (n - 1)
        self.running_mean[...] = mean
        self.running_var[...] = var
        self.recorded = True
        self._sums = None


class BatchNorm(Function):
    def forward(self, x, gamma, beta, state=None, train=True, eps=1e-5, momentum=0.9):
        axes = (0, 2, 3)
        if train:
            mean = x.mean(axis=axes)
            xc = x - mean[None, :, None, None]
            var = np.mean(xc * xc, axis=axes)
            count = x.size // x.shape[1]
            if state is not None:
                m = _typed(x, momentum)
                unbiased = var * _typed(x, count / (count - 1))
                state.running_mean[...] = m * state.running_mean + (1 - m) * mean
                state.running_var[...] = m * state.running_var + (1 - m) * unbiased
                state.recorded = True
        else:
            mean, var = state.running_mean.astype(x.dtype), state.running_var.astype(x.dtype)
            xc = x - mean[None, :, None, None]
        inv_std = 1.0 / np.sqrt(var + _typed(x, eps))
        xc *= inv_std[None, :, None, None]
        self.train = train
        self.inv_std = inv_std
        self.xhat = xc
        self.gamma = gamma
        out = xc * gamma[None, :, None, None]
        out += beta[None, :, None, None]
        return out

    def backward(self, grad):
        axes = (0, 2, 3)
        dbeta = grad.sum(axis=axes)
        dgamma = (grad * self.xhat).sum(axis=axes)
        scale = (self.gamma * self.inv_std)[None, :, None, None]
        if self.train:
            # d/dx of gamma * (x - mean) / std with batch mean and variance
            m = grad.size // grad.shape[1]
            dx = grad - self.xhat * (dgamma / m)[None, :, None, None]
            dx -= (dbeta / m)[None, :, None, None]
            dx *= scale
        else:
            dx = grad * scale
        return dx, dgamma, dbeta


def batch_norm(x, gamma, beta, state, mode="train", eps=1e-5, momentum=0.9):
    """Per-channel batch normalization over N, H, W.

    Train mode normalizes with batch statistics and folds them into
    ``state`` by an exponential moving average (``momentum`` weights the old
    value). Infer mode normalizes with the running statistics. Calibrate mode
    normalizes like train mode but only adds the input to the state's exact
    sums (between ``begin_calibration`` and ``end_calibration``).
    """
    if x.ndim != 4:
        raise ShapeError(f"batch_norm expects a 4-d input, got {x.shape}")
    C = x.shape[1]
    if gamma.shape != (C,) or beta.shape != (C,):
        raise ShapeError(f"batch_norm affine shapes {gamma.shape}/{beta.shape} do not match {C} channels")
    if mode == "train":
        if x.size // C <= 1:
            raise ValueError("batch_norm train mode needs more than one value per channel")
        return BatchNorm.apply(x, gamma, beta, state=state, train=True, eps=eps, momentum=momentum)
    if mode == "infer":
        if state is None or not state.recorded:
            raise RuntimeError("batch_norm infer mode used before running statistics were recorded")
        return BatchNorm.apply(x, gamma, beta, state=state, train=False, eps=eps, momentum=momentum)
    if mode == "calibrate":
        state.accumulate(x.data)
        return BatchNorm.apply(x, gamma, beta, state=None, train=True, eps=eps, momentum=momentum)
    raise ValueError(f"unknown mode {mode!r}")


# ---------------------------------------------------------------------------
# elementwise, dropout, concat
# ---------------------------------------------------------------------------


class ReLU(Function):
    def forward(self, x):
        self.out = np.maximum(x, _typed(x, 0))
        return self.out

    def backward(self, grad):
        return (grad * (self.out > 0),)


def relu(x):
    return ReLU.apply(x)


class Dropout(Function):
    def forward(self, x, mask):
        self.mask = mask
        return x * mask

    def backward(self, grad):
        return (grad * self.mask,)


def dropout(x, rate, mode, rng):
    """Inverted dropout: survivors are scaled by 1/(1-rate) at train time.

    Infer and calibrate modes pass ``x`` through unchanged.
    """
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if mode in ("infer", "calibrate") or rate == 0.0:
        return x
    if mode != "train":
        raise ValueError(f"unknown mode {mode!r}")
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    mask = keep.astype(x.dtype) * _typed(x.data, 1.0 / (1.0 - rate))
    return Dropout.apply(x, mask=mask)


class Concat(Function):
    def forward(self, *xs):
        self.splits = np.cumsum([a.shape[1] for a in xs])[:-1]
        return np.concatenate(xs, axis=1)

    def backward(self, grad):
        return tuple(np.ascontiguousarray(g) for g in np.split(grad, self.splits, axis=1))


def concat_channels(xs):
    """Concatenate along the channel axis in argument order."""
    xs = list(xs)
    if not xs:
        raise ValueError("concat_channels needs at least one tensor")
    if len(xs) == 1:
        return xs[0]
    ref = xs[0].shape
    for t in xs[1:]:
        if t.ndim != len(ref) or t.shape[0] != ref[0] or t.shape[2:] != ref[2:]:
            raise ShapeError(f"concat_channels: shape {t.shape} incompatible with {ref}")
    return Concat.apply(*xs)


# ---------------------------------------------------------------------------
# dense head and loss
# ---------------------------------------------------------------------------


class Linear(Function):
    def forward(self, x, w, b):
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, grad):
        return grad @ self.w, grad.T @ self.x, grad.sum(axis=0)


def fully_connected(x, weight, bias):
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"fully_connected: input {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"fully_connected: bias {bias.shape} != ({weight.shape[0]},)")
    return Linear.apply(x, weight, bias)


def log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


class SoftCrossEntropy(Function):
    def forward(self, logits, labels, weights=None):
        n = logits.shape[0]
        log_probs = log_softmax(logits)
        self.probs = np.exp(log_probs)
        self.labels = labels
        per_sample = -(labels * log_probs).sum(axis=1)
        if weights is not None:
            per_sample = per_sample * weights
        self.weights = weights
        self.n = n
        return np.asarray(per_sample.sum() / n, dtype=logits.dtype)

    def backward(self, grad):
        d = (self.probs - self.labels) / self.n
        if self.weights is not None:
            d = d * self.weights[:, None]
        return (d * grad,)


def softmax_cross_entropy_soft(logits, soft_labels, weights=None):
    """Mean cross entropy between soft target rows and softmax(logits).

    Returns ``(loss, probs)``; the loss gradient w.r.t. logits is
    ``(probs - labels) / N``, scaled per row by ``weights`` when given.
    """
    labels = np.asarray(soft_labels, dtype=logits.dtype)
    if logits.ndim != 2 or labels.shape != logits.shape:
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    if (labels < 0).any() or np.abs(labels.sum(axis=1) - 1.0).max() > 1e-6:
        raise ValueError("every label row must be a probability distribution")
    kwargs = {"labels": labels}
    if weights is not None:
        kwargs["weights"] = np.asarray(weights, dtype=logits.dtype).reshape(-1)
    loss = SoftCrossEntropy.apply(logits, **kwargs)
    return loss, softmax(logits.data)


__all__ = [
    "BatchNormState",
    "ShapeError",
    "Tensor",
    "batch_norm",
    "concat_channels",
    "conv2d",
    "dropout",
    "fully_connected",
    "pool2d",
    "relu",
    "softmax",
    "softmax_cross_entropy_soft",
]
