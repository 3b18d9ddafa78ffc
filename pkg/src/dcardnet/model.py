"""DcardNet: bottleneck blocks joined by a sliding window of dense connections.

Block ``n`` reads the outputs of the ``C`` blocks before it, newest first,
each passed through a transfer step (2x2 average-pool when the producer sits
in an earlier spatial stage, then dropout whose rate grows with the depth
gap). Blocks are grouped into ``M + 1`` stages of ``C`` blocks; each new stage
halves the spatial size. The head concatenates the last ``C`` block outputs,
global-average-pools them and applies one fully connected layer, which makes
class activation maps an exact linear read-out of the final features.
"""

from dataclasses import dataclass

import numpy as np

from dcardnet import ops
from dcardnet.ops import BatchNormState, ShapeError
from dcardnet.tensor import DEFAULT_DTYPE, Parameter, Tensor, no_grad

DROPOUT_STRATEGIES = ("none", "standard_0.2", "adaptive")
MAX_DROPOUT_RATE = 0.9
STANDARD_DROPOUT_RATE = 0.2


@dataclass(frozen=True)
class ModelConfig:
    C: int = 4
    f: int = 24
    M: int = 3
    input_channels: int = 6
    input_size: int = 224
    num_classes: int = 2
    dropout_strategy: str = "adaptive"
    dpr_int: float = 0.2
    bottleneck_dropout: float = 0.2

    def __post_init__(self):
        if self.C < 1 or self.f < 1 or self.M < 0:
            raise ValueError(f"invalid C/f/M: {self.C}/{self.f}/{self.M}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be positive")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")
        if self.input_size < 2 ** (self.M + 2):
            raise ValueError(
                f"input_size {self.input_size} too small for M={self.M}; need >= {2 ** (self.M + 2)}"
            )
        if self.dropout_strategy not in DROPOUT_STRATEGIES:
            raise ValueError(f"dropout_strategy must be one of {DROPOUT_STRATEGIES}")
        if not 0.0 <= self.dpr_int < 1.0 or not 0.0 <= self.bottleneck_dropout < 1.0:
            raise ValueError("dropout rates must lie in [0, 1)")

    @property
    def n_blocks(self):
        return self.C * (self.M + 1)

    @property
    def stem_channels(self):
        # 48 for the default f=24
        return 2 * self.f

    @property
    def head_channels(self):
        return self.f * self.C

    def stage_of(self, n):
        return n // self.C

    def stage_sizes(self):
        """Spatial size of each block stage, stage 0 first."""
        s = _conv_out(self.input_size, 3, 2, 1)
        s = _conv_out(s, 3, 2, 1)
        sizes = [s]
        for _ in range(self.M):
            s = s // 2
            sizes.append(s)
        return sizes


def _conv_out(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


# ---------------------------------------------------------------------------
# transfer edges (dense window with adaptive-rate dropout)
# ---------------------------------------------------------------------------


def adaptive_dropout_rate(dpr_int, n_in, n_out, C=None):
    """Dropout rate for producer ``n_out`` feeding consumer ``n_in``.

    Grows by 0.1 per extra block of depth gap: ``dpr_int + 0.1 * (n_in - n_out - 1)``,
    capped at ``MAX_DROPOUT_RATE``.
    """
    gap = n_in - n_out
    if gap < 1 or (C is not None and gap > C):
        raise ValueError(f"block {n_out} is not within the window of consumer {n_in} (C={C})")
    return min(dpr_int + 0.1 * (gap - 1), MAX_DROPOUT_RATE)


@dataclass(frozen=True)
class TransferEdge:
    producer: int
    consumer: int
    dpr: float
    halve: bool


def edge_dropout_rate(cfg, n_in, n_out):
    if cfg.dropout_strategy == "none":
        adaptive_dropout_rate(cfg.dpr_int, n_in, n_out, cfg.C)  # window check only
        return 0.0
    if cfg.dropout_strategy == "standard_0.2":
        adaptive_dropout_rate(cfg.dpr_int, n_in, n_out, cfg.C)
        return STANDARD_DROPOUT_RATE
    return adaptive_dropout_rate(cfg.dpr_int, n_in, n_out, cfg.C)


def transfer_edges(cfg, n):
    """Edges into block ``n`` ordered newest producer first."""
    edges = []
    for m in range(n - 1, max(0, n - cfg.C) - 1, -1):
        edges.append(
            TransferEdge(
                producer=m,
                consumer=n,
                dpr=edge_dropout_rate(cfg, n, m),
                halve=cfg.stage_of(m) != cfg.stage_of(n),
            )
        )
    return edges


def apply_transfer(x, edge, mode, rng):
    """Average-pool by 2 when the edge crosses a stage, then drop out."""
    if edge.halve:
        if x.shape[2] < 2 or x.shape[3] < 2:
            raise ShapeError(f"cannot halve spatial size {x.shape[2:]} for edge {edge}")
        x = ops.pool2d(x, "avg", k=2, stride=2, pad=0)
    return ops.dropout(x, edge.dpr, mode, rng)


def assemble_block_input(cfg, n, outputs, stem, mode="infer", rng=None):
    """Input tensor of block ``n``: the stem output for n=0, else the
    concatenation of transferred outputs of blocks n-1 down to max(0, n-C)."""
    if n == 0:
        return stem
    parts = []
    for edge in transfer_edges(cfg, n):
        if edge.producer >= len(outputs) or outputs[edge.producer] is None:
            raise KeyError(f"output of block {edge.producer} needed by block {n} is missing")
        parts.append(apply_transfer(outputs[edge.producer], edge, mode, rng))
    return ops.concat_channels(parts)


def block_input_channels(cfg, n):
    return cfg.stem_channels if n == 0 else cfg.f * min(n, cfg.C)


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------


class Conv:
    def __init__(self, name, cin, cout, k, stride, pad, bias, rng, dtype):
        std = np.sqrt(2.0 / (cin * k * k))
        self.weight = Parameter(rng.standard_normal((cout, cin, k, k)) * std, f"{name}.weight", dtype=dtype)
        self.bias = Parameter(np.zeros(cout), f"{name}.bias", dtype=dtype) if bias else None
        self.stride, self.pad = stride, pad

    def parameters(self):
        return [self.weight] + ([self.bias] if self.bias is not None else [])

    def __call__(self, x):
        return ops.conv2d(x, self.weight, self.bias, stride=self.stride, pad=self.pad)


class BatchNorm:
    def __init__(self, name, channels, dtype, eps=1e-5, momentum=0.9):
        self.name = name
        self.gamma = Parameter(np.ones(channels), f"{name}.gamma", dtype=dtype)
        self.beta = Parameter(np.zeros(channels), f"{name}.beta", dtype=dtype)
        self.state = BatchNormState(channels, dtype=dtype)
        self.eps, self.momentum = eps, momentum

    def parameters(self):
        return [self.gamma, self.beta]

    def __call__(self, x, mode):
        return ops.batch_norm(x, self.gamma, self.beta, self.state, mode, self.eps, self.momentum)


class Bottleneck:
    """BN-ReLU-1x1 conv (4f) - dropout - BN-ReLU-3x3 conv (f)."""

    def __init__(self, n, cin, f, dropout_rate, rng, dtype):
        self.n = n
        p = f"b{n}"
        self.bn1 = BatchNorm(f"{p}.bn1", cin, dtype)
        self.conv1x1 = Conv(f"{p}.conv1x1", cin, 4 * f, 1, 1, 0, False, rng, dtype)
        self.bn2 = BatchNorm(f"{p}.bn2", 4 * f, dtype)
        self.conv3x3 = Conv(f"{p}.conv3x3", 4 * f, f, 3, 1, 1, False, rng, dtype)
        self.dropout_rate = dropout_rate

    def layers(self):
        return [self.bn1, self.conv1x1, self.bn2, self.conv3x3]

    def __call__(self, x, mode, rng):
        h = self.conv1x1(ops.relu(self.bn1(x, mode)))
        h = ops.dropout(h, self.dropout_rate, mode, rng)
        return self.conv3x3(ops.relu(self.bn2(h, mode)))


# ---------------------------------------------------------------------------
# network
# ---------------------------------------------------------------------------


class DcardNet:
    def __init__(self, cfg, rng, dtype=DEFAULT_DTYPE):
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        c0 = cfg.stem_channels
        self.stem = [
            (Conv("stem.conv1", cfg.input_channels, c0, 3, 2, 1, False, rng, dtype), BatchNorm("stem.bn1", c0, dtype)),
            (Conv("stem.conv2", c0, c0, 3, 1, 1, False, rng, dtype), BatchNorm("stem.bn2", c0, dtype)),
            (Conv("stem.conv3", c0, c0, 3, 1, 1, False, rng, dtype), BatchNorm("stem.bn3", c0, dtype)),
        ]
        bottleneck_rate = 0.0 if cfg.dropout_strategy == "none" else cfg.bottleneck_dropout
        self.blocks = [
            Bottleneck(n, block_input_channels(cfg, n), cfg.f, bottleneck_rate, rng, dtype)
            for n in range(cfg.n_blocks)
        ]
        F = cfg.head_channels
        self.fc_weight = Parameter(
            rng.standard_normal((cfg.num_classes, F)) * np.sqrt(2.0 / F), "fc.weight", dtype=dtype
        )
        self.fc_bias = Parameter(np.zeros(cfg.num_classes), "fc.bias", dtype=dtype)

    # -- parameter access ---------------------------------------------------

    def _layers(self):
        for conv, bn in self.stem:
            yield conv
            yield bn
        for block in self.blocks:
            yield from block.layers()

    def parameters(self):
        params = []
        for layer in self._layers():
            params.extend(layer.parameters())
        params.extend([self.fc_weight, self.fc_bias])
        return params

    def named_parameters(self):
        return {p.name: p for p in self.parameters()}

    def batch_norms(self):
        return [layer for layer in self._layers() if isinstance(layer, BatchNorm)]

    def state_arrays(self):
        """Ordered (name, array) pairs: parameters plus BN running statistics."""
        items = []
        for layer in self._layers():
            for p in layer.parameters():
                items.append((p.name, p.data))
            if isinstance(layer, BatchNorm):
                items.append((f"{layer.name}.running_mean", layer.state.running_mean))
                items.append((f"{layer.name}.running_var", layer.state.running_var))
        items.append(("fc.weight", self.fc_weight.data))
        items.append(("fc.bias", self.fc_bias.data))
        return items

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    # -- forward ------------------------------------------------------------

    def forward(self, x, mode="infer", rng=None, trace=None, return_features=False):
        """Logits (N x K) for an N x C x H x W batch.

        ``trace``, when a list, receives ``(row, input_shape, output_shape)``
        for every stem layer, every block, the pooling head and the FC layer.
        """
        if not isinstance(x, Tensor):
            x = Tensor(x, dtype=self.dtype)
        cfg = self.cfg
        if x.ndim != 4 or x.shape[1] != cfg.input_channels or x.shape[2:] != (cfg.input_size, cfg.input_size):
            raise ShapeError(
                f"expected N x {cfg.input_channels} x {cfg.input_size} x {cfg.input_size} input, got {x.shape}"
            )
        if mode not in ("train", "infer", "calibrate"):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == "train" and rng is None:
            raise ValueError("train mode needs an rng for dropout")

        def record(row, before, after):
            if trace is not None:
                trace.append((row, tuple(before.shape), tuple(after.shape)))

        h = x
        for i, (conv, bn) in enumerate(self.stem, start=1):
            out = ops.relu(bn(conv(h), mode))
            record(str(i), h, out)
            h = out
        out = ops.pool2d(h, "max", k=3, stride=2, pad=1)
        record("4", h, out)
        stem = out

        outputs = []
        for n, block in enumerate(self.blocks):
            inp = assemble_block_input(cfg, n, outputs, stem, mode, rng)
            out = block(inp, mode, rng)
            record(f"b{n}", inp, out)
            outputs.append(out)

        features = ops.concat_channels(outputs[-cfg.C:])
        pooled = ops.pool2d(features, "global_avg")
        record("21", features, pooled)
        logits = ops.fully_connected(pooled, self.fc_weight, self.fc_bias)
        record("22", pooled, logits)
        if return_features:
            return logits, features
        return logits

    __call__ = forward

    def recalibrate_batch_norm(self, x, batch_size=10):
        """Re-estimate every BN's running statistics over ``x`` with dropout off.

        Each BN layer sees the same batch-normalized activations as in a
        dropout-free train-mode pass; its running mean and variance become the
        exact population values over all of ``x``. Inverted dropout inflates
        activation variance during training, so the moving averages gathered
        then do not match inference-time activations.
        """
        x = np.asarray(x, dtype=self.dtype)
        bns = self.batch_norms()
        for bn in bns:
            bn.state.begin_calibration()
        with no_grad():
            for i in range(0, len(x), batch_size):
                self.forward(Tensor(x[i:i + batch_size], dtype=self.dtype), mode="calibrate")
        for bn in bns:
            bn.state.end_calibration()

    def bn_statistics(self):
        return [(bn.state.running_mean.copy(), bn.state.running_var.copy(), bn.state.recorded) for bn in self.batch_norms()]

    def restore_bn_statistics(self, saved):
        for bn, (mean, var, recorded) in zip(self.batch_norms(), saved):
            bn.state.running_mean[...] = mean
            bn.state.running_var[...] = var
            bn.state.recorded = recorded

    def predict_proba(self, x, batch_size=16):
        """Infer-mode class probabilities, evaluated in chunks without a graph."""
        x = np.asarray(x, dtype=self.dtype)
        out = []
        with no_grad():
            for i in range(0, len(x), batch_size):
                logits = self.forward(Tensor(x[i:i + batch_size], dtype=self.dtype), mode="infer")
                out.append(ops.softmax(logits.data.astype(np.float64)))
        return np.concatenate(out, axis=0)


def build_model(cfg, rng, dtype=DEFAULT_DTYPE):
    """Construct a DcardNet with fan-in scaled Gaussian weights (variance 2/fan_in)."""
    return DcardNet(cfg, rng, dtype=dtype)


def count_parameters(model):
    return sum(p.data.size for p in model.parameters())


def parameter_table(model):
    """Per-layer (name, trainable scalar count) rows, in model order."""
    rows = {}
    for p in model.parameters():
        layer = p.name.rsplit(".", 1)[0]
        rows[layer] = rows.get(layer, 0) + p.data.size
    return list(rows.items())


# ---------------------------------------------------------------------------
# class activation maps
# ---------------------------------------------------------------------------


@dataclass
class CamMap:
    class_index: int
    raw: np.ndarray
    upsampled: np.ndarray
    vmin: float
    vmax: float
    logit: float
    bias: float

    @property
    def identity_error(self):
        """|mean(raw) - (logit - bias)|; zero up to rounding for a GAP + FC head."""
        return abs(float(self.raw.mean()) - (self.logit - self.bias))


def bilinear_resize(img, out_h, out_w):
    """Bilinear interpolation with half-pixel centres and edge clamping."""
    in_h, in_w = img.shape

    def axis(n_in, n_out):
        pos = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        pos = np.clip(pos, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, wy = axis(in_h, out_h)
    x0, x1, wx = axis(in_w, out_w)
    top = img[y0][:, x0] * (1 - wx) + img[y0][:, x1] * wx
    bottom = img[y1][:, x0] * (1 - wx) + img[y1][:, x1] * wx
    return top * (1 - wy)[:, None] + bottom * wy[:, None]


def compute_cam(model, x, class_c="predicted"):
    """Class activation map of a single 1 x C x H x W input.

    The raw map is the FC-weighted sum of the final feature maps, so its mean
    equals the class logit minus the FC bias.
    """
    x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=model.dtype)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise ShapeError(f"compute_cam takes a single sample, got batch of {x.shape[0]}")
    with no_grad():
        logits, features = model.forward(Tensor(x, dtype=model.dtype), mode="infer", return_features=True)
    K = model.cfg.num_classes
    c = int(np.argmax(logits.data[0])) if class_c == "predicted" else int(class_c)
    if not 0 <= c < K:
        raise ValueError(f"class index {c} out of range for {K} classes")
    w = model.fc_weight.data[c].astype(np.float64)
    raw = np.tensordot(w, features.data[0].astype(np.float64), axes=1)
    up = bilinear_resize(raw, x.shape[2], x.shape[3])
    return CamMap(
        class_index=c,
        raw=raw,
        upsampled=up,
        vmin=float(raw.min()),
        vmax=float(raw.max()),
        logit=float(logits.data[0, c]),
        bias=float(model.fc_bias.data[c]),
    )
