"""Adaptive ordinal label smoothing.

Each training sample carries its own smoothing value ``s``. The true class
gets ``1 - s``; the remaining mass ``s`` is spread over the false classes in
proportion to ``1 / |t_false - t_true|``, so classes nearer in severity get
more of it. After every forward pass a correctly predicted sample has ``s``
raised by ``d`` (capped at ``s_max``) and a mispredicted one has it lowered
by ``d`` (floored at 0).
"""

from dataclasses import dataclass, field

import numpy as np

from dcardnet.ops import softmax_cross_entropy_soft

LOSS_MODES = ("plain", "adaptive_smoothing", "class_weights", "both")

# (s_init, d, s_max) per classification level
LEVEL_DEFAULTS = {
    2: (0.05, 0.001, 0.1),
    3: (0.005, 0.0001, 0.01),
    4: (0.005, 0.0001, 0.01),
}


def smooth_label(true_class, num_classes, s):
    """Soft target vector of length ``num_classes`` for ordinal class ``true_class``."""
    if num_classes < 2:
        raise ValueError("smoothing needs at least two classes")
    if not 0.0 <= s < 1.0:
        raise ValueError(f"smoothing value must lie in [0, 1), got {s}")
    if not 0 <= true_class < num_classes:
        raise ValueError(f"class {true_class} out of range for {num_classes} classes")
    idx = np.arange(num_classes)
    dist = np.abs(idx - true_class).astype(np.float64)
    inv = np.zeros(num_classes)
    others = idx != true_class
    inv[others] = 1.0 / dist[others]
    label = s * inv / inv.sum()
    label[true_class] = 1.0 - s
    return label


@dataclass
class SmoothingState:
    """Per-sample smoothing values keyed by sample id."""

    s_init: float
    d: float
    s_max: float
    values: dict = field(default_factory=dict)
    strict: bool = False
    known: set = field(default_factory=set)

    def __post_init__(self):
        if not 0.0 <= self.s_init <= self.s_max < 1.0:
            raise ValueError(f"need 0 <= s_init <= s_max < 1, got {self.s_init}, {self.s_max}")
        if self.d < 0:
            raise ValueError("adjustment step d must be non-negative")

    @classmethod
    def for_level(cls, level, **kwargs):
        s_init, d, s_max = LEVEL_DEFAULTS[level]
        return cls(s_init=s_init, d=d, s_max=s_max, **kwargs)

    def register(self, sample_ids):
        self.known.update(sample_ids)

    def get(self, sample_id):
        if self.strict and sample_id not in self.known and sample_id not in self.values:
            raise KeyError(f"unknown sample id {sample_id!r}")
        return self.values.get(sample_id, self.s_init)

    def snapshot(self):
        return dict(self.values)


def update_smoothing(state, sample_id, predicted_class, true_class):
    """Raise ``s`` by ``d`` after a correct prediction, lower it otherwise."""
    s = state.get(sample_id)
    if predicted_class == true_class:
        s = min(s + state.d, state.s_max)
    else:
        s = max(s - state.d, 0.0)
    state.values[sample_id] = s
    return s


def class_weight_table(train_classes, num_classes):
    """Inverse-frequency weight per class, scaled so the mean over the training set is 1."""
    counts = np.bincount(np.asarray(train_classes), minlength=num_classes).astype(np.float64)
    present = counts > 0
    weights = np.zeros(num_classes)
    weights[present] = counts.sum() / (present.sum() * counts[present])
    return weights


def training_loss(logits, sample_ids, true_classes, state=None, mode="adaptive_smoothing", class_weights=None):
    """Loss for one training batch, updating ``state`` first when smoothing is on.

    Returns ``(loss, probs, predictions)``. Labels are built from the
    post-update smoothing values; in ``plain`` and ``class_weights`` modes they
    are one-hot.
    """
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}; expected one of {LOSS_MODES}")
    true_classes = np.asarray(true_classes, dtype=np.int64)
    N, K = logits.shape
    if len(sample_ids) != N or true_classes.shape != (N,):
        raise ValueError("sample ids and classes must match the batch size")
    preds = np.argmax(logits.data, axis=1)
    smoothing = mode in ("adaptive_smoothing", "both")
    labels = np.zeros((N, K))
    for row, (sid, t, p) in enumerate(zip(sample_ids, true_classes, preds)):
        if smoothing:
            if state is None:
                raise ValueError(f"mode {mode!r} needs a SmoothingState")
            s = update_smoothing(state, sid, int(p), int(t))
            labels[row] = smooth_label(int(t), K, s)
        else:
            labels[row, t] = 1.0
    weights = None
    if mode in ("class_weights", "both"):
        if class_weights is None:
            raise ValueError(f"mode {mode!r} needs a class weight table")
        weights = np.asarray(class_weights)[true_classes]
    loss, probs = softmax_cross_entropy_soft(logits, labels, weights=weights)
    return loss, probs, preds
