"""Run configuration: plain-text ``key = value`` files.

Blank lines and ``#`` comments are ignored. Unknown keys are errors. Keys
left unset take the defaults below; ``s_init``, ``d`` and ``s_max`` default
per classification level.

=====================  =============  ==========================================
key                    default        meaning
=====================  =============  ==========================================
level                  2              2, 3 or 4 classes
C                      4              dense connection window
f                      24             bottleneck output features
M                      3              spatial halvings across blocks
input_size             224            square input side
input_mode             combined       combined, oct_only or octa_only
dropout_strategy       adaptive       none, standard_0.2 or adaptive
dpr_int                0.2            base transfer dropout rate
bottleneck_dropout     0.2            dropout after each 1x1 conv
loss_mode              adaptive_smoothing  plain, adaptive_smoothing,
                                      class_weights or both
s_init, d, s_max       per level      adaptive smoothing constants
batch_size             10
total_steps            8000
step_stop              6000           end of the cosine decay
lr_init                0.01
momentum               0.9
folds                  10
seed                   0
eval_every             10             steps between curve points
parallel_folds         1              worker processes for folds
bn_recalibration       true           re-estimate BN statistics without dropout
calibration_samples    100            training samples used per curve point
label_map                             optional grade band file
drop_unchanged_followups  false       filter repeat scans with no class change
=====================  =============  ==========================================
"""

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from dcardnet.data import INPUT_MODES, input_channels_for_mode
from dcardnet.model import DROPOUT_STRATEGIES, ModelConfig
from dcardnet.smoothing import LEVEL_DEFAULTS, LOSS_MODES


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    level: int = 2
    C: int = 4
    f: int = 24
    M: int = 3
    input_size: int = 224
    input_mode: str = "combined"
    dropout_strategy: str = "adaptive"
    dpr_int: float = 0.2
    bottleneck_dropout: float = 0.2
    loss_mode: str = "adaptive_smoothing"
    s_init: float = None
    d: float = None
    s_max: float = None
    batch_size: int = 10
    total_steps: int = 8000
    step_stop: int = 6000
    lr_init: float = 0.01
    momentum: float = 0.9
    folds: int = 10
    seed: int = 0
    eval_every: int = 10
    parallel_folds: int = 1
    bn_recalibration: bool = True
    calibration_samples: int = 100
    label_map: str = ""
    drop_unchanged_followups: bool = False

    def __post_init__(self):
        if self.level not in LEVEL_DEFAULTS:
            raise ConfigError(f"level must be 2, 3 or 4, got {self.level}")
        s_init, d, s_max = LEVEL_DEFAULTS[self.level]
        for key, default in (("s_init", s_init), ("d", d), ("s_max", s_max)):
            if getattr(self, key) is None:
                object.__setattr__(self, key, default)
        if self.input_mode not in INPUT_MODES:
            raise ConfigError(f"input_mode must be one of {tuple(INPUT_MODES)}")
        if self.dropout_strategy not in DROPOUT_STRATEGIES:
            raise ConfigError(f"dropout_strategy must be one of {DROPOUT_STRATEGIES}")
        if self.loss_mode not in LOSS_MODES:
            raise ConfigError(f"loss_mode must be one of {LOSS_MODES}")
        for key in ("batch_size", "total_steps", "step_stop", "eval_every", "parallel_folds", "calibration_samples"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be positive")
        if self.folds < 2:
            raise ConfigError("folds must be at least 2")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError("momentum must lie in [0, 1)")
        if self.lr_init <= 0:
            raise ConfigError("lr_init must be positive")
        if not 0.0 <= self.s_init <= self.s_max < 1.0 or self.d < 0:
            raise ConfigError("need 0 <= s_init <= s_max < 1 and d >= 0")
        try:
            self.model_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @property
    def num_classes(self):
        return self.level

    def model_config(self):
        return ModelConfig(
            C=self.C,
            f=self.f,
            M=self.M,
            input_channels=input_channels_for_mode(self.input_mode),
            input_size=self.input_size,
            num_classes=self.num_classes,
            dropout_strategy=self.dropout_strategy,
            dpr_int=self.dpr_int,
            bottleneck_dropout=self.bottleneck_dropout,
        )

    def with_overrides(self, **kwargs):
        """Copy with the given keys replaced; per-level smoothing defaults follow a level change."""
        kwargs = {k: v for k, v in kwargs.items() if v is not None}
        if "level" in kwargs and kwargs["level"] != self.level:
            defaults = LEVEL_DEFAULTS[self.level]
            for key, default in zip(("s_init", "d", "s_max"), defaults):
                if key not in kwargs and getattr(self, key) == default:
                    kwargs[key] = None
        try:
            return replace(self, **kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from None

    def snapshot(self):
        """``key = value`` text; parsing it back yields an equal config."""
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())

    def write(self, path):
        Path(path).write_text(self.snapshot())


# unset smoothing constants (None) are floats
_FIELD_TYPES = {f.name: float if f.default is None else type(f.default) for f in fields(RunConfig)}


def _format(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    return repr(v) if isinstance(v, float) else str(v)


def _parse_value(key, text, where):
    kind = _FIELD_TYPES[key]
    try:
        if kind is bool:
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"{where}: bad value {text!r} for {key}") from None


def parse_config(text, source="<config>"):
    values = {}
    for line_no, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{line_no}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _FIELD_TYPES:
            raise ConfigError(f"{where}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{where}: duplicate key {key!r}")
        values[key] = _parse_value(key, value, where)
    return RunConfig(**values)


def load_config(path):
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), source=str(path))
