"""Binary checkpoints: model arrays, BN running statistics and smoothing state.

Layout (little-endian)::

    "DCRD"  u32 version=1  u32 count
    count x { u16 name_len, name, u8 rank, u32 dims[rank], f32 data }
    u32 n_smoothing
    n_smoothing x { u16 id_len, id, f64 s }
"""

import struct
from pathlib import Path

import numpy as np

from dcardnet.model import DcardNet, ModelConfig

MAGIC = b"DCRD"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _pack_str(s):
    b = s.encode("utf-8")
    if len(b) > 0xFFFF:
        raise CheckpointError(f"name too long: {s[:40]}...")
    return struct.pack("<H", len(b)) + b


def save_checkpoint(path, model, smoothing=None):
    """Write ``model`` (and optional ``{sample_id: s}`` map) to ``path``."""
    items = model.state_arrays()
    chunks = [MAGIC, struct.pack("<II", VERSION, len(items))]
    for name, arr in items:
        chunks.append(_pack_str(name))
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    smoothing = smoothing or {}
    chunks.append(struct.pack("<I", len(smoothing)))
    for sid in sorted(smoothing):
        chunks.append(_pack_str(sid))
        chunks.append(struct.pack("<d", float(smoothing[sid])))
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(chunks))
    tmp.replace(path)


class _Reader:
    def __init__(self, raw, path):
        self.raw, self.pos, self.path = raw, 0, path

    def take(self, n):
        if self.pos + n > len(self.raw):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.raw[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def string(self):
        (n,) = self.unpack("<H")
        return self.take(n).decode("utf-8")


def read_checkpoint(path):
    """Return ``(arrays, smoothing)``: an ordered ``{name: float32 array}`` and ``{id: s}``."""
    raw = Path(path).read_bytes()
    r = _Reader(raw, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported version {version}")
    arrays = {}
    for _ in range(count):
        name = r.string()
        (rank,) = r.unpack("<B")
        dims = r.unpack(f"<{rank}I") if rank else ()
        n = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(4 * n), dtype="<f4").reshape(dims).astype(np.float32)
    (n_smooth,) = r.unpack("<I")
    smoothing = {}
    for _ in range(n_smooth):
        sid = r.string()
        (s,) = r.unpack("<d")
        smoothing[sid] = s
    if r.pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - r.pos} trailing bytes")
    return arrays, smoothing


def config_from_arrays(arrays, input_size, dropout_strategy="adaptive", dpr_int=0.2):
    """Recover the architecture hyperparameters from stored array shapes.

    The checkpoint does not record ``input_size``; the caller supplies it,
    usually from the sample being evaluated.
    """
    try:
        stem_w = arrays["stem.conv1.weight"]
        fc_w = arrays["fc.weight"]
        b0 = arrays["b0.conv3x3.weight"]
    except KeyError as exc:
        raise CheckpointError(f"checkpoint lacks {exc.args[0]}") from None
    f = b0.shape[0]
    n_blocks = sum(1 for k in arrays if k.endswith(".conv3x3.weight"))
    C = fc_w.shape[1] // f
    if C < 1 or n_blocks % C:
        raise CheckpointError(f"inconsistent shapes: {n_blocks} blocks, head width {fc_w.shape[1]}, f={f}")
    return ModelConfig(
        C=C,
        f=f,
        M=n_blocks // C - 1,
        input_channels=stem_w.shape[1],
        input_size=input_size,
        num_classes=fc_w.shape[0],
        dropout_strategy=dropout_strategy,
        dpr_int=dpr_int,
    )


def load_into(model, arrays):
    """Copy stored arrays into ``model`` after checking names and shapes."""
    expected = model.state_arrays()
    names = [n for n, _ in expected]
    if list(arrays) != names:
        missing = sorted(set(names) - set(arrays))
        extra = sorted(set(arrays) - set(names))
        raise CheckpointError(f"checkpoint does not match model: missing {missing[:5]}, unexpected {extra[:5]}")
    for name, target in expected:
        src = arrays[name]
        if src.shape != target.shape:
            raise CheckpointError(f"{name}: checkpoint shape {src.shape} != model shape {target.shape}")
        target[...] = src
    for bn in model.batch_norms():
        bn.state.recorded = True
    return model


def load_checkpoint(path, input_size, rng=None, cfg=None):
    """Build a model from ``path``; returns ``(model, smoothing)``."""
    arrays, smoothing = read_checkpoint(path)
    cfg = cfg or config_from_arrays(arrays, input_size)
    if rng is None:
        rng = np.random.default_rng(0)
    model = DcardNet(cfg, rng)
    return load_into(model, arrays), smoothing
