"""En-face sample storage, label levels, patient-wise folds, augmentation and
a synthetic stand-in dataset.

Channel order is fixed::

    0 inner-retina thickness      3 SVC OCTA max projection
    1 inner-retina OCT mean       4 ICP OCTA max projection
    2 EZ OCT mean                 5 DCP OCTA max projection
"""

import csv
import logging
import struct
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

logger = logging.getLogger(__name__)

CHANNEL_NAMES = (
    "inner_thickness",
    "inner_oct_mean",
    "ez_oct_mean",
    "svc_octa_max",
    "icp_octa_max",
    "dcp_octa_max",
)
N_CHANNELS = len(CHANNEL_NAMES)
INPUT_MODES = {
    "combined": (0, 1, 2, 3, 4, 5),
    "oct_only": (0, 1, 2),
    "octa_only": (3, 4, 5),
}

SAMPLE_MAGIC = b"ENFC"
SAMPLE_VERSION = 1
_SAMPLE_HEADER = struct.Struct("<4sIIII")
MANIFEST_FIELDS = ["sample_id", "patient_id", "etdrs_grade", "path"]


class FormatError(ValueError):
    pass


@dataclass
class EnFaceSample:
    sample_id: str
    patient_id: str
    etdrs_grade: int
    channels: np.ndarray  # float32, 6 x H x W, values in [0, 1]

    def validate(self):
        ch = self.channels
        if ch.ndim != 3 or ch.shape[0] != N_CHANNELS:
            raise ValueError(f"sample {self.sample_id}: expected {N_CHANNELS} channels, got shape {ch.shape}")
        if ch.shape[1] != ch.shape[2]:
            raise ValueError(f"sample {self.sample_id}: channels must be square, got {ch.shape[1:]}")
        if not np.isfinite(ch).all() or ch.min() < 0.0 or ch.max() > 1.0:
            raise ValueError(f"sample {self.sample_id}: values must lie in [0, 1]")


def normalize_channels(raw):
    """Per-channel min-max scaling to [0, 1]; constant channels map to 0."""
    raw = np.asarray(raw, dtype=np.float64)
    lo = raw.min(axis=(1, 2), keepdims=True)
    span = raw.max(axis=(1, 2), keepdims=True) - lo
    span[span == 0] = 1.0
    return ((raw - lo) / span).astype(np.float32)


# ---------------------------------------------------------------------------
# sample files
# ---------------------------------------------------------------------------


def write_sample(path, sample):
    """Write ``sample.channels`` as an ENFC file (20-byte header + little-endian f32)."""
    sample.validate()
    ch = np.ascontiguousarray(sample.channels, dtype="<f4")
    C, H, W = ch.shape
    with open(path, "wb") as fh:
        fh.write(_SAMPLE_HEADER.pack(SAMPLE_MAGIC, SAMPLE_VERSION, C, H, W))
        fh.write(ch.tobytes())


def read_channels(path, expected_channels=N_CHANNELS):
    raw = Path(path).read_bytes()
    if len(raw) < _SAMPLE_HEADER.size:
        raise FormatError(f"{path}: truncated header")
    magic, version, C, H, W = _SAMPLE_HEADER.unpack_from(raw)
    if magic != SAMPLE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SAMPLE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if expected_channels is not None and C != expected_channels:
        raise FormatError(f"{path}: {C} channels, expected {expected_channels}")
    expected = _SAMPLE_HEADER.size + 4 * C * H * W
    if len(raw) != expected:
        raise FormatError(f"{path}: payload is {len(raw)} bytes, header declares {expected}")
    data = np.frombuffer(raw, dtype="<f4", offset=_SAMPLE_HEADER.size)
    return data.reshape(C, H, W).astype(np.float32)


def read_sample(path, sample_id=None, patient_id="", etdrs_grade=-1):
    channels = read_channels(path)
    return EnFaceSample(
        sample_id=sample_id if sample_id is not None else Path(path).stem,
        patient_id=patient_id,
        etdrs_grade=etdrs_grade,
        channels=channels,
    )


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------


@dataclass
class ManifestRow:
    sample_id: str
    patient_id: str
    etdrs_grade: int
    path: Path
    followup: bool = False


def read_manifest(path):
    """Rows of a manifest CSV; sample paths resolve relative to the manifest.

    An optional trailing ``followup`` column (0/1) marks repeat scans.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        if header[:4] != MANIFEST_FIELDS:
            raise FormatError(f"{path}: header must start with {','.join(MANIFEST_FIELDS)}, got {header}")
        rows = []
        seen = set()
        for rec in reader:
            sid = rec["sample_id"]
            if sid in seen:
                raise FormatError(f"{path}: duplicate sample id {sid}")
            seen.add(sid)
            rows.append(
                ManifestRow(
                    sample_id=sid,
                    patient_id=rec["patient_id"],
                    etdrs_grade=int(rec["etdrs_grade"]),
                    path=(path.parent / rec["path"]).resolve(),
                    followup=rec.get("followup", "0") in ("1", "true", "True"),
                )
            )
    return rows


def write_manifest(path, rows):
    path = Path(path)
    with_followup = any(r.followup for r in rows)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_FIELDS + (["followup"] if with_followup else []))
        for r in rows:
            rel = Path(r.path)
            if rel.is_absolute():
                rel = rel.relative_to(path.parent.resolve())
            rec = [r.sample_id, r.patient_id, r.etdrs_grade, rel.as_posix()]
            if with_followup:
                rec.append(int(r.followup))
            w.writerow(rec)


# ---------------------------------------------------------------------------
# ETDRS grade -> class levels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GradeBand:
    lo: int
    hi: int
    class2: int
    class3: int
    class4: int


class LevelLabelMap:
    """Inclusive ETDRS grade bands mapped to 2-, 3- and 4-class indices.

    Default bands cover the integer range 10-85 so every ETDRS step (10, 14,
    15, 20, 35, 43, 47, 53, 61, ...) falls in exactly one band: no DR 10-19,
    mild NPDR 20-34, moderate NPDR 35-47, severe NPDR 48-53, PDR 54-85.
    Referable (2-class label 1) from grade 35.
    """

    def __init__(self, bands):
        bands = sorted(bands, key=lambda b: b.lo)
        for a, b in zip(bands, bands[1:]):
            if b.lo != a.hi + 1:
                raise ValueError(f"grade bands must be contiguous: {a} then {b}")
            if any(y < x for x, y in zip((a.class2, a.class3, a.class4), (b.class2, b.class3, b.class4))):
                raise ValueError(f"grade bands must be monotone: {a} then {b}")
        for b in bands:
            if b.lo > b.hi:
                raise ValueError(f"empty band {b}")
        self.bands = bands

    @classmethod
    def default(cls):
        return cls([
            GradeBand(10, 19, 0, 0, 0),
            GradeBand(20, 34, 0, 1, 1),
            GradeBand(35, 47, 1, 1, 1),
            GradeBand(48, 53, 1, 1, 2),
            GradeBand(54, 85, 1, 2, 3),
        ])

    @classmethod
    def read(cls, path):
        bands = []
        for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = [p.strip() for p in line.split(",")]
            if parts[0] == "grade_lo":
                continue
            if len(parts) != 5:
                raise FormatError(f"{path}:{line_no}: expected grade_lo,grade_hi,class2,class3,class4")
            bands.append(GradeBand(*(int(p) for p in parts)))
        return cls(bands)

    def write(self, path):
        lines = ["grade_lo,grade_hi,class2,class3,class4"]
        lines += [f"{b.lo},{b.hi},{b.class2},{b.class3},{b.class4}" for b in self.bands]
        Path(path).write_text("\n".join(lines) + "\n")

    def lookup(self, grade):
        for b in self.bands:
            if b.lo <= grade <= b.hi:
                return b.class2, b.class3, b.class4
        raise ValueError(f"ETDRS grade {grade} is outside the label map")

    def representative_grade(self, level, cls_index):
        """A typical ETDRS step for ``cls_index`` at ``level``, else the lowest grade in that class."""
        typical = SYNTHETIC_GRADES.get(level, ())
        if cls_index < len(typical) and self.lookup(typical[cls_index])[level - 2] == cls_index:
            return typical[cls_index]
        for b in self.bands:
            if (b.class2, b.class3, b.class4)[level - 2] == cls_index:
                return b.lo
        raise ValueError(f"no band maps to class {cls_index} at level {level}")


SYNTHETIC_GRADES = {2: (14, 43), 3: (10, 35, 65), 4: (10, 35, 53, 65)}

LEVEL_CLASS_NAMES = {
    2: ("nrDR", "rDR"),
    3: ("no DR", "NPDR", "PDR"),
    4: ("no DR", "mild/moderate NPDR", "severe NPDR", "PDR"),
}


def etdrs_to_level_labels(grade, level_map=None):
    """(class2, class3, class4) for an ETDRS grade."""
    return (level_map or LevelLabelMap.default()).lookup(grade)


def level_class(grade, level, level_map=None):
    if level not in (2, 3, 4):
        raise ValueError(f"level must be 2, 3 or 4, got {level}")
    return etdrs_to_level_labels(grade, level_map)[level - 2]


def drop_unchanged_followups(rows, level, level_map=None):
    """Remove follow-up scans whose class at ``level`` matches the patient's baseline scan."""
    baseline = {}
    for r in rows:
        if not r.followup:
            baseline.setdefault(r.patient_id, level_class(r.etdrs_grade, level, level_map))
    kept = []
    for r in rows:
        if r.followup and baseline.get(r.patient_id) == level_class(r.etdrs_grade, level, level_map):
            continue
        kept.append(r)
    return kept


# ---------------------------------------------------------------------------
# patient-wise stratified folds
# ---------------------------------------------------------------------------


@dataclass
class FoldSplit:
    k: int
    assignments: dict  # sample_id -> fold index

    def test_ids(self, fold):
        return [s for s, f in self.assignments.items() if f == fold]

    def train_ids(self, fold):
        return [s for s, f in self.assignments.items() if f != fold]

    def fold_sizes(self):
        return np.bincount(list(self.assignments.values()), minlength=self.k)


def kfold_split_patientwise(samples, k, level, rng, level_map=None):
    """Assign every sample to one of ``k`` folds, keeping each patient's scans
    together and each fold's class mix close to the global one.

    ``samples`` are objects with ``sample_id``, ``patient_id`` and
    ``etdrs_grade``. A patient is stratified by its most severe class. Within a
    class, patients (largest first, ties in seeded random order) go to the fold
    currently holding the fewest samples of that class.
    """
    if k < 2:
        raise ValueError("k must be at least 2")
    by_patient = defaultdict(list)
    for s in samples:
        by_patient[s.patient_id].append(s)
    if k > len(by_patient):
        raise ValueError(f"k={k} exceeds the number of patients ({len(by_patient)})")

    patient_class = {
        pid: max(level_class(s.etdrs_grade, level, level_map) for s in group)
        for pid, group in by_patient.items()
    }
    classes = sorted(set(patient_class.values()))
    class_counts = np.zeros((k, max(classes) + 1), dtype=np.int64)
    totals = np.zeros(k, dtype=np.int64)
    assignments = {}
    for c in classes:
        pids = sorted(p for p, pc in patient_class.items() if pc == c)
        if len(pids) < k:
            logger.warning("class %d has %d patients, fewer than k=%d; stratification is best effort", c, len(pids), k)
        order = rng.permutation(len(pids))
        ranked = sorted(range(len(pids)), key=lambda i: (-len(by_patient[pids[i]]), order[i]))
        for i in ranked:
            pid = pids[i]
            n = len(by_patient[pid])
            fold = min(range(k), key=lambda f: (class_counts[f, c], totals[f], f))
            class_counts[fold, c] += n
            totals[fold] += n
            for s in by_patient[pid]:
                assignments[s.sample_id] = fold
    return FoldSplit(k=k, assignments=assignments)


# ---------------------------------------------------------------------------
# dihedral augmentation
# ---------------------------------------------------------------------------

AUGMENT_PATTERNS = (
    "identity",
    "rot90",
    "rot180",
    "rot270",
    "flip_h",
    "flip_v",
    "flip_h_rot90",
    "flip_v_rot90",
)

_PATTERN_OPS = {
    # (quarter turns counter-clockwise, then flip axis or None)
    "identity": (0, None),
    "rot90": (1, None),
    "rot180": (2, None),
    "rot270": (3, None),
    "flip_h": (0, -1),
    "flip_v": (0, -2),
    "flip_h_rot90": (1, -1),
    "flip_v_rot90": (1, -2),
}


def apply_augmentation(x, pattern):
    """Apply a dihedral pattern to the last two (square) axes.

    Rotations are counter-clockwise; ``flip_h`` mirrors left-right and
    ``flip_v`` top-bottom; ``flip_h_rot90`` rotates first, then mirrors.
    """
    x = np.asarray(x)
    if x.shape[-1] != x.shape[-2]:
        raise ValueError(f"augmentation needs square images, got {x.shape[-2:]}")
    turns, flip_axis = _PATTERN_OPS[pattern]
    out = np.rot90(x, k=turns, axes=(-2, -1)) if turns else x
    if flip_axis is not None:
        out = np.flip(out, axis=flip_axis)
    return np.ascontiguousarray(out)


def _signature(pattern):
    probe = np.arange(9).reshape(3, 3)
    return apply_augmentation(probe, pattern).tobytes()


def compose_patterns(outer, inner):
    """Pattern equal to applying ``inner`` then ``outer``."""
    probe = np.arange(9).reshape(3, 3)
    target = apply_augmentation(apply_augmentation(probe, inner), outer).tobytes()
    for p in AUGMENT_PATTERNS:
        if _signature(p) == target:
            return p
    raise AssertionError("dihedral patterns are not closed")  # unreachable for the table above


def inverse_pattern(pattern):
    for p in AUGMENT_PATTERNS:
        if compose_patterns(p, pattern) == "identity":
            return p
    raise AssertionError("pattern has no inverse")


def select_augmentation(rng):
    """One of the 8 patterns, uniformly."""
    return AUGMENT_PATTERNS[int(rng.integers(len(AUGMENT_PATTERNS)))]


def select_channels(channels, mode):
    """Channel subset for an input mode: combined (6), oct_only (0-2) or octa_only (3-5)."""
    if mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {mode!r}; expected one of {tuple(INPUT_MODES)}")
    if isinstance(channels, EnFaceSample):
        channels = channels.channels
    channels = np.asarray(channels)
    if channels.shape[-3] != N_CHANNELS:
        raise ValueError(f"expected {N_CHANNELS} channels, got {channels.shape[-3]}")
    return np.ascontiguousarray(channels[..., list(INPUT_MODES[mode]), :, :])


def input_channels_for_mode(mode):
    if mode not in INPUT_MODES:
        raise ValueError(f"unknown input mode {mode!r}")
    return len(INPUT_MODES[mode])


# ---------------------------------------------------------------------------
# synthetic data
# ---------------------------------------------------------------------------

VOID_RADIUS_FRACTION = (0.04, 0.10)
VOID_LEVEL = 0.05
THICKNESS_STEP = 0.05
NOISE_SIGMA = 0.05


def _smooth_field(rng, size):
    g = gaussian_filter(rng.standard_normal((size, size)), sigma=size / 16.0, mode="wrap")
    g = (g - g.mean()) / (g.std() + 1e-12)
    return 0.5 + 0.1 * g


def synthetic_channels(rng, cls, size):
    """6 x size x size stack for class ``cls``: ``cls`` dark disks in the OCTA
    channels and a thickness map scaled by ``1 - 0.05 * cls``."""
    lo_frac, hi_frac = VOID_RADIUS_FRACTION
    if lo_frac * size < 1.0:
        raise ValueError(f"size {size} too small for void radius {lo_frac} * size >= 1 pixel")
    ch = np.stack([_smooth_field(rng, size) for _ in range(N_CHANNELS)])
    ch[0] *= 1.0 - THICKNESS_STEP * cls
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(cls):
        r = rng.uniform(lo_frac, hi_frac) * size
        cy, cx = rng.uniform(r, size - r, size=2)
        disk = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        ch[3:, disk] = VOID_LEVEL
    ch += rng.normal(0.0, NOISE_SIGMA, size=ch.shape)
    return np.clip(ch, 0.0, 1.0).astype(np.float32)


def generate_synthetic_dataset(n_per_class, num_classes, size, seed, out_dir=None, level_map=None):
    """Deterministic class-conditional en-face stacks.

    Returns ``(samples, rows)``; when ``out_dir`` is given the sample files and
    ``manifest.csv`` are written there. Each sample gets its own patient id and
    an ETDRS grade that maps back to its class at level ``num_classes``.
    """
    if n_per_class < 1:
        raise ValueError("n_per_class must be at least 1")
    if num_classes not in (2, 3, 4):
        raise ValueError("num_classes must be 2, 3 or 4")
    level_map = level_map or LevelLabelMap.default()
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    samples, rows = [], []
    idx = 0
    for cls in range(num_classes):
        grade = level_map.representative_grade(num_classes, cls)
        for _ in range(n_per_class):
            rng = np.random.default_rng([seed, idx])
            sample = EnFaceSample(
                sample_id=f"s{idx:05d}",
                patient_id=f"p{idx:05d}",
                etdrs_grade=grade,
                channels=synthetic_channels(rng, cls, size),
            )
            samples.append(sample)
            rel = Path("samples") / f"{sample.sample_id}.enfc"
            rows.append(ManifestRow(sample.sample_id, sample.patient_id, grade, rel))
            if out is not None:
                (out / "samples").mkdir(exist_ok=True)
                write_sample(out / rel, sample)
            idx += 1
    if out is not None:
        write_manifest(out / "manifest.csv", [ManifestRow(r.sample_id, r.patient_id, r.etdrs_grade, r.path) for r in rows])
    return samples, rows


def load_dataset(rows, level, input_mode="combined", level_map=None):
    """Stack manifest rows into (x, classes, sample_ids, patient_ids)."""
    if not rows:
        raise ValueError("dataset is empty")
    x = np.stack([select_channels(read_channels(r.path), input_mode) for r in rows])
    y = np.array([level_class(r.etdrs_grade, level, level_map) for r in rows], dtype=np.int64)
    return x, y, [r.sample_id for r in rows], [r.patient_id for r in rows]
