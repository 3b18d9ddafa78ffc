import itertools
import logging
from collections import Counter
from types import SimpleNamespace

import numpy as np
import pytest

from dcardnet import data
from dcardnet.data import (
    AUGMENT_PATTERNS,
    EnFaceSample,
    FormatError,
    LevelLabelMap,
    ManifestRow,
    apply_augmentation,
    compose_patterns,
    generate_synthetic_dataset,
    inverse_pattern,
    kfold_split_patientwise,
    level_class,
    read_manifest,
    read_sample,
    select_augmentation,
    select_channels,
    write_manifest,
    write_sample,
)
from dcardnet.tensor import make_rng


def _sample(rng, size=8, sid="a"):
    return EnFaceSample(sid, "p1", 35, rng.random((6, size, size), dtype=np.float32))


def test_sample_round_trip_is_bitwise(tmp_path, rng):
    s = _sample(rng)
    write_sample(tmp_path / "a.enfc", s)
    back = read_sample(tmp_path / "a.enfc")
    assert back.sample_id == "a"
    assert back.channels.dtype == np.float32
    np.testing.assert_array_equal(back.channels, s.channels)


def test_full_size_file_length(tmp_path, rng):
    write_sample(tmp_path / "x.enfc", _sample(rng, size=224))
    assert (tmp_path / "x.enfc").stat().st_size == 20 + 6 * 224 * 224 * 4


def test_corrupt_files_are_rejected(tmp_path, rng):
    p = tmp_path / "a.enfc"
    write_sample(p, _sample(rng))
    raw = p.read_bytes()
    for bad in (b"XXXX" + raw[4:], raw[:-4], raw[:10]):
        p.write_bytes(bad)
        with pytest.raises(FormatError):
            read_sample(p)


def test_invalid_samples():
    with pytest.raises(ValueError):
        EnFaceSample("a", "p", 10, np.full((6, 4, 4), 1.5, dtype=np.float32)).validate()
    with pytest.raises(ValueError):
        EnFaceSample("a", "p", 10, np.zeros((5, 4, 4), dtype=np.float32)).validate()


def test_normalize_channels():
    raw = np.stack([np.arange(4.0).reshape(2, 2), np.full((2, 2), 3.0)])
    out = data.normalize_channels(raw)
    np.testing.assert_allclose(out[0], [[0, 1 / 3], [2 / 3, 1]], rtol=1e-6)
    np.testing.assert_array_equal(out[1], 0.0)


def test_manifest_round_trip_and_relative_paths(tmp_path):
    rows = [ManifestRow("s1", "p1", 10, "samples/s1.enfc"), ManifestRow("s2", "p1", 43, "samples/s2.enfc", followup=True)]
    write_manifest(tmp_path / "m.csv", rows)
    back = read_manifest(tmp_path / "m.csv")
    assert [r.sample_id for r in back] == ["s1", "s2"]
    assert back[0].path == (tmp_path / "samples/s1.enfc").resolve()
    assert [r.followup for r in back] == [False, True]


def test_manifest_errors(tmp_path):
    p = tmp_path / "m.csv"
    p.write_text("id,patient\n")
    with pytest.raises(FormatError):
        read_manifest(p)
    p.write_text("sample_id,patient_id,etdrs_grade,path\na,p,10,x\na,p,10,y\n")
    with pytest.raises(FormatError):
        read_manifest(p)


@pytest.mark.parametrize("grade,labels", [(10, (0, 0, 0)), (14, (0, 0, 0)), (20, (0, 1, 1)), (35, (1, 1, 1)),
                                          (47, (1, 1, 1)), (53, (1, 1, 2)), (61, (1, 2, 3)), (85, (1, 2, 3))])
def test_grade_mapping(grade, labels):
    assert data.etdrs_to_level_labels(grade) == labels


def test_grade_mapping_errors(tmp_path):
    with pytest.raises(ValueError):
        level_class(90, 2)
    with pytest.raises(ValueError):
        level_class(35, 5)
    with pytest.raises(ValueError):
        LevelLabelMap([data.GradeBand(10, 19, 0, 0, 0), data.GradeBand(21, 85, 1, 1, 1)])
    with pytest.raises(ValueError):
        LevelLabelMap([data.GradeBand(10, 19, 1, 1, 1), data.GradeBand(20, 85, 0, 0, 0)])
    m = LevelLabelMap.default()
    m.write(tmp_path / "map.csv")
    assert LevelLabelMap.read(tmp_path / "map.csv").bands == m.bands


def test_drop_unchanged_followups():
    rows = [ManifestRow("a", "p", 10, "a"), ManifestRow("b", "p", 14, "b", True), ManifestRow("c", "p", 43, "c", True)]
    assert [r.sample_id for r in data.drop_unchanged_followups(rows, 2)] == ["a", "c"]


def _roster(n_patients, rng, grades=(10, 35, 65)):
    samples = []
    for p in range(n_patients):
        for j in range(int(rng.integers(1, 3))):
            samples.append(SimpleNamespace(sample_id=f"s{p}_{j}", patient_id=f"p{p}",
                                           etdrs_grade=int(rng.choice(grades))))
    return samples


def test_patients_never_span_folds(rng):
    samples = _roster(200, rng)
    split = kfold_split_patientwise(samples, 10, 3, make_rng(0))
    folds = {}
    for s in samples:
        folds.setdefault(s.patient_id, set()).add(split.assignments[s.sample_id])
    assert all(len(f) == 1 for f in folds.values())
    assert set(split.assignments) == {s.sample_id for s in samples}
    assert split.fold_sizes().sum() == len(samples)


def test_stratification_tracks_global_mix():
    samples = [SimpleNamespace(sample_id=f"s{i}", patient_id=f"p{i}", etdrs_grade=g)
               for i, g in enumerate([10] * 101 + [35] * 101 + [65] * 101)]
    split = kfold_split_patientwise(samples, 10, 3, make_rng(1))
    for f in range(10):
        ids = set(split.test_ids(f))
        mix = Counter(level_class(s.etdrs_grade, 3) for s in samples if s.sample_id in ids)
        for c in range(3):
            assert abs(mix[c] / len(ids) - 1 / 3) < 0.05


def test_balanced_two_class_five_fold():
    samples = [SimpleNamespace(sample_id=f"s{i}", patient_id=f"p{i}", etdrs_grade=10 if i < 25 else 43)
               for i in range(50)]
    split = kfold_split_patientwise(samples, 5, 2, make_rng(0))
    for f in range(5):
        classes = Counter(level_class(s.etdrs_grade, 2) for s in samples if split.assignments[s.sample_id] == f)
        assert classes == {0: 5, 1: 5}


def test_split_errors_and_warning(caplog):
    samples = [SimpleNamespace(sample_id=f"s{i}", patient_id=f"p{i}", etdrs_grade=10 if i else 65) for i in range(12)]
    with pytest.raises(ValueError):
        kfold_split_patientwise(samples[:3], 5, 2, make_rng(0))
    with caplog.at_level(logging.WARNING):
        kfold_split_patientwise(samples, 5, 2, make_rng(0))
    assert "fewer than k" in caplog.text


def test_split_is_seeded(rng):
    samples = _roster(60, rng)
    a = kfold_split_patientwise(samples, 5, 2, make_rng(9)).assignments
    assert a == kfold_split_patientwise(samples, 5, 2, make_rng(9)).assignments


def test_augmentation_group():
    probe = np.arange(16).reshape(4, 4)
    images = {apply_augmentation(probe, p).tobytes() for p in AUGMENT_PATTERNS}
    assert len(AUGMENT_PATTERNS) == 8 and len(images) == 8
    for a, b in itertools.product(AUGMENT_PATTERNS, repeat=2):
        assert compose_patterns(a, b) in AUGMENT_PATTERNS
    for p in AUGMENT_PATTERNS:
        q = inverse_pattern(p)
        np.testing.assert_array_equal(apply_augmentation(apply_augmentation(probe, p), q), probe)


def test_augmentation_orientation():
    x = np.array([[1, 2], [3, 4]])
    np.testing.assert_array_equal(apply_augmentation(x, "rot90"), [[2, 4], [1, 3]])
    np.testing.assert_array_equal(apply_augmentation(x, "flip_h"), [[2, 1], [4, 3]])
    np.testing.assert_array_equal(apply_augmentation(x, "flip_v"), [[3, 4], [1, 2]])
    with pytest.raises(ValueError):
        apply_augmentation(np.zeros((2, 3)), "rot90")


def test_augmentation_draws_are_uniform():
    rng = make_rng(0)
    counts = Counter(select_augmentation(rng) for _ in range(80_000))
    assert set(counts) == set(AUGMENT_PATTERNS)
    assert all(abs(n - 10_000) <= 500 for n in counts.values())


def test_channel_selection():
    x = np.arange(6)[:, None, None] * np.ones((6, 2, 2))
    assert select_channels(x, "oct_only")[:, 0, 0].tolist() == [0, 1, 2]
    assert select_channels(x, "octa_only")[:, 0, 0].tolist() == [3, 4, 5]
    assert select_channels(x[None], "combined").shape == (1, 6, 2, 2)
    with pytest.raises(ValueError):
        select_channels(x, "fundus")


def test_synthetic_dataset_is_deterministic(tmp_path):
    a, rows = generate_synthetic_dataset(2, 4, 32, seed=3, out_dir=tmp_path)
    b, _ = generate_synthetic_dataset(2, 4, 32, seed=3)
    for s, t in zip(a, b):
        np.testing.assert_array_equal(s.channels, t.channels)
    assert [level_class(r.etdrs_grade, 4) for r in rows] == [0, 0, 1, 1, 2, 2, 3, 3]
    back = read_manifest(tmp_path / "manifest.csv")
    np.testing.assert_array_equal(read_sample(back[5].path).channels, a[5].channels)
    assert len({s.patient_id for s in a}) == 8


def test_synthetic_voids_and_range():
    rng = make_rng(0)
    for cls in range(4):
        ch = data.synthetic_channels(rng, cls, 64)
        assert ch.shape == (6, 64, 64) and ch.min() >= 0 and ch.max() <= 1
    healthy = data.synthetic_channels(make_rng(1), 0, 64)
    sick = data.synthetic_channels(make_rng(1), 3, 64)
    dark = lambda ch: (ch[3:].mean(axis=0) < 0.2).sum()
    assert dark(sick) > dark(healthy) + 3 * np.pi * (0.04 * 64) ** 2 / 2
    with pytest.raises(ValueError):
        data.synthetic_channels(rng, 1, 16)


def test_load_dataset(tmp_path):
    _, rows = generate_synthetic_dataset(2, 2, 32, seed=0, out_dir=tmp_path)
    x, y, ids, pids = data.load_dataset(read_manifest(tmp_path / "manifest.csv"), 2, "octa_only")
    assert x.shape == (4, 3, 32, 32)
    assert y.tolist() == [0, 0, 1, 1]
    assert ids == ["s00000", "s00001", "s00002", "s00003"]
