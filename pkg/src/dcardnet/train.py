"""Training loop, fold protocol and run-directory layout.

A run directory holds ``config.txt``, ``seed.txt``, one ``fold_XX/``
subdirectory per fold (checkpoint, predictions, confusion matrix, metrics,
curves), the aggregate ``metrics_overall.csv`` / ``metrics_perclass.csv`` /
``report.txt`` and finally a ``DONE`` marker, or ``FAILED`` with the error.
No file depends on wall-clock time, so identical inputs give identical bytes.
"""

import csv
import logging
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from types import SimpleNamespace

import numpy as np

from dcardnet import metrics
from dcardnet.checkpoint import save_checkpoint
from dcardnet.data import (
    LEVEL_CLASS_NAMES,
    LevelLabelMap,
    apply_augmentation,
    drop_unchanged_followups,
    kfold_split_patientwise,
    level_class,
    read_channels,
    read_manifest,
    select_augmentation,
    select_channels,
)
from dcardnet.model import build_model
from dcardnet.optim import CosineSchedule, NesterovSGD, cosine_lr
from dcardnet.smoothing import SmoothingState, class_weight_table, training_loss
from dcardnet.tensor import Tensor, make_rng

logger = logging.getLogger(__name__)

TEST_WINDOW = 50
TRAIN_ACC_WINDOW = 100
CURVE_FIELDS = [
    "step", "lr",
    "train_loss", "train_acc", "test_loss", "test_acc",
    "train_loss_smooth", "train_acc_smooth", "test_loss_smooth", "test_acc_smooth",
]

# rng stream ids under (seed, fold)
_INIT, _BATCH, _AUGMENT, _DROPOUT = range(4)
_SPLIT_STREAM = 1 << 16


class RunError(RuntimeError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # N x C x H x W float32
    y: np.ndarray  # class indices at the run's level
    sample_ids: list
    patient_ids: list
    grades: list

    def __len__(self):
        return len(self.y)

    def records(self):
        return [SimpleNamespace(sample_id=s, patient_id=p, etdrs_grade=g)
                for s, p, g in zip(self.sample_ids, self.patient_ids, self.grades)]

    def subset(self, ids):
        index = {s: i for i, s in enumerate(self.sample_ids)}
        sel = np.array([index[s] for s in ids], dtype=np.int64)
        return Dataset(
            x=self.x[sel],
            y=self.y[sel],
            sample_ids=[self.sample_ids[i] for i in sel],
            patient_ids=[self.patient_ids[i] for i in sel],
            grades=[self.grades[i] for i in sel],
        )


def level_map_for(cfg, base_dir=None):
    if not cfg.label_map:
        return LevelLabelMap.default()
    path = Path(cfg.label_map)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return LevelLabelMap.read(path)


def load_manifest_dataset(cfg, manifest, level_map=None):
    """Read every sample listed in ``manifest`` at the run's level and input mode."""
    level_map = level_map or LevelLabelMap.default()
    rows = read_manifest(manifest)
    if cfg.drop_unchanged_followups:
        rows = drop_unchanged_followups(rows, cfg.level, level_map)
    if not rows:
        raise RunError(f"{manifest}: no samples")
    xs = []
    for r in rows:
        ch = read_channels(r.path)
        if ch.shape[1:] != (cfg.input_size, cfg.input_size):
            raise RunError(f"{r.path}: {ch.shape[1]}x{ch.shape[2]} sample, config expects input_size {cfg.input_size}")
        xs.append(select_channels(ch, cfg.input_mode))
    return Dataset(
        x=np.stack(xs),
        y=np.array([level_class(r.etdrs_grade, cfg.level, level_map) for r in rows], dtype=np.int64),
        sample_ids=[r.sample_id for r in rows],
        patient_ids=[r.patient_id for r in rows],
        grades=[r.etdrs_grade for r in rows],
    )


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


def moving_average(values, window):
    """Trailing mean over up to ``window`` points; None entries are skipped."""
    out = []
    for i in range(len(values)):
        chunk = [v for v in values[max(0, i - window + 1):i + 1] if v is not None]
        out.append(sum(chunk) / len(chunk) if chunk else None)
    return out


class Curves:
    """Loss and accuracy points recorded every ``eval_every`` steps."""

    def __init__(self):
        self.rows = []

    def add(self, step, lr, train_loss, train_acc, test_loss=None, test_acc=None):
        self.rows.append(dict(step=step, lr=lr, train_loss=train_loss, train_acc=train_acc,
                              test_loss=test_loss, test_acc=test_acc))

    def column(self, name):
        return [r[name] for r in self.rows]

    def smoothed(self):
        return {
            "train_loss_smooth": moving_average(self.column("train_loss"), TEST_WINDOW),
            "train_acc_smooth": moving_average(self.column("train_acc"), TRAIN_ACC_WINDOW),
            "test_loss_smooth": moving_average(self.column("test_loss"), TEST_WINDOW),
            "test_acc_smooth": moving_average(self.column("test_acc"), TEST_WINDOW),
        }

    def write_csv(self, path):
        sm = self.smoothed()
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CURVE_FIELDS)
            for i, r in enumerate(self.rows):
                rec = {**r, **{k: v[i] for k, v in sm.items()}}
                w.writerow([_fmt(rec[k]) for k in CURVE_FIELDS])


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (int, np.integer)):
        return str(v)
    return f"{v:.6g}"


def read_curves(path):
    with open(path, newline="") as fh:
        return [{k: (float(v) if v else None) for k, v in rec.items()} for rec in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def evaluate(model, x, y, batch_size=16):
    """Infer-mode ``(probs, mean cross-entropy, accuracy, confusion)``."""
    probs = model.predict_proba(x, batch_size=batch_size)
    y = np.asarray(y)
    p_true = np.clip(probs[np.arange(len(y)), y], 1e-12, None)
    loss = float(-np.log(p_true).mean())
    pred = np.argmax(probs, axis=1)
    cm = metrics.confusion_matrix(y, pred, model.cfg.num_classes)
    return probs, loss, metrics.overall_accuracy(cm), cm


class BatchSampler:
    """Shuffled passes over the training indices, reshuffled after each pass."""

    def __init__(self, n, batch_size, rng):
        if n < 1:
            raise RunError("training set is empty")
        self.n, self.batch_size, self.rng = n, min(batch_size, n), rng
        self.order, self.pos = self.rng.permutation(n), 0

    def next(self):
        if self.pos + self.batch_size > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos:self.pos + self.batch_size]
        self.pos += self.batch_size
        return idx


def train_model(cfg, train, test=None, rng_key=(0, 0), progress=None):
    """Train a fresh model on ``train``; returns ``(model, smoothing_state, curves)``.

    With ``bn_recalibration`` the BN running statistics are re-estimated
    over the training set, dropout off, before every curve evaluation
    (temporarily, on a strided subset) and once at the end (all samples).

    ``rng_key`` seeds independent streams for init, batch order, augmentation
    and dropout, so a fold's result does not depend on other folds.
    """
    model = build_model(cfg.model_config(), make_rng([*rng_key, _INIT]))
    sampler = BatchSampler(len(train), cfg.batch_size, make_rng([*rng_key, _BATCH]))
    aug_rng = make_rng([*rng_key, _AUGMENT])
    drop_rng = make_rng([*rng_key, _DROPOUT])
    opt = NesterovSGD(model.parameters(), momentum=cfg.momentum)
    schedule = CosineSchedule(lr_init=cfg.lr_init, step_stop=cfg.step_stop)
    state = SmoothingState(cfg.s_init, cfg.d, cfg.s_max)
    state.register(train.sample_ids)
    weights = None
    if cfg.loss_mode in ("class_weights", "both"):
        weights = class_weight_table(train.y, cfg.num_classes)

    curves = Curves()
    window_loss, window_acc = [], []
    for step in range(cfg.total_steps):
        idx = sampler.next()
        xb = np.stack([apply_augmentation(train.x[i], select_augmentation(aug_rng)) for i in idx])
        ids = [train.sample_ids[i] for i in idx]
        lr = cosine_lr(step, schedule)
        model.zero_grad()
        logits = model.forward(Tensor(xb), mode="train", rng=drop_rng)
        loss, _, preds = training_loss(logits, ids, train.y[idx], state, cfg.loss_mode, weights)
        loss.backward()
        opt.step(lr)
        window_loss.append(loss.item())
        window_acc.append(float(np.mean(preds == train.y[idx])))

        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            test_loss = test_acc = None
            if test is not None and len(test):
                _, test_loss, test_acc, _ = _evaluate_during_training(cfg, model, train, test)
            curves.add(done, lr, float(np.mean(window_loss)), float(np.mean(window_acc)), test_loss, test_acc)
            window_loss, window_acc = [], []
            if progress is not None:
                progress(curves.rows[-1])
    if cfg.bn_recalibration:
        model.recalibrate_batch_norm(train.x, cfg.batch_size)
    return model, state, curves


def calibration_subset(n, count):
    """Evenly strided indices, at most ``count`` of ``n``."""
    if n <= count:
        return np.arange(n)
    return np.linspace(0, n - 1, count).round().astype(np.int64)


def _evaluate_during_training(cfg, model, train, test):
    if not cfg.bn_recalibration:
        return evaluate(model, test.x, test.y)
    saved = model.bn_statistics()
    try:
        model.recalibrate_batch_norm(train.x[calibration_subset(len(train), cfg.calibration_samples)], cfg.batch_size)
        return evaluate(model, test.x, test.y)
    finally:
        model.restore_bn_statistics(saved)


# ---------------------------------------------------------------------------
# folds
# ---------------------------------------------------------------------------


def write_predictions(path, data, probs):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "true", "pred"] + [f"p{c}" for c in range(probs.shape[1])])
        for sid, t, p in zip(data.sample_ids, data.y, probs):
            w.writerow([sid, int(t), int(np.argmax(p))] + [f"{v:.6f}" for v in p])


def run_fold(cfg, data, split, fold, out_dir):
    """Train and evaluate one fold, writing its artifacts under ``out_dir/fold_XX``."""
    fold_dir = Path(out_dir) / f"fold_{fold:02d}"
    fold_dir.mkdir(parents=True, exist_ok=True)
    train = data.subset(split.train_ids(fold))
    test = data.subset(split.test_ids(fold))
    t0 = time.perf_counter()

    def progress(row):
        logger.info("fold %d step %d lr %.5f train loss %.4f acc %.3f test acc %s",
                    fold, row["step"], row["lr"], row["train_loss"], row["train_acc"],
                    "-" if row["test_acc"] is None else f"{row['test_acc']:.3f}")

    model, state, curves = train_model(cfg, train, test, rng_key=(cfg.seed, fold), progress=progress)
    save_checkpoint(fold_dir / "checkpoint.dcrd", model, state.snapshot())
    curves.write_csv(fold_dir / "curves.csv")
    probs, _, _, cm = evaluate(model, test.x, test.y)
    write_predictions(fold_dir / "predictions.csv", test, probs)
    metrics.write_confusion_csv(fold_dir / "confusion.csv", cm)
    result = metrics.FoldResult(fold=fold, confusion=cm)
    metrics.write_metrics_csvs(fold_dir, cfg.level, [result])
    logger.info("fold %d done in %.1f s, accuracy %.3f", fold, time.perf_counter() - t0, result.accuracy)
    return result


def _fold_worker(args):
    cfg, data, split, fold, out_dir = args
    return run_fold(cfg, data, split, fold, out_dir)


def run_training(cfg, manifest, out_dir, level_map=None, folds_to_run=None):
    """k-fold training over ``manifest``; returns the aggregate :class:`FoldReport`.

    Writes ``FAILED`` (and re-raises) on any error; fold artifacts written
    before the failure are kept.
    """
    manifest = Path(manifest)
    if not manifest.is_file():
        raise RunError(f"manifest not found: {manifest}")
    level_map = level_map or level_map_for(cfg, manifest.parent)
    data = load_manifest_dataset(cfg, manifest, level_map)

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for marker in ("DONE", "FAILED"):
        (out / marker).unlink(missing_ok=True)
    cfg.write(out / "config.txt")
    (out / "seed.txt").write_text(f"{cfg.seed}\n")
    try:
        split = kfold_split_patientwise(data.records(), cfg.folds, cfg.level, make_rng([cfg.seed, _SPLIT_STREAM]), level_map)
        with open(out / "folds.csv", "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["sample_id", "patient_id", "fold"])
            for sid, pid in zip(data.sample_ids, data.patient_ids):
                w.writerow([sid, pid, split.assignments[sid]])
        folds = list(range(cfg.folds)) if folds_to_run is None else list(folds_to_run)
        jobs = [(cfg, data, split, k, out) for k in folds]
        if cfg.parallel_folds > 1 and len(folds) > 1:
            with ProcessPoolExecutor(max_workers=cfg.parallel_folds) as pool:
                results = list(pool.map(_fold_worker, jobs))
        else:
            results = [_fold_worker(job) for job in jobs]
        metrics.write_metrics_csvs(out, cfg.level, results)
        report = metrics.aggregate_folds(results, cfg.level)
        (out / "report.txt").write_text(report.format_table(LEVEL_CLASS_NAMES[cfg.level]) + "\n")
    except BaseException as exc:
        (out / "FAILED").write_text("".join(traceback.format_exception_only(type(exc), exc)))
        raise
    (out / "DONE").write_text("ok\n")
    return report
