"""Command line: train, eval, infer, cam, synth, gradcheck.

Exit codes: 0 success, 1 runtime error, 2 usage error (bad flags or config).
"""

import functools
import logging
import sys
import time
from pathlib import Path

import click
import numpy as np
from threadpoolctl import threadpool_limits

from dcardnet import kernels
from dcardnet.checkpoint import load_checkpoint, read_checkpoint
from dcardnet.config import ConfigError, RunConfig, load_config
from dcardnet.data import (
    CHANNEL_NAMES,
    INPUT_MODES,
    LEVEL_CLASS_NAMES,
    generate_synthetic_dataset,
    level_class,
    read_channels,
    read_manifest,
    select_channels,
)

logger = logging.getLogger("dcardnet")


class RuntimeFailure(click.ClickException):
    exit_code = 1

    def show(self, file=None):
        click.echo(f"error: {self.message}", err=True)


def _runtime_errors(fn):
    """Report module errors as exit code 1; click keeps 2 for usage errors."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        threads = kwargs.pop("threads", 1)
        try:
            with threadpool_limits(limits=threads):
                return fn(*args, **kwargs)
        except (click.ClickException, click.exceptions.Exit, click.Abort):
            raise
        except ConfigError as exc:
            raise click.UsageError(str(exc)) from None
        except Exception as exc:  # noqa: BLE001 - every failure maps to exit code 1
            logger.debug("command failed", exc_info=True)
            raise RuntimeFailure(f"{type(exc).__name__}: {exc}") from None

    return wrapper


threads_option = click.option(
    "--threads", type=click.IntRange(min=1), default=1, show_default=True,
    help="BLAS threads; 1 keeps results bitwise reproducible.",
)


def _load_run_config(config, **overrides):
    cfg = load_config(config) if config else RunConfig()
    return cfg.with_overrides(**overrides)


def _mode_for_channels(n_channels, requested):
    if requested:
        if len(INPUT_MODES[requested]) != n_channels:
            raise ValueError(f"input mode {requested} gives {len(INPUT_MODES[requested])} channels, "
                             f"checkpoint expects {n_channels}")
        return requested
    if n_channels == 6:
        return "combined"
    raise click.UsageError(f"checkpoint takes {n_channels} channels; pass --input-mode oct_only or octa_only")


def _checkpoint_channels(path):
    arrays, _ = read_checkpoint(path)
    return arrays["stem.conv1.weight"].shape[1]


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
@click.option("-v", "--verbose", count=True, help="Log progress (-vv for debug).")
@click.option("--backend", type=click.Choice(["auto", "compiled", "numpy"]), default="auto",
              help="Kernel implementation; auto prefers the compiled extension.")
def main(verbose, backend):
    """DcardNet diabetic retinopathy classifier on en-face OCT/OCTA stacks."""
    level = logging.WARNING if verbose == 0 else logging.INFO if verbose == 1 else logging.DEBUG
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    if backend != "auto":
        try:
            kernels.use_backend(backend)
        except RuntimeError as exc:
            raise click.UsageError(str(exc)) from None


@main.command()
@click.option("--config", type=click.Path(dir_okay=False), help="key = value run configuration.")
@click.option("--manifest", required=True, type=click.Path(dir_okay=False), help="Sample manifest CSV.")
@click.option("--out", required=True, type=click.Path(file_okay=False), help="Run directory.")
@click.option("--level", type=click.Choice(["2", "3", "4"]), help="Override the classification level.")
@click.option("--seed", type=int, help="Override the seed.")
@click.option("--folds", type=click.IntRange(min=2), help="Override the fold count.")
@threads_option
@_runtime_errors
def train(config, manifest, out, level, seed, folds):
    """k-fold training with per-fold checkpoints, metrics and curves."""
    from dcardnet.train import run_training

    cfg = _load_run_config(config, level=int(level) if level else None, seed=seed, folds=folds)
    t0 = time.perf_counter()
    report = run_training(cfg, manifest, out)
    click.echo(report.format_table(LEVEL_CLASS_NAMES[cfg.level]))
    click.echo(f"run directory: {out}  ({time.perf_counter() - t0:.1f} s)", err=True)


@main.command("eval")
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.option("--manifest", required=True, type=click.Path(dir_okay=False))
@click.option("--config", type=click.Path(dir_okay=False), help="Run configuration (input mode, label map).")
@click.option("--level", type=click.Choice(["2", "3", "4"]), help="Level of the labels; defaults to the checkpoint's.")
@click.option("--input-mode", type=click.Choice(list(INPUT_MODES)), help="Channel subset fed to the model.")
@click.option("--out", type=click.Path(file_okay=False), help="Write metrics CSVs here.")
@threads_option
@_runtime_errors
def eval_(checkpoint, manifest, config, level, input_mode, out):
    """Evaluate a checkpoint on every sample of a manifest."""
    from dcardnet import metrics
    from dcardnet.train import evaluate, level_map_for

    cfg = load_config(config) if config else None
    rows = read_manifest(manifest)
    if not rows:
        raise ValueError(f"{manifest}: manifest lists no samples")
    first = read_channels(rows[0].path)
    model, _ = load_checkpoint(checkpoint, input_size=first.shape[1])
    K = model.cfg.num_classes
    lvl = int(level) if level else K
    if lvl != K:
        raise ValueError(f"checkpoint has {K} classes but level {lvl} was requested")
    mode = _mode_for_channels(model.cfg.input_channels, input_mode or (cfg.input_mode if cfg else None))
    level_map = level_map_for(cfg, Path(manifest).parent) if cfg else None
    x = np.stack([select_channels(read_channels(r.path), mode) for r in rows])
    y = np.array([level_class(r.etdrs_grade, lvl, level_map) for r in rows])
    _, loss, acc, cm = evaluate(model, x, y)
    result = metrics.FoldResult(fold=0, confusion=cm)
    names = LEVEL_CLASS_NAMES[lvl]
    click.echo(f"samples: {len(rows)}")
    click.echo(f"accuracy: {acc:.4f}")
    click.echo(f"mean cross-entropy: {loss:.4f}")
    click.echo("confusion matrix (rows true, columns predicted):")
    for c in range(K):
        click.echo(f"  {names[c]:<20}" + " ".join(f"{int(v):>5}" for v in cm[c]))
    for c, (sens, spec) in enumerate(result.per_class()):
        s = "n/a" if sens is None else f"{sens:.4f}"
        p = "n/a" if spec is None else f"{spec:.4f}"
        click.echo(f"  {names[c]:<20} sensitivity {s}  specificity {p}")
    if out:
        metrics.write_metrics_csvs(out, lvl, [result])
        metrics.write_confusion_csv(Path(out) / "confusion.csv", cm)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.argument("sample", type=click.Path(dir_okay=False))
@click.option("--input-mode", type=click.Choice(list(INPUT_MODES)))
@threads_option
@_runtime_errors
def infer(checkpoint, sample, input_mode):
    """Predicted class and probability vector for one sample file."""
    channels = read_channels(sample)
    mode = _mode_for_channels(_checkpoint_channels(checkpoint), input_mode)
    model, _ = load_checkpoint(checkpoint, input_size=channels.shape[1])
    t0 = time.perf_counter()
    probs = model.predict_proba(select_channels(channels, mode)[None])[0]
    elapsed = time.perf_counter() - t0
    click.echo(f"predicted_class: {int(np.argmax(probs))}")
    click.echo("probabilities: " + " ".join(f"{p:.6f}" for p in probs))
    click.echo(f"inference time: {elapsed:.3f} s", err=True)


def write_pgm(path, img):
    """8-bit binary PGM (P5) of ``img`` min-max scaled to 0..255."""
    img = np.asarray(img, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi == lo else (img - lo) / (hi - lo)
    data = np.round(scaled * 255).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def read_pgm(path):
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    return np.frombuffer(parts[4][:w * h], dtype=np.uint8).reshape(h, w), maxval


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(dir_okay=False))
@click.argument("sample", type=click.Path(dir_okay=False))
@click.option("--class", "class_c", type=click.IntRange(min=0), help="Class to map; defaults to the prediction.")
@click.option("--out", required=True, type=click.Path(file_okay=False))
@click.option("--input-mode", type=click.Choice(list(INPUT_MODES)))
@threads_option
@_runtime_errors
def cam(checkpoint, sample, class_c, out, input_mode):
    """Class activation map: raw CSV, PGM map, PGM overlays per channel, metadata."""
    from dcardnet.model import compute_cam

    channels = read_channels(sample)
    mode = _mode_for_channels(_checkpoint_channels(checkpoint), input_mode)
    model, _ = load_checkpoint(checkpoint, input_size=channels.shape[1])
    if class_c is not None and class_c >= model.cfg.num_classes:
        raise click.BadParameter(f"class {class_c} but the model has {model.cfg.num_classes} classes",
                                 param_hint="--class")
    x = select_channels(channels, mode)
    cmap = compute_cam(model, x[None], "predicted" if class_c is None else class_c)
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    np.savetxt(out / "cam_raw.csv", cmap.raw, delimiter=",", fmt="%.8e")
    write_pgm(out / "cam.pgm", cmap.upsampled)
    up = cmap.upsampled
    up01 = (up - up.min()) / (up.max() - up.min()) if up.max() > up.min() else np.zeros_like(up)
    names = [CHANNEL_NAMES[i] for i in INPUT_MODES[mode]]
    for name, ch in zip(names, x):
        write_pgm(out / f"overlay_{name}.pgm", 0.5 * ch + 0.5 * up01)
    meta = [
        f"class = {cmap.class_index}",
        f"raw_shape = {cmap.raw.shape[0]}x{cmap.raw.shape[1]}",
        f"image_shape = {up.shape[0]}x{up.shape[1]}",
        f"raw_min = {cmap.raw.min():.8e}",
        f"raw_max = {cmap.raw.max():.8e}",
        f"logit = {cmap.logit:.8e}",
        f"fc_bias = {cmap.bias:.8e}",
        f"gap_minus_logit_plus_bias = {cmap.identity_error:.3e}",
    ]
    (out / "cam_meta.txt").write_text("\n".join(meta) + "\n")
    click.echo(f"class {cmap.class_index}: CAM written to {out} (identity error {cmap.identity_error:.2e})")


@main.command()
@click.option("--classes", "-K", "num_classes", type=click.Choice(["2", "3", "4"]), default="2", show_default=True)
@click.option("--n-per-class", type=click.IntRange(min=1), default=50, show_default=True)
@click.option("--size", type=click.IntRange(min=1), default=112, show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--out", required=True, type=click.Path(file_okay=False))
@threads_option
@_runtime_errors
def synth(num_classes, n_per_class, size, seed, out):
    """Write a synthetic class-conditional dataset and its manifest."""
    samples, _ = generate_synthetic_dataset(n_per_class, int(num_classes), size, seed, out_dir=out)
    click.echo(f"{len(samples)} samples written to {out}/manifest.csv")


@main.command()
@click.option("--scope", type=click.Choice(["ops", "model", "all"]), default="ops", show_default=True)
@click.option("--seed", type=int, default=0, show_default=True)
@threads_option
@_runtime_errors
def gradcheck(scope, seed):
    """Finite-difference gradient checks in double precision."""
    from dcardnet import gradsuite

    results = []
    if scope in ("ops", "all"):
        results += gradsuite.run_ops_suite(seed)
    if scope in ("model", "all"):
        results += gradsuite.run_model_suite(seed)
    click.echo(gradsuite.format_results(results))
    if not all(r.passed for r in results):
        for r in results:
            if not r.passed:
                click.echo(f"\n{r.name}:\n{r.report.format()}", err=True)
        raise RuntimeFailure("gradient check failed")
    click.echo("all gradient checks passed")


if __name__ == "__main__":
    main()
