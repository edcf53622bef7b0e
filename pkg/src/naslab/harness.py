"""Experiment driver: builds the baseline network and its regularised
variants, runs seeded trainings with per-epoch sparsity probes, repeats runs,
and writes every artifact (histories, heatmaps, stripe and line plots,
checkpoints) under the output directory.

Output tree for one experiment::

    <out>/run<r>/history.csv             per-epoch record
    <out>/run<r>/heatmaps/<layer>_<epoch>.ppm
    <out>/run<r>/stripe.ppm
    <out>/run<r>/weights.npz             final checkpoint
    <out>/lineplot.csv  lineplot.svg     band plot over the repeats
    <out>/effective_config               resolved config (reloads identically)
    <out>/meta                           timestamps etc. (the only
                                         non-deterministic bytes)

Everything except ``meta`` is a pure function of (config, seed).
"""

from __future__ import annotations

import json
import platform
import time
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, save_config
from .data import (Dataset, build_contaminated_test_set, load_cifar_binary,
                   subset, synthetic_dataset)
from .errors import ConfigurationError, DataError, InsufficientDataError
from .history import EpochRecord, RunHistory
from .metrics import LayerNasSnapshot, layer_nas, receptive_field_vectors
from .nn import (BatchNorm, Conv2D, Dense, Dropout, MaxPool2D, MeasurePoint,
                 Network, ReLU, accuracy, apply_sgd, cross_entropy_loss,
                 weight_penalty)
from .regularizer import (RegularizerConfig, filter_correlation, nas_penalty,
                          nas_penalty_gradient)
from .viz import export_lineplot, render_heatmap, render_stripe_plot

EVAL_BATCH = 256

BASE_WIDTHS = (256, 256, 512, 512, 1024)
MEASURED_LAYERS = ("conv1", "conv2", "conv3", "conv4", "fc1", "prediction")


def build_network(variant: str, scale: int, class_count: int, bias: bool = True,
                  dropout_conv: float = 0.3, dropout_dense: float = 0.5,
                  bn_momentum: float = 0.1, bn_epsilon: float = 1e-5,
                  rng: np.random.Generator | None = None, dtype=np.float32,
                  input_hw: tuple[int, int] = (32, 32)) -> Network:
    """Two conv-conv-pool blocks, a hidden dense layer, and the prediction
    layer; widths (256, 256, 512, 512, 1024) divided by ``scale``.

    The variant inserts dropout layers, batch normalisation, or (for nasreg)
    tags every measured layer except the prediction layer for the activity
    penalty. Sparsity is always measured on the value feeding the ReLU, so
    with batch normalisation the measure point moves to the BN output.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    widths = tuple(w // scale for w in BASE_WIDTHS)
    if min(widths) < 2:
        raise ConfigurationError(f"scale {scale} leaves widths {widths}; need >= 2 channels")
    w1, w2, w3, w4, w5 = widths
    h, w = input_hw
    if h % 4 or w % 4:
        raise ConfigurationError(f"input {h}x{w} must be divisible by the two 2x2 pools")
    use_bn = variant == "batchnorm"
    use_drop = variant == "dropout"
    regularize = variant == "nasreg"

    layers: list[tuple[str, object]] = []
    points: list[MeasurePoint] = []

    def add(name, layer):
        layers.append((name, layer))
        return len(layers) - 1

    def conv_block(name, cin, cout):
        idx = add(name, Conv2D(cin, cout, 3, stride=1, padding=1, bias=bias,
                               rng=rng, dtype=dtype))
        if use_bn:
            idx = add(f"{name}_bn", BatchNorm(cout, momentum=bn_momentum,
                                              epsilon=bn_epsilon, dtype=dtype))
        points.append(MeasurePoint(name, idx, regularize))
        add(f"{name}_relu", ReLU())
        if use_drop:
            add(f"{name}_drop", Dropout(dropout_conv, rng=rng))

    conv_block("conv1", 3, w1)
    conv_block("conv2", w1, w2)
    add("pool1", MaxPool2D(2))
    conv_block("conv3", w2, w3)
    conv_block("conv4", w3, w4)
    add("pool2", MaxPool2D(2))

    fc_in = w4 * (h // 4) * (w // 4)
    idx = add("fc1", Dense(fc_in, w5, bias=bias, rng=rng, dtype=dtype))
    if use_bn:
        idx = add("fc1_bn", BatchNorm(w5, momentum=bn_momentum,
                                      epsilon=bn_epsilon, dtype=dtype))
    points.append(MeasurePoint("fc1", idx, regularize))
    add("fc1_relu", ReLU())
    if use_drop:
        add("fc1_drop", Dropout(dropout_dense, rng=rng))

    idx = add("prediction", Dense(w5, class_count, bias=bias, rng=rng, dtype=dtype))
    points.append(MeasurePoint("prediction", idx, regularize=False))
    return Network(layers, points)


def network_meta(config: ExperimentConfig, class_count: int) -> dict:
    return {
        "variant": config.variant,
        "scale": config.scale,
        "class_count": class_count,
        "bias": config.bias,
        "dropout_conv": config.dropout_conv,
        "dropout_dense": config.dropout_dense,
        "bn_momentum": config.bn_momentum,
        "bn_epsilon": config.bn_epsilon,
        "input_hw": [32, 32],
    }


def network_from_meta(meta: dict, rng: np.random.Generator | None = None) -> Network:
    return build_network(
        variant=meta["variant"], scale=meta["scale"], class_count=meta["class_count"],
        bias=meta["bias"], dropout_conv=meta["dropout_conv"],
        dropout_dense=meta["dropout_dense"], bn_momentum=meta["bn_momentum"],
        bn_epsilon=meta["bn_epsilon"], rng=rng, input_hw=tuple(meta["input_hw"]))


def save_checkpoint(net: Network, meta: dict, path) -> None:
    payload = {"__meta__": np.array(json.dumps(meta))}
    payload.update(net.state_arrays())
    with open(path, "wb") as f:
        np.savez(f, **payload)


def load_checkpoint(path) -> tuple[Network, dict]:
    with np.load(path, allow_pickle=False) as z:
        meta = json.loads(z["__meta__"].item())
        arrays = {k: z[k] for k in z.files if k != "__meta__"}
    net = network_from_meta(meta)
    net.load_state(arrays)
    return net, meta


@dataclass(frozen=True)
class DataBundle:
    train: Dataset
    test: Dataset
    contaminated: Dataset | None
    probe: Dataset


def prepare_data(config: ExperimentConfig) -> DataBundle:
    """Load or synthesise the train/test pair, slice the deterministic
    subsets, and pick the fixed probe set from the test pool."""
    seed = config.seed
    if config.kind == "synthetic":
        train_full = synthetic_dataset(seed + 101, config.train_size, config.classes,
                                       noise=config.noise, jitter=config.jitter,
                                       label_noise=config.label_noise, origin="train")
        test_full = synthetic_dataset(seed + 202, config.test_size, config.classes,
                                      noise=config.noise, jitter=config.jitter,
                                      origin="test")
    else:
        root = Path(config.data_path)
        if config.kind == "cifar10":
            parts = [load_cifar_binary(root / f"data_batch_{i}.bin", "cifar10", "train")
                     for i in range(1, 6)]
            train_full = _concat(parts)
            test_full = load_cifar_binary(root / "test_batch.bin", "cifar10", "test")
        else:
            train_full = load_cifar_binary(root / "train.bin", "cifar100", "train")
            test_full = load_cifar_binary(root / "test.bin", "cifar100", "test")
        if config.train_size > len(train_full) or config.test_size > len(test_full):
            raise ConfigurationError(
                f"requested {config.train_size}/{config.test_size} samples, dataset has "
                f"{len(train_full)}/{len(test_full)}")
        train_full = subset(train_full, config.train_size, seed + 101)
        test_full = subset(test_full, config.test_size, seed + 202)
    contaminated = None
    if config.contaminate:
        contaminated = build_contaminated_test_set(
            train_full, test_full, seed + 303, per_side=config.contaminated_per_side)
    probe = subset(test_full, min(config.probe_size, len(test_full)), seed + 404)
    return DataBundle(train=train_full, test=test_full,
                      contaminated=contaminated, probe=probe)


def _concat(parts: list[Dataset]) -> Dataset:
    return Dataset(
        images=np.concatenate([p.images for p in parts]),
        labels=np.concatenate([p.labels for p in parts]),
        class_count=parts[0].class_count,
        provenance=np.concatenate([p.provenance for p in parts]),
        coarse_labels=None if parts[0].coarse_labels is None
        else np.concatenate([p.coarse_labels for p in parts]),
    )


def evaluate(net: Network, dataset: Dataset, batch_size: int = EVAL_BATCH):
    """Mean loss and accuracy over a dataset in eval mode; never mutates
    weights or running statistics."""
    total_loss = 0.0
    correct = 0.0
    n = len(dataset)
    for start in range(0, n, batch_size):
        xb = dataset.images[start:start + batch_size]
        yb = dataset.labels[start:start + batch_size]
        logits = net.forward(xb, train=False)
        loss, _ = cross_entropy_loss(logits, yb)
        total_loss += loss * len(yb)
        correct += accuracy(logits, yb) * len(yb)
    return total_loss / n, correct / n


def probe_layer_nas(net: Network, probe: Dataset,
                    heatmap_index: int = 0) -> dict[str, LayerNasSnapshot]:
    """Sparsity snapshot of every measured layer over the fixed probe set."""
    _, recorded = net.forward(probe.images, train=False, record=True)
    return {mp.name: layer_nas(recorded[mp.name], layer=mp.name,
                               heatmap_sample=heatmap_index)
            for mp in net.measure_points}


def regularizer_coefficients(net: Network, input_hw=(32, 32),
                             rule: RegularizerConfig | None = None) -> dict[str, float]:
    """Resolve the penalty coefficient of every tagged layer from its
    receptive-field count (a dummy shape probe; no state is touched)."""
    tagged = [mp for mp in net.measure_points if mp.regularize]
    if not tagged:
        return {}
    dummy = np.zeros((1, 3, *input_hw), dtype=np.float32)
    _, recorded = net.forward(dummy, train=False, record=True)
    counts = {}
    for mp in tagged:
        _, grid = receptive_field_vectors(recorded[mp.name])
        counts[mp.name] = grid.count
    return (rule or RegularizerConfig()).resolve(counts)


def _first_nonfinite_layer(recorded: dict[str, np.ndarray]) -> str | None:
    for name, value in recorded.items():
        if not np.all(np.isfinite(value)):
            return name
    return None


def _max_conv_correlation(net: Network) -> float:
    sims = [filter_correlation(layer.weights).max_similarity
            for _, layer in net.layers if isinstance(layer, Conv2D)]
    return max(sims)


def train_single_run(config: ExperimentConfig, bundle: DataBundle, run_seed: int,
                     run_dir: Path, log=None) -> RunHistory:
    """One seeded training with per-epoch probing; writes the run directory."""
    run_dir = Path(run_dir)
    heatmap_dir = run_dir / "heatmaps"
    heatmap_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(run_seed)
    class_count = bundle.train.class_count
    net = build_network(config.variant, config.scale, class_count, bias=config.bias,
                        dropout_conv=config.dropout_conv,
                        dropout_dense=config.dropout_dense,
                        bn_momentum=config.bn_momentum, bn_epsilon=config.bn_epsilon,
                        rng=rng)
    coeffs = regularizer_coefficients(net) if config.variant == "nasreg" else {}
    point_index = {mp.name: mp.layer_index for mp in net.measure_points}
    weight_kind = config.variant if config.variant in ("l1", "l2") else None
    weight_coeff = config.l1_coefficient if weight_kind == "l1" else config.l2_coefficient

    history = RunHistory(layers=list(MEASURED_LAYERS), seed=run_seed)

    def record_epoch(epoch: int, train_loss: float | None):
        test_loss, test_acc = evaluate(net, bundle.test)
        contaminated_loss = None
        if bundle.contaminated is not None:
            contaminated_loss, _ = evaluate(net, bundle.contaminated)
        if train_loss is None:
            train_loss, _ = evaluate(net, bundle.train)
        snapshots = probe_layer_nas(net, bundle.probe, config.heatmap_index)
        penalty_value = None
        if coeffs:
            _, recorded = net.forward(bundle.probe.images, train=False, record=True)
            penalty_value = nas_penalty(
                {n: recorded[n] for n in coeffs}, coeffs).total
        elif weight_kind is not None:
            penalty_value, _ = weight_penalty(net, weight_kind, weight_coeff)
        record = EpochRecord(
            epoch=epoch,
            train_loss=train_loss,
            test_loss=test_loss,
            test_accuracy=test_acc,
            contaminated_test_loss=contaminated_loss,
            penalty=penalty_value,
            max_filter_correlation=_max_conv_correlation(net),
            layer_nas={name: (snap.minimum, snap.median, snap.maximum)
                       for name, snap in snapshots.items()},
        )
        history.append(record)
        for name, snap in snapshots.items():
            render_heatmap(snap, heatmap_dir / f"{name}_{epoch}.ppm",
                           scale=config.heatmap_scale)
        if log:
            log(f"  epoch {epoch:3d}  train {train_loss:.4f}  test {test_loss:.4f}  "
                f"acc {test_acc:.4f}")

    record_epoch(0, train_loss=None)

    n_train = len(bundle.train)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train)
        loss_sum = 0.0
        for start in range(0, n_train, config.batch_size):
            batch = order[start:start + config.batch_size]
            xb = bundle.train.images[batch]
            yb = bundle.train.labels[batch]
            record_pre = bool(coeffs)
            if record_pre:
                logits, recorded = net.forward(xb, train=True, record=True)
            else:
                logits = net.forward(xb, train=True)
                recorded = {}
            loss, dlogits = cross_entropy_loss(logits, yb)
            if not np.isfinite(loss):
                bad = _first_nonfinite_layer(
                    net.forward(xb, train=False, record=True)[1]) or "logits"
                snapshot = {"epoch": epoch, "batch_start": int(start), "layer": bad,
                            "loss": float(loss)}
                (run_dir / "diagnostic.json").write_text(json.dumps(snapshot, indent=2))
                raise DataError(f"non-finite loss at epoch {epoch}; first bad layer: {bad} "
                                f"(diagnostic written to {run_dir / 'diagnostic.json'})")
            extra = None
            if coeffs:
                extra = {point_index[name]:
                         nas_penalty_gradient(recorded[name], lam).astype(xb.dtype)
                         for name, lam in coeffs.items()}
            net.backward(dlogits, extra)
            penalty_grads = None
            if weight_kind is not None:
                _, penalty_grads = weight_penalty(net, weight_kind, weight_coeff)
            apply_sgd(net, config.learning_rate, penalty_grads)
            loss_sum += loss * len(yb)
        record_epoch(epoch, train_loss=loss_sum / n_train)

    history.to_csv(run_dir / "history.csv")
    render_stripe_plot(history, run_dir / "stripe.ppm",
                       cell_width=config.stripe_cell_width,
                       cell_height=config.stripe_cell_height)
    save_checkpoint(net, network_meta(config, class_count), run_dir / "weights.npz")
    return history


def run_experiment(config: ExperimentConfig, log=None) -> list[RunHistory]:
    """Full experiment: ``repeats`` seeded runs plus aggregate artifacts."""
    out = Path(config.out)
    out.mkdir(parents=True, exist_ok=True)
    started = time.time()
    bundle = prepare_data(config)
    histories = []
    for r in range(config.repeats):
        if log:
            log(f"run {r} (seed {config.seed + r})")
        histories.append(train_single_run(config, bundle, config.seed + r,
                                          out / f"run{r}", log=log))
    export_lineplot(histories, out / "lineplot.csv", out / "lineplot.svg")
    save_config(config, out / "effective_config")
    meta = {
        "package_version": __version__,
        "numpy_version": np.__version__,
        "python_version": platform.python_version(),
        "platform": platform.platform(),
        "started_unix": started,
        "finished_unix": time.time(),
    }
    (out / "meta").write_text(json.dumps(meta, indent=2) + "\n")
    return histories


def render_artifacts(out_dir) -> list[Path]:
    """Re-emit the plot files from the history CSVs in an experiment
    directory; a pure function of the CSVs, so re-rendering is idempotent."""
    out = Path(out_dir)
    run_dirs = sorted(p for p in out.glob("run*") if p.is_dir())
    if not run_dirs:
        raise ConfigurationError(f"no run directories under {out}")
    histories = []
    written = []
    for run_dir in run_dirs:
        history = RunHistory.from_csv(run_dir / "history.csv")
        histories.append(history)
        cfg_path = out / "effective_config"
        cell_w, cell_h = 4, 10
        if cfg_path.exists():
            from .config import load_config
            cfg = load_config(cfg_path)
            cell_w, cell_h = cfg.stripe_cell_width, cfg.stripe_cell_height
        render_stripe_plot(history, run_dir / "stripe.ppm",
                           cell_width=cell_w, cell_height=cell_h)
        written.append(run_dir / "stripe.ppm")
    export_lineplot(histories, out / "lineplot.csv", out / "lineplot.svg")
    written += [out / "lineplot.csv", out / "lineplot.svg"]
    return written


@dataclass(frozen=True)
class OverfitReport:
    epoch: int
    overfit: bool
    smoothed_min: float
    smoothed_final: float

    @property
    def verdict(self) -> str:
        return "overfit" if self.overfit else "not overfit"


def smoothed_test_loss(history: RunHistory, window: int = 3) -> np.ndarray:
    """Moving median of the test loss (centered window, clamped at the ends);
    robust to single-epoch spikes."""
    loss = history.test_loss_series()
    half = window // 2
    return np.array([np.median(loss[max(0, i - half):i + half + 1])
                     for i in range(len(loss))])

def detect_overfit_epoch(history: RunHistory, ratio: float = 1.10,
                         window: int = 3) -> OverfitReport:
    """Locate the smoothed test-loss minimum; the run is called overfit when
    the final smoothed loss exceeds that minimum by more than ``ratio``.

    Median smoothing can flatten a clean minimum into a plateau of ties, so
    ties are resolved by the raw loss (then by the earlier epoch)."""
    if len(history.records) < 3:
        raise InsufficientDataError(
            f"need at least 3 epochs to judge overfitting, got {len(history.records)}")
    smoothed = smoothed_test_loss(history, window)
    ties = np.flatnonzero(smoothed == smoothed.min())
    raw = history.test_loss_series()
    best = int(ties[np.argmin(raw[ties])])
    report = OverfitReport(
        epoch=history.records[best].epoch,
        overfit=bool(smoothed[-1] > ratio * smoothed[best]),
        smoothed_min=float(smoothed[best]),
        smoothed_final=float(smoothed[-1]),
    )
    return report
