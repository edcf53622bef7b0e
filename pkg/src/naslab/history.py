"""Per-epoch training record: losses, accuracy, and per-layer sparsity
aggregates, with a CSV form that round-trips exactly (floats are written with
repr, so parsing restores the identical float64)."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, ConfigurationError


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    test_loss: float
    test_accuracy: float
    contaminated_test_loss: float | None = None
    penalty: float | None = None
    max_filter_correlation: float | None = None
    layer_nas: dict[str, tuple[float, float, float]] = field(default_factory=dict)


@dataclass
class RunHistory:
    layers: list[str]
    seed: int
    records: list[EpochRecord] = field(default_factory=list)

    def append(self, record: EpochRecord) -> None:
        if self.records and record.epoch <= self.records[-1].epoch:
            raise ConfigurationError(
                f"epoch {record.epoch} does not follow {self.records[-1].epoch}")
        missing = set(self.layers) - set(record.layer_nas)
        if missing:
            raise ConfigurationError(f"record missing layers {sorted(missing)}")
        for layer, (lo, med, hi) in record.layer_nas.items():
            if not lo <= med <= hi:
                raise ConfigurationError(
                    f"layer {layer!r} aggregates not ordered: {lo}, {med}, {hi}")
        self.records.append(record)

    @property
    def epochs(self) -> list[int]:
        return [r.epoch for r in self.records]

    def layer_series(self, layer: str, stat: str = "median") -> np.ndarray:
        idx = {"min": 0, "median": 1, "max": 2}[stat]
        return np.array([r.layer_nas[layer][idx] for r in self.records])

    def test_loss_series(self) -> np.ndarray:
        return np.array([r.test_loss for r in self.records])

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            f.write(f"# seed={self.seed}\n")
            writer = csv.writer(f)
            header = ["epoch", "train_loss", "test_loss", "test_accuracy",
                      "contaminated_test_loss", "penalty", "max_filter_correlation"]
            for layer in self.layers:
                header += [f"nas_min:{layer}", f"nas_median:{layer}", f"nas_max:{layer}"]
            writer.writerow(header)
            for r in self.records:
                row = [r.epoch, repr(r.train_loss), repr(r.test_loss), repr(r.test_accuracy),
                       "" if r.contaminated_test_loss is None else repr(r.contaminated_test_loss),
                       "" if r.penalty is None else repr(r.penalty),
                       "" if r.max_filter_correlation is None else repr(r.max_filter_correlation)]
                for layer in self.layers:
                    lo, med, hi = r.layer_nas[layer]
                    row += [repr(lo), repr(med), repr(hi)]
                writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "RunHistory":
        with open(path, newline="") as f:
            first = f.readline()
            if not first.startswith("# seed="):
                raise ConfigurationError(f"{path}: missing seed header line")
            seed = int(first.strip().split("=", 1)[1])
            reader = csv.reader(f)
            header = next(reader)
            layers = [h.split(":", 1)[1] for h in header if h.startswith("nas_min:")]
            history = cls(layers=layers, seed=seed)
            for row in reader:
                values = dict(zip(header, row))
                layer_nas = {
                    layer: (float(values[f"nas_min:{layer}"]),
                            float(values[f"nas_median:{layer}"]),
                            float(values[f"nas_max:{layer}"]))
                    for layer in layers
                }
                history.append(EpochRecord(
                    epoch=int(values["epoch"]),
                    train_loss=float(values["train_loss"]),
                    test_loss=float(values["test_loss"]),
                    test_accuracy=float(values["test_accuracy"]),
                    contaminated_test_loss=(float(values["contaminated_test_loss"])
                                            if values["contaminated_test_loss"] else None),
                    penalty=float(values["penalty"]) if values["penalty"] else None,
                    max_filter_correlation=(float(values["max_filter_correlation"])
                                            if values["max_filter_correlation"] else None),
                    layer_nas=layer_nas,
                ))
        return history


def check_aligned(histories: list[RunHistory]) -> None:
    """Histories that feed one aggregate plot must share epochs and layers."""
    if not histories:
        raise AlignmentError("no histories given")
    base = histories[0]
    for h in histories[1:]:
        if h.epochs != base.epochs:
            raise AlignmentError(
                f"epoch grids differ: {base.epochs[:5]}... vs {h.epochs[:5]}...")
        if h.layers != base.layers:
            raise AlignmentError(f"layer lists differ: {base.layers} vs {h.layers}")
