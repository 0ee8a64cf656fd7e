"""
Trace classifier: preprocessing, the Conv1D -> FC -> stacked BGRU -> GELU ->
Dropout -> FC network, training, evaluation and Grad-CAM.
"""
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import dill
import numpy as np
import pandas as pd

from .core import DataError, TraceLabel
from .layers import BGRU, GELU, Conv1D, Dropout, FullyConnected, Softmax
from .network import Network, load_checkpoint, save_checkpoint, train
from .tdc import Trace
from .utils import block_mean, center_fit

logger = logging.getLogger(__name__)

N_CLASSES = len(TraceLabel)
CLASS_NAMES = [label.name for label in TraceLabel]
POOLED = (TraceLabel.adversarial, TraceLabel.extraction)

# Hardware-measured reference figures (%), printed in report footers
REFERENCE_ACCURACY = {"benign": 97.4, "adversarial": 68.6, "backdoor": 94.1, "extraction": 92.0, "total": 87.9}
REFERENCE_MERGED = {"benign": 97.4, "adversarial": 92.1, "backdoor": 94.1, "extraction": 92.1, "total": 94.0}
REFERENCE_BASELINE_FPR = {"EMShepherd": 10.0, "KDE": 10.0, "HASI": 6.0, "FS": 4.5}


@dataclass
class DetectorConfig:
    """
    window        : block-averaging window applied to raw readouts
    rows          : rows of the reshaped trace matrix
    trace_len     : averaged length the trace is cropped or padded to
    N, D          : number of BGRU layers and their hidden size
    d_menu        : allowed values of D
    conv_channels : output channels of the Conv1D front end
    conv_kernel   : kernel length of the Conv1D front end
    """

    window: int = 10
    rows: int = 3
    trace_len: int = 768
    N: int = 5
    D: int = 128
    d_menu: Tuple[int, ...] = (8, 16, 32, 64, 128, 256)
    dropout: float = 0.3
    epochs: int = 100
    lr: float = 1e-3
    batch: int = 32
    seed: int = 0
    conv_channels: int = 16
    conv_kernel: int = 7

    def __post_init__(self):
        self.d_menu = tuple(self.d_menu)
        if self.rows != 3:
            raise ValueError(f"Detector traces have 3 rows, got {self.rows}")
        if self.trace_len % self.rows:
            raise ValueError(f"trace_len {self.trace_len} is not divisible by rows {self.rows}")
        if self.N < 1:
            raise ValueError(f"Need at least one BGRU layer, got N={self.N}")
        if self.D not in self.d_menu:
            raise ValueError(f"D={self.D} not in menu {self.d_menu}")
        if self.window < 1:
            raise ValueError(f"window must be >= 1, got {self.window}")
        if not 0 <= self.dropout < 1:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")

    @property
    def columns(self) -> int:
        return self.trace_len // self.rows


def preprocess(raw: Union[Trace, np.ndarray], cfg: DetectorConfig) -> np.ndarray:
    """
    Block-averages the readouts, min-max normalizes them to [0, 1] (a constant
    trace becomes 0.5), center-crops or zero-pads to trace_len and reshapes
    row-major into (rows, trace_len / rows).
    """
    values = np.asarray(raw.readouts if isinstance(raw, Trace) else raw, dtype=float)
    if values.size == 0:
        raise DataError("Cannot preprocess an empty trace")
    values = block_mean(values, cfg.window)

    lo, hi = values.min(), values.max()
    if hi > lo:
        values = (values - lo) / (hi - lo)
    else:
        values = np.full_like(values, 0.5)
    return center_fit(values, cfg.trace_len).reshape(cfg.rows, -1)


def preprocess_batch(traces: Sequence[Union[Trace, np.ndarray]], cfg: DetectorConfig) -> np.ndarray:
    return np.stack([preprocess(t, cfg) for t in traces])


def build_detector(cfg: DetectorConfig) -> Network:
    rng = np.random.default_rng(cfg.seed)
    D = cfg.D
    layers = [
        Conv1D(cfg.rows, cfg.conv_channels, cfg.conv_kernel, rng=rng),
        FullyConnected(cfg.conv_channels, D, per_step=True, rng=rng),
    ]
    for i in range(cfg.N):
        layers.append(BGRU(D if i == 0 else 2 * D, D, return_sequence=i < cfg.N - 1, rng=rng))
    layers += [
        GELU(),
        Dropout(cfg.dropout),
        FullyConnected(2 * D, N_CLASSES, rng=rng),
        Softmax(),
    ]
    return Network(layers, seed=cfg.seed)


@dataclass
class DetectorModel:
    """
    A trained detector with its configuration and training curves.
    """

    network: Network
    cfg: DetectorConfig
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return self.network.predict(X, batch_size=self.cfg.batch)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def classify(self, traces: Sequence[Trace]) -> np.ndarray:
        return self.predict(preprocess_batch(traces, self.cfg))

    def save_to_pickle(self, filepath: Union[str, Path]) -> None:
        with open(filepath, "wb") as f:
            dill.dump(self, f)

    def save(self, directory: Union[str, Path]) -> None:
        """
        Writes the network as detector.scnn next to its configuration in
        detector.json.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.network, directory / "detector.scnn")
        payload = {"detector": asdict(self.cfg), "losses": self.losses, "accuracies": self.accuracies}
        (directory / "detector.json").write_text(json.dumps(payload, indent=2, sort_keys=True))

    @classmethod
    def load(cls, directory: Union[str, Path]) -> "DetectorModel":
        directory = Path(directory)
        payload = json.loads((directory / "detector.json").read_text())
        cfg = DetectorConfig(**payload["detector"])
        return cls(load_checkpoint(directory / "detector.scnn"), cfg, payload["losses"], payload["accuracies"])


def load_from_pickle(filepath: Union[str, Path]) -> DetectorModel:
    with open(filepath, "rb") as f:
        return dill.load(f)


def train_detector(
    X: np.ndarray, y: np.ndarray, cfg: DetectorConfig, disable_progress: bool = True
) -> DetectorModel:
    """
    Trains a fresh detector on preprocessed traces X (B, rows, columns) with
    class-balanced batches for cfg.epochs epochs.
    """
    y = np.asarray(y, dtype=int)
    for label in TraceLabel:
        if not np.any(y == label):
            raise DataError(f"Class {label.name!r} ({int(label)}) is absent from the training set")

    net = build_detector(cfg)
    result = train(
        net,
        X,
        y,
        optimizer="adam",
        epochs=cfg.epochs,
        lr=cfg.lr,
        batch=cfg.batch,
        seed=cfg.seed,
        sampler="balanced",
        disable_progress=disable_progress,
    )
    if result.accuracies:
        logger.info("Detector trained: final loss %.4f, train acc %.3f", result.losses[-1], result.accuracies[-1])
    return DetectorModel(net, cfg, result.losses, result.accuracies)


@dataclass
class DetectionReport:
    """
    Detection metrics.

    confusion : counts, rows are true classes and columns predictions
    merged_acc: accuracy with adversarial and extraction pooled into one class
    fpr       : fraction of benign traces classified as an attack
    """

    confusion: np.ndarray
    per_class_acc: np.ndarray
    total_acc: float
    merged_acc: float
    fpr: float

    @classmethod
    def from_predictions(cls, y_true: np.ndarray, y_pred: np.ndarray) -> "DetectionReport":
        y_true = np.asarray(y_true, dtype=int)
        y_pred = np.asarray(y_pred, dtype=int)
        if len(y_true) == 0:
            raise DataError("Cannot evaluate on an empty test set")

        confusion = np.zeros((N_CLASSES, N_CLASSES), dtype=int)
        np.add.at(confusion, (y_true, y_pred), 1)

        counts = confusion.sum(axis=1)
        per_class = np.zeros(N_CLASSES)
        for c in range(N_CLASSES):
            if counts[c]:
                per_class[c] = confusion[c, c] / counts[c]
            else:
                logger.warning("Class %s absent from the test set, accuracy reported as 0", CLASS_NAMES[c])

        pooled = list(map(int, POOLED))
        correct = y_true == y_pred
        merged = correct | (np.isin(y_true, pooled) & np.isin(y_pred, pooled))
        benign = counts[TraceLabel.benign]
        fpr = (benign - confusion[TraceLabel.benign, TraceLabel.benign]) / benign if benign else 0.0
        return cls(confusion, per_class, float(correct.mean()), float(merged.mean()), float(fpr))

    def merged_per_class(self) -> np.ndarray:
        pooled = list(map(int, POOLED))
        counts = self.confusion.sum(axis=1)
        out = np.zeros(N_CLASSES)
        for c in range(N_CLASSES):
            hits = self.confusion[c, pooled].sum() if c in pooled else self.confusion[c, c]
            out[c] = hits / counts[c] if counts[c] else 0.0
        return out

    def to_frame(self) -> pd.DataFrame:
        """
        One row per class plus total, in percent, with the reference figures.
        """
        rows = []
        merged = self.merged_per_class()
        for c, name in enumerate(CLASS_NAMES):
            rows.append(
                {
                    "class": name,
                    "n": int(self.confusion[c].sum()),
                    "accuracy": 100 * self.per_class_acc[c],
                    "merged_accuracy": 100 * merged[c],
                    "reference": REFERENCE_ACCURACY[name],
                    "reference_merged": REFERENCE_MERGED[name],
                }
            )
        rows.append(
            {
                "class": "total",
                "n": int(self.confusion.sum()),
                "accuracy": 100 * self.total_acc,
                "merged_accuracy": 100 * self.merged_acc,
                "reference": REFERENCE_ACCURACY["total"],
                "reference_merged": REFERENCE_MERGED["total"],
            }
        )
        return pd.DataFrame(rows)

    def to_csv(self, path: Union[str, Path]) -> None:
        self.to_frame().to_csv(path, index=False, float_format="%.4f")

    def pretty(self) -> str:
        confusion = pd.DataFrame(self.confusion, index=CLASS_NAMES, columns=CLASS_NAMES)
        baselines = ", ".join(f"{k}={v:g}%" for k, v in REFERENCE_BASELINE_FPR.items())
        return "\n".join(
            [
                self.to_frame().to_string(index=False, float_format="%.1f"),
                "",
                "Confusion (rows: true, columns: predicted)",
                confusion.to_string(),
                "",
                f"FPR: {100 * self.fpr:.1f}%",
                f"Reference: total {REFERENCE_ACCURACY['total']}%, merged {REFERENCE_MERGED['total']}%",
                f"Reference baseline FPR: {baselines}",
            ]
        )


def evaluate(model: DetectorModel, X: np.ndarray, y: np.ndarray) -> DetectionReport:
    if len(y) == 0:
        raise DataError("Cannot evaluate on an empty test set")
    return DetectionReport.from_predictions(y, model.predict(X))


@dataclass
class CamMap:
    """
    Grad-CAM importance per trace column, max-normalized. all_zero flags maps
    without positive evidence.
    """

    importance: np.ndarray
    target_class: int
    all_zero: bool = False


def grad_cam(
    model: Union[DetectorModel, Network], matrix: np.ndarray, target_class: int, layer_index: int = 0
) -> CamMap:
    """
    Grad-CAM on the Conv1D layer: channel weights are the mean gradients of the
    target logit with respect to the conv activations, the map is the ReLU of
    the weighted activation sum, linearly upsampled to the input columns.
    """
    net = model.network if isinstance(model, DetectorModel) else model
    x = np.asarray(matrix, dtype=float)
    if x.ndim == 2:
        x = x[None]

    Z = net.logits(x, record=True)
    dZ = np.zeros_like(Z)
    dZ[:, target_class] = 1.0
    grads = net.backward(dZ)

    A = net.activation(layer_index)[0]  # (Lo, channels)
    dA = grads.activations[layer_index][0]
    weights = dA.mean(axis=0)
    cam = np.maximum(A @ weights, 0.0)

    L = x.shape[-1]
    k = net.layers[layer_index].kernel
    centers = np.arange(len(cam)) + (k - 1) / 2
    cam = np.interp(np.arange(L), centers, cam)

    peak = cam.max()
    if peak <= 0:
        return CamMap(np.zeros(L), int(target_class), all_zero=True)
    return CamMap(cam / peak, int(target_class))
