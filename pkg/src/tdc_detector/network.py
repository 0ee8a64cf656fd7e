"""
Sequential networks: forward/backward passes, gradient checking, training and
SCNN checkpoints.
"""
import copy
import logging
import struct
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from .core import DataError, Layer, LayerKind, NonFiniteError, TapeError
from .layers import DTYPE, LAYER_CLASSES, make_layer

logger = logging.getLogger(__name__)

SCNN_MAGIC = b"SCNN"
SCNN_VERSION = 1

# Arguments stored as f64 in checkpoints that must come back as bools/floats
_BOOL_ARGS = ("per_step", "return_sequence")
_FLOAT_ARGS = ("rate",)


@dataclass
class Gradients:
    """
    Result of a backward pass.

    params      : one dictionary per layer, shaped like layer.params (frozen
                  layers get zero arrays)
    input       : gradient with respect to the network input
    activations : gradient with respect to the output of each recorded layer
    """

    params: List[Dict[str, np.ndarray]]
    input: np.ndarray
    activations: List[np.ndarray]


@dataclass
class _Tape:
    caches: List[object]
    outputs: List[np.ndarray]


class Network:
    """
    An ordered list of layers with a private random stream for dropout.

    Inference (record=False, training=False) does not mutate the network, so a
    trained network can be shared between threads. Training and recording a
    tape need exclusive access.
    """

    def __init__(self, layers: List[Layer], seed: int = 0):
        self.layers = list(layers)
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._tape: Optional[_Tape] = None

    def __repr__(self) -> str:
        return "Network([" + ", ".join(repr(layer) for layer in self.layers) + "])"

    @property
    def parameters(self) -> List[Dict[str, np.ndarray]]:
        return [layer.params for layer in self.layers]

    def n_parameters(self) -> int:
        return sum(layer.n_parameters() for layer in self.layers)

    def copy(self) -> "Network":
        net = copy.deepcopy(self)
        net._tape = None
        return net

    def ends_with_softmax(self) -> bool:
        return bool(self.layers) and self.layers[-1].kind == LayerKind.Softmax

    def forward(
        self,
        x: np.ndarray,
        training: bool = False,
        record: bool = False,
        stop: Optional[int] = None,
    ) -> np.ndarray:
        """
        Runs layers[:stop] on the batch x. When record is set, the caches are
        kept on the network for a following call to backward.
        """
        x = np.asarray(x, dtype=DTYPE)
        caches, outputs = [], []
        for i, layer in enumerate(self.layers[:stop]):
            x, cache = layer.forward(x, training=training, rng=self.rng)
            if not np.all(np.isfinite(x)):
                raise NonFiniteError(f"Non-finite output in layer {i} ({layer!r})")
            if record:
                caches.append(cache)
                outputs.append(x)
        if record:
            self._tape = _Tape(caches, outputs)
        return x

    def logits(self, x: np.ndarray, record: bool = False) -> np.ndarray:
        """
        Returns the pre-softmax output.
        """
        stop = len(self.layers) - 1 if self.ends_with_softmax() else None
        return self.forward(x, record=record, stop=stop)

    def backward(self, loss_grad: np.ndarray) -> Gradients:
        """
        Propagates loss_grad (gradient with respect to the output of the last
        recorded layer) back through the tape.
        """
        if self._tape is None:
            raise TapeError("backward called without a recorded forward pass")

        n = len(self._tape.caches)
        param_grads: List[Dict[str, np.ndarray]] = [
            layer.zero_grads() for layer in self.layers
        ]
        act_grads: List[Optional[np.ndarray]] = [None] * n

        g = np.asarray(loss_grad, dtype=DTYPE)
        for i in range(n - 1, -1, -1):
            layer = self.layers[i]
            act_grads[i] = g
            g, grads = layer.backward(g, self._tape.caches[i])
            if not layer.frozen:
                param_grads[i] = grads
        return Gradients(params=param_grads, input=g, activations=act_grads)

    def activation(self, index: int) -> np.ndarray:
        """
        Returns the recorded output of layer index.
        """
        if self._tape is None:
            raise TapeError("no recorded forward pass")
        return self._tape.outputs[index]

    def predict(self, x: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """
        Inference in batches.
        """
        x = np.asarray(x, dtype=DTYPE)
        outs = [self.forward(x[i : i + batch_size]) for i in range(0, len(x), batch_size)]
        return np.concatenate(outs, axis=0)


def cross_entropy(probs: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """
    Mean cross-entropy of probabilities against integer labels and its gradient
    with respect to the probabilities.
    """
    labels = np.asarray(labels, dtype=int)
    B = len(labels)
    rows = np.arange(B)
    p = np.clip(probs[rows, labels], 1e-12, None)
    loss = float(-np.mean(np.log(p)))

    grad = np.zeros_like(probs)
    grad[rows, labels] = -1.0 / (p * B)
    return loss, grad


def accuracy(net: Network, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    if len(x) == 0:
        return 0.0
    pred = np.argmax(net.predict(x, batch_size=batch_size), axis=-1)
    return float(np.mean(pred == np.asarray(y)))


def check_gradients(
    net: Network,
    x: np.ndarray,
    h: float = 1e-3,
    labels: Optional[np.ndarray] = None,
    include_input: bool = False,
) -> float:
    """
    Compares backward against central finite differences.

    The loss is the cross-entropy against labels when given (and the network
    ends in Softmax), otherwise a fixed random linear functional of the output.
    Returns the max over all parameters (and the input when include_input) of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    if net.n_parameters() > 10_000:
        raise ValueError(f"check_gradients limited to 10k parameters, net has {net.n_parameters()}")

    x = np.array(x, dtype=DTYPE)
    out = net.forward(x)
    use_ce = labels is not None and net.ends_with_softmax()
    weights = np.random.default_rng(1234).standard_normal(out.shape)

    def loss_fn() -> float:
        y = net.forward(x)
        if use_ce:
            return cross_entropy(y, labels)[0]
        return float(np.sum(y * weights))

    y = net.forward(x, record=True)
    loss_grad = cross_entropy(y, labels)[1] if use_ce else weights
    grads = net.backward(loss_grad)

    targets = []
    for layer, layer_grads in zip(net.layers, grads.params):
        if layer.frozen:
            continue
        for name, p in layer.params.items():
            targets.append((p, layer_grads[name]))
    if include_input:
        targets.append((x, grads.input))

    max_err = 0.0
    for p, analytic in targets:
        flat = p.reshape(-1)
        flat_grad = analytic.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            loss_plus = loss_fn()
            flat[i] = orig - h
            loss_minus = loss_fn()
            flat[i] = orig

            numeric = (loss_plus - loss_minus) / (2 * h)
            a = flat_grad[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            max_err = max(max_err, err)
    return max_err


class Optimizer(ABC):
    def __init__(self, lr: float):
        self.lr = lr

    @abstractmethod
    def step(self, layers: List[Layer], grads: List[Dict[str, np.ndarray]]) -> None:
        """
        Updates the parameters of all non-frozen layers in place.
        """


class SGD(Optimizer):
    def __init__(self, lr: float, momentum: float = 0.0):
        super().__init__(lr)
        self.momentum = momentum
        self.velocity: Dict[Tuple[int, str], np.ndarray] = {}

    def step(self, layers, grads):
        for i, (layer, layer_grads) in enumerate(zip(layers, grads)):
            if layer.frozen:
                continue
            for name, p in layer.params.items():
                v = self.velocity.get((i, name), np.zeros_like(p))
                v = self.momentum * v + layer_grads[name]
                self.velocity[(i, name)] = v
                p -= self.lr * v


class Adam(Optimizer):
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(lr)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: Dict[Tuple[int, str], np.ndarray] = {}
        self.v: Dict[Tuple[int, str], np.ndarray] = {}

    def step(self, layers, grads):
        self.t += 1
        for i, (layer, layer_grads) in enumerate(zip(layers, grads)):
            if layer.frozen:
                continue
            for name, p in layer.params.items():
                g = layer_grads[name]
                m = self.beta1 * self.m.get((i, name), np.zeros_like(p)) + (1 - self.beta1) * g
                v = self.beta2 * self.v.get((i, name), np.zeros_like(p)) + (1 - self.beta2) * g**2
                self.m[(i, name)] = m
                self.v[(i, name)] = v
                m_hat = m / (1 - self.beta1**self.t)
                v_hat = v / (1 - self.beta2**self.t)
                p -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


OPTIMIZERS = {"sgd": SGD, "adam": Adam}


@dataclass
class TrainingResult:
    """
    Per-epoch training curves. Accuracies are measured on the batches as they
    are seen (training mode).
    """

    network: Network
    losses: List[float] = field(default_factory=list)
    accuracies: List[float] = field(default_factory=list)


def _epoch_order(
    y: np.ndarray, sampler: str, rng: np.random.Generator
) -> np.ndarray:
    n = len(y)
    if sampler == "shuffle":
        return rng.permutation(n)
    if sampler == "balanced":
        classes, counts = np.unique(y, return_counts=True)
        weight_of = dict(zip(classes, 1.0 / counts))
        p = np.array([weight_of[label] for label in y])
        return rng.choice(n, size=n, replace=True, p=p / p.sum())
    raise ValueError(f"Unknown sampler {sampler!r}")


def train(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    optimizer: str = "adam",
    epochs: int = 10,
    lr: float = 1e-3,
    batch: int = 32,
    seed: int = 0,
    sampler: str = "shuffle",
    disable_progress: bool = True,
) -> TrainingResult:
    """
    Mini-batch training with cross-entropy loss. Deterministic given seed: the
    batch order and the dropout stream are both derived from it.
    """
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=int)
    if len(x) == 0:
        raise DataError("Cannot train on an empty dataset")
    if len(x) != len(y):
        raise DataError(f"{len(x)} samples but {len(y)} labels")
    if lr < 0:
        raise ValueError(f"Learning rate must be non-negative, got {lr}")
    if lr == 0:
        logger.warning("Learning rate is 0, parameters will not change")

    n_out = net.forward(x[:1]).shape[-1]
    if y.min() < 0 or y.max() >= n_out:
        raise ValueError(f"Labels must lie in [0, {n_out}), got [{y.min()}, {y.max()}]")

    opt = OPTIMIZERS[optimizer.lower()](lr)
    rng = np.random.default_rng(seed)
    net.rng = np.random.default_rng([seed, 1])
    result = TrainingResult(network=net)

    for _ in tqdm(range(epochs), desc="epochs", disable=disable_progress):
        order = _epoch_order(y, sampler, rng)
        total_loss, correct = 0.0, 0
        for start in range(0, len(order), batch):
            idx = order[start : start + batch]
            probs = net.forward(x[idx], training=True, record=True)
            loss, loss_grad = cross_entropy(probs, y[idx])
            grads = net.backward(loss_grad)
            if lr > 0:
                opt.step(net.layers, grads.params)
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=-1) == y[idx]))
        result.losses.append(total_loss / len(order))
        result.accuracies.append(correct / len(order))
        logger.debug(
            "epoch %d loss %.4f acc %.4f", len(result.losses), result.losses[-1], result.accuracies[-1]
        )

    net._tape = None
    return result


def save_checkpoint(net: Network, path: Union[str, Path]) -> None:
    """
    Writes the network as an SCNN file: magic, u16 version, u64 seed, u32 layer
    count, then per layer its kind, its arguments (f64), a frozen flag and its
    named f32 parameter blobs. Little-endian throughout.
    """
    buf = bytearray()
    buf += SCNN_MAGIC
    buf += struct.pack("<HQI", SCNN_VERSION, net.seed, len(net.layers))
    for layer in net.layers:
        args = list(layer.spec().values())
        buf += struct.pack("<BB", int(layer.kind), len(args))
        buf += struct.pack(f"<{len(args)}d", *[float(a) for a in args])
        buf += struct.pack("<BB", int(layer.frozen), len(layer.params))
        for name, p in layer.params.items():
            encoded = name.encode("ascii")
            buf += struct.pack("<B", len(encoded)) + encoded
            buf += struct.pack("<B", p.ndim)
            buf += struct.pack(f"<{p.ndim}I", *p.shape)
            buf += np.ascontiguousarray(p, dtype="<f4").tobytes()
    Path(path).write_bytes(bytes(buf))


def load_checkpoint(path: Union[str, Path]) -> Network:
    """
    Reads an SCNN file written by save_checkpoint.
    """
    data = Path(path).read_bytes()
    if data[:4] != SCNN_MAGIC:
        raise DataError(f"{path} is not an SCNN checkpoint")

    pos = 4
    version, seed, n_layers = struct.unpack_from("<HQI", data, pos)
    pos += struct.calcsize("<HQI")
    if version != SCNN_VERSION:
        raise DataError(f"Unsupported SCNN version {version}")

    layers = []
    for _ in range(n_layers):
        kind, n_args = struct.unpack_from("<BB", data, pos)
        pos += 2
        values = struct.unpack_from(f"<{n_args}d", data, pos)
        pos += 8 * n_args

        cls_args = LAYER_CLASSES[LayerKind(kind)].arg_names
        spec = {}
        for name, value in zip(cls_args, values):
            if name in _BOOL_ARGS:
                spec[name] = bool(value)
            elif name in _FLOAT_ARGS:
                spec[name] = float(value)
            else:
                spec[name] = int(value)
        layer = make_layer(LayerKind(kind), spec)

        frozen, n_params = struct.unpack_from("<BB", data, pos)
        pos += 2
        layer.frozen = bool(frozen)
        for _ in range(n_params):
            (name_len,) = struct.unpack_from("<B", data, pos)
            pos += 1
            name = data[pos : pos + name_len].decode("ascii")
            pos += name_len
            (ndim,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}I", data, pos)
            pos += 4 * ndim
            size = int(np.prod(shape))
            blob = np.frombuffer(data, dtype="<f4", count=size, offset=pos)
            pos += 4 * size
            layer.params[name] = blob.reshape(shape).astype(DTYPE)
        layers.append(layer)
    return Network(layers, seed=seed)

