"""
Randomized victim CNNs: generation from a seed, training and int8 quantization.
"""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np
from joblib import Parallel, delayed

from .core import DataError, GenerationError, LayerKind, VictimTrainingError
from .datasets import Dataset
from .layers import make_layer
from .network import Network, accuracy, train
from .quantization import QuantizedNetwork, quantize_network
from .utils import make_rng

logger = logging.getLogger(__name__)

CONV_KERNELS = (2, 3, 4, 5)
CONV_CHANNELS = (10, 20, 30)
POOL_KERNELS = (2, 3, 4, 5)
FC_WIDTHS = (100, 200, 300, 400, 500)
MIN_DEPTH, MAX_DEPTH = 2, 18
MAX_RETRIES = 1000
N_CLASSES = 10
INPUT_SHAPE = (1, 28, 28)


@dataclass(frozen=True)
class LayerSpec:
    """
    A layer kind with the constructor arguments make_layer needs.
    """

    kind: LayerKind
    args: Tuple[Tuple[str, object], ...] = ()

    @property
    def kwargs(self) -> Dict[str, object]:
        return dict(self.args)

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.args)
        return f"{self.kind.name}({args})"


def _spec(kind: LayerKind, **kwargs) -> LayerSpec:
    return LayerSpec(kind, tuple(kwargs.items()))


@dataclass(frozen=True)
class VictimSpec:
    depth: int
    layers: Tuple[LayerSpec, ...]
    seed: int


def _mac_cycles(n_outputs: int, fan_in: int, lanes: int) -> int:
    return n_outputs * int(np.ceil(fan_in / lanes))


def _draw_layers(
    rng: np.random.Generator, depth: int, lanes: int
) -> Optional[Tuple[List[LayerSpec], int]]:
    """
    Draws one candidate layer list of the given depth. Returns None if the
    spatial size collapses. Also returns the schedule cycle count.
    """
    c, h, w = INPUT_SHAPE
    flat: Optional[int] = None
    layers: List[LayerSpec] = []
    cycles = 0

    for _ in range(depth - 2):
        prev = layers[-1].kind if layers else None
        if flat is None:
            choices = ["conv", "pool", "fc"] + ([] if prev in (None, LayerKind.ReLU) else ["relu"])
        else:
            choices = ["fc"] + ([] if prev == LayerKind.ReLU else ["relu"])
        choice = choices[rng.integers(len(choices))]

        if choice == "conv":
            k = int(rng.choice(CONV_KERNELS))
            out = int(rng.choice(CONV_CHANNELS))
            h, w = h - k + 1, w - k + 1
            if h < 1 or w < 1:
                return None
            cycles += _mac_cycles(out * h * w, c * k * k, lanes)
            layers.append(_spec(LayerKind.Conv2D, in_channels=c, out_channels=out, kernel=k))
            c = out
        elif choice == "pool":
            k = int(rng.choice(POOL_KERNELS))
            h, w = h // k, w // k
            if h < 1 or w < 1:
                return None
            cycles += c * h * w
            layers.append(_spec(LayerKind.MaxPool2D, kernel=k))
        elif choice == "fc":
            fan_in = flat if flat is not None else c * h * w
            out = int(rng.choice(FC_WIDTHS))
            cycles += _mac_cycles(out, fan_in, lanes)
            layers.append(_spec(LayerKind.FullyConnected, in_features=fan_in, out_features=out))
            flat = out
        else:
            cycles += flat if flat is not None else c * h * w
            layers.append(_spec(LayerKind.ReLU))

    fan_in = flat if flat is not None else c * h * w
    cycles += _mac_cycles(N_CLASSES, fan_in, lanes) + N_CLASSES
    layers.append(_spec(LayerKind.FullyConnected, in_features=fan_in, out_features=N_CLASSES))
    layers.append(_spec(LayerKind.Softmax))
    return layers, cycles


def generate_victim(seed: int, max_cycles: Optional[int] = None, lanes: int = 16) -> VictimSpec:
    """
    Draws a random victim architecture.

    Depth counts every layer, including the closing FC(10) and Softmax.
    Convolutions and pooling only appear before the first fully connected
    layer. With max_cycles set, candidates whose inference schedule would be
    longer are redrawn.
    """
    rng = np.random.default_rng(seed)
    for _ in range(MAX_RETRIES):
        depth = int(rng.integers(MIN_DEPTH, MAX_DEPTH + 1))
        drawn = _draw_layers(rng, depth, lanes)
        if drawn is None:
            continue
        layers, cycles = drawn
        if max_cycles is not None and cycles > max_cycles:
            continue
        return VictimSpec(depth=depth, layers=tuple(layers), seed=int(seed))
    raise GenerationError(f"No valid victim drawn for seed {seed} in {MAX_RETRIES} attempts")


def build_network(spec: VictimSpec) -> Network:
    """
    Materializes a VictimSpec with freshly initialized parameters.
    """
    rng = np.random.default_rng([spec.seed, 1])
    layers = [make_layer(ls.kind, ls.kwargs, rng) for ls in spec.layers]
    return Network(layers, seed=spec.seed)


@dataclass
class VictimRecipe:
    """
    Training recipe for victims.

    min_train_accuracy : victims below it are flagged and regenerated
    max_regenerations  : regeneration attempts per flagged victim
    abort_fraction     : abort if more than this fraction stays flagged
    max_cycles         : cap on the inference schedule length of a victim
    """

    n_victims: int = 40
    epochs: int = 10
    lr: float = 1e-3
    batch: int = 32
    optimizer: str = "adam"
    min_train_accuracy: float = 0.9
    max_regenerations: int = 3
    abort_fraction: float = 0.2
    train_samples: int = 1000
    calib_samples: int = 64
    max_cycles: Optional[int] = 100_000
    lanes: int = 16
    seed: int = 0
    n_jobs: int = 1

    def __post_init__(self):
        if not 0 <= self.abort_fraction <= 1:
            raise ValueError(f"abort_fraction must lie in [0, 1], got {self.abort_fraction}")


@dataclass
class Victim:
    """
    A trained and quantized victim model.
    """

    victim_id: int
    spec: VictimSpec
    qnet: QuantizedNetwork
    train_accuracy: float
    flagged: bool
    regenerations: int = 0
    history: List[float] = field(default_factory=list)

    @property
    def network(self) -> Network:
        return self.qnet.network


def _train_one(victim_id: int, spec: VictimSpec, data: Dataset, recipe: VictimRecipe) -> Victim:
    history = []
    for attempt in range(recipe.max_regenerations + 1):
        if attempt > 0:
            seed = int(make_rng(spec.seed, attempt).integers(2**63))
            spec = generate_victim(seed, recipe.max_cycles, recipe.lanes)
        net = build_network(spec)
        train(
            net,
            data.x,
            data.y,
            optimizer=recipe.optimizer,
            epochs=recipe.epochs,
            lr=recipe.lr,
            batch=recipe.batch,
            seed=spec.seed,
        )
        acc = accuracy(net, data.x, data.y)
        history.append(acc)
        if acc >= recipe.min_train_accuracy:
            break
        logger.debug("Victim %d (seed %d) flagged at %.3f", victim_id, spec.seed, acc)

    qnet = quantize_network(net, data.x[: recipe.calib_samples])
    return Victim(
        victim_id=victim_id,
        spec=spec,
        qnet=qnet,
        train_accuracy=acc,
        flagged=acc < recipe.min_train_accuracy,
        regenerations=attempt,
        history=history,
    )


def train_victims(
    specs: List[VictimSpec], dataset: Optional[Dataset], recipe: VictimRecipe
) -> List[Victim]:
    """
    Trains and quantizes every spec on the first recipe.train_samples images of
    dataset. Victims below recipe.min_train_accuracy are regenerated from a
    derived seed; raises VictimTrainingError when too many stay flagged.
    """
    if dataset is None or len(dataset) == 0:
        raise DataError("Victim dataset is missing or empty")
    if dataset.x.shape[1:] != INPUT_SHAPE:
        raise DataError(f"Victims need 28x28 grayscale images, got {dataset.x.shape[1:]}")
    data = dataset.head(recipe.train_samples)

    victims = Parallel(n_jobs=recipe.n_jobs)(
        delayed(_train_one)(i, spec, data, recipe) for i, spec in enumerate(specs)
    )

    flagged = [v for v in victims if v.flagged]
    if flagged:
        logger.warning("%d of %d victims below %.2f train accuracy", len(flagged), len(victims), recipe.min_train_accuracy)
    if len(flagged) > recipe.abort_fraction * len(victims):
        details = ", ".join(f"#{v.victim_id}: {v.train_accuracy:.3f}" for v in flagged)
        raise VictimTrainingError(
            f"{len(flagged)}/{len(victims)} victims failed the {recipe.min_train_accuracy:.0%} "
            f"train accuracy threshold ({details})"
        )
    return victims
