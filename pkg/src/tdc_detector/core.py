from abc import ABC, abstractmethod
from enum import IntEnum
from typing import Dict, Optional, Tuple

import numpy as np


class TDCDetectorError(Exception):
    """
    Parent class for all errors raised by the package.
    """


class ConfigError(TDCDetectorError):
    pass


class DataError(TDCDetectorError):
    pass


class SurrogateLoadError(DataError):
    pass


class ExperimentError(TDCDetectorError):
    pass


class VictimTrainingError(ExperimentError):
    pass


class InvalidExperimentError(ExperimentError):
    pass


class BudgetExhaustedError(ExperimentError):
    """
    Raised when an oracle cannot afford the next batch of queries. The attack
    state passed in is left untouched.
    """


class GenerationError(TDCDetectorError):
    pass


class CalibrationFailed(TDCDetectorError):
    pass


class ShapeError(TDCDetectorError):
    pass


class NonFiniteError(TDCDetectorError):
    pass


class TapeError(TDCDetectorError):
    pass


class TraceLabel(IntEnum):
    benign = 0
    adversarial = 1
    backdoor = 2
    extraction = 3


class AttackMethod(IntEnum):
    """
    Provenance of a trace. The integer values are the codes stored in SCTR
    files.
    """

    none = 0
    fgsm = 1
    pgd = 2
    cw = 3
    pattern = 4
    instance = 5
    watermark = 6
    fashion = 7
    cifar10 = 8
    jbda = 9
    deepfool = 10
    square3x3 = 11
    cifar100 = 12

    @property
    def label(self) -> TraceLabel:
        return METHOD_LABELS[self]


METHOD_LABELS = {
    AttackMethod.none: TraceLabel.benign,
    AttackMethod.fgsm: TraceLabel.adversarial,
    AttackMethod.pgd: TraceLabel.adversarial,
    AttackMethod.cw: TraceLabel.adversarial,
    AttackMethod.deepfool: TraceLabel.adversarial,
    AttackMethod.pattern: TraceLabel.backdoor,
    AttackMethod.instance: TraceLabel.backdoor,
    AttackMethod.watermark: TraceLabel.backdoor,
    AttackMethod.square3x3: TraceLabel.backdoor,
    AttackMethod.fashion: TraceLabel.extraction,
    AttackMethod.cifar10: TraceLabel.extraction,
    AttackMethod.cifar100: TraceLabel.extraction,
    AttackMethod.jbda: TraceLabel.extraction,
}

# Default training roster and the attacks held out as unseen
TRAINING_ATTACKS = (
    AttackMethod.fgsm,
    AttackMethod.pgd,
    AttackMethod.cw,
    AttackMethod.pattern,
    AttackMethod.instance,
    AttackMethod.watermark,
    AttackMethod.fashion,
    AttackMethod.cifar10,
    AttackMethod.jbda,
)
UNSEEN_ATTACKS = (AttackMethod.deepfool, AttackMethod.square3x3, AttackMethod.cifar100)


class LayerKind(IntEnum):
    """
    Layer kinds. The integer values are the codes stored in SCNN checkpoints.
    """

    Conv2D = 1
    MaxPool2D = 2
    FullyConnected = 3
    ReLU = 4
    GELU = 5
    Softmax = 6
    BGRU = 7
    Dropout = 8
    Conv1D = 9


class Layer(ABC):
    """
    Parent class for network layers.

    A layer owns its parameters (name -> array) and implements a forward pass
    that returns the output together with a cache, and a backward pass that
    turns the upstream gradient and the cache into the gradient with respect to
    the input and to each parameter.
    """

    kind: LayerKind
    arg_names: Tuple[str, ...] = ()

    def __init__(self) -> None:
        self.params: Dict[str, np.ndarray] = {}
        self.frozen = False

    @abstractmethod
    def forward(
        self, x: np.ndarray, training: bool = False, rng: Optional[np.random.Generator] = None
    ) -> Tuple[np.ndarray, object]:
        """
        Returns the layer output and the cache needed by backward.
        """

    @abstractmethod
    def backward(
        self, grad_out: np.ndarray, cache: object
    ) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
        """
        Returns the gradient with respect to the layer input and a dictionary of
        parameter gradients shaped like self.params.
        """

    def spec(self) -> Dict[str, object]:
        """
        Returns the kind-specific constructor arguments of the layer.
        """
        return {name: getattr(self, name) for name in self.arg_names}

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self) -> Dict[str, np.ndarray]:
        return {name: np.zeros_like(p) for name, p in self.params.items()}

    def __repr__(self) -> str:
        args = ", ".join(f"{k}={v}" for k, v in self.spec().items())
        return f"{self.kind.name}({args})"
