"""
Symmetric per-tensor int8 quantization of trained networks.
"""
import logging
from dataclasses import dataclass
from typing import Dict, List

import numpy as np

from .core import DataError
from .network import Network

logger = logging.getLogger(__name__)

QMAX = 127
SCALE_FLOOR = 1e-8


@dataclass(frozen=True)
class QuantParams:
    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not -128 <= self.zero_point <= 127:
            raise ValueError(f"zero_point must lie in [-128, 127], got {self.zero_point}")


def symmetric_qparams(x: np.ndarray) -> QuantParams:
    """
    Min-max rule: scale = max|x| / 127, floored at 1e-8 for all-zero tensors.
    """
    amax = float(np.max(np.abs(x))) if np.size(x) else 0.0
    return QuantParams(scale=max(amax / QMAX, SCALE_FLOOR), zero_point=0)


def quantize(x: np.ndarray, qp: QuantParams) -> np.ndarray:
    codes = np.rint(np.asarray(x, dtype=float) / qp.scale) + qp.zero_point
    return np.clip(codes, -QMAX, QMAX).astype(np.int8)


def dequantize(codes: np.ndarray, qp: QuantParams) -> np.ndarray:
    return (codes.astype(float) - qp.zero_point) * qp.scale


@dataclass
class QuantizedNetwork:
    """
    A float network together with int8 codes for all of its parameters and
    calibrated QuantParams for its input and for every layer output.
    """

    network: Network
    input_qparams: QuantParams
    weight_codes: List[Dict[str, np.ndarray]]
    weight_qparams: List[Dict[str, QuantParams]]
    activation_qparams: List[QuantParams]

    def quantize_input(self, x: np.ndarray) -> np.ndarray:
        return quantize(x, self.input_qparams)

    def dequantized_network(self) -> Network:
        """
        Returns a copy of the float network whose parameters are replaced by
        their dequantized int8 values.
        """
        net = self.network.copy()
        for layer, codes, qps in zip(net.layers, self.weight_codes, self.weight_qparams):
            for name in layer.params:
                layer.params[name] = dequantize(codes[name], qps[name])
        return net


def quantize_network(net: Network, calib_inputs: np.ndarray) -> QuantizedNetwork:
    """
    Quantizes every parameter tensor and calibrates activation ranges with one
    forward pass over calib_inputs.
    """
    calib_inputs = np.asarray(calib_inputs, dtype=float)
    if len(calib_inputs) == 0:
        raise DataError("Calibration batch is empty")

    weight_codes, weight_qparams = [], []
    for layer in net.layers:
        codes, qps = {}, {}
        for name, p in layer.params.items():
            qp = symmetric_qparams(p)
            qps[name] = qp
            codes[name] = quantize(p, qp)
        weight_codes.append(codes)
        weight_qparams.append(qps)

    # Calibrate activation ranges
    x = calib_inputs
    activation_qparams = []
    for layer in net.layers:
        x, _ = layer.forward(x, training=False)
        activation_qparams.append(symmetric_qparams(x))

    logger.debug("Quantized %d layers on %d calibration inputs", len(net.layers), len(calib_inputs))
    return QuantizedNetwork(
        network=net,
        input_qparams=symmetric_qparams(calib_inputs),
        weight_codes=weight_codes,
        weight_qparams=weight_qparams,
        activation_qparams=activation_qparams,
    )
