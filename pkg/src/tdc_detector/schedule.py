"""
Cycle-level operand schedule of integer inference on a fixed-function
accelerator with G multiply-accumulate lanes.

Conv and FC layers consume their fan-in in groups of G MACs, one group per
cycle; pooling and activation layers take one cycle per output element. The
cycle count depends only on the network shapes, the operand words depend on
the data.
"""
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterator, List

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import softmax

from .core import LayerKind
from .quantization import QMAX, QuantizedNetwork, QuantParams

DEFAULT_LANES = 16


class Engine(IntEnum):
    ConvMAC = 0
    PoolCmp = 1
    FCMAC = 2
    Activation = 3


@dataclass
class CycleEvent:
    layer_index: int
    engine: Engine
    operand_words: List[int]


@dataclass
class OpStream:
    """
    Operand words of every cycle, stored densely.

    words       : (n_cycles, n_lanes) uint8, unused lanes are 0x00
    n_words     : number of meaningful words per cycle
    layer_index : layer that issued each cycle
    engine      : Engine code per cycle
    output      : dequantized network output of the scheduled inference
    """

    words: np.ndarray
    n_words: np.ndarray
    layer_index: np.ndarray
    engine: np.ndarray
    output: np.ndarray

    def __len__(self) -> int:
        return len(self.words)

    def __iter__(self) -> Iterator[CycleEvent]:
        for t in range(len(self)):
            yield CycleEvent(
                int(self.layer_index[t]),
                Engine(int(self.engine[t])),
                [int(w) for w in self.words[t, : self.n_words[t]]],
            )

    @property
    def prediction(self) -> int:
        return int(np.argmax(self.output))


def n_lanes(mac_lanes: int) -> int:
    """
    Words per cycle: G weights, G activations and the accumulator byte, or up
    to 25 pooling window bytes plus the result.
    """
    return max(2 * mac_lanes + 1, 26)


def _bytes(codes: np.ndarray) -> np.ndarray:
    return (np.asarray(codes, dtype=np.int64) & 0xFF).astype(np.uint8)


def _requantize(real: np.ndarray, qp: QuantParams) -> np.ndarray:
    return np.clip(np.rint(real / qp.scale), -QMAX, QMAX).astype(np.int64)


def _mac_groups(weights: np.ndarray, patches: np.ndarray, lanes: int):
    """
    weights (O, F) and patches (P, F) integer codes. Returns the per-cycle
    weight bytes, activation bytes and accumulator low byte, ordered by output
    channel, then position, then group, plus the final accumulators (O, P).
    """
    O, F = weights.shape
    P = patches.shape[0]
    n_groups = -(-F // lanes)
    pad = n_groups * lanes - F
    Wg = np.pad(weights, ((0, 0), (0, pad))).reshape(O, n_groups, lanes)
    Pg = np.pad(patches, ((0, 0), (0, pad))).reshape(P, n_groups, lanes)

    partial = np.einsum("ogl,pgl->opg", Wg, Pg)
    running = np.cumsum(partial, axis=2)

    w_words = np.broadcast_to(Wg[:, None], (O, P, n_groups, lanes)).reshape(-1, lanes)
    a_words = np.broadcast_to(Pg[None], (O, P, n_groups, lanes)).reshape(-1, lanes)
    acc_words = running.reshape(-1, 1)
    return w_words, a_words, acc_words, running[:, :, -1]


def emit_schedule(qnet: QuantizedNetwork, x: np.ndarray, lanes: int = DEFAULT_LANES) -> OpStream:
    """
    Runs integer inference of qnet on a single input and returns the operand
    words of every cycle.

    x is either a float image, quantized here with the input QuantParams, or
    int8 codes. Accumulation is exact in int64; outputs are rescaled, offset
    by the float bias and requantized with the calibrated activation scale of
    the layer.
    """
    if not isinstance(qnet, QuantizedNetwork):
        raise TypeError("emit_schedule needs a QuantizedNetwork, quantize the network first")

    x = np.asarray(x)
    if x.ndim == 4:
        x = x[0]
    a = x.astype(np.int64) if x.dtype == np.int8 else qnet.quantize_input(x).astype(np.int64)
    a_scale = qnet.input_qparams.scale

    width = n_lanes(lanes)
    blocks, n_words, layer_idx, engines = [], [], [], []

    def emit(i: int, engine: Engine, *columns: np.ndarray) -> None:
        cols = [np.asarray(c).reshape(len(c), -1) for c in columns]
        block = np.zeros((len(cols[0]), width), dtype=np.uint8)
        pos = 0
        for c in cols:
            block[:, pos : pos + c.shape[1]] = _bytes(c)
            pos += c.shape[1]
        blocks.append(block)
        n_words.append(np.full(len(block), pos, dtype=np.uint8))
        layer_idx.append(np.full(len(block), i, dtype=np.int16))
        engines.append(np.full(len(block), int(engine), dtype=np.uint8))

    for i, layer in enumerate(qnet.network.layers):
        out_qp = qnet.activation_qparams[i]

        if layer.kind in (LayerKind.Conv2D, LayerKind.FullyConnected):
            W = qnet.weight_codes[i]["W"].astype(np.int64)
            w_scale = qnet.weight_qparams[i]["W"].scale
            bias = layer.params["b"]
            if layer.kind == LayerKind.Conv2D:
                k = layer.kernel
                cols = sliding_window_view(a, (k, k), axis=(1, 2))
                Ho, Wo = cols.shape[1:3]
                patches = cols.transpose(1, 2, 0, 3, 4).reshape(Ho * Wo, -1)
                w_words, a_words, acc_words, acc = _mac_groups(W.reshape(W.shape[0], -1), patches, lanes)
                real = acc * (w_scale * a_scale) + bias[:, None]
                a = _requantize(real, out_qp).reshape(-1, Ho, Wo)
                emit(i, Engine.ConvMAC, w_words, a_words, acc_words)
            else:
                w_words, a_words, acc_words, acc = _mac_groups(W, a.reshape(1, -1), lanes)
                real = acc[:, 0] * (w_scale * a_scale) + bias
                a = _requantize(real, out_qp)
                emit(i, Engine.FCMAC, w_words, a_words, acc_words)

        elif layer.kind == LayerKind.MaxPool2D:
            k = layer.kernel
            C, H, W_ = a.shape
            Ho, Wo = H // k, W_ // k
            windows = sliding_window_view(a, (k, k), axis=(1, 2))[:, ::k, ::k][:, :Ho, :Wo]
            windows = windows.reshape(-1, k * k)
            pooled = windows.max(axis=1)
            a = _requantize(pooled * a_scale, out_qp).reshape(C, Ho, Wo)
            emit(i, Engine.PoolCmp, windows, a.reshape(-1))

        elif layer.kind in (LayerKind.ReLU, LayerKind.GELU, LayerKind.Softmax):
            real_in = a * a_scale
            if layer.kind == LayerKind.Softmax:
                real = softmax(real_in.reshape(-1))
            else:
                real = layer.forward(real_in[None], training=False)[0][0]
            a_in = a.reshape(-1)
            a = _requantize(np.asarray(real).reshape(a.shape), out_qp)
            emit(i, Engine.Activation, a_in, a.reshape(-1))

        elif layer.kind == LayerKind.Dropout:
            continue

        else:
            raise ValueError(f"No accelerator schedule for layer kind {layer.kind.name}")

        a_scale = out_qp.scale

    return OpStream(
        words=np.concatenate(blocks, axis=0),
        n_words=np.concatenate(n_words),
        layer_index=np.concatenate(layer_idx),
        engine=np.concatenate(engines),
        output=a.reshape(-1) * a_scale,
    )
