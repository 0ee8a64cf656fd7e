"""
Layer kinds with hand-written forward and backward passes.

Every layer works on batched arrays, the leading axis is the batch axis.
"""
from typing import Dict, Optional, Tuple, Type

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit, ndtr

from .core import Layer, LayerKind, ShapeError

DTYPE = np.float64


def _uniform(rng: np.random.Generator, fan_in: int, shape: Tuple[int, ...]) -> np.ndarray:
    """
    Uniform fan-in scaled initialization, U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
    """
    bound = 1.0 / np.sqrt(max(fan_in, 1))
    return rng.uniform(-bound, bound, size=shape).astype(DTYPE)


class Conv2D(Layer):
    """
    Valid 2D convolution with stride 1 on (B, C, H, W) inputs.
    """

    kind = LayerKind.Conv2D
    arg_names = ("in_channels", "out_channels", "kernel")

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng=None):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = self.in_channels * self.kernel**2
        self.params["W"] = _uniform(
            rng, fan_in, (self.out_channels, self.in_channels, self.kernel, self.kernel)
        )
        self.params["b"] = _uniform(rng, fan_in, (self.out_channels,))

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv2D expects (B, {self.in_channels}, H, W), got {x.shape}")
        if x.shape[2] < self.kernel or x.shape[3] < self.kernel:
            raise ShapeError(f"Conv2D kernel {self.kernel} larger than input {x.shape[2:]}")

        # (B, C, Ho, Wo, k, k) view of all receptive fields
        cols = sliding_window_view(x, (self.kernel, self.kernel), axis=(2, 3))
        out = np.einsum("bchwij,ocij->bohw", cols, self.params["W"], optimize=True)
        out += self.params["b"][None, :, None, None]
        return out, (x.shape, cols)

    def backward(self, grad_out, cache):
        x_shape, cols = cache
        W = self.params["W"]
        k = self.kernel
        Ho, Wo = grad_out.shape[2], grad_out.shape[3]

        dW = np.einsum("bohw,bchwij->ocij", grad_out, cols, optimize=True)
        db = grad_out.sum(axis=(0, 2, 3))

        dx = np.zeros(x_shape, dtype=grad_out.dtype)
        for i in range(k):
            for j in range(k):
                dx[:, :, i : i + Ho, j : j + Wo] += np.einsum(
                    "bohw,oc->bchw", grad_out, W[:, :, i, j], optimize=True
                )
        return dx, {"W": dW, "b": db}


class Conv1D(Layer):
    """
    Valid 1D convolution with stride 1.

    Takes channel-major input (B, C, L) and returns sequence-major output
    (B, L - k + 1, C_out) so that per-step layers can consume it directly.
    """

    kind = LayerKind.Conv1D
    arg_names = ("in_channels", "out_channels", "kernel")

    def __init__(self, in_channels: int, out_channels: int, kernel: int, rng=None):
        super().__init__()
        self.in_channels = int(in_channels)
        self.out_channels = int(out_channels)
        self.kernel = int(kernel)
        rng = rng if rng is not None else np.random.default_rng(0)
        fan_in = self.in_channels * self.kernel
        self.params["W"] = _uniform(
            rng, fan_in, (self.out_channels, self.in_channels, self.kernel)
        )
        self.params["b"] = _uniform(rng, fan_in, (self.out_channels,))

    def forward(self, x, training=False, rng=None):
        if x.ndim != 3 or x.shape[1] != self.in_channels:
            raise ShapeError(f"Conv1D expects (B, {self.in_channels}, L), got {x.shape}")
        if x.shape[2] < self.kernel:
            raise ShapeError(f"Conv1D kernel {self.kernel} longer than input {x.shape[2]}")

        cols = sliding_window_view(x, self.kernel, axis=2)  # (B, C, Lo, k)
        out = np.einsum("bclk,ock->blo", cols, self.params["W"], optimize=True)
        out += self.params["b"][None, None, :]
        return out, (x.shape, cols)

    def backward(self, grad_out, cache):
        x_shape, cols = cache
        W = self.params["W"]
        Lo = grad_out.shape[1]

        dW = np.einsum("blo,bclk->ock", grad_out, cols, optimize=True)
        db = grad_out.sum(axis=(0, 1))

        dx = np.zeros(x_shape, dtype=grad_out.dtype)
        for i in range(self.kernel):
            dx[:, :, i : i + Lo] += np.einsum("blo,oc->bcl", grad_out, W[:, :, i], optimize=True)
        return dx, {"W": dW, "b": db}


class MaxPool2D(Layer):
    """
    Non-overlapping max pooling (stride = kernel, trailing rows/columns dropped).
    """

    kind = LayerKind.MaxPool2D
    arg_names = ("kernel",)

    def __init__(self, kernel: int, rng=None):
        super().__init__()
        self.kernel = int(kernel)

    def forward(self, x, training=False, rng=None):
        if x.ndim != 4:
            raise ShapeError(f"MaxPool2D expects (B, C, H, W), got {x.shape}")
        k = self.kernel
        B, C, H, W = x.shape
        Ho, Wo = H // k, W // k
        if Ho < 1 or Wo < 1:
            raise ShapeError(f"MaxPool2D kernel {k} larger than input {x.shape[2:]}")

        windows = (
            x[:, :, : Ho * k, : Wo * k]
            .reshape(B, C, Ho, k, Wo, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, Ho, Wo, k * k)
        )
        idx = np.argmax(windows, axis=-1)
        out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
        return out, (x.shape, idx)

    def backward(self, grad_out, cache):
        x_shape, idx = cache
        k = self.kernel
        B, C, Ho, Wo = grad_out.shape

        g_windows = np.zeros((B, C, Ho, Wo, k * k), dtype=grad_out.dtype)
        np.put_along_axis(g_windows, idx[..., None], grad_out[..., None], axis=-1)
        dx = np.zeros(x_shape, dtype=grad_out.dtype)
        dx[:, :, : Ho * k, : Wo * k] = (
            g_windows.reshape(B, C, Ho, Wo, k, k)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(B, C, Ho * k, Wo * k)
        )
        return dx, {}


class FullyConnected(Layer):
    """
    Affine layer y = W x + b with W of shape (out, in).

    With per_step=False every non-batch axis is flattened first; with
    per_step=True the layer is applied to the last axis of (B, T, F) inputs.
    """

    kind = LayerKind.FullyConnected
    arg_names = ("in_features", "out_features", "per_step")

    def __init__(self, in_features: int, out_features: int, per_step: bool = False, rng=None):
        super().__init__()
        self.in_features = int(in_features)
        self.out_features = int(out_features)
        self.per_step = bool(per_step)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["W"] = _uniform(rng, self.in_features, (self.out_features, self.in_features))
        self.params["b"] = _uniform(rng, self.in_features, (self.out_features,))

    def forward(self, x, training=False, rng=None):
        W, b = self.params["W"], self.params["b"]
        if self.per_step:
            if x.shape[-1] != self.in_features:
                raise ShapeError(
                    f"FullyConnected expects last axis {self.in_features}, got {x.shape}"
                )
            return x @ W.T + b, (x.shape, x)

        xf = x.reshape(x.shape[0], -1)
        if xf.shape[1] != self.in_features:
            raise ShapeError(
                f"FullyConnected expects {self.in_features} features, got {xf.shape[1]}"
            )
        return xf @ W.T + b, (x.shape, xf)

    def backward(self, grad_out, cache):
        x_shape, xf = cache
        W = self.params["W"]
        if self.per_step:
            dW = grad_out.reshape(-1, self.out_features).T @ xf.reshape(-1, self.in_features)
            db = grad_out.reshape(-1, self.out_features).sum(axis=0)
            return grad_out @ W, {"W": dW, "b": db}

        dW = grad_out.T @ xf
        db = grad_out.sum(axis=0)
        dx = (grad_out @ W).reshape(x_shape)
        return dx, {"W": dW, "b": db}


class ReLU(Layer):
    kind = LayerKind.ReLU

    def forward(self, x, training=False, rng=None):
        mask = x > 0
        return x * mask, mask

    def backward(self, grad_out, cache):
        return grad_out * cache, {}


class GELU(Layer):
    """
    Exact GELU, x * Phi(x) with Phi the standard normal CDF.
    """

    kind = LayerKind.GELU

    def forward(self, x, training=False, rng=None):
        cdf = ndtr(x)
        return x * cdf, (x, cdf)

    def backward(self, grad_out, cache):
        x, cdf = cache
        pdf = np.exp(-0.5 * x**2) / np.sqrt(2.0 * np.pi)
        return grad_out * (cdf + x * pdf), {}


class Softmax(Layer):
    """
    Softmax over the last axis.
    """

    kind = LayerKind.Softmax

    def forward(self, x, training=False, rng=None):
        shifted = x - np.max(x, axis=-1, keepdims=True)
        e = np.exp(shifted)
        s = e / np.sum(e, axis=-1, keepdims=True)
        return s, s

    def backward(self, grad_out, cache):
        s = cache
        return s * (grad_out - np.sum(grad_out * s, axis=-1, keepdims=True)), {}


class Dropout(Layer):
    """
    Inverted dropout. Identity unless training with rate > 0.
    """

    kind = LayerKind.Dropout
    arg_names = ("rate",)

    def __init__(self, rate: float, rng=None):
        super().__init__()
        if not 0.0 <= rate < 1.0:
            raise ValueError(f"Dropout rate must be in [0, 1), got {rate}")
        self.rate = float(rate)

    def forward(self, x, training=False, rng=None):
        if not training or self.rate == 0.0:
            return x, None
        if rng is None:
            raise ValueError("Dropout in training mode needs a random generator")
        mask = (rng.random(x.shape) >= self.rate) / (1.0 - self.rate)
        return x * mask, mask

    def backward(self, grad_out, cache):
        if cache is None:
            return grad_out, {}
        return grad_out * cache, {}


class BGRU(Layer):
    """
    Bidirectional GRU on (B, T, F) inputs.

    Gates are ordered (update z, reset r, candidate n):
        z = sigmoid(x W_z + h U_z + b_z)
        r = sigmoid(x W_r + h U_r + b_r)
        n = tanh(x W_n + (r * h) U_n + b_n)
        h' = (1 - z) * n + z * h
    The backward direction runs the same cell over the time-reversed input.
    Outputs of both directions are concatenated: (B, T, 2H) when
    return_sequence, else (B, 2H) made of the last forward state and the last
    backward state (the one aligned with t = 0).
    """

    kind = LayerKind.BGRU
    arg_names = ("in_features", "hidden", "return_sequence")

    def __init__(self, in_features: int, hidden: int, return_sequence: bool = True, rng=None):
        super().__init__()
        self.in_features = int(in_features)
        self.hidden = int(hidden)
        self.return_sequence = bool(return_sequence)
        rng = rng if rng is not None else np.random.default_rng(0)
        H = self.hidden
        for d in ("f", "b"):
            self.params[f"W_{d}"] = _uniform(rng, H, (self.in_features, 3 * H))
            self.params[f"U_{d}"] = _uniform(rng, H, (H, 3 * H))
            self.params[f"b_{d}"] = _uniform(rng, H, (3 * H,))

    def _run(self, xs: np.ndarray, d: str):
        """
        Runs one direction over xs (already in processing order). Returns the
        states (B, T, H) and the per-step cache.
        """
        W, U, b = self.params[f"W_{d}"], self.params[f"U_{d}"], self.params[f"b_{d}"]
        H = self.hidden
        B, T, _ = xs.shape

        xw = xs @ W + b
        hs = np.zeros((B, T, H), dtype=xw.dtype)
        h_prev = np.zeros((B, H), dtype=xw.dtype)
        cache = {
            name: np.zeros((B, T, H), dtype=xw.dtype) for name in ("h_prev", "z", "r", "n")
        }
        for t in range(T):
            hu = h_prev @ U[:, : 2 * H]
            z = expit(xw[:, t, :H] + hu[:, :H])
            r = expit(xw[:, t, H : 2 * H] + hu[:, H:])
            n = np.tanh(xw[:, t, 2 * H :] + (r * h_prev) @ U[:, 2 * H :])
            h = (1.0 - z) * n + z * h_prev

            cache["h_prev"][:, t] = h_prev
            cache["z"][:, t] = z
            cache["r"][:, t] = r
            cache["n"][:, t] = n
            hs[:, t] = h
            h_prev = h
        return hs, cache

    def _run_backward(self, xs: np.ndarray, d_hs: np.ndarray, cache, d: str):
        """
        Backpropagation through time for one direction, d_hs in processing order.
        """
        W, U = self.params[f"W_{d}"], self.params[f"U_{d}"]
        H = self.hidden
        B, T, _ = xs.shape

        d_xw = np.zeros((B, T, 3 * H), dtype=d_hs.dtype)
        dU = np.zeros_like(U)
        dh_next = np.zeros((B, H), dtype=d_hs.dtype)
        for t in range(T - 1, -1, -1):
            h_prev = cache["h_prev"][:, t]
            z, r, n = cache["z"][:, t], cache["r"][:, t], cache["n"][:, t]
            dh = d_hs[:, t] + dh_next

            dz = dh * (h_prev - n)
            dn = dh * (1.0 - z)
            dh_prev = dh * z

            da_n = dn * (1.0 - n**2)
            dU[:, 2 * H :] += (r * h_prev).T @ da_n
            d_rh = da_n @ U[:, 2 * H :].T
            dr = d_rh * h_prev
            dh_prev += d_rh * r

            da_z = dz * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
            da_zr = np.concatenate([da_z, da_r], axis=1)
            dU[:, : 2 * H] += h_prev.T @ da_zr
            dh_prev += da_zr @ U[:, : 2 * H].T

            d_xw[:, t, : 2 * H] = da_zr
            d_xw[:, t, 2 * H :] = da_n
            dh_next = dh_prev

        dW = np.einsum("bti,btg->ig", xs, d_xw, optimize=True)
        db = d_xw.sum(axis=(0, 1))
        dxs = d_xw @ W.T
        return dxs, {f"W_{d}": dW, f"U_{d}": dU, f"b_{d}": db}

    def forward(self, x, training=False, rng=None):
        if x.ndim != 3 or x.shape[2] != self.in_features:
            raise ShapeError(f"BGRU expects (B, T, {self.in_features}), got {x.shape}")
        x_rev = x[:, ::-1]
        hs_f, cache_f = self._run(x, "f")
        hs_b, cache_b = self._run(x_rev, "b")

        if self.return_sequence:
            out = np.concatenate([hs_f, hs_b[:, ::-1]], axis=-1)
        else:
            out = np.concatenate([hs_f[:, -1], hs_b[:, -1]], axis=-1)
        return out, (x, x_rev, cache_f, cache_b)

    def backward(self, grad_out, cache):
        x, x_rev, cache_f, cache_b = cache
        H = self.hidden
        B, T, _ = x.shape

        if self.return_sequence:
            d_hs_f = grad_out[..., :H]
            d_hs_b = grad_out[..., H:][:, ::-1]
        else:
            d_hs_f = np.zeros((B, T, H), dtype=grad_out.dtype)
            d_hs_b = np.zeros((B, T, H), dtype=grad_out.dtype)
            d_hs_f[:, -1] = grad_out[:, :H]
            d_hs_b[:, -1] = grad_out[:, H:]

        dx_f, grads = self._run_backward(x, d_hs_f, cache_f, "f")
        dx_b, grads_b = self._run_backward(x_rev, d_hs_b, cache_b, "b")
        grads.update(grads_b)
        return dx_f + dx_b[:, ::-1], grads


LAYER_CLASSES: Dict[LayerKind, Type[Layer]] = {
    LayerKind.Conv2D: Conv2D,
    LayerKind.Conv1D: Conv1D,
    LayerKind.MaxPool2D: MaxPool2D,
    LayerKind.FullyConnected: FullyConnected,
    LayerKind.ReLU: ReLU,
    LayerKind.GELU: GELU,
    LayerKind.Softmax: Softmax,
    LayerKind.Dropout: Dropout,
    LayerKind.BGRU: BGRU,
}


def make_layer(
    kind: LayerKind, spec: Optional[Dict[str, object]] = None, rng=None
) -> Layer:
    """
    Builds a layer of given kind from its constructor arguments.
    """
    cls = LAYER_CLASSES[LayerKind(kind)]
    spec = dict(spec or {})
    if cls in (ReLU, GELU, Softmax):
        return cls()
    return cls(**spec, rng=rng)
