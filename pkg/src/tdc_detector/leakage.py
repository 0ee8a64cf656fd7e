"""
Supply-voltage drop caused by accelerator switching activity.

Toggles between consecutive operand words draw current through the power
distribution network, modeled as a series R + L element followed by a single
RC low-pass node. The sensor placement attenuates and smears the drop before
readout noise is added.
"""
from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np
from scipy.signal import lfilter

from .schedule import OpStream
from .utils import popcount


@dataclass(frozen=True)
class PDNParams:
    """
    Power distribution network constants.

    R            : series resistance (ohm)
    L            : series inductance (H)
    C            : decoupling capacitance (F)
    dt           : simulation timestep, one accelerator clock cycle (s)
    i_per_toggle : current drawn per bit toggle (A)
    noise_sigma  : readout-referred Gaussian noise std (V); 1.25 mV is half a
                   tap at 400 taps/V
    """

    R: float = 0.1
    L: float = 1e-9
    C: float = 1e-6
    dt: float = 1e-7
    i_per_toggle: float = 5e-4
    noise_sigma: float = 1.25e-3

    def __post_init__(self):
        for name in ("R", "L", "C", "dt", "i_per_toggle"):
            if not getattr(self, name) > 0:
                raise ValueError(f"PDNParams.{name} must be positive, got {getattr(self, name)}")
        if self.noise_sigma < 0:
            raise ValueError(f"PDNParams.noise_sigma must be non-negative, got {self.noise_sigma}")

    @property
    def rc_alpha(self) -> float:
        """
        Smoothing factor of the discretized RC node.
        """
        return min(1.0, self.dt / (self.R * self.C))


@dataclass(frozen=True)
class PlacementProfile:
    name: str
    gain: float = 1.0
    smear: int = 0
    code: int = 0

    def __post_init__(self):
        if not 0 < self.gain <= 1:
            raise ValueError(f"Placement gain must lie in (0, 1], got {self.gain}")
        if self.smear < 0:
            raise ValueError(f"Placement smear must be non-negative, got {self.smear}")


PLACEMENTS: Dict[str, PlacementProfile] = {
    "baseline": PlacementProfile("baseline", 1.0, 0, code=0),
    "top-left": PlacementProfile("top-left", 0.55, 3, code=1),
    "center": PlacementProfile("center", 0.7, 2, code=2),
    "bottom-right": PlacementProfile("bottom-right", 0.85, 1, code=3),
}


def get_placement(name: str, registry: Optional[Dict[str, PlacementProfile]] = None) -> PlacementProfile:
    registry = PLACEMENTS if registry is None else registry
    try:
        return registry[name]
    except KeyError:
        raise ValueError(f"Placement {name!r} is not registered, known: {sorted(registry)}") from None


@dataclass
class VoltageSeries:
    """
    Voltage drop per accelerator cycle (V).

    noise_sigma is carried over from the PDN so that placement can add the
    readout noise.
    """

    samples: np.ndarray
    noise_sigma: float = 0.0
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)


def switching_activity(stream: OpStream) -> np.ndarray:
    """
    Returns the number of bit toggles per cycle, summed over all lanes, with
    the lanes starting from 0x00.
    """
    words = stream.words if isinstance(stream, OpStream) else np.asarray(stream, dtype=np.uint8)
    prev = np.vstack([np.zeros((1, words.shape[1]), dtype=np.uint8), words[:-1]])
    return popcount(words ^ prev).sum(axis=1).astype(np.int64)


def pdn_filter(activity: np.ndarray, params: PDNParams, meta: Optional[dict] = None) -> VoltageSeries:
    """
    V[t] = i[t] R + L (i[t] - i[t-1]) / dt with i = i_per_toggle * activity
    and i[-1] = 0, smoothed by the RC node and clamped at 0 from below.
    """
    i = params.i_per_toggle * np.asarray(activity, dtype=float)
    di = np.diff(i, prepend=0.0)
    v = i * params.R + params.L * di / params.dt

    alpha = params.rc_alpha
    v = lfilter([alpha], [1.0, -(1.0 - alpha)], v)
    return VoltageSeries(np.maximum(v, 0.0), params.noise_sigma, dict(meta or {}))


def apply_placement(
    series: VoltageSeries,
    profile: PlacementProfile,
    rng: Optional[np.random.Generator] = None,
    noise_sigma: Optional[float] = None,
) -> VoltageSeries:
    """
    Scales the series by the placement gain, applies a causal box average over
    1 + smear cycles and adds Gaussian noise.
    """
    sigma = series.noise_sigma if noise_sigma is None else noise_sigma
    v = profile.gain * np.asarray(series.samples, dtype=float)
    if profile.smear:
        n = profile.smear + 1
        v = lfilter(np.full(n, 1.0 / n), [1.0], v)
    if sigma > 0:
        if rng is None:
            raise ValueError("apply_placement needs an rng when noise is enabled")
        v = v + rng.normal(0.0, sigma, size=v.shape)
    meta = dict(series.meta, placement=profile.name)
    return VoltageSeries(v, sigma, meta)
