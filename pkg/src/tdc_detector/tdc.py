"""
Time-to-digital converter used as an on-chip voltage sensor.

A clock edge is launched through an adjustable initial delay (coarse and fine
delay lines) into a tapped carry chain. Half a sensor period later the taps
are registered; the number of taps the edge reached shrinks as the supply
voltage drops. Readouts are sampled at the bus clock.
"""
import logging
import struct
from dataclasses import dataclass, field, replace
from enum import IntEnum
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .core import AttackMethod, CalibrationFailed, DataError, TraceLabel
from .leakage import VoltageSeries

logger = logging.getLogger(__name__)

SCTR_MAGIC = b"SCTR"
SCTR_VERSION = 1
_SCTR_HEADER = "<HBBIBBBI"
EXP_BANDS = 8


class ReadoutMode(IntEnum):
    raw = 0
    sum = 1
    exp_sum = 2


@dataclass(frozen=True)
class TDCConfig:
    """
    Sensor configuration. Delays in ps, clocks in Hz, sensitivity in taps/V.

    sampling_phase is the fraction of a sensor period between launching the
    edge and registering the taps.
    """

    taps: int = 128
    coarse_max: int = 32
    fine_max: int = 32
    coarse_unit: float = 80.0
    fine_unit: float = 10.0
    tap_unit: float = 20.0
    sensor_clock_hz: float = 150e6
    bus_clock_hz: float = 10e6
    sensitivity: float = 400.0
    readout_mode: ReadoutMode = ReadoutMode.sum
    sampling_phase: float = 0.5

    def __post_init__(self):
        if self.taps <= 0 or self.taps % 4:
            raise ValueError(f"taps must be a positive multiple of 4, got {self.taps}")
        if self.sensor_clock_hz <= 0 or self.bus_clock_hz <= 0:
            raise ValueError("Clock frequencies must be positive")
        if self.sensor_clock_hz < self.bus_clock_hz:
            raise ValueError("Sensor clock must not be slower than the bus clock")
        if self.tap_unit <= 0 or self.sensitivity <= 0:
            raise ValueError("tap_unit and sensitivity must be positive")
        mode = self.readout_mode
        if isinstance(mode, str):
            mode = ReadoutMode[mode]
        object.__setattr__(self, "readout_mode", ReadoutMode(mode))

    @property
    def capture_window_ps(self) -> float:
        return self.sampling_phase / self.sensor_clock_hz * 1e12

    def taps_reached(self, coarse_len, fine_len) -> np.ndarray:
        """
        Taps reached at nominal voltage for given delay line settings.
        """
        delay = np.asarray(coarse_len) * self.coarse_unit + np.asarray(fine_len) * self.fine_unit
        return np.floor((self.capture_window_ps - delay) / self.tap_unit).astype(int)


@dataclass(frozen=True)
class CalibrationResult:
    coarse_len: int
    fine_len: int
    nominal_readout: int

    def describe(self, cfg: TDCConfig) -> str:
        surface = calibration_surface(cfg)
        landing = np.count_nonzero(surface >= 0)
        return (
            f"coarse={self.coarse_len} fine={self.fine_len} nominal={self.nominal_readout}/{cfg.taps} taps, "
            f"{landing} of {surface.size} settings land inside the line"
        )


def calibration_surface(cfg: TDCConfig) -> np.ndarray:
    """
    Nominal readout for every (coarse, fine) setting, -1 where the edge does
    not land strictly inside the tapped line.
    """
    coarse, fine = np.meshgrid(np.arange(cfg.coarse_max + 1), np.arange(cfg.fine_max + 1), indexing="ij")
    reached = cfg.taps_reached(coarse, fine)
    return np.where((reached > 0) & (reached < cfg.taps), reached, -1)


def calibrate(cfg: TDCConfig) -> CalibrationResult:
    """
    Two-loop search over the coarse and fine delay lines for the initial delay
    that puts the nominal readout closest to the middle of the line. Ties go to
    the shorter coarse line, then the shorter fine line.
    """
    target = cfg.taps / 2
    best = None
    for coarse in range(cfg.coarse_max + 1):
        for fine in range(cfg.fine_max + 1):
            r = int(cfg.taps_reached(coarse, fine))
            if not 0 < r < cfg.taps:
                continue
            err = abs(r - target)
            if best is None or err < best[0]:
                best = (err, coarse, fine, r)

    if best is None:
        raise CalibrationFailed("No delay setting lands the edge inside the tapped line")
    _, coarse, fine, r = best
    if not cfg.taps / 4 < r < 3 * cfg.taps / 4:
        raise CalibrationFailed(
            f"Best nominal readout {r} is not strictly inside [{cfg.taps // 4}, {3 * cfg.taps // 4}]"
        )
    logger.debug("Calibrated TDC: coarse %d fine %d nominal %d", coarse, fine, r)
    return CalibrationResult(coarse, fine, r)


def readout(cfg: TDCConfig, calib: CalibrationResult, v_drop) -> np.ndarray:
    """
    Taps reached for a voltage drop (V), linear in the drop and clamped to the
    line.
    """
    taps = np.rint(calib.nominal_readout - cfg.sensitivity * np.asarray(v_drop, dtype=float))
    return np.clip(taps, 0, cfg.taps).astype(np.int64)


def encode(cfg: TDCConfig, taps_reached, mode: Optional[ReadoutMode] = None) -> np.ndarray:
    """
    Encodes taps reached per readout mode: raw gives the thermometer code
    (one extra trailing axis of length taps), sum the count itself and exp_sum
    a sum with the weight doubling every taps/8 taps.
    """
    mode = cfg.readout_mode if mode is None else ReadoutMode(mode)
    r = np.asarray(taps_reached, dtype=np.int64)
    if mode == ReadoutMode.raw:
        return (np.arange(cfg.taps) < r[..., None]).astype(np.uint8)
    if mode == ReadoutMode.sum:
        return r
    band = cfg.taps // EXP_BANDS
    full, rest = np.divmod(r, band)
    return band * (2**full - 1) + rest * 2**full


@dataclass
class TraceMeta:
    victim_id: int = 0
    attack: AttackMethod = AttackMethod.none
    placement: int = 0
    factor: int = 1


@dataclass
class Trace:
    """
    One inference as seen by the sensor.

    readouts stores the encoded value per bus sample; in raw mode it stores the
    length of the thermometer code.
    """

    readouts: np.ndarray
    label: TraceLabel = TraceLabel.benign
    meta: TraceMeta = field(default_factory=TraceMeta)
    readout_mode: ReadoutMode = ReadoutMode.sum

    def __len__(self) -> int:
        return len(self.readouts)

    def thermometer(self, taps: int) -> np.ndarray:
        return (np.arange(taps) < np.asarray(self.readouts)[:, None]).astype(np.uint8)


def sample_trace(
    voltage: Union[VoltageSeries, np.ndarray],
    cfg: TDCConfig,
    calib: CalibrationResult,
    frequency_factor: int = 1,
    dt: float = 1e-7,
    label: TraceLabel = TraceLabel.benign,
    meta: Optional[TraceMeta] = None,
) -> Trace:
    """
    Reads the sensor every accelerator cycle and keeps one register snapshot
    per bus cycle, reduced by frequency_factor.
    """
    samples = voltage.samples if isinstance(voltage, VoltageSeries) else np.asarray(voltage)
    if len(samples) == 0:
        raise DataError("Cannot sample an empty voltage series")
    if frequency_factor < 1:
        raise ValueError(f"frequency_factor must be >= 1, got {frequency_factor}")

    stride = frequency_factor * max(1, int(round(1 / (cfg.bus_clock_hz * dt))))
    taps = readout(cfg, calib, samples[::stride])
    values = taps if cfg.readout_mode == ReadoutMode.raw else encode(cfg, taps)
    meta = replace(meta, factor=frequency_factor) if meta is not None else TraceMeta(factor=frequency_factor)
    return Trace(values.astype(np.int64), TraceLabel(label), meta, cfg.readout_mode)


def subsample(trace: Trace, factor: int) -> Trace:
    """
    Keeps every factor-th readout of a factor-1 trace.
    """
    meta = replace(trace.meta, factor=trace.meta.factor * factor)
    return Trace(trace.readouts[::factor].copy(), trace.label, meta, trace.readout_mode)


def trace_to_bytes(trace: Trace) -> bytes:
    header = struct.pack(
        _SCTR_HEADER,
        SCTR_VERSION,
        int(trace.readout_mode),
        int(trace.label),
        int(trace.meta.victim_id),
        int(trace.meta.attack),
        int(trace.meta.placement),
        int(trace.meta.factor),
        len(trace.readouts),
    )
    return SCTR_MAGIC + header + np.asarray(trace.readouts, dtype="<u4").tobytes()


def write_trace(path: Union[str, Path], trace: Trace) -> None:
    Path(path).write_bytes(trace_to_bytes(trace))


def read_trace(path: Union[str, Path]) -> Trace:
    data = Path(path).read_bytes()
    if data[:4] != SCTR_MAGIC:
        raise DataError(f"{path} is not an SCTR trace")
    version, mode, label, victim, attack, placement, factor, length = struct.unpack_from(_SCTR_HEADER, data, 4)
    if version != SCTR_VERSION:
        raise DataError(f"Unsupported SCTR version {version}")
    offset = 4 + struct.calcsize(_SCTR_HEADER)
    readouts = np.frombuffer(data, dtype="<u4", count=length, offset=offset).astype(np.int64)
    meta = TraceMeta(victim, AttackMethod(attack), placement, factor)
    return Trace(readouts, TraceLabel(label), meta, ReadoutMode(mode))
