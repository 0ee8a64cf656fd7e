"""
Trace capture: integer inference on the accelerator, switching activity, PDN,
sensor placement and TDC readout.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import dill
import matplotlib.pyplot as plt
import numpy as np
from joblib import Parallel, delayed
from tqdm import tqdm

from .core import AttackMethod
from .leakage import (
    PLACEMENTS,
    PDNParams,
    PlacementProfile,
    VoltageSeries,
    apply_placement,
    pdn_filter,
    switching_activity,
)
from .quantization import QuantizedNetwork
from .schedule import DEFAULT_LANES, OpStream, emit_schedule
from .tdc import CalibrationResult, TDCConfig, Trace, TraceMeta, calibrate, sample_trace
from .utils import make_rng

logger = logging.getLogger(__name__)


@dataclass
class CaptureJob:
    """
    One inference to capture: which victim, which input, and how the input was
    produced.
    """

    victim_id: int
    x: np.ndarray
    attack: AttackMethod = AttackMethod.none


@dataclass
class CaptureResult:
    """
    Class for storing captured traces.

    traces      : one Trace per job, in job order
    predictions : the victim's integer-inference prediction for each job
    """

    traces: List[Trace]
    predictions: np.ndarray

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(t.label) for t in self.traces])

    def plot_trace(self, index: int, ax: Optional[plt.Axes] = None, **kwargs) -> plt.Axes:
        """
        Plots the readouts of one trace.
        """
        if ax is None:
            fig, ax = plt.subplots()
        trace = self.traces[index]
        ax.plot(trace.readouts, lw=0.8, **kwargs)
        ax.set_xlabel("Bus sample")
        ax.set_ylabel("TDC readout")
        ax.set_title(f"victim {trace.meta.victim_id}, {trace.meta.attack.name}")
        return ax

    def save_to_pickle(self, filepath: Union[str, Path]) -> None:
        with open(filepath, "wb") as f:
            dill.dump(self, f)


@dataclass
class TracePipeline:
    """
    Turns victim inferences into sensor traces.

    The TDC is calibrated once at construction; the calibration is immutable and
    shared by every capture.
    """

    pdn: PDNParams = field(default_factory=PDNParams)
    tdc: TDCConfig = field(default_factory=TDCConfig)
    placement: PlacementProfile = PLACEMENTS["baseline"]
    lanes: int = DEFAULT_LANES
    calib: Optional[CalibrationResult] = None

    def __post_init__(self):
        if self.calib is None:
            self.calib = calibrate(self.tdc)

    def with_placement(self, placement: PlacementProfile) -> "TracePipeline":
        return TracePipeline(self.pdn, self.tdc, placement, self.lanes, self.calib)

    def voltage(
        self, qnet: QuantizedNetwork, x: np.ndarray, rng: Optional[np.random.Generator]
    ) -> Tuple[VoltageSeries, OpStream]:
        """
        Returns the sensed voltage drop of one inference and its schedule.
        """
        stream = emit_schedule(qnet, x, self.lanes)
        series = pdn_filter(switching_activity(stream), self.pdn)
        return apply_placement(series, self.placement, rng), stream

    def capture(
        self,
        qnet: QuantizedNetwork,
        x: np.ndarray,
        rng: Optional[np.random.Generator],
        attack: AttackMethod = AttackMethod.none,
        victim_id: int = 0,
        frequency_factor: int = 1,
    ) -> Tuple[Trace, int]:
        """
        Captures one trace. Returns the trace and the victim's prediction.
        """
        series, stream = self.voltage(qnet, x, rng)
        meta = TraceMeta(victim_id, AttackMethod(attack), self.placement.code, frequency_factor)
        trace = sample_trace(
            series,
            self.tdc,
            self.calib,
            frequency_factor=frequency_factor,
            dt=self.pdn.dt,
            label=AttackMethod(attack).label,
            meta=meta,
        )
        return trace, stream.prediction

    def run(
        self,
        jobs: Sequence[CaptureJob],
        victims: Dict[int, QuantizedNetwork],
        seed: int = 0,
        frequency_factor: int = 1,
        n_jobs: int = 1,
        disable_progress: bool = False,
    ) -> CaptureResult:
        """
        Captures all jobs. Job i draws its noise from a stream seeded by
        (seed, i), so results do not depend on n_jobs.
        """

        def one(i: int, job: CaptureJob):
            return self.capture(
                victims[job.victim_id],
                job.x,
                make_rng(seed, i),
                job.attack,
                job.victim_id,
                frequency_factor,
            )

        out = Parallel(n_jobs=n_jobs)(
            delayed(one)(i, job)
            for i, job in enumerate(tqdm(jobs, desc="capture", disable=disable_progress))
        )
        logger.info("Captured %d traces at %s placement", len(out), self.placement.name)
        traces = [t for t, _ in out]
        predictions = np.array([p for _, p in out], dtype=int)
        return CaptureResult(traces, predictions)
