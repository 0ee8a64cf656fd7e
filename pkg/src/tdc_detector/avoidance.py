"""
Detection avoidance attack: black-box search for a small perturbation that
makes the detector label the trace of an attack input as benign.

The gradient of the detector loss with respect to the input is estimated with
natural evolution strategies over antithetic Gaussian samples; the perturbation
follows momentum sign steps and is kept inside the pixel box and an L_p ball.
"""
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Union

import dill
import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from tqdm import tqdm

from .core import BudgetExhaustedError, InvalidExperimentError, TraceLabel
from .detector import DetectorModel, preprocess_batch
from .network import Network
from .pipeline import TracePipeline
from .quantization import QuantizedNetwork
from .utils import make_rng

logger = logging.getLogger(__name__)

CURVE_COLUMNS = ["iteration", "benign_rate", "queries_used", "victim_label_preserved_rate"]


@dataclass
class AvoidanceConfig:
    """
    d_prime           : queries per iteration (even)
    sigma             : sample scale
    eta               : sign step size
    mu                : momentum
    epsilon           : bound on the L_p norm of the perturbation
    p                 : norm, 2 or inf
    weight_by_clamped : weight the losses with the box-clamped samples instead
                        of the raw Gaussian samples
    """

    d_prime: int = 256
    sigma: float = 0.001
    eta: float = 0.001
    mu: float = 0.5
    epsilon: float = 1 / 255
    p: float = np.inf
    iters: int = 256
    budget: int = 65536
    repeats: int = 100
    weight_by_clamped: bool = True
    seed: int = 0

    def __post_init__(self):
        self.p = float(self.p)
        if self.d_prime <= 0 or self.d_prime % 2:
            raise ValueError(f"d_prime must be a positive even number, got {self.d_prime}")
        for name in ("sigma", "eta", "epsilon"):
            if not getattr(self, name) > 0:
                raise ValueError(f"AvoidanceConfig.{name} must be positive")
        if not 0 <= self.mu <= 1:
            raise ValueError(f"mu must lie in [0, 1], got {self.mu}")
        if self.p not in (2.0, np.inf):
            raise ValueError(f"p must be 2 or inf, got {self.p}")
        if self.budget < self.d_prime * self.iters:
            logger.info("Budget %d allows %d of %d iterations", self.budget, self.budget // self.d_prime, self.iters)


@dataclass
class AvoidanceState:
    delta: np.ndarray
    grad_prev: np.ndarray
    t: int = 0
    queries_used: int = 0

    @classmethod
    def start(cls, X: np.ndarray) -> "AvoidanceState":
        return cls(np.zeros_like(X, dtype=float), np.zeros_like(X, dtype=float))


@dataclass
class QueryResult:
    """
    losses        : detector loss towards the benign class per query
    labels        : detector label per query
    victim_labels : victim prediction per query
    """

    losses: np.ndarray
    labels: np.ndarray
    victim_labels: np.ndarray


class LossOracle(ABC):
    """
    Parent class for the loss oracles the attack queries. Gradient-estimation
    queries and re-evaluation queries are counted separately.
    """

    def __init__(self):
        self.queries_used = 0
        self.eval_queries = 0

    @abstractmethod
    def _run(self, xs: np.ndarray, stream: int) -> QueryResult:
        """
        Evaluates a batch of inputs; stream identifies the batch for seeding.
        """

    def query(self, xs: np.ndarray) -> QueryResult:
        result = self._run(xs, self.queries_used + self.eval_queries)
        self.queries_used += len(xs)
        return result

    def evaluate(self, xs: np.ndarray) -> QueryResult:
        result = self._run(xs, self.queries_used + self.eval_queries)
        self.eval_queries += len(xs)
        return result


def _benign_loss(probs: np.ndarray) -> np.ndarray:
    return -np.log(np.clip(probs[:, TraceLabel.benign], 1e-12, None))


class PipelineOracle(LossOracle):
    """
    Full black-box path: victim inference on the accelerator, trace capture
    with fresh noise per query, preprocessing and the detector. Query k of the
    oracle draws its noise from the stream seeded by (seed, k).
    """

    def __init__(
        self,
        pipeline: TracePipeline,
        victim: QuantizedNetwork,
        detector: DetectorModel,
        seed: int = 0,
        n_jobs: int = 1,
    ):
        super().__init__()
        self.pipeline = pipeline
        self.victim = victim
        self.detector = detector
        self.seed = seed
        self.n_jobs = n_jobs

    def _run(self, xs, stream):
        out = Parallel(n_jobs=self.n_jobs)(
            delayed(self.pipeline.capture)(self.victim, x, make_rng(self.seed, stream + i))
            for i, x in enumerate(xs)
        )
        traces = [t for t, _ in out]
        probs = self.detector.predict_proba(preprocess_batch(traces, self.detector.cfg))
        return QueryResult(_benign_loss(probs), np.argmax(probs, axis=1), np.array([p for _, p in out]))


class SurrogateOracle(LossOracle):
    """
    Noiseless oracle built on a differentiable classifier that maps inputs
    directly to detector class probabilities.
    """

    def __init__(self, classifier: Network, victim: Optional[Network] = None):
        super().__init__()
        self.classifier = classifier
        self.victim = victim

    def _run(self, xs, stream):
        probs = self.classifier.predict(xs)
        if self.victim is not None:
            victim_labels = np.argmax(self.victim.predict(xs), axis=1)
        else:
            victim_labels = np.zeros(len(xs), dtype=int)
        return QueryResult(_benign_loss(probs), np.argmax(probs, axis=1), victim_labels)


def antithetic_samples(rng: np.random.Generator, d_prime: int, shape) -> np.ndarray:
    """
    d_prime standard normal samples where sample d_prime - 1 - i is the
    negation of sample i.
    """
    half = rng.standard_normal((d_prime // 2,) + tuple(shape))
    return np.concatenate([half, -half[::-1]], axis=0)


def _norm(delta: np.ndarray, p: float) -> float:
    flat = delta.reshape(-1)
    return float(np.max(np.abs(flat))) if np.isinf(p) else float(np.linalg.norm(flat, ord=p))


def nes_gradient(
    oracle: LossOracle,
    X: np.ndarray,
    state: AvoidanceState,
    cfg: AvoidanceConfig,
    rng: Optional[np.random.Generator] = None,
) -> np.ndarray:
    """
    Estimates the gradient of the loss at X + delta from d_prime antithetic
    samples, each clamped to the pixel box. Raises BudgetExhaustedError without
    querying when the budget cannot cover the batch; state.queries_used is
    advanced by d_prime otherwise.
    """
    if state.queries_used + cfg.d_prime > cfg.budget:
        raise BudgetExhaustedError(
            f"{cfg.d_prime} queries requested, {cfg.budget - state.queries_used} left of {cfg.budget}"
        )
    rng = rng if rng is not None else make_rng(cfg.seed, state.t)
    X = np.asarray(X, dtype=float)

    theta = antithetic_samples(rng, cfg.d_prime, X.shape)
    base = X + state.delta
    shifted = base + cfg.sigma * theta
    inside = (shifted >= 0) & (shifted <= 1)
    theta_c = np.where(inside, cfg.sigma * theta, np.clip(shifted, 0, 1) - base)

    losses = oracle.query(base + theta_c).losses
    state.queries_used += cfg.d_prime

    # clamped samples back in N(0, I) units
    weights = theta_c / cfg.sigma if cfg.weight_by_clamped else theta
    terms = losses.reshape((-1,) + (1,) * X.ndim) * weights
    half = cfg.d_prime // 2
    # Sum antithetic partners first so that they cancel exactly
    paired = terms[:half] + terms[::-1][:half]
    return paired.sum(axis=0) / (cfg.sigma * cfg.d_prime)


def project_delta(delta: np.ndarray, X: np.ndarray, epsilon: float, p: float) -> np.ndarray:
    """
    Clips delta so that X + delta stays in the pixel box, then rescales it onto
    the L_p ball of radius epsilon if it lies outside.
    """
    delta = np.clip(X + delta, 0.0, 1.0) - X
    norm = _norm(delta, p)
    if norm > epsilon:
        delta = delta * (epsilon / norm)
    return delta


def avoidance_step(
    state: AvoidanceState, grad: np.ndarray, cfg: AvoidanceConfig, X: np.ndarray
) -> AvoidanceState:
    """
    Momentum blend, sign step, box clip and L_p rescaling. Returns a new state.
    """
    g = cfg.mu * state.grad_prev + (1 - cfg.mu) * grad
    delta = project_delta(state.delta - cfg.eta * np.sign(g), X, cfg.epsilon, cfg.p)
    return replace(state, delta=delta, grad_prev=g, t=state.t + 1)


@dataclass
class AvoidanceResult:
    """
    curve                      : one row per iteration, CURVE_COLUMNS
    delta                      : final perturbation
    queries_used               : gradient-estimation queries
    eval_queries               : re-evaluation queries
    victim_label_preserved_rate: fraction of iterates keeping the victim label
    """

    curve: pd.DataFrame
    delta: np.ndarray
    queries_used: int
    eval_queries: int
    victim_label_preserved_rate: float
    initial_benign_rate: float = 0.0
    cfg: AvoidanceConfig = field(default_factory=AvoidanceConfig)

    @property
    def final_benign_rate(self) -> float:
        if self.curve.empty:
            return self.initial_benign_rate
        return float(self.curve["benign_rate"].iloc[-1])

    def to_csv(self, path: Union[str, Path]) -> None:
        self.curve.to_csv(path, index=False, float_format="%.6f")

    def save_to_pickle(self, filepath: Union[str, Path]) -> None:
        with open(filepath, "wb") as f:
            dill.dump(self, f)


def run_avoidance(
    oracle: LossOracle,
    X: np.ndarray,
    cfg: AvoidanceConfig,
    repeats: Optional[int] = None,
    disable_progress: bool = True,
) -> AvoidanceResult:
    """
    Runs the attack on one input until cfg.iters iterations or the query budget
    is used up. After every iteration X + delta is re-evaluated repeats times to
    measure the benign rate.
    """
    repeats = cfg.repeats if repeats is None else repeats
    X = np.asarray(X, dtype=float)

    start = oracle.evaluate(np.repeat(X[None], repeats, axis=0))
    initial_benign = float(np.mean(start.labels == TraceLabel.benign))
    if initial_benign > 0.5:
        raise InvalidExperimentError(
            f"Input is already classified benign ({initial_benign:.0%} of {repeats} captures)"
        )
    victim_label = int(np.bincount(start.victim_labels).argmax())

    state = AvoidanceState.start(X)
    rows = []
    for _ in tqdm(range(cfg.iters), desc="avoidance", disable=disable_progress):
        if state.queries_used + cfg.d_prime > cfg.budget:
            break
        grad = nes_gradient(oracle, X, state, cfg)
        state = avoidance_step(state, grad, cfg, X)

        ev = oracle.evaluate(np.repeat((X + state.delta)[None], repeats, axis=0))
        rows.append(
            {
                "iteration": state.t,
                "benign_rate": float(np.mean(ev.labels == TraceLabel.benign)),
                "queries_used": state.queries_used,
                "victim_label_preserved_rate": float(np.mean(ev.victim_labels == victim_label)),
            }
        )

    curve = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    preserved = float((curve["victim_label_preserved_rate"] == 1.0).mean()) if len(curve) else 1.0
    logger.info(
        "Avoidance finished after %d iterations, %d queries, final benign rate %s",
        state.t,
        state.queries_used,
        f"{curve['benign_rate'].iloc[-1]:.3f}" if len(curve) else "n/a",
    )
    return AvoidanceResult(
        curve=curve,
        delta=state.delta,
        queries_used=state.queries_used,
        eval_queries=oracle.eval_queries,
        victim_label_preserved_rate=preserved,
        initial_benign_rate=initial_benign,
        cfg=cfg,
    )
