"""
Experiment recipes: victim generation, trace corpus construction, the table
reproductions, CAM reports, avoidance runs and the run manifest.
"""
import json
import logging
import math
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import dill
import joblib
import matplotlib
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd
import scipy
from tqdm import tqdm

from .attacks import (
    AttackConfig,
    TriggerKind,
    TriggerSpec,
    cw_l2,
    deepfool,
    extraction_queries,
    fgsm,
    make_trigger,
    pgd,
    poison_and_train,
)
from .avoidance import AvoidanceConfig, AvoidanceResult, PipelineOracle, run_avoidance
from .core import (
    TRAINING_ATTACKS,
    UNSEEN_ATTACKS,
    AttackMethod,
    DataError,
    ExperimentError,
    TDCDetectorError,
    TraceLabel,
)
from .datasets import DataConfig, Dataset, load_victim_dataset, stratified_split, write_scin
from .detector import (
    CLASS_NAMES,
    POOLED,
    CamMap,
    DetectionReport,
    DetectorConfig,
    DetectorModel,
    evaluate,
    grad_cam,
    preprocess,
    preprocess_batch,
    train_detector,
)
from .leakage import PLACEMENTS, PDNParams, PlacementProfile, get_placement
from .pipeline import CaptureJob, TracePipeline
from .plotters import plot_avoidance_curve, plot_cam_panel, plot_grouped_bars, plot_series, save_svg
from .quantization import QuantizedNetwork
from .tdc import TDCConfig, Trace, subsample, write_trace
from .utils import canonical_digest, make_rng, sha256_file, spawn_seeds
from .victims import Victim, VictimRecipe, generate_victim, train_victims

logger = logging.getLogger(__name__)

TEST_FRACTION = 0.1
FULL_SCALE_VICTIMS = 400
# Network ids of poisoned variants: stride * method code + base victim id
BACKDOOR_ID_STRIDE = 100_000
FLOAT_FORMAT = "%.4f"


class TableName(Enum):
    rnn_sweep = "rnn_sweep"
    accuracy = "accuracy"
    frequency = "frequency"
    location = "location"
    unseen = "unseen"


def _methods(names) -> Tuple[AttackMethod, ...]:
    return tuple(AttackMethod[m] if isinstance(m, str) else AttackMethod(m) for m in names)


@dataclass
class ExperimentRecipe:
    """
    Everything needed to build a corpus and reproduce the tables.

    traces_per_class    : traces captured per detector class
    classes             : detector classes in the corpus
    attacks             : training attack roster
    unseen_attacks      : attacks held out for the generalization table
    backdoor_variants   : victims that get a poisoned variant per backdoor attack
    placement           : sensor placement of the training corpus
    location_placements : placements of the cross-location table
    augment_fraction    : share of training traces recaptured at the new
                          placement for augmented training
    full_scale         : use the full victim count instead of the desk default
    """

    name: str = "desk"
    traces_per_class: int = 500
    classes: Tuple[int, ...] = (0, 1, 2, 3)
    attacks: Tuple[AttackMethod, ...] = TRAINING_ATTACKS
    unseen_attacks: Tuple[AttackMethod, ...] = UNSEEN_ATTACKS
    unseen_traces: int = 100
    backdoor_variants: int = 4
    placement: str = "baseline"
    location_placements: Tuple[str, ...] = ("top-left", "center", "bottom-right")
    augment_fraction: float = 0.1
    frequency_factors: Tuple[int, ...] = (2, 3, 4, 5)
    frequency_windows: Tuple[int, ...] = (50, 10)
    sweep_N: Tuple[int, ...] = (1, 2, 3, 4, 5, 6)
    sweep_D: Tuple[int, ...] = (128, 256)
    test_fraction: float = TEST_FRACTION
    seed: int = 0
    output_dir: str = "runs/desk"
    n_jobs: int = 1
    full_scale: bool = False
    victim_recipe: VictimRecipe = field(default_factory=VictimRecipe)
    attack_config: AttackConfig = field(default_factory=AttackConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    pdn: PDNParams = field(default_factory=PDNParams)
    tdc: TDCConfig = field(default_factory=TDCConfig)
    placements: Dict[str, PlacementProfile] = field(default_factory=lambda: dict(PLACEMENTS))
    data: DataConfig = field(default_factory=DataConfig)

    def __post_init__(self):
        self.attacks = _methods(self.attacks)
        self.unseen_attacks = _methods(self.unseen_attacks)
        self.classes = tuple(int(TraceLabel(c)) for c in self.classes)
        if self.test_fraction != TEST_FRACTION:
            raise ValueError(f"The train/test split is fixed at 90/10, got test_fraction={self.test_fraction}")
        if self.traces_per_class < 1:
            raise ValueError(f"traces_per_class must be positive, got {self.traces_per_class}")
        for c in self.classes:
            if c != TraceLabel.benign and not any(m.label == c for m in self.attacks):
                raise ValueError(f"No attack in the roster produces class {TraceLabel(c).name!r}")
        for name in (self.placement, *self.location_placements):
            get_placement(name, self.placements)
        if self.full_scale and self.victim_recipe.n_victims < FULL_SCALE_VICTIMS:
            self.victim_recipe = replace(self.victim_recipe, n_victims=FULL_SCALE_VICTIMS)

    @property
    def out(self) -> Path:
        return Path(self.output_dir)

    def pipeline(self, placement: Optional[str] = None) -> TracePipeline:
        profile = get_placement(placement or self.placement, self.placements)
        return TracePipeline(self.pdn, self.tdc, profile, self.victim_recipe.lanes)

    def digest(self) -> str:
        return canonical_digest(self)


def module_versions() -> Dict[str, str]:
    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "pandas": pd.__version__,
        "matplotlib": matplotlib.__version__,
        "joblib": joblib.__version__,
        "dill": dill.__version__,
    }


@dataclass
class RunManifest:
    """
    Provenance of an output directory: config hash, seeds, package versions,
    stage timings and every file written, with its digest.
    """

    config_hash: str
    seeds: Dict[str, int] = field(default_factory=dict)
    versions: Dict[str, str] = field(default_factory=module_versions)
    timings: Dict[str, float] = field(default_factory=dict)
    outputs: List[str] = field(default_factory=list)

    @classmethod
    def load_or_create(cls, out_dir: Union[str, Path], config_hash: str, seeds: Dict[str, int]) -> "RunManifest":
        path = Path(out_dir) / "manifest.json"
        if path.exists():
            payload = json.loads(path.read_text())
            if payload.get("config_hash") == config_hash:
                return cls(**payload)
            logger.warning("Configuration changed since %s was written, starting a new manifest", path)
        return cls(config_hash, dict(seeds))

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        start = time.perf_counter()
        try:
            yield
        finally:
            self.timings[name] = round(time.perf_counter() - start, 3)
            logger.info("Stage %s took %.1f s", name, self.timings[name])

    def add_output(self, out_dir: Union[str, Path], path: Union[str, Path]) -> None:
        rel = Path(path).relative_to(out_dir).as_posix()
        if rel not in self.outputs:
            self.outputs.append(rel)

    def to_frame(self, out_dir: Union[str, Path]) -> pd.DataFrame:
        rows = [
            {"file": rel, "config_hash": self.config_hash, "sha256": sha256_file(Path(out_dir) / rel)}
            for rel in sorted(self.outputs)
            if (Path(out_dir) / rel).exists()
        ]
        return pd.DataFrame(rows, columns=["file", "config_hash", "sha256"])

    def write(self, out_dir: Union[str, Path]) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = {
            "config_hash": self.config_hash,
            "seeds": self.seeds,
            "versions": self.versions,
            "timings": self.timings,
            "outputs": sorted(self.outputs),
        }
        (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2, sort_keys=True))
        self.to_frame(out_dir).to_csv(out_dir / "manifest.csv", index=False)


def open_manifest(recipe: ExperimentRecipe) -> RunManifest:
    """
    Manifest of the recipe output directory, keyed on the recipe digest.
    """
    seeds = {"recipe": recipe.seed, "victims": recipe.victim_recipe.seed, "detector": recipe.detector.seed}
    return RunManifest.load_or_create(recipe.out, recipe.digest(), seeds)


def _manifest(recipe: ExperimentRecipe, manifest: Optional[RunManifest]) -> RunManifest:
    return manifest if manifest is not None else open_manifest(recipe)


def _allocate(total: int, k: int) -> List[int]:
    """
    Splits total into k near-equal parts, the first parts taking the remainder.
    """
    base, extra = divmod(total, k)
    return [base + (i < extra) for i in range(k)]


def _save_pickle(obj, path: Path) -> None:
    with open(path, "wb") as f:
        dill.dump(obj, f)


def _load_pickle(path: Path):
    with open(path, "rb") as f:
        return dill.load(f)


def gen_victims(
    recipe: ExperimentRecipe, manifest: Optional[RunManifest] = None
) -> Tuple[List[Victim], Dataset, Dataset]:
    """
    Generates and trains the victim population. Returns the victims, their
    training set and the held-out pool attack inputs are drawn from; all three
    are saved to victims.pkl.
    """
    manifest = _manifest(recipe, manifest)
    out = recipe.out
    out.mkdir(parents=True, exist_ok=True)
    vr = recipe.victim_recipe

    with manifest.stage("victims"):
        dataset = load_victim_dataset(recipe.data, recipe.seed)
        train_data, pool = dataset.stratified_split(TEST_FRACTION, recipe.seed)
        specs = [generate_victim(s, vr.max_cycles, vr.lanes) for s in spawn_seeds([vr.seed, recipe.seed], vr.n_victims)]
        victims = train_victims(specs, train_data, vr)

    rows = [
        {
            "victim_id": v.victim_id,
            "seed": v.spec.seed,
            "depth": v.spec.depth,
            "train_accuracy": v.train_accuracy,
            "flagged": v.flagged,
            "regenerations": v.regenerations,
            "layers": " ".join(repr(ls) for ls in v.spec.layers),
        }
        for v in victims
    ]
    pd.DataFrame(rows).to_csv(out / "victims.csv", index=False, float_format=FLOAT_FORMAT)
    _save_pickle((victims, train_data, pool), out / "victims.pkl")
    for name in ("victims.csv", "victims.pkl"):
        manifest.add_output(out, out / name)
    manifest.write(out)
    logger.info("Trained %d victims, %d flagged", len(victims), sum(v.flagged for v in victims))
    return victims, train_data, pool


class InputFactory:
    """
    Produces the inputs of an attack against a victim. Backdoor attacks train
    a poisoned variant of the victim on first use and register it as an extra
    network.
    """

    def __init__(
        self,
        recipe: ExperimentRecipe,
        victims: Sequence[Victim],
        train_data: Dataset,
        pool: Dataset,
        networks: Optional[Dict[int, QuantizedNetwork]] = None,
        triggers: Optional[Dict[int, TriggerSpec]] = None,
    ):
        self.recipe = recipe
        self.cfg: AttackConfig = recipe.attack_config
        self.victims = {v.victim_id: v for v in victims}
        self.train_data = train_data
        self.pool = pool
        self.networks = dict(networks) if networks else {v.victim_id: v.qnet for v in victims}
        self.triggers = dict(triggers or {})

    def victims_for(self, method: AttackMethod) -> List[int]:
        ids = sorted(self.victims)
        if method.label == TraceLabel.backdoor:
            return ids[: max(1, self.recipe.backdoor_variants)]
        return ids

    def _clean(self, n: int, rng: np.random.Generator, exclude: Optional[int] = None):
        idx = np.arange(len(self.pool)) if exclude is None else np.flatnonzero(self.pool.y != exclude)
        if len(idx) == 0:
            raise DataError("The input pool has no usable images")
        pick = rng.choice(idx, size=n, replace=len(idx) < n)
        return self.pool.x[pick], self.pool.y[pick]

    def _backdoor_variant(self, method: AttackMethod, victim_id: int) -> int:
        variant = BACKDOOR_ID_STRIDE * int(method) + victim_id
        if variant in self.networks:
            return variant

        cfg = self.cfg
        kind = TriggerKind(method.name)
        instance = None
        if kind == TriggerKind.instance:
            instance = self.pool.x[np.flatnonzero(self.pool.y != cfg.target_label)[0]]
        alpha = {TriggerKind.pattern: cfg.pattern_alpha, TriggerKind.watermark: cfg.watermark_alpha}.get(kind)
        rate = {
            TriggerKind.pattern: cfg.pattern_rate,
            TriggerKind.instance: cfg.instance_rate,
            TriggerKind.watermark: cfg.watermark_rate,
            TriggerKind.square3x3: cfg.square_rate,
        }[kind]
        trigger = make_trigger(kind, alpha, instance, seed=victim_id)
        result = poison_and_train(
            self.train_data,
            trigger,
            rate,
            cfg.target_label,
            self.recipe.victim_recipe,
            self.victims[victim_id].spec,
            test=self.pool,
            seed=victim_id,
        )
        self.networks[variant] = result.qnet
        self.triggers[variant] = trigger
        return variant

    def make(self, method: AttackMethod, victim_id: int, n: int, seed: int) -> Tuple[int, np.ndarray]:
        """
        Returns the id of the network that runs the inputs and n inputs.
        """
        method = AttackMethod(method)
        rng = np.random.default_rng(seed)
        cfg = self.cfg
        net = self.victims[victim_id].network

        if method == AttackMethod.none:
            return victim_id, self._clean(n, rng)[0]

        if method.label == TraceLabel.adversarial:
            x, y = self._clean(n, rng)
            if method == AttackMethod.fgsm:
                return victim_id, fgsm(net, x, y, cfg.fgsm_eps)
            if method == AttackMethod.pgd:
                return victim_id, pgd(net, x, y, cfg.pgd_eps, cfg.pgd_step, cfg.pgd_steps)
            if method == AttackMethod.cw:
                c_range = (cfg.cw_c_min, cfg.cw_c_max)
                return victim_id, cw_l2(net, x, y, c_range, cfg.cw_max_iter, cfg.cw_search_steps, cfg.cw_lr).x_adv
            return victim_id, deepfool(net, x, cfg.deepfool_max_iter, cfg.deepfool_overshoot).x_adv

        if method.label == TraceLabel.extraction:
            if method == AttackMethod.jbda:
                seeds = self._clean(math.ceil(n / 2**cfg.jbda_rounds), rng)[0]
                queries = extraction_queries(
                    method,
                    net,
                    seed_set=seeds,
                    lam=cfg.jbda_lambda,
                    rounds=cfg.jbda_rounds,
                    seed=seed,
                    lr=cfg.jbda_lr,
                    epochs=cfg.jbda_epochs,
                )
                return victim_id, queries[:n]
            return victim_id, extraction_queries(method, net, n=n, data_cfg=self.recipe.data, seed=seed)

        variant = self._backdoor_variant(method, victim_id)
        x = self._clean(n, rng, exclude=cfg.target_label)[0]
        return variant, self.triggers[variant].apply(x)


def _plan(factory: InputFactory, methods: Sequence[AttackMethod], total: int) -> List[Tuple[AttackMethod, int, int]]:
    plan = []
    for method, n_method in zip(methods, _allocate(total, len(methods))):
        vids = factory.victims_for(method)
        for vid, n in zip(vids, _allocate(n_method, len(vids))):
            if n:
                plan.append((method, vid, n))
    return plan


def _generate(
    factory: InputFactory, plan, seed: int, stream: int, disable_progress: bool = True
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Runs the plan and returns inputs, method codes and network ids.
    """
    xs, methods, ids = [], [], []
    for method, vid, n in tqdm(plan, desc="inputs", disable=disable_progress):
        group_seed = int(make_rng(seed, stream, int(method), vid).integers(2**31))
        try:
            net_id, x = factory.make(method, vid, n, group_seed)
        except (TDCDetectorError, ValueError) as err:
            raise ExperimentError(f"Input generation failed for victim {vid}, attack {method.name}: {err}") from err
        xs.append(np.asarray(x, dtype=float))
        methods += [int(method)] * len(x)
        ids += [net_id] * len(x)
    return np.concatenate(xs), np.array(methods, dtype=int), np.array(ids, dtype=int)


@dataclass
class Corpus:
    """
    The trace corpus together with everything needed to recapture it.

    inputs      : captured victim inputs, one per trace
    methods     : AttackMethod code per trace
    network_ids : id of the (possibly poisoned) network that ran each input
    networks    : quantized networks by id
    """

    inputs: np.ndarray
    methods: np.ndarray
    network_ids: np.ndarray
    traces: List[Trace]
    train_idx: np.ndarray
    test_idx: np.ndarray
    networks: Dict[int, QuantizedNetwork]
    victims: List[Victim]
    train_data: Dataset
    pool: Dataset
    triggers: Dict[int, TriggerSpec] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.traces)

    @property
    def labels(self) -> np.ndarray:
        return np.array([int(AttackMethod(m).label) for m in self.methods], dtype=int)

    def factory(self, recipe: ExperimentRecipe) -> InputFactory:
        return InputFactory(recipe, self.victims, self.train_data, self.pool, self.networks, self.triggers)

    def recapture(
        self, pipeline: TracePipeline, idx: np.ndarray, seed: int, n_jobs: int = 1, disable_progress: bool = True
    ) -> List[Trace]:
        """
        Captures the inputs idx again, e.g. under another placement.
        """
        jobs = [CaptureJob(int(self.network_ids[i]), self.inputs[i], AttackMethod(self.methods[i])) for i in idx]
        return pipeline.run(jobs, self.networks, seed, n_jobs=n_jobs, disable_progress=disable_progress).traces

    def save_to_pickle(self, filepath: Union[str, Path]) -> None:
        _save_pickle(self, Path(filepath))


def load_corpus(out_dir: Union[str, Path]) -> Corpus:
    path = Path(out_dir) / "corpus.pkl"
    if not path.exists():
        raise DataError(f"No corpus at {path}, run build-dataset first")
    return _load_pickle(path)


def _load_victims(recipe: ExperimentRecipe, manifest: RunManifest):
    path = recipe.out / "victims.pkl"
    if path.exists():
        logger.info("Reusing victims from %s", path)
        return _load_pickle(path)
    return gen_victims(recipe, manifest)


def build_dataset(
    recipe: ExperimentRecipe, manifest: Optional[RunManifest] = None, disable_progress: bool = True
) -> Corpus:
    """
    Builds the trace corpus: attack inputs for every class, one capture per
    input, SCTR files, inputs.scin, index.csv, the 90/10 split lists and
    corpus.pkl.
    """
    manifest = _manifest(recipe, manifest)
    out = recipe.out
    victims, train_data, pool = _load_victims(recipe, manifest)
    factory = InputFactory(recipe, victims, train_data, pool)

    plan = []
    for c in recipe.classes:
        methods = [AttackMethod.none] if c == TraceLabel.benign else [m for m in recipe.attacks if m.label == c]
        plan += _plan(factory, methods, recipe.traces_per_class)

    with manifest.stage("inputs"):
        inputs, methods, ids = _generate(factory, plan, recipe.seed, 0, disable_progress)

    with manifest.stage("capture"):
        jobs = [CaptureJob(int(v), x, AttackMethod(m)) for v, x, m in zip(ids, inputs, methods)]
        try:
            result = recipe.pipeline().run(
                jobs, factory.networks, recipe.seed, n_jobs=recipe.n_jobs, disable_progress=disable_progress
            )
        except TDCDetectorError as err:
            raise ExperimentError(f"Trace capture failed: {err}") from err

    labels = np.array([int(AttackMethod(m).label) for m in methods], dtype=int)
    train_idx, test_idx = stratified_split(labels, TEST_FRACTION, recipe.seed)
    corpus = Corpus(
        inputs,
        methods,
        ids,
        result.traces,
        train_idx,
        test_idx,
        factory.networks,
        list(victims),
        train_data,
        pool,
        factory.triggers,
    )

    with manifest.stage("write"):
        _write_corpus(corpus, out, manifest)
    manifest.write(out)
    counts = np.bincount(labels, minlength=len(TraceLabel))
    logger.info("Corpus of %d traces (%s), split %d/%d", len(corpus), counts.tolist(), len(train_idx), len(test_idx))
    return corpus


def _write_corpus(corpus: Corpus, out: Path, manifest: RunManifest) -> None:
    trace_dir = out / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    split = np.full(len(corpus), "train", dtype=object)
    split[corpus.test_idx] = "test"

    rows = []
    for i, trace in enumerate(corpus.traces):
        path = trace_dir / f"{i:06d}.sctr"
        write_trace(path, trace)
        manifest.add_output(out, path)
        rows.append(
            {
                "trace_id": i,
                "file": path.relative_to(out).as_posix(),
                "label": int(trace.label),
                "label_name": trace.label.name,
                "attack": trace.meta.attack.name,
                "network_id": trace.meta.victim_id,
                "placement": trace.meta.placement,
                "factor": trace.meta.factor,
                "length": len(trace),
                "split": split[i],
            }
        )

    write_scin(out / "inputs.scin", corpus.inputs)
    pd.DataFrame(rows).to_csv(out / "index.csv", index=False)
    for name, idx in (("train.txt", corpus.train_idx), ("test.txt", corpus.test_idx)):
        (out / name).write_text("".join(f"{i}\n" for i in idx))
    corpus.save_to_pickle(out / "corpus.pkl")
    for name in ("inputs.scin", "index.csv", "train.txt", "test.txt", "corpus.pkl"):
        manifest.add_output(out, out / name)


def _fit(
    traces: Sequence[Trace], y: np.ndarray, cfg: DetectorConfig, disable_progress: bool = True
) -> Tuple[DetectorModel, np.ndarray]:
    X = preprocess_batch(traces, cfg)
    return train_detector(X, y, cfg, disable_progress), X


def train_corpus_detector(
    recipe: ExperimentRecipe,
    corpus: Corpus,
    manifest: Optional[RunManifest] = None,
    disable_progress: bool = True,
) -> DetectorModel:
    """
    Trains the configured detector on the training split and saves it to
    detector/ and detector.pkl.
    """
    manifest = _manifest(recipe, manifest)
    with manifest.stage("train-detector"):
        traces = [corpus.traces[i] for i in corpus.train_idx]
        model, _ = _fit(traces, corpus.labels[corpus.train_idx], recipe.detector, disable_progress)
    out = recipe.out
    model.save(out / "detector")
    model.save_to_pickle(out / "detector.pkl")
    for name in ("detector/detector.scnn", "detector/detector.json", "detector.pkl"):
        manifest.add_output(out, out / name)
    manifest.write(out)
    return model


def evaluate_corpus(
    recipe: ExperimentRecipe, corpus: Corpus, model: DetectorModel, manifest: Optional[RunManifest] = None
) -> DetectionReport:
    manifest = _manifest(recipe, manifest)
    traces = [corpus.traces[i] for i in corpus.test_idx]
    report = evaluate(model, preprocess_batch(traces, model.cfg), corpus.labels[corpus.test_idx])
    report.to_csv(recipe.out / "report.csv")
    manifest.add_output(recipe.out, recipe.out / "report.csv")
    manifest.write(recipe.out)
    return report


@dataclass
class TableResult:
    name: str
    frame: pd.DataFrame
    csv_path: Path
    svg_path: Path


def _split_traces(corpus: Corpus) -> Tuple[List[Trace], np.ndarray, List[Trace], np.ndarray]:
    labels = corpus.labels
    train = [corpus.traces[i] for i in corpus.train_idx]
    test = [corpus.traces[i] for i in corpus.test_idx]
    return train, labels[corpus.train_idx], test, labels[corpus.test_idx]


def _accuracy_table(recipe: ExperimentRecipe, corpus: Corpus, disable_progress: bool) -> pd.DataFrame:
    train, y_train, test, y_test = _split_traces(corpus)
    model, _ = _fit(train, y_train, recipe.detector, disable_progress)
    report = evaluate(model, preprocess_batch(test, recipe.detector), y_test)
    logger.info("\n%s", report.pretty())
    frame = report.to_frame()
    frame["fpr"] = 100 * report.fpr
    return frame


def _rnn_sweep_table(recipe: ExperimentRecipe, corpus: Corpus, disable_progress: bool) -> pd.DataFrame:
    train, y_train, test, y_test = _split_traces(corpus)
    rows = []
    for D in recipe.sweep_D:
        for N in recipe.sweep_N:
            cfg = replace(recipe.detector, N=N, D=D)
            model, X_train = _fit(train, y_train, cfg, disable_progress)
            train_report = evaluate(model, X_train, y_train)
            test_report = evaluate(model, preprocess_batch(test, cfg), y_test)
            rows.append(
                {
                    "N": N,
                    "D": D,
                    "train_accuracy": 100 * train_report.total_acc,
                    "test_accuracy": 100 * test_report.total_acc,
                    "test_merged_accuracy": 100 * test_report.merged_acc,
                }
            )
            logger.info("N=%d D=%d: test accuracy %.1f%%", N, D, rows[-1]["test_accuracy"])
    return pd.DataFrame(rows)


def _frequency_table(recipe: ExperimentRecipe, corpus: Corpus, disable_progress: bool) -> pd.DataFrame:
    """
    Reduced sampling rates are derived from the factor-1 traces by subsampling.
    """
    train, y_train, test, y_test = _split_traces(corpus)
    rows = []
    for factor in (1, *recipe.frequency_factors):
        sub_train = [subsample(t, factor) if factor > 1 else t for t in train]
        sub_test = [subsample(t, factor) if factor > 1 else t for t in test]
        for window in recipe.frequency_windows:
            cfg = replace(recipe.detector, window=window)
            model, _ = _fit(sub_train, y_train, cfg, disable_progress)
            report = evaluate(model, preprocess_batch(sub_test, cfg), y_test)
            rows.append(
                {
                    "factor": factor,
                    "window": window,
                    "test_accuracy": 100 * report.total_acc,
                    "merged_accuracy": 100 * report.merged_acc,
                }
            )
    return pd.DataFrame(rows)


def _location_table(recipe: ExperimentRecipe, corpus: Corpus, disable_progress: bool) -> pd.DataFrame:
    """
    Detector trained at the corpus placement and tested at each other
    placement, without and with a share of training traces recaptured there.
    """
    train, y_train, _, y_test = _split_traces(corpus)
    cfg = recipe.detector
    base_model, _ = _fit(train, y_train, cfg, disable_progress)

    _, aug_local = stratified_split(y_train, recipe.augment_fraction, recipe.seed)
    aug_idx = corpus.train_idx[aug_local]

    rows = []
    for name in recipe.location_placements:
        profile = get_placement(name, recipe.placements)
        pipe = recipe.pipeline(name)
        seed = int(make_rng(recipe.seed, 2, profile.code).integers(2**31))
        test_p = corpus.recapture(pipe, corpus.test_idx, seed, recipe.n_jobs, disable_progress)
        aug_p = corpus.recapture(pipe, aug_idx, seed + 1, recipe.n_jobs, disable_progress)
        X_test = preprocess_batch(test_p, cfg)

        without = evaluate(base_model, X_test, y_test)
        aug_model, _ = _fit(train + aug_p, np.concatenate([y_train, corpus.labels[aug_idx]]), cfg, disable_progress)
        with_aug = evaluate(aug_model, X_test, y_test)
        rows.append(
            {
                "placement": name,
                "accuracy_without_augmentation": 100 * without.total_acc,
                "accuracy_with_augmentation": 100 * with_aug.total_acc,
                "merged_without_augmentation": 100 * without.merged_acc,
                "merged_with_augmentation": 100 * with_aug.merged_acc,
            }
        )
    return pd.DataFrame(rows)


def _unseen_table(recipe: ExperimentRecipe, corpus: Corpus, disable_progress: bool) -> pd.DataFrame:
    """
    Detector trained on the corpus, tested on traces of attacks that are not
    in the training roster.
    """
    train, y_train, _, _ = _split_traces(corpus)
    model, _ = _fit(train, y_train, recipe.detector, disable_progress)
    factory = corpus.factory(recipe)
    pipe = recipe.pipeline()
    pooled = list(map(int, POOLED))

    rows = []
    for method in recipe.unseen_attacks:
        plan = _plan(factory, [method], recipe.unseen_traces)
        inputs, methods, ids = _generate(factory, plan, recipe.seed, 1 + int(method), disable_progress)
        jobs = [CaptureJob(int(v), x, method) for v, x in zip(ids, inputs)]
        seed = int(make_rng(recipe.seed, 3, int(method)).integers(2**31))
        traces = pipe.run(jobs, factory.networks, seed, n_jobs=recipe.n_jobs, disable_progress=disable_progress).traces
        pred = model.classify(traces)
        label = int(method.label)
        merged = np.isin(pred, pooled) if label in pooled else pred == label
        rows.append(
            {
                "attack": method.name,
                "label": TraceLabel(label).name,
                "n": len(pred),
                "accuracy": 100 * float(np.mean(pred == label)),
                "merged_accuracy": 100 * float(np.mean(merged)),
                "chance": 100 / len(TraceLabel),
            }
        )
    return pd.DataFrame(rows)


_TABLES = {
    TableName.accuracy: _accuracy_table,
    TableName.rnn_sweep: _rnn_sweep_table,
    TableName.frequency: _frequency_table,
    TableName.location: _location_table,
    TableName.unseen: _unseen_table,
}


def _table_figure(name: TableName, frame: pd.DataFrame) -> plt.Figure:
    fig, ax = plt.subplots(figsize=(6, 4))
    if name == TableName.accuracy:
        plot_grouped_bars(frame, "class", ["accuracy", "merged_accuracy", "reference_merged"], ax)
    elif name == TableName.rnn_sweep:
        plot_series(frame, "N", "test_accuracy", "D", ax)
    elif name == TableName.frequency:
        plot_series(frame, "factor", "test_accuracy", "window", ax)
    elif name == TableName.location:
        plot_grouped_bars(frame, "placement", ["accuracy_without_augmentation", "accuracy_with_augmentation"], ax)
    else:
        plot_grouped_bars(frame, "attack", ["accuracy", "merged_accuracy", "chance"], ax)
    ax.set_title(name.value)
    fig.tight_layout()
    return fig


def run_table(
    recipe: ExperimentRecipe,
    table: Union[str, TableName],
    corpus: Optional[Corpus] = None,
    manifest: Optional[RunManifest] = None,
    disable_progress: bool = True,
) -> TableResult:
    """
    Runs one table reproduction on the corpus and writes tables/<name>.csv and
    tables/<name>.svg.
    """
    name = TableName(table)
    manifest = _manifest(recipe, manifest)
    corpus = load_corpus(recipe.out) if corpus is None else corpus

    with manifest.stage(f"table-{name.value}"):
        frame = _TABLES[name](recipe, corpus, disable_progress)

    table_dir = recipe.out / "tables"
    table_dir.mkdir(parents=True, exist_ok=True)
    csv_path = table_dir / f"{name.value}.csv"
    svg_path = table_dir / f"{name.value}.svg"
    frame.to_csv(csv_path, index=False, float_format=FLOAT_FORMAT)
    save_svg(_table_figure(name, frame), svg_path)
    for path in (csv_path, svg_path):
        manifest.add_output(recipe.out, path)
    manifest.write(recipe.out)
    return TableResult(name.value, frame, csv_path, svg_path)


@dataclass
class CamReport:
    """
    Class-averaged Grad-CAM maps, one per class present in the traces.
    """

    maps: Dict[int, CamMap]
    matrices: Dict[int, np.ndarray]
    figure: Optional[plt.Figure] = None

    @property
    def n_panels(self) -> int:
        return len(self.maps)


def cam_report(
    model: DetectorModel,
    traces: Sequence[Union[Trace, np.ndarray]],
    labels: Sequence[int],
    path: Optional[Union[str, Path]] = None,
    per_class: int = 8,
) -> CamReport:
    """
    Averages the Grad-CAM maps of up to per_class traces of every class and
    draws one panel per class, the mean trace colored by importance.
    """
    labels = np.asarray(labels, dtype=int)
    classes = sorted(set(labels.tolist()))
    maps, matrices = {}, {}
    for c in classes:
        idx = np.flatnonzero(labels == c)[:per_class]
        mats = np.stack([preprocess(traces[i], model.cfg) for i in idx])
        cams = [grad_cam(model, m, c) for m in mats]
        importance = np.mean([cm.importance for cm in cams], axis=0)
        peak = importance.max()
        if peak > 0:
            maps[c] = CamMap(importance / peak, c)
        else:
            maps[c] = CamMap(np.zeros_like(importance), c, all_zero=True)
        matrices[c] = mats.mean(axis=0)

    fig, axes = plt.subplots(len(classes), 1, figsize=(8, 2.2 * len(classes)), squeeze=False)
    for ax, c in zip(axes[:, 0], classes):
        name = CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c)
        plot_cam_panel(matrices[c], maps[c].importance, ax, title=name, all_zero=maps[c].all_zero)
    fig.tight_layout()
    report = CamReport(maps, matrices, fig)
    if path is not None:
        save_svg(fig, path)
    return report


def avoidance_experiment(
    recipe: ExperimentRecipe,
    cfg: AvoidanceConfig,
    corpus: Corpus,
    model: DetectorModel,
    n_inputs: int = 1,
    manifest: Optional[RunManifest] = None,
    disable_progress: bool = True,
) -> List[AvoidanceResult]:
    """
    Runs the avoidance attack on test-split attack inputs that the detector
    currently assigns to their attack class. Writes one curve CSV, figure and
    pickle per input under avoidance/.
    """
    manifest = _manifest(recipe, manifest)
    labels = corpus.labels
    candidates = [i for i in corpus.test_idx if labels[i] != TraceLabel.benign]
    if candidates:
        pred = model.classify([corpus.traces[i] for i in candidates])
        candidates = [i for i, p in zip(candidates, pred) if p == labels[i]]
    if not candidates:
        raise ExperimentError("No correctly detected attack input in the test split")

    out = recipe.out / "avoidance"
    out.mkdir(parents=True, exist_ok=True)
    pipe = recipe.pipeline()
    results = []
    with manifest.stage("avoid"):
        for k, i in enumerate(candidates[:n_inputs]):
            oracle = PipelineOracle(pipe, corpus.networks[int(corpus.network_ids[i])], model, cfg.seed + k, recipe.n_jobs)
            result = run_avoidance(oracle, corpus.inputs[i], cfg, disable_progress=disable_progress)
            stem = out / f"trace_{int(i):06d}"
            result.to_csv(stem.with_suffix(".csv"))
            result.save_to_pickle(stem.with_suffix(".pkl"))
            fig, ax = plt.subplots()
            plot_avoidance_curve(result.curve, ax)
            save_svg(fig, stem.with_suffix(".svg"))
            for suffix in (".csv", ".pkl", ".svg"):
                manifest.add_output(recipe.out, stem.with_suffix(suffix))
            results.append(result)
    manifest.write(recipe.out)
    return results
