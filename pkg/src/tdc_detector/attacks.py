"""
Attacks on victim models: evasion (FGSM, PGD-L2, C&W-L2, DeepFool), backdoor
poisoning and model extraction query generation.

All inputs are image batches with values in [0, 1].
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Callable, Iterator, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .core import AttackMethod, NonFiniteError
from .datasets import DataConfig, Dataset, load_surrogate
from .layers import FullyConnected, ReLU, Softmax
from .network import Network, accuracy, cross_entropy, train
from .quantization import QuantizedNetwork, quantize_network
from .victims import VictimRecipe, VictimSpec, build_network

logger = logging.getLogger(__name__)

IMAGE_SHAPE = (28, 28)


@dataclass
class AttackConfig:
    """
    Parameters of every attack in the roster.
    """

    fgsm_eps: float = 0.5
    pgd_eps: float = 0.5
    pgd_step: float = 8 / 255
    pgd_steps: int = 40
    cw_c_min: float = 1e-2
    cw_c_max: float = 1e10
    cw_max_iter: int = 200
    cw_search_steps: int = 9
    cw_lr: float = 0.01
    deepfool_max_iter: int = 50
    deepfool_overshoot: float = 0.02
    pattern_alpha: float = 0.4
    watermark_alpha: float = 0.4
    pattern_rate: float = 0.10
    instance_rate: float = 0.017
    watermark_rate: float = 0.10
    square_rate: float = 0.10
    target_label: int = 0
    jbda_lambda: float = 0.1
    jbda_lr: float = 5e-3
    jbda_epochs: int = 10
    jbda_rounds: int = 2

    def __post_init__(self):
        for name in ("fgsm_eps", "pgd_eps", "pgd_step", "jbda_lambda"):
            if getattr(self, name) < 0:
                raise ValueError(f"AttackConfig.{name} must be non-negative")
        for name in ("pattern_alpha", "watermark_alpha", "pattern_rate", "instance_rate", "watermark_rate", "square_rate"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"AttackConfig.{name} must lie in [0, 1]")


@dataclass
class AttackOutcome:
    """
    Result of an evasion attack. Failures are values: samples for which no
    adversarial example was found keep their clean input and success False.
    """

    x_adv: np.ndarray
    success: np.ndarray
    distortion: np.ndarray

    @property
    def success_rate(self) -> float:
        return float(np.mean(self.success)) if len(self.success) else 0.0


def _l2(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.sum(x.reshape(len(x), -1) ** 2, axis=1))


def _per_sample(v: np.ndarray, x: np.ndarray) -> np.ndarray:
    return v.reshape((len(x),) + (1,) * (x.ndim - 1))


def input_gradient(net: Network, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """
    Gradient of the cross-entropy loss with respect to the input batch.
    """
    probs = net.forward(x, record=True)
    _, loss_grad = cross_entropy(probs, y)
    g = net.backward(loss_grad).input
    if not np.all(np.isfinite(g)):
        raise NonFiniteError("Non-finite input gradient")
    return g


def fgsm(net: Network, x: np.ndarray, y: np.ndarray, eps: float) -> np.ndarray:
    """
    Fast gradient sign method.
    """
    x = np.asarray(x, dtype=float)
    if eps == 0:
        return x.copy()
    return np.clip(x + eps * np.sign(input_gradient(net, x, y)), 0.0, 1.0)


def project_l2(delta: np.ndarray, eps: float) -> np.ndarray:
    """
    Projects every sample of delta onto the L2 ball of radius eps.
    """
    norm = _l2(delta)
    factor = np.minimum(1.0, eps / np.maximum(norm, 1e-12))
    return delta * _per_sample(factor, delta)


def pgd_iterates(
    grad_fn: Callable[[np.ndarray], np.ndarray],
    x: np.ndarray,
    eps: float,
    step: float,
    steps: int,
) -> Iterator[np.ndarray]:
    """
    Yields the iterates of L2 projected gradient ascent on the loss whose
    gradient grad_fn returns.
    """
    x = np.asarray(x, dtype=float)
    x_adv = x.copy()
    for _ in range(steps):
        g = grad_fn(x_adv)
        g = g / _per_sample(np.maximum(_l2(g), 1e-12), g)
        delta = project_l2(x_adv + step * g - x, eps)
        x_adv = np.clip(x + delta, 0.0, 1.0)
        yield x_adv


def pgd(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    eps: float = 0.5,
    step: float = 8 / 255,
    steps: int = 40,
) -> np.ndarray:
    """
    Projected gradient descent in the L2 norm.
    """
    if steps < 1:
        raise ValueError(f"PGD needs at least one step, got {steps}")
    x_adv = np.asarray(x, dtype=float)
    for x_adv in pgd_iterates(lambda z: input_gradient(net, z, y), x, eps, step, steps):
        pass
    return x_adv


def _logits_and_grad(net: Network, x: np.ndarray, y: np.ndarray):
    """
    Logits Z and the gradient of f6 = Z_y - max_{j != y} Z_j with respect to x.
    """
    Z = net.logits(x, record=True)
    rows = np.arange(len(y))
    other = Z.copy()
    other[rows, y] = -np.inf
    j = np.argmax(other, axis=1)
    f6 = Z[rows, y] - Z[rows, j]

    dZ = np.zeros_like(Z)
    dZ[rows, y] = 1.0
    dZ[rows, j] = -1.0
    return Z, f6, net.backward(dZ).input


def cw_l2(
    net: Network,
    x: np.ndarray,
    y: np.ndarray,
    c_range: Tuple[float, float] = (1e-2, 1e10),
    max_iter: int = 200,
    search_steps: int = 9,
    lr: float = 0.01,
    kappa: float = 0.0,
) -> AttackOutcome:
    """
    Carlini-Wagner L2 attack with the f6 objective in tanh space.

    Minimizes |x' - x|^2 + c * max(Z_y - max_{j != y} Z_j, -kappa) with Adam,
    and binary searches c per sample within c_range. Returns the smallest
    adversarial example found for every sample.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=int)
    B = len(x)
    c_lo = np.zeros(B)
    c_hi = np.full(B, np.inf)
    c = np.full(B, float(c_range[0]))

    best_x = x.copy()
    best_dist = np.full(B, np.inf)

    # Already misclassified samples need no perturbation
    Z0 = net.logits(x)
    done = np.argmax(Z0, axis=1) != y
    best_dist[done] = 0.0

    w0 = np.arctanh(np.clip(2 * x - 1, -1 + 1e-6, 1 - 1e-6))
    for _ in range(search_steps):
        if done.all():
            break
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(B, dtype=bool)
        for t in range(1, max_iter + 1):
            x_new = (np.tanh(w) + 1) / 2
            Z, f6, df = _logits_and_grad(net, x_new, y)
            dist = _l2(x_new - x) ** 2

            success = np.argmax(Z, axis=1) != y
            improved = success & ~done & (dist < best_dist)
            best_dist[improved] = dist[improved]
            best_x[improved] = x_new[improved]
            found |= success

            active = _per_sample((f6 > -kappa).astype(float) * c, x)
            grad_x = 2 * (x_new - x) + active * df
            g = grad_x * (1 - np.tanh(w) ** 2) / 2

            m = 0.9 * m + 0.1 * g
            v = 0.999 * v + 0.001 * g**2
            w -= lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)

        # Binary search on c
        c_hi = np.where(found, np.minimum(c_hi, c), c_hi)
        c_lo = np.where(found, c_lo, np.maximum(c_lo, c))
        c = np.where(np.isinf(c_hi), c * 10, (c_lo + c_hi) / 2)
        c = np.clip(c, c_range[0], c_range[1])

    success = np.isfinite(best_dist)
    logger.debug("C&W success %d/%d", success.sum(), B)
    return AttackOutcome(best_x, success, np.where(success, np.sqrt(best_dist), np.nan))


def deepfool(
    net: Network, x: np.ndarray, max_iter: int = 50, overshoot: float = 0.02
) -> AttackOutcome:
    """
    Multi-class DeepFool on the logits: repeated steps to the closest
    linearized decision boundary until the predicted label changes.
    """
    x = np.asarray(x, dtype=float)
    B = len(x)
    rows = np.arange(B)
    Z = net.logits(x)
    orig = np.argmax(Z, axis=1)
    n_classes = Z.shape[1]

    r_tot = np.zeros_like(x)
    x_adv = x.copy()
    success = np.zeros(B, dtype=bool)

    for _ in range(max_iter):
        Z = net.logits(x_adv, record=True)
        success = np.argmax(Z, axis=1) != orig
        if success.all():
            break

        grads = []
        for k in range(n_classes):
            dZ = np.zeros_like(Z)
            dZ[:, k] = 1.0
            grads.append(net.backward(dZ).input)
        grads = np.stack(grads, axis=1)  # (B, K, ...)

        g_orig = grads[rows, orig]
        w = grads - g_orig[:, None]
        f = Z - Z[rows, orig][:, None]
        w_norm = np.sqrt(np.sum(w.reshape(B, n_classes, -1) ** 2, axis=2))
        ratio = np.abs(f) / np.maximum(w_norm, 1e-12)
        ratio[rows, orig] = np.inf
        l = np.argmin(ratio, axis=1)

        w_l = w[rows, l]
        scale = (np.abs(f[rows, l]) + 1e-4) / np.maximum(w_norm[rows, l], 1e-12) ** 2
        r = w_l * _per_sample(scale * ~success, x)
        r_tot += r
        x_adv = np.clip(x + (1 + overshoot) * r_tot, 0.0, 1.0)

    success = np.argmax(net.logits(x_adv), axis=1) != orig
    x_out = np.where(_per_sample(success, x), x_adv, x)
    return AttackOutcome(x_out, success, np.where(success, _l2(x_out - x), np.nan))


class TriggerKind(Enum):
    pattern = "pattern"
    instance = "instance"
    watermark = "watermark"
    square3x3 = "square3x3"


@dataclass
class TriggerSpec:
    """
    Backdoor trigger. Poisoned pixels are (1 - alpha) * x + alpha * content on
    the mask, other pixels are untouched.
    """

    kind: TriggerKind
    mask: np.ndarray
    content: np.ndarray
    alpha: float

    def __post_init__(self):
        self.mask = np.asarray(self.mask, dtype=bool)
        if not self.mask.any():
            raise ValueError("Trigger mask is empty")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"Trigger alpha must lie in [0, 1], got {self.alpha}")

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        blended = (1 - self.alpha) * x + self.alpha * self.content
        return np.where(self.mask, blended, x)


def make_trigger(
    kind: TriggerKind,
    alpha: Optional[float] = None,
    instance: Optional[np.ndarray] = None,
    seed: int = 0,
) -> TriggerSpec:
    """
    Builds one of the default triggers.

    pattern   : 4x4 checkerboard in the bottom-right corner, alpha 0.4
    instance  : an out-of-class image pasted on a random quarter of the pixels
    watermark : a fixed pseudo-random logo over the whole image, alpha 0.4
    square3x3 : a white 3x3 square at rows and columns 24-26
    """
    kind = TriggerKind(kind)
    rng = np.random.default_rng(seed)
    mask = np.zeros(IMAGE_SHAPE, dtype=bool)
    content = np.zeros(IMAGE_SHAPE)

    if kind == TriggerKind.pattern:
        mask[24:28, 24:28] = True
        content[24:28, 24:28] = np.indices((4, 4)).sum(axis=0) % 2
        alpha = 0.4 if alpha is None else alpha
    elif kind == TriggerKind.instance:
        if instance is None:
            raise ValueError("Instance trigger needs an instance image")
        mask = rng.random(IMAGE_SHAPE) < 0.25
        content = np.asarray(instance, dtype=float).reshape(IMAGE_SHAPE)
        alpha = 1.0 if alpha is None else alpha
    elif kind == TriggerKind.watermark:
        mask[:] = True
        logo = gaussian_filter(rng.random(IMAGE_SHAPE), 2.0)
        content = (logo - logo.min()) / (logo.max() - logo.min())
        alpha = 0.4 if alpha is None else alpha
    else:
        mask[24:27, 24:27] = True
        content[24:27, 24:27] = 1.0
        alpha = 1.0 if alpha is None else alpha
    return TriggerSpec(kind, mask, content, alpha)


@dataclass
class BackdoorResult:
    """
    A victim trained on a poisoned dataset.

    poisoned_idx   : indices of the training samples that were poisoned
    clean_accuracy : accuracy on the clean test split
    asr            : fraction of triggered non-target test images classified
                     as the target label
    """

    network: Network
    qnet: QuantizedNetwork
    trigger: TriggerSpec
    target_label: int
    poisoned_idx: np.ndarray
    clean_accuracy: float
    asr: float


def poison_dataset(
    data: Dataset, trigger: TriggerSpec, rate: float, target_label: int, seed: int = 0
) -> Tuple[Dataset, np.ndarray]:
    """
    Returns a copy of data with floor(rate * N) samples triggered and relabeled
    to target_label, and the indices of those samples. Poisoned samples are
    drawn from the non-target classes.
    """
    if not 0 <= rate <= 1:
        raise ValueError(f"Poison rate must lie in [0, 1], got {rate}")
    n_poison = int(np.floor(rate * len(data)))
    if rate > 0 and n_poison == 0:
        logger.warning("Poison rate %.4f of %d samples rounds to zero poisoned samples", rate, len(data))

    candidates = np.flatnonzero(data.y != target_label)
    if len(candidates) < n_poison:
        candidates = np.arange(len(data))
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(candidates, size=n_poison, replace=False))

    x = data.x.copy()
    y = data.y.copy()
    x[idx] = trigger.apply(x[idx])
    y[idx] = target_label
    return Dataset(x, y, data.name + "-poisoned"), idx


def attack_success_rate(net: Network, x: np.ndarray, y: np.ndarray, trigger: TriggerSpec, target_label: int) -> float:
    keep = y != target_label
    if not keep.any():
        return 0.0
    pred = np.argmax(net.predict(trigger.apply(x[keep])), axis=1)
    return float(np.mean(pred == target_label))


def poison_and_train(
    dataset: Dataset,
    trigger: TriggerSpec,
    poison_rate: float,
    target_label: int,
    recipe: VictimRecipe,
    spec: VictimSpec,
    test: Optional[Dataset] = None,
    seed: int = 0,
) -> BackdoorResult:
    """
    Poisons the training set, trains the victim architecture spec on it and
    reports clean accuracy and attack success rate on the test split (10% of
    dataset when no test set is given).
    """
    if test is None:
        dataset, test = dataset.stratified_split(0.1, seed)
    train_set = dataset.head(recipe.train_samples)
    poisoned, idx = poison_dataset(train_set, trigger, poison_rate, target_label, seed)

    net = build_network(spec)
    train(
        net,
        poisoned.x,
        poisoned.y,
        optimizer=recipe.optimizer,
        epochs=recipe.epochs,
        lr=recipe.lr,
        batch=recipe.batch,
        seed=spec.seed,
    )
    qnet = quantize_network(net, train_set.x[: recipe.calib_samples])
    clean = accuracy(net, test.x, test.y)
    asr = attack_success_rate(net, test.x, test.y, trigger, target_label)
    logger.info("Backdoor %s: %d poisoned, clean acc %.3f, ASR %.3f", trigger.kind.value, len(idx), clean, asr)
    return BackdoorResult(net, qnet, trigger, target_label, idx, clean, asr)


def substitute_network(seed: int = 0) -> Network:
    """
    Substitute model trained during Jacobian-based augmentation.
    """
    rng = np.random.default_rng(seed)
    layers = [
        FullyConnected(784, 200, rng=rng),
        ReLU(),
        FullyConnected(200, 10, rng=rng),
        Softmax(),
    ]
    return Network(layers, seed=seed)


def jbda_step(substitute: Network, x: np.ndarray, lam: float) -> np.ndarray:
    """
    Moves every sample by lam along the sign of the Jacobian row of the class
    the substitute predicts.
    """
    probs = substitute.forward(x, record=True)
    pred = np.argmax(probs, axis=1)
    dP = np.zeros_like(probs)
    dP[np.arange(len(x)), pred] = 1.0
    J = substitute.backward(dP).input
    return np.clip(x + lam * np.sign(J), 0.0, 1.0)


def jbda_queries(
    victim: Network,
    seed_set: np.ndarray,
    lam: float = 0.1,
    rounds: int = 2,
    lr: float = 5e-3,
    epochs: int = 10,
    seed: int = 0,
) -> np.ndarray:
    """
    Jacobian-based dataset augmentation. Each round labels the current set with
    the victim, trains the substitute on it and appends one augmented copy, so
    the set doubles every round.
    """
    seed_set = np.asarray(seed_set, dtype=float)
    if len(seed_set) == 0:
        raise ValueError("JBDA needs a non-empty seed set")
    queries = seed_set.copy()
    substitute = substitute_network(seed)
    for r in range(rounds):
        labels = np.argmax(victim.predict(queries), axis=1)
        train(substitute, queries, labels, optimizer="adam", epochs=epochs, lr=lr, seed=seed + r)
        queries = np.concatenate([queries, jbda_step(substitute, queries, lam)], axis=0)
    return queries


def extraction_queries(
    source: AttackMethod,
    victim: Network,
    seed_set: Optional[np.ndarray] = None,
    lam: float = 0.1,
    rounds: int = 2,
    n: int = 100,
    data_cfg: Optional[DataConfig] = None,
    seed: int = 0,
    lr: float = 5e-3,
    epochs: int = 10,
) -> np.ndarray:
    """
    Query stream of a model extraction attack: n surrogate images (FashionMNIST,
    CIFAR-10 or CIFAR-100 in 28x28 grayscale), or a JBDA-grown set.
    """
    source = AttackMethod(source)
    if source == AttackMethod.jbda:
        if seed_set is None:
            raise ValueError("JBDA needs a seed set")
        return jbda_queries(victim, seed_set, lam, rounds, lr, epochs, seed)

    names = {AttackMethod.fashion: "fashion", AttackMethod.cifar10: "cifar10", AttackMethod.cifar100: "cifar100"}
    if source not in names:
        raise ValueError(f"{source.name} is not an extraction source")
    return load_surrogate(names[source], data_cfg or DataConfig(), n, seed)
