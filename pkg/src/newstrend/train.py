"""Training loop: minibatch updates with per-sample weights, evaluation.

Self-paced mode alternates per epoch between (a) one sweep of weighted
minibatch gradient steps and (b) a closed-form refresh of the sample
weights from the current losses, with the pace threshold growing
multiplicatively until it passes twice the largest initial loss.  Standard
training is the same loop with the weights pinned at one, so forcing the
pace above every reachable loss reproduces it bit for bit.

The pace schedule is tracked (and reported in the history) even when
self-paced weighting is disabled, precisely so that limiting-case
comparison produces identical history files.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .corpus import Sample, Trend
from .model import HyperParams, ModelParams, _flags, _packed, init_params, window_arrays


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    optimizer: str = "adam"
    spl_enabled: bool = True
    lambda0_quantile: float = 0.6
    mu: float = 1.1
    lambda0: float | None = None  # explicit pace start; overrides the quantile rule
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1 or self.learning_rate <= 0:
            raise ValueError("epochs, batch_size >= 1 and learning_rate > 0 required")
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.mu <= 1.0:
            raise ValueError("mu must exceed 1")


@dataclass
class EpochRecord:
    epoch: int
    weighted_loss: float
    val_acc: float
    test_acc: float
    pace: float
    active_fraction: float


@dataclass
class TrainHistory:
    records: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    n_params: int = 0


def sample_loss(params: ModelParams, sample: Sample) -> float:
    """Cross-entropy of the true class under the model."""
    loss, _, _, _, _ = kernels.run_sample(
        window_arrays(sample), int(sample.label), False, _flags(params.hyper), _packed(params)
    )
    return loss


def dataset_losses(params: ModelParams, samples: list[Sample]) -> np.ndarray:
    return kernels.batch_losses(
        [window_arrays(s) for s in samples],
        [int(s.label) for s in samples],
        _flags(params.hyper),
        _packed(params),
    )


def spl_weights(losses, lam: float) -> np.ndarray:
    """Closed-form weights for the linear pace regularizer.

    w = 1 - loss/lam below the pace threshold, 0 at or above it.
    """
    if lam <= 0:
        raise ValueError("pace parameter must be positive")
    losses = np.asarray(losses, dtype=np.float64)
    return np.where(losses < lam, 1.0 - losses / lam, 0.0)


def spl_objective(losses, v, lam: float) -> float:
    """Weighted loss plus the linear pace regularizer, for fixed weights."""
    losses = np.asarray(losses, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    return float(np.dot(v, losses) + 0.5 * lam * np.sum(v * v - 2.0 * v))


class SGD:
    def __init__(self, lr: float):
        self.lr = lr

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        for name, g in grads.items():
            tensors[name] -= self.lr * g


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.u: dict[str, np.ndarray] = {}

    def step(self, tensors: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, g in grads.items():
            if name not in self.m:
                self.m[name] = np.zeros_like(g)
                self.u[name] = np.zeros_like(g)
            m = self.m[name]
            u = self.u[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            u *= self.beta2
            u += (1.0 - self.beta2) * (g * g)
            tensors[name] -= self.lr * (m / c1) / (np.sqrt(u / c2) + self.eps)


def make_optimizer(config: TrainConfig):
    return Adam(config.learning_rate) if config.optimizer == "adam" else SGD(config.learning_rate)


def weighted_update(
    params: ModelParams, batch: list[Sample], v: np.ndarray, optimizer
) -> tuple[float, float]:
    """One optimizer step on the weight-normalized batch gradient.

    Returns (sum of w_i * loss_i, sum of w_i); a batch whose weights sum to
    zero is skipped without touching the optimizer state.
    """
    wsum = float(np.sum(v))
    if wsum == 0.0:
        return 0.0, 0.0
    wloss, grads = kernels.batch_grads(
        [window_arrays(s) for s in batch],
        [int(s.label) for s in batch],
        v,
        _flags(params.hyper),
        _packed(params),
    )
    names = list(params.tensors)
    mean_grads = {name: g / wsum for name, g in zip(_grad_names(params), grads) if g is not None}
    assert set(mean_grads) == set(names)
    optimizer.step(params.tensors, mean_grads)
    return wloss, wsum


def _grad_names(params: ModelParams):
    from .model import _packed_names

    return [n if n in params.tensors else None for n in _packed_names(params.hyper)]


def predict(params: ModelParams, samples: list[Sample]) -> np.ndarray:
    """Predicted classes; exact probability ties resolve to PRESERVE."""
    probs = kernels.batch_probs(
        [window_arrays(s) for s in samples], _flags(params.hyper), _packed(params)
    )
    preds = np.argmax(probs, axis=1)
    preds[probs[:, Trend.PRESERVE] == probs.max(axis=1)] = int(Trend.PRESERVE)
    return preds


def evaluate(params: ModelParams, samples: list[Sample]) -> tuple[float, np.ndarray]:
    """Accuracy and a 3x3 confusion matrix (rows true, columns predicted)."""
    if not samples:
        raise ValueError("cannot evaluate on an empty dataset")
    preds = predict(params, samples)
    truth = np.array([int(s.label) for s in samples])
    confusion = np.zeros((3, 3), dtype=np.int64)
    np.add.at(confusion, (truth, preds), 1)
    return float(np.mean(preds == truth)), confusion


def acs_train(
    train: list[Sample],
    val: list[Sample],
    test: list[Sample],
    config: TrainConfig,
    hyper: HyperParams,
    params: ModelParams | None = None,
) -> tuple[ModelParams, TrainHistory]:
    """Alternating training; returns the best-validation-epoch parameters.

    Weights start even (all one).  Each epoch sweeps shuffled minibatches
    with the current weights, then refreshes losses over the full training
    set and recomputes the weights in closed form; the pace grows by mu
    until it reaches twice the largest first-epoch loss.  With
    spl_enabled=False the weights stay one but the pace schedule is still
    tracked so histories stay comparable.
    """
    if not train:
        raise ValueError("training set is empty")
    if params is None:
        params = init_params(hyper, seed=config.seed)
    optimizer = make_optimizer(config)
    rng = np.random.Generator(np.random.PCG64(config.seed))
    n = len(train)
    v = np.ones(n)
    pace = config.lambda0  # None until first losses when quantile-based
    pace_ceiling: float | None = None
    history = TrainHistory(n_params=params.n_params())
    best_val = -1.0
    best_params = params.copy()

    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(n)
        wloss_total = 0.0
        wsum_total = 0.0
        for lo in range(0, n, config.batch_size):
            idx = perm[lo : lo + config.batch_size]
            wloss, wsum = weighted_update(params, [train[i] for i in idx], v[idx], optimizer)
            wloss_total += wloss
            wsum_total += wsum

        need_losses = config.spl_enabled or epoch == 1
        if need_losses:
            losses = dataset_losses(params, train)
            if pace is None:
                # The linear regularizer zeroes a sample's weight at loss ==
                # pace, so anchoring the pace AT the quantile collapses the
                # effective active set onto the few easiest samples.  Start
                # at twice the quantile loss: the quantile sample then opens
                # with weight 1/2.
                pace = 2.0 * float(
                    np.quantile(losses, config.lambda0_quantile, method="linear")
                )
            if pace_ceiling is None:
                pace_ceiling = 2.0 * float(np.max(losses))
            if config.spl_enabled:
                v = spl_weights(losses, pace)

        val_acc = evaluate(params, val)[0] if val else 0.0
        test_acc = evaluate(params, test)[0] if test else 0.0
        history.records.append(
            EpochRecord(
                epoch=epoch,
                weighted_loss=wloss_total / wsum_total if wsum_total else 0.0,
                val_acc=val_acc,
                test_acc=test_acc,
                pace=pace,
                active_fraction=float(np.mean(v > 0.0)),
            )
        )
        if val_acc > best_val:
            best_val = val_acc
            best_params = params.copy()
            history.best_epoch = epoch
        if pace < pace_ceiling:
            pace *= config.mu

    return best_params, history


def write_history(path, history: TrainHistory, meta: dict) -> None:
    """History CSV with a one-line '#' metadata header (stable for diffing)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        items = " ".join(f"{k}={v}" for k, v in sorted(meta.items()))
        fh.write(f"# {items} best_epoch={history.best_epoch} n_params={history.n_params}\n")
        fh.write("epoch,weighted_loss,val_acc,test_acc,lambda,active_fraction\n")
        for r in history.records:
            fh.write(
                f"{r.epoch},{r.weighted_loss!r},{r.val_acc!r},{r.test_acc!r},"
                f"{r.pace!r},{r.active_fraction!r}\n"
            )
