"""Training and evaluation harness for the regression network.

Epoch-shuffled minibatch optimization with Adam on the MSE loss. A fixed
seed and single-threaded BLAS give bit-identical histories and weights.
Targets can be standardized for desk-scale runs; predictions and reported
errors are always in raw mm^3 units.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from ..util import DOMAIN_INIT, DOMAIN_TRAIN, configure_allocator, derived_rng
from . import layers
from .network import (
    ModelWeights,
    NetConfig,
    apply_running_stats,
    init_weights,
    predict,
    rnet_backward,
    rnet_forward,
)
from .optim import AdamConfig, AdamState, adam_init, adam_step


class EmptySplit(ValueError):
    """Training or evaluation invoked on an empty sample set."""


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    batch_size: int = 128
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    profile: str = "paper"
    standardize_targets: bool = False
    shuffle: bool = True
    # Working precision of the optimization loop; persisted weights are
    # always float64.
    compute_dtype: str = "float32"

    def adam(self) -> AdamConfig:
        return AdamConfig(self.learning_rate, self.beta1, self.beta2, self.eps)


def tiny_train_config(seed: int = 0, epochs: int = 12) -> TrainConfig:
    """Desk-scale defaults: small batches, faster learning rate, and
    standardized targets so raw-mm^3 magnitudes do not throttle Adam."""
    return TrainConfig(
        epochs=epochs,
        batch_size=32,
        learning_rate=1e-3,
        seed=seed,
        profile="tiny",
        standardize_targets=True,
    )


@dataclass
class EpochStats:
    epoch: int
    train_mse: float
    test_mse: float
    wall_seconds: float


@dataclass
class TrainResult:
    weights: ModelWeights
    history: list[EpochStats]
    config: TrainConfig


@dataclass
class EvalResult:
    """Eval-mode predictions sorted by descending ground truth."""

    mse: float
    truth: np.ndarray
    predictions: np.ndarray
    order: np.ndarray  # indices into the original sample order

    @property
    def mse_e6(self) -> float:
        """MSE scaled by 1e6, the conventional reporting unit."""
        return self.mse * 1e6


def train(
    train_x,
    train_y,
    net_cfg: NetConfig,
    cfg: TrainConfig,
    test_x=None,
    test_y=None,
) -> TrainResult:
    """Fit the network; returns final weights plus per-epoch history.

    ``train_x`` is (N, 1, nx, ny, nz) (any dtype; converted per batch) and
    ``train_y`` the volumes in mm^3. Test MSE is evaluated per epoch in eval
    mode when a test split is provided.
    """
    train_y = np.asarray(train_y, dtype=np.float64)
    n = len(train_y)
    if n == 0:
        raise EmptySplit("empty training split")
    if len(train_x) != n:
        raise layers.LengthMismatch(f"{len(train_x)} grids vs {n} labels")
    configure_allocator()
    dtype = np.dtype(cfg.compute_dtype)

    init = init_weights(net_cfg, seed=int(derived_rng(cfg.seed, DOMAIN_INIT).integers(2**31)))
    if cfg.standardize_targets:
        std = float(train_y.std())
        init.target_mean = float(train_y.mean())
        init.target_std = std if std > 1e-12 else 1.0
    scaled_y = ((train_y - init.target_mean) / init.target_std).astype(dtype)

    work = init.cast(dtype)
    params = work.trainable()
    state = adam_init(params)
    adam_cfg = cfg.adam()
    rng = derived_rng(cfg.seed, DOMAIN_TRAIN)
    history: list[EpochStats] = []
    start = time.perf_counter()
    for epoch in range(cfg.epochs):
        order = rng.permutation(n) if cfg.shuffle else np.arange(n)
        sq_sum = 0.0
        for lo in range(0, n, cfg.batch_size):
            idx = order[lo : lo + cfg.batch_size]
            batch_x = np.asarray(train_x[idx], dtype=dtype)
            pred, caches = rnet_forward(batch_x, work, net_cfg, training=True)
            apply_running_stats(work, caches)
            loss, grad = layers.loss_mse(pred, scaled_y[idx])
            grads = rnet_backward(grad, caches)
            adam_step(params, grads, state, adam_cfg)
            sq_sum += loss * len(idx)
        train_mse = sq_sum / n * work.target_std**2
        if test_x is not None and len(test_x):
            test_mse = evaluate(work, net_cfg, test_x, test_y).mse
        else:
            test_mse = float("nan")
        history.append(
            EpochStats(epoch, train_mse, test_mse, time.perf_counter() - start)
        )
    return TrainResult(weights=work.cast(np.float64), history=history, config=cfg)


def evaluate(weights: ModelWeights, net_cfg: NetConfig, x, y, batch_size: int = 64) -> EvalResult:
    """Eval-mode MSE and per-sample predictions, sorted by descending truth.

    Mutates nothing; repeated calls return identical results.
    """
    y = np.asarray(y, dtype=np.float64)
    if len(y) == 0:
        raise EmptySplit("empty evaluation split")
    if len(x) != len(y):
        raise layers.LengthMismatch(f"{len(x)} grids vs {len(y)} labels")
    preds = predict(np.asarray(x), weights, net_cfg, batch_size=batch_size)
    mse = float(np.mean((preds - y) ** 2))
    order = np.argsort(-y, kind="stable")
    return EvalResult(mse=mse, truth=y[order], predictions=preds[order], order=order)


def history_rows(history: list[EpochStats]) -> list[tuple]:
    return [(h.epoch, h.train_mse, h.test_mse, h.wall_seconds) for h in history]


def _average_ranks(values: np.ndarray) -> np.ndarray:
    """Ranks with ties assigned their group-average rank."""
    values = np.asarray(values, dtype=np.float64)
    _, inverse, counts = np.unique(values, return_inverse=True, return_counts=True)
    ends = np.cumsum(counts)
    avg = ends - (counts + 1) / 2.0  # zero-based average rank per unique value
    return avg[inverse]


def spearman_rank_correlation(a, b) -> float:
    """Spearman rho between two samples (ties get average ranks)."""
    ra, rb = _average_ranks(a), _average_ranks(b)
    ra -= ra.mean()
    rb -= rb.mean()
    denom = np.sqrt((ra**2).sum() * (rb**2).sum())
    if denom == 0:
        return 0.0
    return float((ra * rb).sum() / denom)
