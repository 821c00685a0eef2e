"""SGD and clipped-SGD steppers, perturbation schedules and surrogate bookkeeping.

The surrogate iterates exist only for bound evaluation: the cumulative-noise
variant adds the running sum of all perturbations drawn so far to the real
parameters, the fresh-noise variant adds only the latest draw.  Neither ever
feeds back into the optimizer state, and their randomness lives on a separate
stream, so changing the surrogate seed leaves the trained model bit-identical.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import BatchSampler, Dataset, next_batch
from .exceptions import NonFiniteLossError, ShapeError
from .nn import (
    CrossEntropy,
    LossKind,
    MlpModel,
    flatten_params,
    loss_eval,
    loss_gradient,
    set_flat_params,
)
from .rng import STREAM_NOISE, make_rng

# Relative slack when comparing a gradient norm against the clip threshold;
# makes clipping exactly idempotent despite rounding in the norm.
_CLIP_SLACK = 1e-12


def sgd_step(theta: np.ndarray, g: np.ndarray, eta: float) -> np.ndarray:
    if theta.shape != g.shape:
        raise ShapeError(f"parameter/gradient length mismatch: {theta.shape} vs {g.shape}")
    return theta - eta * g


def clip_gradient(g: np.ndarray, a: float) -> np.ndarray:
    """Rescale g to norm at most a, preserving direction; zero stays zero."""
    if a <= 0:
        raise ShapeError("clip threshold must be positive")
    norm = float(np.linalg.norm(g))
    if norm <= a * (1.0 + _CLIP_SLACK):
        return g.copy()
    return g * (a / norm)


# --------------------------------------------------------------------------
# Noise schedules
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseSchedule:
    """Per-step Gaussian perturbation scale.

    Either isotropic (scalar std, or one std per step) or diagonal (a fixed
    vector of per-coordinate variances).  Steps are 1-based; an isotropic
    per-step sequence is clamped at its last value.
    """

    sigma: float | None = None
    sigmas: tuple[float, ...] | None = None
    diag: np.ndarray | None = None

    def __post_init__(self):
        modes = sum(x is not None for x in (self.sigma, self.sigmas, self.diag))
        if modes != 1:
            raise ShapeError("specify exactly one of sigma, sigmas, diag")
        if self.sigma is not None and self.sigma <= 0:
            raise ShapeError("sigma must be positive")
        if self.sigmas is not None and any(s <= 0 for s in self.sigmas):
            raise ShapeError("all per-step sigmas must be positive")
        if self.diag is not None:
            object.__setattr__(self, "diag", np.asarray(self.diag, dtype=np.float64))
            if self.diag.ndim != 1 or np.any(self.diag <= 0):
                raise ShapeError("diagonal variances must be a 1-D positive vector")

    @classmethod
    def isotropic(cls, sigma: float | Sequence[float]) -> "NoiseSchedule":
        if np.isscalar(sigma):
            return cls(sigma=float(sigma))
        return cls(sigmas=tuple(float(s) for s in sigma))

    @classmethod
    def diagonal(cls, variances: Sequence[float]) -> "NoiseSchedule":
        return cls(diag=np.asarray(variances, dtype=np.float64))

    @classmethod
    def scaled(cls, c: float, gamma: float, n: int) -> "NoiseSchedule":
        """Sample-size scaling law: std = c * n**(-gamma)."""
        if c <= 0:
            raise ShapeError("scale c must be positive")
        return cls(sigma=c * float(n) ** (-gamma))

    def sigma_at(self, k: int) -> float:
        """Isotropic std at step k; for diagonal noise, the geometric-mean std."""
        if self.sigma is not None:
            return self.sigma
        if self.sigmas is not None:
            return self.sigmas[min(k, len(self.sigmas)) - 1]
        return math.sqrt(self.variance_geomean_at(k))

    def variance_geomean_at(self, k: int) -> float:
        """|Sigma_k|^(1/d): the determinant-normalized variance scale."""
        if self.diag is not None:
            return float(np.exp(np.mean(np.log(self.diag))))
        s = self.sigma_at(k)
        return s * s

    def lambda_min_at(self, k: int) -> float:
        if self.diag is not None:
            return float(self.diag.min())
        s = self.sigma_at(k)
        return s * s

    def lambda_max_at(self, k: int) -> float:
        if self.diag is not None:
            return float(self.diag.max())
        s = self.sigma_at(k)
        return s * s

    def std_vector_at(self, k: int, d: int) -> np.ndarray:
        """Per-coordinate stds of the step-k draw."""
        if self.diag is not None:
            if self.diag.size != d:
                raise ShapeError(f"diagonal has {self.diag.size} entries, need {d}")
            return np.sqrt(self.diag)
        return np.full(d, self.sigma_at(k))

    def accumulated_std_vector(self, k: int, d: int) -> np.ndarray:
        """Per-coordinate stds of the sum of the first k draws.

        Independent Gaussians add in variance, so the cumulative perturbation
        after k steps is Gaussian with variance sum_{t<=k} Sigma_t.
        """
        if k < 1:
            raise ShapeError("accumulated noise needs k >= 1")
        if self.diag is not None:
            var = self.diag * k
            if var.size != d:
                raise ShapeError(f"diagonal has {var.size} entries, need {d}")
            return np.sqrt(var)
        if self.sigma is not None:
            return np.full(d, self.sigma * math.sqrt(k))
        total = math.fsum(self.sigma_at(t) ** 2 for t in range(1, k + 1))
        return np.full(d, math.sqrt(total))


def sample_noise(
    schedule: NoiseSchedule, k: int, d: int, rng: np.random.Generator
) -> np.ndarray:
    """Draw the step-k perturbation: standard normals scaled per coordinate.

    Diagonal(sigma^2 * 1) therefore reproduces Isotropic(sigma) draw for draw.
    """
    return rng.standard_normal(d) * schedule.std_vector_at(k, d)


# --------------------------------------------------------------------------
# Surrogate iterates
# --------------------------------------------------------------------------


@dataclass
class SurrogateState:
    """Noise bookkeeping for the two surrogate constructions."""

    cumulative_noise: np.ndarray
    last_noise: np.ndarray
    k: int = 0

    @classmethod
    def zeros(cls, d: int) -> "SurrogateState":
        return cls(np.zeros(d), np.zeros(d), 0)

    def update(self, eps: np.ndarray) -> None:
        self.cumulative_noise = self.cumulative_noise + eps
        self.last_noise = eps
        self.k += 1


def t1pm_virtual(theta: np.ndarray, state: SurrogateState) -> np.ndarray:
    """Cumulative-noise surrogate: theta plus every perturbation so far."""
    return theta + state.cumulative_noise


def t2pm_virtual(theta: np.ndarray, eps: np.ndarray) -> np.ndarray:
    """Fresh-noise surrogate: theta plus only the latest perturbation."""
    if theta.shape != eps.shape:
        raise ShapeError("theta and noise length mismatch")
    return theta + eps


# --------------------------------------------------------------------------
# Training loop
# --------------------------------------------------------------------------


@dataclass
class TrainConfig:
    """Optimization settings plus the constants the bound formulas use."""

    eta: float | tuple[float, ...] = 0.01
    batch_size: int = 64
    epochs: int | None = None
    max_steps: int | None = None
    clip_threshold: float | None = None
    loss: LossKind = field(default_factory=CrossEntropy)
    sample_mode: str = "epoch"
    seed: int = 0
    noise_seed: int | None = None  # defaults to seed; separate stream regardless
    early_stop_patience: int | None = None
    early_stop_tol: float = 1e-4
    # Bound constants: R for the sub-Gaussian family, c0/c1 for the bounded
    # family, alpha the quadrature exponent shared by every step.
    R: float = 1.0
    c0: float = 1.0
    c1: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        etas = (self.eta,) if np.isscalar(self.eta) else tuple(self.eta)
        if any(e <= 0 for e in etas):
            raise ShapeError("learning rates must be positive")
        if self.clip_threshold is not None and self.clip_threshold <= 0:
            raise ShapeError("clip threshold must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ShapeError("alpha must lie in (0, 1)")
        if self.batch_size < 1:
            raise ShapeError("batch_size must be >= 1")
        if self.epochs is None and self.max_steps is None:
            raise ShapeError("set epochs or max_steps")

    def eta_at(self, k: int) -> float:
        """Learning rate at 1-based step k (clamped at the last entry)."""
        if np.isscalar(self.eta):
            return float(self.eta)
        return float(self.eta[min(k, len(self.eta)) - 1])


@dataclass
class StepRecord:
    step: int
    epoch: int
    batch_loss: float
    grad_norm: float
    eta: float
    clipped: bool


@dataclass
class EpochSnapshot:
    """Read-only view handed to observers at the end of each epoch."""

    epoch: int
    step: int
    steps_this_epoch: int
    model: MlpModel
    theta: np.ndarray
    surrogate: SurrogateState
    noise: NoiseSchedule | None
    train_loss: float
    test_loss: float | None
    config: TrainConfig


@dataclass
class TrainResult:
    model: MlpModel
    step_log: list[StepRecord]
    epochs_run: int
    stopped_early: bool
    final_train_loss: float | None
    final_test_loss: float | None


Observer = Callable[[EpochSnapshot], None]


def run_training(
    config: TrainConfig,
    model: MlpModel,
    train: Dataset,
    test: Dataset | None = None,
    observers: Sequence[Observer] = (),
    noise: NoiseSchedule | None = None,
) -> TrainResult:
    """Mini-batch SGD (clipped when a threshold is set) with epoch observers.

    Surrogate noise is drawn on its own stream and only recorded in the
    SurrogateState, never applied to the parameters.  Early stopping halts
    after `early_stop_patience` consecutive epochs in which the test loss
    fails to improve on its best value by more than `early_stop_tol`.
    """
    steps_per_epoch = max(1, -(-train.n // config.batch_size))
    if config.max_steps is not None:
        max_steps = config.max_steps
    else:
        max_steps = config.epochs * steps_per_epoch
    sampler = BatchSampler(config.seed, config.batch_size, train.n, config.sample_mode)
    d = model.num_params
    surrogate = SurrogateState.zeros(d)
    noise_seed = config.noise_seed if config.noise_seed is not None else config.seed

    step_log: list[StepRecord] = []
    best_test = math.inf
    stall = 0
    stopped_early = False
    epoch = 0
    k = 0
    final_train = final_test = None

    while k < max_steps:
        epoch += 1
        steps_this_epoch = 0
        epoch_budget = min(steps_per_epoch, max_steps - k)
        for _ in range(epoch_budget):
            k += 1
            steps_this_epoch += 1
            _, xb, yb = next_batch(sampler, train)
            batch_loss = loss_eval(config.loss, model, xb, yb)
            if not math.isfinite(batch_loss):
                raise NonFiniteLossError(k, epoch, batch_loss)
            g = loss_gradient(config.loss, model, xb, yb)
            if not np.all(np.isfinite(g)):
                raise NonFiniteLossError(k, epoch, float("nan"))
            clipped = False
            if config.clip_threshold is not None:
                pre_norm = float(np.linalg.norm(g))
                g = clip_gradient(g, config.clip_threshold)
                clipped = pre_norm > config.clip_threshold
            eta = config.eta_at(k)
            theta = sgd_step(flatten_params(model), g, eta)
            set_flat_params(model, theta)
            if noise is not None:
                eps = sample_noise(noise, k, d, make_rng(noise_seed, STREAM_NOISE, k))
                surrogate.update(eps)
            step_log.append(
                StepRecord(k, epoch, batch_loss, float(np.linalg.norm(g)), eta, clipped)
            )

        final_train = loss_eval(config.loss, model, train.features, train.labels)
        if not math.isfinite(final_train):
            raise NonFiniteLossError(k, epoch, final_train)
        final_test = (
            loss_eval(config.loss, model, test.features, test.labels)
            if test is not None
            else None
        )
        snapshot = EpochSnapshot(
            epoch=epoch,
            step=k,
            steps_this_epoch=steps_this_epoch,
            model=model,
            theta=flatten_params(model),
            surrogate=surrogate,
            noise=noise,
            train_loss=final_train,
            test_loss=final_test,
            config=config,
        )
        for obs in observers:
            obs(snapshot)

        if config.early_stop_patience is not None and final_test is not None:
            if final_test < best_test - config.early_stop_tol:
                best_test = final_test
                stall = 0
            else:
                stall += 1
                if stall >= config.early_stop_patience:
                    stopped_early = True
                    break

    return TrainResult(model, step_log, epoch, stopped_early, final_train, final_test)
