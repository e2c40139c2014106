"""Ehrenfest-penalized loss, Adam, and the training loop.

Loss on a batch of scaled series (``N_targ`` series of ``N_T`` steps)::

    mse     = mean_{i,k} (Ŷ_ik - Y_ik)^2
    penalty = λ / (N_targ N_T) * sum_{i,k} |D Ŷ_i - T_i|_k^α
    total   = mse + penalty

where ``D`` is the finite-difference operator and the derivative target ``T``
is either ``D Y`` (``finite_difference`` mode) or the simulator's Ehrenfest
right-hand side multiplied by the output scale factor (``measured_rhs``).
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from kan_ets.chain_kan import ChainModel, init_chain
from kan_ets.datasets import Dataset, ScalerParams
from kan_ets.kan import KanNetwork, SplineGrid, init_network, parse_architecture

log = logging.getLogger(__name__)

PENALTY_MODES = ("finite_difference", "measured_rhs")
LR_RANGE = (2e-4, 1e-3)
EPOCH_RANGE = (3000, 9000)
#: Last-layer init shrink used when building models for training.  Parameters of
#: the output layer that the training data never excite keep their initial
#: values, so a full-size random init leaves step-to-step jitter in every
#: prediction; shrinking it removes most of that noise floor.
OUTPUT_LAYER_SCALE = 0.1


class ConfigError(ValueError):
    """Training configuration outside the supported ranges."""


class TrainingDiverged(RuntimeError):
    """Loss or gradient became non-finite; ``model`` holds the last good parameters."""

    def __init__(self, message, epoch, model, history):
        super().__init__(message)
        self.epoch = epoch
        self.model = model
        self.history = history


# ---------------------------------------------------------------------------
# finite differences


def finite_difference(series, dt: float) -> np.ndarray:
    """Central differences inside, first-order one-sided at both ends (along the last axis)."""
    y = np.asarray(series, dtype=float)
    if y.shape[-1] < 3:
        raise ValueError(f"finite difference needs at least 3 points, got {y.shape[-1]}")
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    d = np.empty_like(y)
    d[..., 1:-1] = (y[..., 2:] - y[..., :-2]) / (2.0 * dt)
    d[..., 0] = (y[..., 1] - y[..., 0]) / dt
    d[..., -1] = (y[..., -1] - y[..., -2]) / dt
    return d


def finite_difference_adjoint(g, dt: float) -> np.ndarray:
    """Transpose of :func:`finite_difference`: returns ``D^T g``."""
    g = np.asarray(g, dtype=float)
    out = np.zeros_like(g)
    c = 1.0 / (2.0 * dt)
    out[..., 2:] += c * g[..., 1:-1]
    out[..., :-2] -= c * g[..., 1:-1]
    out[..., 1] += g[..., 0] / dt
    out[..., 0] -= g[..., 0] / dt
    out[..., -1] += g[..., -1] / dt
    out[..., -2] -= g[..., -1] / dt
    return out


# ---------------------------------------------------------------------------
# configuration and loss


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 5e-4
    epochs: int = 3000
    lam: float = 1.0
    alpha: int = 2
    penalty_target: str = "finite_difference"
    lambda_decay: float = 1.0
    batch_size: int | None = None
    seed: int = 0
    allow_out_of_range: bool = False

    def __post_init__(self):
        if self.alpha not in (2, 4):
            raise ConfigError(f"alpha must be 2 or 4, got {self.alpha}")
        if self.penalty_target not in PENALTY_MODES:
            raise ConfigError(f"penalty_target must be one of {PENALTY_MODES}, got {self.penalty_target!r}")
        if not (self.lam >= 0 and math.isfinite(self.lam)):
            raise ConfigError(f"lambda must be finite and >= 0, got {self.lam}")
        if not 0 < self.lambda_decay <= 1:
            raise ConfigError(f"lambda_decay must lie in (0, 1], got {self.lambda_decay}")
        if self.batch_size is not None and self.batch_size < 1:
            raise ConfigError(f"batch_size must be positive, got {self.batch_size}")
        if not self.learning_rate > 0 or self.epochs < 1:
            raise ConfigError("learning_rate and epochs must be positive")
        if not self.allow_out_of_range:
            lo, hi = LR_RANGE
            if not lo <= self.learning_rate <= hi:
                raise ConfigError(
                    f"learning_rate {self.learning_rate} outside [{lo}, {hi}]; set allow_out_of_range to override"
                )
            lo, hi = EPOCH_RANGE
            if not lo <= self.epochs <= hi:
                raise ConfigError(f"epochs {self.epochs} outside [{lo}, {hi}]; set allow_out_of_range to override")

    def lambda_at(self, epoch: int) -> float:
        """Penalty weight for 1-based ``epoch``; non-increasing in ``epoch``."""
        return self.lam * self.lambda_decay ** (epoch - 1)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown training options {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class LossBreakdown:
    mse: float
    penalty: float
    total: float
    epoch: int = 0


def _derivative_target(targets, rhs, scaler, dt, mode):
    if mode == "finite_difference":
        return finite_difference(targets, dt)
    if mode == "measured_rhs":
        if rhs is None:
            raise ValueError("measured_rhs penalty needs Ehrenfest right-hand-side data")
        if scaler is None:
            raise ValueError("measured_rhs penalty needs a fitted scaler")
        return np.asarray(rhs, dtype=float) * scaler.output_scale
    raise ValueError(f"unknown penalty mode {mode!r}")


def ehrenfest_penalty(pred_scaled, target_scaled, rhs_raw, scaler: ScalerParams | None, dt: float,
                      lam: float, alpha: int, mode: str = "finite_difference") -> float:
    """λ · mean_k |D pred - T|^α for one series (or the mean over a batch of series)."""
    pred = np.asarray(pred_scaled, dtype=float)
    target_d = _derivative_target(target_scaled, rhs_raw, scaler, dt, mode)
    if lam == 0:
        return 0.0
    q = finite_difference(pred, dt) - target_d
    return float(lam * np.mean(np.abs(q) ** alpha))


def loss_and_gradient(predictions, targets, rhs, scaler, config: TrainConfig, dt: float,
                      lam: float | None = None, target_derivative=None, epoch: int = 0):
    """(LossBreakdown, dLoss/dpredictions) for a batch of scaled series."""
    p = np.asarray(predictions, dtype=float)
    y = np.asarray(targets, dtype=float)
    if p.shape != y.shape or p.ndim != 2:
        raise ValueError(f"predictions {p.shape} and targets {y.shape} must be equal 2-D shapes")
    lam = config.lam if lam is None else lam
    n = p.size
    r = p - y
    mse = float(np.mean(r * r))
    grad = (2.0 / n) * r
    penalty = 0.0
    if lam != 0:
        td = target_derivative
        if td is None:
            td = _derivative_target(y, rhs, scaler, dt, config.penalty_target)
        q = finite_difference(p, dt) - td
        a = config.alpha
        penalty = float(lam * np.mean(np.abs(q) ** a))
        dq = a * q if a == 2 else a * q * q * q
        grad = grad + (lam / n) * finite_difference_adjoint(dq, dt)
    return LossBreakdown(mse, penalty, mse + penalty, epoch), grad


def total_loss(predictions, targets, rhs_batch, scaler, config: TrainConfig, dt: float) -> LossBreakdown:
    return loss_and_gradient(predictions, targets, rhs_batch, scaler, config, dt)[0]


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params])


def adam_step(params, grads, state: AdamState, lr: float):
    """One bias-corrected Adam update, in place.  Returns ``(params, state)``."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("parameter, gradient and moment lists differ in length")
    for i, g in enumerate(grads):
        if g.shape != params[i].shape:
            raise ValueError(f"gradient {i} shape {g.shape} != parameter shape {params[i].shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter group {i} at optimizer step {state.step + 1}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# models


@dataclass(frozen=True)
class ModelSpec:
    """What to build: a plain KAN ``architecture`` or a chain with member hidden widths."""

    architecture: tuple[int, ...] = (500, 100, 500)
    kind: str = "spline"
    family: str = "kan"
    window: int | None = None
    seed: int = 0
    output_layer_scale: float = OUTPUT_LAYER_SCALE

    def __post_init__(self):
        object.__setattr__(self, "architecture", parse_architecture(self.architecture))
        if not (self.output_layer_scale >= 0 and math.isfinite(self.output_layer_scale)):
            raise ConfigError(f"output_layer_scale must be finite and >= 0, got {self.output_layer_scale}")
        if self.family not in ("kan", "chain"):
            raise ConfigError(f"model family must be 'kan' or 'chain', got {self.family!r}")
        if self.kind not in ("spline", "wavelet"):
            raise ConfigError(f"layer kind must be 'spline' or 'wavelet', got {self.kind!r}")

    def build(self, n_steps: int, seed: int | None = None):
        seed = self.seed if seed is None else seed
        arch = self.architecture
        if self.family == "kan":
            if arch[0] != n_steps or arch[-1] != n_steps:
                raise ConfigError(f"architecture {list(arch)} does not map {n_steps} inputs to {n_steps} outputs")
            return init_network(arch, self.kind, seed, SplineGrid(), self.output_layer_scale)
        window = n_steps if self.window is None else self.window
        if arch[0] != window or arch[-1] != 1:
            raise ConfigError(f"chain member architecture {list(arch)} must be [window={window}, ..., 1]")
        return init_chain(n_steps, arch[1:-1], window, self.kind, seed, None, self.output_layer_scale)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["architecture"] = list(self.architecture)
        return d


def _copy_params(params):
    return [p.copy() for p in params]


def _restore(params, saved):
    for p, s in zip(params, saved):
        p[...] = s


def _slice_features(feats, idx):
    if feats is None:
        return None
    if isinstance(feats, tuple):
        return tuple(_slice_features(f, idx) for f in feats)
    return feats[idx]


@dataclass
class TrainResult:
    model: object
    history: list = field(default_factory=list)
    wall_clock: float = 0.0

    def manifest(self, config: TrainConfig, model_spec: ModelSpec | None = None, checkpoint=None) -> dict:
        return {
            "config": config.to_dict(),
            "model": None if model_spec is None else model_spec.to_dict(),
            "history": [asdict(h) for h in self.history],
            "wall_clock_seconds": self.wall_clock,
            "checkpoint": None if checkpoint is None else str(checkpoint),
        }


def train(model, dataset: Dataset, config: TrainConfig, callbacks=()) -> TrainResult:
    """Adam on the Ehrenfest-penalized loss over the training split of ``dataset``.

    ``model`` (a :class:`KanNetwork` or :class:`ChainModel`) is updated in
    place.  Each callback is called as ``cb(epoch, breakdown, model)``; a
    truthy return value stops training early.
    """
    if not isinstance(model, (KanNetwork, ChainModel)):
        raise TypeError(f"cannot train a {type(model).__name__}")
    if dataset.scaler is None or dataset.split is None:
        raise ValueError("dataset needs a fitted scaler and a train/test split before training")
    train_idx = np.asarray(dataset.split.train, dtype=int)
    x, y, rhs = dataset.scaled(train_idx)
    dt = dataset.dt
    n_train = len(train_idx)
    # Everything that depends only on the data is computed once.
    feats = model.input_features(x)
    target_d = _derivative_target(y, rhs, dataset.scaler, dt, config.penalty_target)

    params = model.parameters()
    state = AdamState.for_params(params)
    rng = np.random.default_rng(config.seed)
    history: list[LossBreakdown] = []
    last_good = _copy_params(params)
    t0 = time.perf_counter()
    full = config.batch_size is None or config.batch_size >= n_train

    for epoch in range(1, config.epochs + 1):
        lam = config.lambda_at(epoch)
        batches = [slice(None)] if full else np.array_split(rng.permutation(n_train), math.ceil(n_train / config.batch_size))
        ep_mse = ep_pen = 0.0
        for b in batches:
            fb = feats if full else _slice_features(feats, b)
            pred, caches = model.forward(x[b], fb)
            breakdown, g = loss_and_gradient(pred, y[b], None, dataset.scaler, config, dt, lam, target_d[b], epoch)
            if not math.isfinite(breakdown.total):
                _restore(params, last_good)
                raise TrainingDiverged(
                    f"loss became non-finite at epoch {epoch} (mse={breakdown.mse}, penalty={breakdown.penalty})",
                    epoch, model, history,
                )
            grads, _ = model.backward(caches, g)
            try:
                adam_step(params, grads, state, config.learning_rate)
            except FloatingPointError as exc:
                _restore(params, last_good)
                raise TrainingDiverged(f"epoch {epoch}: {exc}", epoch, model, history) from None
            w = 1.0 if full else len(b) / n_train
            ep_mse += w * breakdown.mse
            ep_pen += w * breakdown.penalty
        record = LossBreakdown(ep_mse, ep_pen, ep_mse + ep_pen, epoch)
        history.append(record)
        if not all(np.all(np.isfinite(p)) for p in params):
            _restore(params, last_good)
            raise TrainingDiverged(f"parameters became non-finite at epoch {epoch}", epoch, model, history)
        for i, p in enumerate(params):
            last_good[i][...] = p
        if epoch == 1 or epoch % 500 == 0 or epoch == config.epochs:
            log.info("epoch %d: mse=%.3e penalty=%.3e", epoch, record.mse, record.penalty)
        if any(cb(epoch, record, model) for cb in callbacks):
            break
    return TrainResult(model, history, time.perf_counter() - t0)
