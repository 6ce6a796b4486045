"""Heteroscedastic aleatoric loss and the replicated-label calibration suite.

A model that predicts a value y~ and a log-variance u~ for a target y pays

    1/2 * exp(-u~) * (y - y~)^2 + 1/2 * u~

per dimension. Fitted on N copies of one input carrying different labels,
the loss is minimized at y~ = mean(labels) and exp(u~) = the population
variance of the labels, which is what `fit_replicated` measures.
"""

import csv
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from . import logger
from .nn import (
    DimensionError,
    NonFiniteError,
    ParamStore,
    Tape,
    Tensor,
    add,
    clamp,
    columns,
    exp,
    init_mlp,
    mean,
    mlp,
    mul,
    scale,
    square,
    sub,
)
from .optim import AdamState, adam_step
from .utils import atomic_write

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0
VARIANCE_FLOOR = math.exp(LOGVAR_MIN)

CALIBRATION_COLUMNS = ("true_variance", "recovered_variance", "relative_error", "n_labels", "epochs")


class ConvergenceError(RuntimeError):
    def __init__(self, final_loss: float, optimal_loss: float) -> None:
        super().__init__(
            f"Fit did not converge: final loss {final_loss:.6f}, "
            f"analytic optimum {optimal_loss:.6f}"
        )
        self.final_loss = final_loss
        self.optimal_loss = optimal_loss


@dataclass
class AleatoricPrediction:
    value: np.ndarray
    log_variance: np.ndarray

    def __post_init__(self):
        self.value = np.atleast_1d(np.asarray(self.value, dtype=np.float64))
        self.log_variance = np.atleast_1d(np.asarray(self.log_variance, dtype=np.float64))
        if self.value.shape != self.log_variance.shape:
            raise DimensionError(
                f"value {list(self.value.shape)} and log_variance "
                f"{list(self.log_variance.shape)} differ in length"
            )

    @property
    def variance(self) -> np.ndarray:
        return np.exp(self.log_variance)


def aleatoric_loss(pred: AleatoricPrediction, target) -> float:
    """Sum over dimensions of the aleatoric loss, in plain numpy."""
    target = np.atleast_1d(np.asarray(target, dtype=np.float64))
    if target.shape != pred.value.shape:
        raise DimensionError(
            f"target {list(target.shape)} does not match prediction {list(pred.value.shape)}"
        )
    for label, a in (("value", pred.value), ("log_variance", pred.log_variance), ("target", target)):
        if not np.all(np.isfinite(a)):
            raise NonFiniteError("Non-finite input to aleatoric_loss", field=label)
    u = pred.log_variance
    r = target - pred.value
    return float(np.sum(0.5 * np.exp(-u) * r * r + 0.5 * u))


def aleatoric_terms(value: Tensor, log_var: Tensor, target: Tensor) -> Tensor:
    """Elementwise differentiable loss; same shape as `value`."""
    r = sub(target, value)
    return add(scale(mul(exp(scale(log_var, -1.0)), square(r)), 0.5), scale(log_var, 0.5))


def clamp_log_variance(raw: Tensor) -> Tensor:
    return clamp(raw, LOGVAR_MIN, LOGVAR_MAX)


def optimal_loss(labels) -> float:
    """Minimum of the mean aleatoric loss over (y~, u~) for one shared input,
    taking the log-variance clamp into account."""
    v = float(np.var(labels))
    if v <= VARIANCE_FLOOR:
        return 0.5 * LOGVAR_MIN + 0.5 * v / VARIANCE_FLOOR
    return 0.5 + 0.5 * math.log(v)


@dataclass
class ReplicatedLabelSuite:
    x: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.x = np.atleast_1d(np.asarray(self.x, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.float64).ravel()
        if self.labels.size < 2:
            raise ValueError("A replicated-label suite needs at least 2 labels.")
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.labels))):
            raise NonFiniteError("Non-finite values in replicated-label suite")

    @property
    def n(self) -> int:
        return self.labels.size

    @property
    def true_mean(self) -> float:
        return float(self.labels.mean())

    @property
    def true_variance(self) -> float:
        # Population variance: divide by N, not N - 1.
        return float(np.mean((self.labels - self.labels.mean()) ** 2))

    @classmethod
    def gaussian(
        cls,
        variance: float,
        n: int,
        rng: np.random.Generator,
        mean: float = 0.0,
        x=(1.0,),
    ):
        labels = mean + math.sqrt(variance) * rng.standard_normal(n)
        return cls(x=x, labels=labels)


@dataclass
class FitResult:
    mean: float
    variance: float
    log_variance: float
    final_loss: float
    optimal_loss: float
    curve: List[float] = field(default_factory=list)


def fit_replicated(
    suite: ReplicatedLabelSuite,
    epochs: int = 3000,
    lr: float = 5e-2,
    layer_spec=((2, "linear"),),
    seed: int = 0,
    tol: float = 0.1,
    final_lr_ratio: float = 0.01,
) -> FitResult:
    """Fit value and log-variance heads on N copies of `suite.x`.

    Full-batch Adam with the rate decaying exponentially to
    `lr * final_lr_ratio`. Raises ConvergenceError when the final mean loss
    sits more than `tol` above the analytic optimum.
    """
    if layer_spec[-1][0] != 2:
        raise DimensionError("fit_replicated: the model must output (value, log-variance)")
    rng = np.random.default_rng(seed)
    params = ParamStore()
    init_mlp(params, "fit", suite.x.size, layer_spec, rng)
    state = AdamState(lr=lr)

    inputs = np.repeat(suite.x[None, :], suite.n, axis=0)
    labels = suite.labels[:, None]
    decay = final_lr_ratio ** (1.0 / max(epochs - 1, 1))
    curve = []

    for epoch in range(epochs):
        tape = Tape()
        out = mlp(params, "fit", layer_spec, tape.constant(inputs))
        value = columns(out, 0, 1)
        log_var = clamp_log_variance(columns(out, 1, 2))
        loss = mean(aleatoric_terms(value, log_var, tape.constant(labels)))
        params.zero_grad()
        tape.backward(loss)
        adam_step(params, state, lr=lr * decay**epoch)
        curve.append(loss.item())
        if epoch % 500 == 0:
            logger.debug("fit_replicated epoch %d: loss %.6f", epoch, curve[-1])

    tape = Tape()
    out = mlp(params, "fit", layer_spec, tape.constant(suite.x[None, :])).data[0]
    log_var = float(np.clip(out[1], LOGVAR_MIN, LOGVAR_MAX))
    pred = AleatoricPrediction(np.full(suite.n, out[0]), np.full(suite.n, log_var))
    final = aleatoric_loss(pred, suite.labels) / suite.n
    best = optimal_loss(suite.labels)
    if final > best + tol:
        raise ConvergenceError(final, best)

    return FitResult(
        mean=float(out[0]),
        variance=math.exp(log_var),
        log_variance=log_var,
        final_loss=final,
        optimal_loss=best,
        curve=curve,
    )


@dataclass
class CalibrationRow:
    true_variance: float
    recovered_variance: float
    relative_error: float
    n_labels: int
    epochs: int


def calibration_sweep(
    noise_levels: Sequence[float],
    n_labels: int = 512,
    epochs: int = 3000,
    lr: float = 5e-2,
    seed: int = 0,
    suites: Optional[Sequence[ReplicatedLabelSuite]] = None,
) -> List[CalibrationRow]:
    """Fit one replicated suite per noise level and tabulate the recovery.

    The reference for a zero-noise level is the clamp floor, the smallest
    variance the model can express.
    """
    if len(noise_levels) < 3:
        raise ValueError(f"calibration_sweep needs at least three noise levels, got {len(noise_levels)}.")
    if suites is not None and len(suites) != len(noise_levels):
        raise ValueError("Expect one suite per noise level.")

    rows = []
    for i, level in enumerate(noise_levels):
        if suites is None:
            suite = ReplicatedLabelSuite.gaussian(level, n_labels, np.random.default_rng([seed, i]))
        else:
            suite = suites[i]
        fit = fit_replicated(suite, epochs=epochs, lr=lr, seed=seed)
        reference = level if level > 0 else VARIANCE_FLOOR
        rel = abs(fit.variance - reference) / reference
        rows.append(CalibrationRow(level, fit.variance, rel, suite.n, epochs))
        logger.info(
            "Calibration: true variance %.4g, recovered %.4g (%.1f%%)",
            level,
            fit.variance,
            100 * rel,
        )
    return rows


def is_monotone(rows: Sequence[CalibrationRow]) -> bool:
    """Recovered variance strictly increases with the true variance."""
    ordered = sorted(rows, key=lambda r: r.true_variance)
    return all(a.recovered_variance < b.recovered_variance for a, b in zip(ordered, ordered[1:]))


def write_calibration_csv(rows: Sequence[CalibrationRow], path: str) -> None:
    with atomic_write(path) as f:
        w = csv.writer(f)
        w.writerow(CALIBRATION_COLUMNS)
        for r in rows:
            w.writerow(
                (
                    repr(r.true_variance),
                    repr(r.recovered_variance),
                    repr(r.relative_error),
                    r.n_labels,
                    r.epochs,
                )
            )
