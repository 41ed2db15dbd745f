"""SGD variants, line search, plateau control, warm-restart training
loops, and the step-size-weighted output iterate.

Conventions fixed here:

* The schedule index ``t`` advances once per epoch; every minibatch step
  inside an epoch uses the same base step size.
* Warm restarts reset the schedule index to 1 at each outer iteration
  while the iterate (and any optimizer buffers) carry over.
* A zero step size executes as a no-op update, not an error.
* All shuffling derives deterministically from ``(seed, outer, epoch)``,
  so identical (config, seed, dataset) produce bit-identical traces.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, NamedTuple, Sequence

import numpy as np

from .data import SparseDataset, minibatch_indices
from .errors import TrainingError, ValidationError
from .objectives import Objective
from .schedules import ScheduleKind, ScheduleSpec, eta


class OptimizerKind(str, Enum):
    SGD = "sgd"
    SGD_NESTEROV = "sgd_nesterov"
    ADAM = "adam"
    SGD_ARMIJO = "sgd_armijo"
    SGD_PLATEAU = "sgd_plateau"


@dataclass
class OptimizerState:
    """Current iterate plus optimizer-specific buffers.

    Buffers are allocated lazily by the step functions and always share
    the dimension of ``x``.  ``step_count`` increments by exactly one per
    update; ``current_eta`` records the last step size applied.
    """

    x: np.ndarray
    momentum_buf: np.ndarray | None = None
    adam_m: np.ndarray | None = None
    adam_v: np.ndarray | None = None
    step_count: int = 0
    current_eta: float = 0.0


def make_state(x0: np.ndarray) -> OptimizerState:
    x0 = np.asarray(x0, dtype=np.float64)
    if x0.ndim != 1:
        raise ValidationError(f"iterate must be a 1-d vector, got shape {x0.shape}")
    return OptimizerState(x=x0.copy())


def _check_grad(state: OptimizerState, grad: np.ndarray) -> np.ndarray:
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != state.x.shape:
        raise ValidationError(
            f"gradient shape {grad.shape} does not match iterate {state.x.shape}"
        )
    if not np.isfinite(grad).all():
        raise TrainingError(
            f"non-finite gradient component at update {state.step_count + 1}"
        )
    return grad


def sgd_step(state: OptimizerState, grad: np.ndarray, eta_t: float) -> OptimizerState:
    """``x <- x - eta_t * grad``; mutates and returns ``state``."""
    grad = _check_grad(state, grad)
    if not (eta_t >= 0.0 and math.isfinite(eta_t)):
        raise ValidationError(f"step size must be finite and >= 0, got {eta_t}")
    state.x -= eta_t * grad
    state.step_count += 1
    state.current_eta = float(eta_t)
    return state


def nesterov_step(
    state: OptimizerState,
    grad_fn: Callable[[np.ndarray], np.ndarray],
    eta_t: float,
    mu: float,
) -> OptimizerState:
    """Lookahead momentum: ``v <- mu v - eta g(x + mu v); x <- x + v``.

    With ``mu = 0`` the result is bit-identical to ``sgd_step`` on the
    same gradient.
    """
    if not (0.0 <= mu < 1.0):
        raise ValidationError(f"momentum must lie in [0, 1), got {mu}")
    if not (eta_t >= 0.0 and math.isfinite(eta_t)):
        raise ValidationError(f"step size must be finite and >= 0, got {eta_t}")
    if state.momentum_buf is None:
        state.momentum_buf = np.zeros_like(state.x)
    v = state.momentum_buf
    grad = _check_grad(state, grad_fn(state.x + mu * v))
    v *= mu
    v -= eta_t * grad
    state.x += v
    state.step_count += 1
    state.current_eta = float(eta_t)
    return state


def adam_step(
    state: OptimizerState,
    grad: np.ndarray,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    eta_t: float = 1e-3,
) -> OptimizerState:
    """Bias-corrected adaptive-moment update; ``step_count`` drives the
    correction exponent."""
    if not (0.0 <= beta1 < 1.0 and 0.0 <= beta2 < 1.0):
        raise ValidationError(f"betas must lie in [0, 1), got {beta1}, {beta2}")
    if eps <= 0.0:
        raise ValidationError(f"eps must be > 0, got {eps}")
    grad = _check_grad(state, grad)
    if state.adam_m is None:
        state.adam_m = np.zeros_like(state.x)
        state.adam_v = np.zeros_like(state.x)
    t = state.step_count + 1
    state.adam_m *= beta1
    state.adam_m += (1.0 - beta1) * grad
    state.adam_v *= beta2
    state.adam_v += (1.0 - beta2) * grad * grad
    m_hat = state.adam_m / (1.0 - beta1**t)
    v_hat = state.adam_v / (1.0 - beta2**t)
    state.x -= eta_t * m_hat / (np.sqrt(v_hat) + eps)
    state.step_count = t
    state.current_eta = float(eta_t)
    return state


class ArmijoResult(NamedTuple):
    eta: float
    exhausted: bool
    backtracks: int


def armijo_search(
    objective: Objective,
    x: np.ndarray,
    batch: np.ndarray,
    eta_max: float,
    c: float,
    backtrack: float,
    max_backtracks: int = 50,
    grad: np.ndarray | None = None,
    loss0: float | None = None,
) -> ArmijoResult:
    """Backtracking search for a sufficient-decrease step on one minibatch.

    Probes ``eta_max * backtrack**k`` for k = 0.. and returns the first
    step satisfying ``f(x - eta g) <= f(x) - c eta ||g||^2`` on the same
    batch.  If no probe up to ``max_backtracks`` passes, returns the last
    probe with ``exhausted=True``.  ``grad``/``loss0`` may be supplied to
    reuse already-computed batch quantities.
    """
    if not (0.0 < c < 1.0):
        raise ValidationError(f"c must lie in (0, 1), got {c}")
    if not (0.0 < backtrack < 1.0):
        raise ValidationError(f"backtrack must lie in (0, 1), got {backtrack}")
    if not (eta_max > 0.0 and math.isfinite(eta_max)):
        raise ValidationError(f"eta_max must be > 0, got {eta_max}")
    x = np.asarray(x, dtype=np.float64)
    if loss0 is None:
        loss0 = objective.value(x, batch)
    if grad is None:
        grad = objective.stochastic_grad(x, batch)
    gsq = float(grad @ grad)
    step = eta_max
    for k in range(max_backtracks + 1):
        trial = objective.value(x - step * grad, batch)
        if not math.isfinite(trial):
            raise TrainingError(f"non-finite loss while probing step {step}")
        if trial <= loss0 - c * step * gsq:
            return ArmijoResult(eta=step, exhausted=False, backtracks=k)
        if k < max_backtracks:
            step *= backtrack
    return ArmijoResult(eta=step, exhausted=True, backtracks=max_backtracks)


class PlateauController:
    """Multiplies the step size by ``factor`` after ``patience`` epochs
    without relative improvement of at least ``rel_threshold``; never
    drops below ``floor``."""

    def __init__(
        self,
        eta0: float,
        factor: float = 0.1,
        patience: int = 10,
        rel_threshold: float = 1e-4,
        floor: float = 1e-8,
    ):
        if not (0.0 < factor < 1.0):
            raise ValidationError(f"factor must lie in (0, 1), got {factor}")
        if patience < 1:
            raise ValidationError(f"patience must be >= 1, got {patience}")
        self.eta = float(eta0)
        self.factor = float(factor)
        self.patience = int(patience)
        self.rel_threshold = float(rel_threshold)
        self.floor = float(floor)
        self.best = math.inf
        self.bad_epochs = 0

    def update(self, metric: float) -> float:
        if not math.isfinite(metric):
            raise ValidationError(f"plateau metric must be finite, got {metric}")
        if metric < self.best * (1.0 - self.rel_threshold):
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.patience:
                self.eta = max(self.eta * self.factor, self.floor)
                self.bad_epochs = 0
        return self.eta


def plateau_update(controller: PlateauController, epoch_metric: float) -> float:
    """Feed one epoch metric to the controller; returns the step size."""
    return controller.update(epoch_metric)


@dataclass(frozen=True)
class TrainConfig:
    """Everything a training run needs besides the objective and data.

    ``inner_T`` counts epochs per schedule cycle (``inner_T = 0`` means
    evaluate-only); ``outer_l`` counts warm-restart cycles.  Cadences:
    ``eval_every`` in epochs (0 disables), ``grad_norm_every`` in steps
    (0 disables), ``snapshot_every`` in epochs (0 disables).
    """

    schedule: ScheduleSpec
    optimizer_kind: OptimizerKind = OptimizerKind.SGD
    momentum: float = 0.0
    batch_size: int = 64
    inner_T: int = 50
    outer_l: int = 1
    seed: int = 0
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    armijo_c: float = 0.1
    armijo_backtrack: float = 0.5
    armijo_eta_max: float = 1.0
    plateau_factor: float = 0.1
    plateau_patience: int = 10
    eval_every: int = 1
    grad_norm_every: int = 0
    snapshot_every: int = 1
    snapshot_grad_norms: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "optimizer_kind", OptimizerKind(self.optimizer_kind))
        if self.inner_T < 0:
            raise ValidationError(f"inner_T must be >= 0, got {self.inner_T}")
        if self.outer_l < 1:
            raise ValidationError(f"outer_l must be >= 1, got {self.outer_l}")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")
        if not (0.0 <= self.momentum < 1.0):
            raise ValidationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if not (0.0 < self.armijo_c < 1.0 and 0.0 < self.armijo_backtrack < 1.0):
            raise ValidationError("armijo_c and armijo_backtrack must lie in (0, 1)")
        if self.armijo_eta_max <= 0.0:
            raise ValidationError("armijo_eta_max must be > 0")
        if not (0.0 < self.plateau_factor < 1.0):
            raise ValidationError("plateau_factor must lie in (0, 1)")
        if self.plateau_patience < 1:
            raise ValidationError("plateau_patience must be >= 1")
        if (
            self.schedule.kind is ScheduleKind.COSINE
            and self.schedule.horizon < self.inner_T
        ):
            raise ValidationError(
                f"cosine horizon {self.schedule.horizon} shorter than "
                f"inner_T {self.inner_T}"
            )


@dataclass(frozen=True)
class MetricTrace:
    """Per-step, per-epoch, and snapshot records of one training run.

    Step rows hold the schedule index ``t``, the step size actually used,
    the minibatch loss at the pre-step iterate, and (at monitored steps)
    the full squared gradient norm, NaN elsewhere.  Snapshots are epoch-
    start iterates with their step-size weights, which is exactly what
    the weighted output-iterate draw needs.
    """

    step_t: np.ndarray
    step_eta: np.ndarray
    step_loss: np.ndarray
    step_grad_norm_sq: np.ndarray
    epoch_index: np.ndarray
    epoch_t: np.ndarray
    epoch_eta: np.ndarray
    epoch_train_loss: np.ndarray
    epoch_test_accuracy: np.ndarray
    snapshot_t: np.ndarray
    snapshot_weight: np.ndarray
    snapshot_grad_norm_sq: np.ndarray
    snapshot_x: np.ndarray
    final_x: np.ndarray

    @property
    def n_steps(self) -> int:
        return int(self.step_t.size)

    @property
    def n_epochs(self) -> int:
        return int(self.epoch_index.size)

    def equals(self, other: "MetricTrace") -> bool:
        """Exact (bitwise on values, NaN-aware) equality of all records."""
        for name in self.__dataclass_fields__:
            a, b = getattr(self, name), getattr(other, name)
            if a.shape != b.shape or not np.array_equal(a, b, equal_nan=True):
                return False
        return True

    def snapshot_prefix(self, max_t: int) -> "MetricTrace":
        """Restrict snapshots to schedule indices ``t <= max_t``."""
        keep = self.snapshot_t <= max_t
        return replace(
            self,
            snapshot_t=self.snapshot_t[keep],
            snapshot_weight=self.snapshot_weight[keep],
            snapshot_grad_norm_sq=self.snapshot_grad_norm_sq[keep],
            snapshot_x=self.snapshot_x[keep],
        )


class _TraceBuilder:
    def __init__(self, dimension: int):
        self.step_t: list[int] = []
        self.step_eta: list[float] = []
        self.step_loss: list[float] = []
        self.step_gns: list[float] = []
        self.epoch_index: list[int] = []
        self.epoch_t: list[int] = []
        self.epoch_eta: list[float] = []
        self.epoch_train_loss: list[float] = []
        self.epoch_test_acc: list[float] = []
        self.snap_t: list[int] = []
        self.snap_w: list[float] = []
        self.snap_gns: list[float] = []
        self.snap_x: list[np.ndarray] = []
        self.dimension = dimension

    def build(self, final_x: np.ndarray) -> MetricTrace:
        snap_x = (
            np.stack(self.snap_x)
            if self.snap_x
            else np.empty((0, self.dimension))
        )
        return MetricTrace(
            step_t=np.asarray(self.step_t, dtype=np.int64),
            step_eta=np.asarray(self.step_eta, dtype=np.float64),
            step_loss=np.asarray(self.step_loss, dtype=np.float64),
            step_grad_norm_sq=np.asarray(self.step_gns, dtype=np.float64),
            epoch_index=np.asarray(self.epoch_index, dtype=np.int64),
            epoch_t=np.asarray(self.epoch_t, dtype=np.int64),
            epoch_eta=np.asarray(self.epoch_eta, dtype=np.float64),
            epoch_train_loss=np.asarray(self.epoch_train_loss, dtype=np.float64),
            epoch_test_accuracy=np.asarray(self.epoch_test_acc, dtype=np.float64),
            snapshot_t=np.asarray(self.snap_t, dtype=np.int64),
            snapshot_weight=np.asarray(self.snap_w, dtype=np.float64),
            snapshot_grad_norm_sq=np.asarray(self.snap_gns, dtype=np.float64),
            snapshot_x=snap_x,
            final_x=final_x.copy(),
        )


EvalFn = Callable[[np.ndarray], tuple[float, float]]


def _full_grad_norm_sq(objective: Objective, x: np.ndarray) -> float:
    g = objective.full_grad(x)
    return float(g @ g)


def _run_segment(
    objective: Objective,
    data: SparseDataset,
    config: TrainConfig,
    state: OptimizerState,
    builder: _TraceBuilder,
    outer_index: int,
    eval_fn: EvalFn | None,
    step_counter: list[int],
) -> None:
    """One warm-restart cycle: epochs t = 1..inner_T with a fresh schedule."""
    n = data.n_examples
    if objective.n_examples != n:
        raise ValidationError(
            f"objective covers {objective.n_examples} examples but data has {n}"
        )
    kind = config.optimizer_kind
    spec = config.schedule
    plateau = (
        PlateauController(
            spec.eta0, config.plateau_factor, config.plateau_patience
        )
        if kind is OptimizerKind.SGD_PLATEAU
        else None
    )
    for t in range(1, config.inner_T + 1):
        global_epoch = (outer_index - 1) * config.inner_T + t
        if kind in (OptimizerKind.SGD, OptimizerKind.SGD_NESTEROV):
            base_eta = eta(spec, t)
        elif kind is OptimizerKind.ADAM:
            base_eta = spec.eta0
        elif kind is OptimizerKind.SGD_PLATEAU:
            base_eta = plateau.eta
        else:  # armijo re-searches every step from eta_max
            base_eta = config.armijo_eta_max

        if config.snapshot_every and t % config.snapshot_every == 0:
            builder.snap_t.append(t)
            builder.snap_w.append(base_eta)
            builder.snap_x.append(state.x.copy())
            builder.snap_gns.append(
                _full_grad_norm_sq(objective, state.x)
                if config.snapshot_grad_norms
                else math.nan
            )

        batches = minibatch_indices(n, config.batch_size, config.seed, global_epoch)
        epoch_loss_sum = 0.0
        for k, batch in enumerate(batches, start=1):
            try:
                loss = objective.value(state.x, batch)
                if not math.isfinite(loss):
                    raise TrainingError("non-finite minibatch loss")
                step_counter[0] += 1
                monitored = (
                    config.grad_norm_every > 0
                    and step_counter[0] % config.grad_norm_every == 0
                )
                gns = (
                    _full_grad_norm_sq(objective, state.x) if monitored else math.nan
                )
                if kind is OptimizerKind.SGD_NESTEROV:
                    step_eta = base_eta
                    nesterov_step(
                        state,
                        lambda z: objective.stochastic_grad(z, batch),
                        step_eta,
                        config.momentum,
                    )
                elif kind is OptimizerKind.ADAM:
                    step_eta = base_eta
                    grad = objective.stochastic_grad(state.x, batch)
                    adam_step(
                        state, grad,
                        config.adam_beta1, config.adam_beta2,
                        config.adam_eps, step_eta,
                    )
                elif kind is OptimizerKind.SGD_ARMIJO:
                    grad = objective.stochastic_grad(state.x, batch)
                    found = armijo_search(
                        objective, state.x, batch,
                        config.armijo_eta_max, config.armijo_c,
                        config.armijo_backtrack, grad=grad, loss0=loss,
                    )
                    step_eta = found.eta
                    sgd_step(state, grad, step_eta)
                else:  # plain SGD and plateau-driven SGD
                    step_eta = base_eta
                    grad = objective.stochastic_grad(state.x, batch)
                    sgd_step(state, grad, step_eta)
            except (TrainingError, FloatingPointError) as exc:
                raise TrainingError(
                    f"epoch {global_epoch}, step {k}: {exc}"
                ) from exc
            builder.step_t.append(t)
            builder.step_eta.append(step_eta)
            builder.step_loss.append(loss)
            builder.step_gns.append(gns)
            epoch_loss_sum += loss

        mean_epoch_loss = epoch_loss_sum / len(batches)
        if plateau is not None:
            plateau.update(mean_epoch_loss)

        evaluate = eval_fn is not None and config.eval_every > 0 and (
            global_epoch % config.eval_every == 0
            or (outer_index == config.outer_l and t == config.inner_T)
        )
        if evaluate:
            train_loss, test_acc = eval_fn(state.x)
        else:
            train_loss, test_acc = math.nan, math.nan
        builder.epoch_index.append(global_epoch)
        builder.epoch_t.append(t)
        builder.epoch_eta.append(base_eta)
        builder.epoch_train_loss.append(train_loss)
        builder.epoch_test_acc.append(test_acc)


def run_inner(
    objective: Objective,
    data: SparseDataset,
    config: TrainConfig,
    x0: np.ndarray | None = None,
    eval_fn: EvalFn | None = None,
) -> MetricTrace:
    """One schedule cycle of ``inner_T`` epochs from ``x0`` (or the
    objective's initial point)."""
    state = make_state(x0 if x0 is not None else objective.initial_point())
    builder = _TraceBuilder(state.x.size)
    cfg = config if config.outer_l == 1 else replace(config, outer_l=1)
    _run_segment(objective, data, cfg, state, builder, 1, eval_fn, [0])
    return builder.build(state.x)


def run_warm_restarts(
    objective: Objective,
    data: SparseDataset,
    config: TrainConfig,
    x0: np.ndarray | None = None,
    eval_fn: EvalFn | None = None,
) -> MetricTrace:
    """``outer_l`` schedule cycles; the iterate carries across cycles while
    the schedule index restarts at 1.  With ``outer_l = 1`` the trace is
    bit-identical to ``run_inner``."""
    state = make_state(x0 if x0 is not None else objective.initial_point())
    builder = _TraceBuilder(state.x.size)
    step_counter = [0]
    for outer in range(1, config.outer_l + 1):
        _run_segment(objective, data, config, state, builder, outer, eval_fn, step_counter)
    return builder.build(state.x)


def sample_output_iterate(
    trace: MetricTrace, rng: np.random.Generator
) -> np.ndarray:
    """Draw a snapshot iterate with probability proportional to its
    step-size weight; seeded and reproducible through ``rng``."""
    if trace.snapshot_weight.size == 0:
        raise ValidationError("trace contains no snapshots to sample from")
    weights = trace.snapshot_weight
    total = float(weights.sum())
    if total <= 0.0:
        raise ValidationError("snapshot weights must have a positive sum")
    i = rng.choice(weights.size, p=weights / total)
    return trace.snapshot_x[i].copy()


@dataclass(frozen=True)
class DescentReport:
    """Per-step audit of the smooth-descent inequality
    ``f(x_{t+1}) <= f(x_t) - (eta_t / 2)||grad f(x_t)||^2
    + L eta_t^2 sigma^2 / 2`` along a full-batch run."""

    steps: int
    violations: int
    margins: np.ndarray
    worst_margin: float
    final_loss: float


def monitor_descent(
    objective: Objective,
    x0: np.ndarray,
    spec: ScheduleSpec,
    steps: int,
    smoothness: float,
    noise_sq: float = 0.0,
    rel_slack: float = 1e-9,
) -> DescentReport:
    """Run full-batch gradient descent and check the descent inequality at
    every step.  ``margins`` holds (allowed bound - achieved loss); a
    negative margin beyond the relative slack counts as a violation.
    """
    if steps < 1:
        raise ValidationError(f"steps must be >= 1, got {steps}")
    x = np.asarray(x0, dtype=np.float64).copy()
    margins = np.empty(steps)
    violations = 0
    f_curr = objective.value(x)
    for t in range(1, steps + 1):
        g = objective.full_grad(x)
        gsq = float(g @ g)
        eta_t = eta(spec, t)
        x = x - eta_t * g
        f_next = objective.value(x)
        bound = f_curr - 0.5 * eta_t * gsq + 0.5 * smoothness * eta_t**2 * noise_sq
        margin = bound - f_next
        margins[t - 1] = margin
        slack = rel_slack * max(1.0, abs(f_curr), abs(f_next))
        if margin < -slack:
            violations += 1
        f_curr = f_next
    return DescentReport(
        steps=steps,
        violations=violations,
        margins=margins,
        worst_margin=float(margins.min()),
        final_loss=f_curr,
    )
