"""Training as a discrete-time optimal control problem.

The objective over layer states x_0..x_N and layer parameters u_0..u_{N-1} is

    sum_k [ stage(x_k) + r * |u_k|^2 ] + gamma * terminal(x_N)

where stage and terminal losses are dataset means.  Gradients are assembled
by feeding per-layer state sensitivities into :func:`resnet.backward`.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import softce
from .resnet import NetworkParams, NumericalError, backward, forward_ensemble

log = logging.getLogger(__name__)

STAGE_MODES = ("none", "soft_ce", "hard_ce")
PENALTY_MODES = ("objective_term", "optimizer_decay")
# "auto": hard CE at the last layer only when the stage cost is hard CE
TERMINAL_LOSSES = ("auto", "soft_ce", "hard_ce")


@dataclass(frozen=True)
class ObjectiveSpec:
    gamma: float = 1.0
    reg_r: float = 0.0
    stage_mode: str = "soft_ce"
    penalty_mode: str = "objective_term"
    terminal_loss: str = "auto"

    def __post_init__(self):
        for name in ("gamma", "reg_r"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{name} must be finite and nonnegative, got {v}")
        if self.stage_mode not in STAGE_MODES:
            raise ValueError(f"stage_mode must be one of {STAGE_MODES}, got {self.stage_mode!r}")
        if self.penalty_mode not in PENALTY_MODES:
            raise ValueError(
                f"penalty_mode must be one of {PENALTY_MODES}, got {self.penalty_mode!r}")
        if self.terminal_loss not in TERMINAL_LOSSES:
            raise ValueError(
                f"terminal_loss must be one of {TERMINAL_LOSSES}, got {self.terminal_loss!r}")

    @property
    def terminal_family(self) -> str:
        if self.terminal_loss != "auto":
            return self.terminal_loss
        return "hard_ce" if self.stage_mode == "hard_ce" else "soft_ce"

    @property
    def penalty_in_objective(self) -> bool:
        return self.penalty_mode == "objective_term"


def _loss_and_grad(family, X, labels, smoothing):
    """Dataset-mean loss of ``family`` and its gradient with respect to ``X``."""
    D = X.shape[0]
    if family == "soft_ce":
        vals = softce.soft_ce(X, labels, smoothing)
        grad = softce.soft_ce_gradient(X, labels, smoothing)
    else:
        vals = softce.hard_ce(X, labels, smoothing.num_classes)
        grad = softce.hard_ce_gradient(X, labels, smoothing.num_classes)
    return float(np.mean(vals)), grad / D


@dataclass
class ObjectiveValue:
    value: float
    stage_costs: np.ndarray    # per layer 0..N-1
    penalties: np.ndarray      # r * |u_k|^2 per layer (zeros in optimizer_decay mode)
    terminal_loss: float       # unweighted terminal loss
    stage_grads: list
    terminal_grad: np.ndarray
    penalty_grads: np.ndarray
    trajectory: object

    @property
    def mean_stage_cost(self) -> float:
        return float(np.mean(self.stage_costs)) if len(self.stage_costs) else 0.0


def objective(params: NetworkParams, X0, labels, spec: ObjectiveSpec,
              smoothing: softce.SmoothingSpec) -> ObjectiveValue:
    labels = softce.check_labels(labels, smoothing.num_classes)
    traj = forward_ensemble(params, X0)
    N = params.depth
    stage_costs = np.zeros(N)
    stage_grads = [None] * N
    if spec.stage_mode != "none":
        for k in range(N):
            stage_costs[k], stage_grads[k] = _loss_and_grad(
                spec.stage_mode, traj.states[k], labels, smoothing)
    terminal, tgrad = _loss_and_grad(spec.terminal_family, traj.terminal, labels, smoothing)
    if spec.penalty_in_objective and spec.reg_r > 0:
        u = params.flat.reshape(N, -1) if N else np.zeros((0, 0))
        penalties = spec.reg_r * np.einsum("ij,ij->i", u, u)
        pgrad = 2.0 * spec.reg_r * params.flat
    else:
        penalties = np.zeros(N)
        pgrad = np.zeros_like(params.flat)
    terms = {"stage cost": stage_costs.sum(), "input penalty": penalties.sum(),
             "terminal loss": spec.gamma * terminal}
    for name, v in terms.items():
        if not math.isfinite(v):
            raise NumericalError(f"non-finite {name} in objective")
    value = terms["stage cost"] + terms["input penalty"] + terms["terminal loss"]
    return ObjectiveValue(value, stage_costs, penalties, terminal, stage_grads,
                          spec.gamma * tgrad, pgrad, traj)


def objective_gradient(params, X0, labels, spec, smoothing):
    """Objective value record and full parameter gradient."""
    val = objective(params, X0, labels, spec, smoothing)
    grad = backward(params, val.trajectory, val.terminal_grad, val.stage_grads,
                    val.penalty_grads)
    return val, grad


@dataclass
class OptimizerState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: np.ndarray = None
    v: np.ndarray = None

    @classmethod
    def for_params(cls, params: NetworkParams, learning_rate, **kw) -> "OptimizerState":
        return cls(learning_rate, m=np.zeros_like(params.flat), v=np.zeros_like(params.flat), **kw)


def adam_step(opt: OptimizerState, params: NetworkParams, grads: NetworkParams,
              decay_r: float = 0.0, decay_mask=None):
    """One Adam update with bias correction, then optional decoupled decay.

    Returns ``(new_params, new_state)``; the inputs are left untouched.
    """
    g = grads.flat
    if g.shape != params.flat.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {params.flat.shape}")
    t = opt.step + 1
    m = opt.beta1 * opt.m + (1.0 - opt.beta1) * g
    v = opt.beta2 * opt.v + (1.0 - opt.beta2) * g * g
    m_hat = m / (1.0 - opt.beta1 ** t)
    v_hat = v / (1.0 - opt.beta2 ** t)
    flat = params.flat - opt.learning_rate * m_hat / (np.sqrt(v_hat) + opt.epsilon)
    if decay_r:
        factor = 1.0 - opt.learning_rate * decay_r
        if decay_mask is None:
            flat = flat * factor
        else:
            flat = np.where(decay_mask, flat * factor, flat)
    new_opt = OptimizerState(opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon, t, m, v)
    return params.with_flat(flat), new_opt


def accuracy(params: NetworkParams, dataset, smoothing=None) -> float:
    """Fraction of samples whose largest class-slice component at the last layer is the label."""
    C = dataset.num_classes
    terminal = forward_ensemble(params, dataset.features).terminal
    pred = np.argmax(terminal[:, :C], axis=1) + 1
    return float(np.mean(pred == dataset.labels))


HISTORY_COLUMNS = ("epoch", "objective", "terminal_loss", "mean_stage_cost", "accuracy")


@dataclass
class TrainRun:
    objective: ObjectiveSpec
    epochs: int
    learning_rate: float = 1e-3
    batch_size: int = 0
    seed: int = 0
    decay_biases: bool = True
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    history: list = field(default_factory=list)

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 0:
            raise ValueError("batch_size must be >= 0 (0 means full batch)")
        if not (self.learning_rate > 0 and math.isfinite(self.learning_rate)):
            raise ValueError("learning rate must be positive")


@dataclass
class FitResult:
    params: NetworkParams
    history: list
    diverged: bool = False
    message: str = ""


def _evaluate(params, dataset, spec, smoothing):
    val = objective(params, dataset.features, dataset.labels, spec, smoothing)
    pred = np.argmax(val.trajectory.terminal[:, :dataset.num_classes], axis=1) + 1
    acc = float(np.mean(pred == dataset.labels))
    return val.value, val.terminal_loss, val.mean_stage_cost, acc


def fit(params: NetworkParams, dataset, run: TrainRun, smoothing: softce.SmoothingSpec,
        callback=None) -> FitResult:
    """Adam training over (mini-)batches; one history row per completed epoch.

    ``callback(epoch, params)`` is invoked after each epoch when given.
    """
    if dataset.size < 1:
        raise ValueError("dataset is empty")
    spec = run.objective
    opt = OptimizerState.for_params(params, run.learning_rate, beta1=run.beta1,
                                    beta2=run.beta2, epsilon=run.adam_epsilon)
    decay = 0.0 if spec.penalty_in_objective else spec.reg_r
    mask = None if run.decay_biases else ~params.bias_mask()
    rng = np.random.default_rng(run.seed)
    D = dataset.size
    history = run.history
    for epoch in range(1, run.epochs + 1):
        if run.batch_size == 0 or run.batch_size >= D:
            batches = [np.arange(D)]
        else:
            perm = rng.permutation(D)
            batches = [perm[i:i + run.batch_size] for i in range(0, D, run.batch_size)]
        try:
            for idx in batches:
                _, grad = objective_gradient(params, dataset.features[idx],
                                             dataset.labels[idx], spec, smoothing)
                if not np.all(np.isfinite(grad.flat)):
                    raise NumericalError("non-finite gradient")
                params, opt = adam_step(opt, params, grad, decay, mask)
            row = (epoch,) + _evaluate(params, dataset, spec, smoothing)
        except NumericalError as exc:
            log.warning("training diverged in epoch %d: %s", epoch, exc)
            return FitResult(params, history, True, f"epoch {epoch}: {exc}")
        history.append(row)
        if callback is not None:
            callback(epoch, params)
    return FitResult(params, history)


def write_history_csv(path, history) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(HISTORY_COLUMNS)
        for epoch, *vals in history:
            w.writerow([epoch] + [repr(float(v)) for v in vals])
