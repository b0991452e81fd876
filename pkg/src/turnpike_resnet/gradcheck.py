"""Finite-difference verification of the adjoint gradient on small random networks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .resnet import NetworkParams, forward_ensemble, preactivations
from .softce import SmoothingSpec
from .train import STAGE_MODES, ObjectiveSpec, objective, objective_gradient

KINK_TOL = 1e-6
FAIL_TOL = 1e-4
MAX_STATE_DIM, MAX_DEPTH, MAX_SAMPLES = 5, 3, 8

CASES = (
    ("plain", ("tanh",)),
    ("bottleneck", ("relu", "identity")),
)


def central_differences(f, theta, step=1e-5) -> np.ndarray:
    theta = np.array(theta, dtype=np.float64)
    grad = np.empty_like(theta)
    for i in range(theta.size):
        old = theta[i]
        theta[i] = old + step
        fp = f(theta)
        theta[i] = old - step
        fm = f(theta)
        theta[i] = old
        grad[i] = (fp - fm) / (2 * step)
    return grad


def relative_error(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def objective_fd_error(params, X0, labels, spec, smoothing, step=1e-5) -> float:
    """Relative error between the adjoint gradient and central differences of the objective."""
    _, grad = objective_gradient(params, X0, labels, spec, smoothing)

    def f(theta):
        return objective(params.with_flat(theta), X0, labels, spec, smoothing).value

    return relative_error(grad.flat, central_differences(f, params.flat, step))


def near_kink(params: NetworkParams, X0, tol=KINK_TOL) -> bool:
    if "relu" not in params.activations:
        return False
    traj = forward_ensemble(params, X0)
    return any(np.any(np.abs(z) < tol) for z in preactivations(params, traj))


def random_instance(arch, activations, rng, state_dim=3, depth=2, samples=4,
                    hidden_dim=3, num_classes=2, scale=0.8):
    params = NetworkParams(arch, depth, state_dim, activations,
                           hidden_dim if arch == "bottleneck" else 0)
    params = params.with_flat(scale * rng.standard_normal(params.flat.size))
    X0 = rng.standard_normal((samples, state_dim))
    labels = rng.integers(1, num_classes + 1, size=samples)
    return params, X0, labels


@dataclass
class GradcheckSummary:
    trials: int
    max_error: float = 0.0
    resampled: int = 0
    errors: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.max_error < FAIL_TOL

    def lines(self):
        out = [f"trials per case: {self.trials}"]
        for (arch, mode), err in sorted(self.errors.items()):
            out.append(f"{arch:10s} {mode:8s} max rel err {err:.3e}")
        out.append(f"resampled near-kink instances: {self.resampled}")
        out.append(f"overall max rel err {self.max_error:.3e} "
                   f"({'PASS' if self.passed else 'FAIL'} at {FAIL_TOL:g})")
        return out


def run_gradcheck(trials=20, seed=0, state_dim=3, depth=2, samples=4, hidden_dim=3,
                  step=1e-5) -> GradcheckSummary:
    """Check every architecture case against every stage mode on random small instances."""
    if not (1 <= state_dim <= MAX_STATE_DIM and 0 <= depth <= MAX_DEPTH
            and 1 <= samples <= MAX_SAMPLES):
        raise ValueError(
            f"grad-check needs n <= {MAX_STATE_DIM}, N <= {MAX_DEPTH}, D <= {MAX_SAMPLES}; "
            f"got n={state_dim}, N={depth}, D={samples}")
    if state_dim < 2:
        raise ValueError("grad-check needs state_dim >= 2 (two classes)")
    rng = np.random.default_rng(seed)
    smoothing = SmoothingSpec(2, 0.95)
    summary = GradcheckSummary(trials)
    for arch, acts in CASES:
        for mode in STAGE_MODES:
            worst = 0.0
            for _ in range(trials):
                while True:
                    params, X0, labels = random_instance(
                        arch, acts, rng, state_dim, depth, samples, hidden_dim)
                    if not near_kink(params, X0):
                        break
                    summary.resampled += 1
                spec = ObjectiveSpec(gamma=float(rng.uniform(0.5, 3.0)),
                                     reg_r=float(rng.uniform(0.0, 0.1)), stage_mode=mode)
                worst = max(worst, objective_fd_error(params, X0, labels, spec, smoothing, step))
            summary.errors[(arch, mode)] = worst
            summary.max_error = max(summary.max_error, worst)
    return summary
