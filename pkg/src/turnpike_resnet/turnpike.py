"""Per-layer diagnostics of a trained network: distances to the soft-CE
minimizer lines, stage costs, epsilon-close layer sets, dissipation checks,
and depth cropping."""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import softce
from .resnet import NetworkParams, forward_ensemble

PROFILE_COLUMNS = ("layer", "mean_dist", "max_dist", "stacked_dist", "stage_cost", "param_norm")


@dataclass
class LayerProfile:
    mean_dist: np.ndarray     # N+1
    max_dist: np.ndarray      # N+1
    stacked_dist: np.ndarray  # N+1, distance of the stacked state to the stacked minimizer set
    stage_cost: np.ndarray    # N+1, dataset-mean soft CE
    mean_alpha: np.ndarray    # N+1, dataset mean of alpha(per-sample distance)
    param_norm: np.ndarray    # N
    penalty: np.ndarray       # N, r * |u_k|^2

    @property
    def depth(self) -> int:
        return len(self.param_norm)


def profile(params: NetworkParams, dataset, smoothing: softce.SmoothingSpec,
            reg_r: float = 0.0, alpha=None) -> LayerProfile:
    """Run the network once and summarize every layer."""
    if alpha is None:
        alpha = softce.lower_bound_alpha(smoothing)
    traj = forward_ensemble(params, dataset.features)
    dists = np.array([softce.dist_to_minimizers(x, dataset.labels, smoothing)
                      for x in traj.states])
    stage = np.array([np.mean(softce.soft_ce(x, dataset.labels, smoothing))
                      for x in traj.states])
    u = params.flat.reshape(params.depth, -1) if params.depth else np.zeros((0, 0))
    sq = np.einsum("ij,ij->i", u, u)
    return LayerProfile(
        mean_dist=dists.mean(axis=1),
        max_dist=dists.max(axis=1),
        stacked_dist=np.sqrt((dists ** 2).sum(axis=1)),
        stage_cost=stage,
        mean_alpha=alpha(dists).mean(axis=1),
        param_norm=np.sqrt(sq),
        penalty=reg_r * sq,
    )


@dataclass
class TurnpikeReport:
    epsilon: float
    q_eps: list              # layers in [0, N-1] with mean distance <= epsilon
    q_bar: list
    entry_layer: int
    q_eps_state_input: list  # same, with distance sqrt(state_dist^2 + |u_k|^2)
    q_eps_stacked: list      # same, with the stacked-state distance
    alpha_eps: float
    sum_alpha: float         # sum_k alpha(mean_dist_k) over layers 0..N-1
    sum_stage: float         # sum_k (stage_k + r |u_k|^2) over layers 0..N-1
    cardinality_bound: float
    bound_ok: bool
    dissipation_ok: list

    @property
    def depth(self) -> int:
        return len(self.q_eps) + len(self.q_bar)


def _members(values, epsilon):
    return [int(k) for k in np.flatnonzero(values <= epsilon)]


def entry_layer(q_eps, depth) -> int:
    """Smallest k such that every layer k..depth-1 belongs to ``q_eps``."""
    members = set(q_eps)
    k = depth
    while k > 0 and (k - 1) in members:
        k -= 1
    return k


def turnpike_report(prof: LayerProfile, epsilon: float, alpha, tol: float = 1e-9) -> TurnpikeReport:
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    N = prof.depth
    mean_dist = prof.mean_dist[:N]
    q_eps = _members(mean_dist, epsilon)
    q_bar = [k for k in range(N) if k not in set(q_eps)]
    si = np.sqrt(mean_dist ** 2 + prof.param_norm ** 2)
    alpha_eps = float(alpha(epsilon))
    alphas = np.asarray(alpha(mean_dist), dtype=np.float64)
    sum_alpha = float(alphas.sum())
    per_layer = prof.stage_cost[:N] + prof.penalty
    sum_stage = float(per_layer.sum())
    bound = sum_alpha / alpha_eps if alpha_eps > 0 else float("inf")
    ok = len(q_bar) * alpha_eps <= sum_alpha + tol and sum_alpha <= sum_stage + tol * max(N, 1)
    dissipation = [bool(per_layer[k] >= prof.mean_alpha[k] - tol) for k in range(N)]
    return TurnpikeReport(
        epsilon=float(epsilon), q_eps=q_eps, q_bar=q_bar, entry_layer=entry_layer(q_eps, N),
        q_eps_state_input=_members(si, epsilon),
        q_eps_stacked=_members(prof.stacked_dist[:N], epsilon),
        alpha_eps=alpha_eps, sum_alpha=sum_alpha, sum_stage=sum_stage,
        cardinality_bound=bound, bound_ok=bool(ok), dissipation_ok=dissipation)


def epsilon_sweep(prof: LayerProfile, alpha, smoothing, count=10, low=0.01, high=1.0):
    """Reports for ``count`` log-spaced epsilons between ``low*|delta|`` and ``high*|delta|``."""
    scale = abs(smoothing.delta)
    return [turnpike_report(prof, float(e), alpha)
            for e in np.geomspace(low * scale, high * scale, count)]


def default_epsilon(smoothing) -> float:
    return 0.1 * abs(smoothing.delta)


def crop(params: NetworkParams, entry: int, margin: int = 0) -> NetworkParams:
    """Keep the first ``entry + margin`` layers unchanged."""
    depth = entry + margin
    if entry < 0 or margin < 0 or depth > params.depth:
        raise ValueError(
            f"cannot crop a depth-{params.depth} network to depth {depth} "
            f"(entry {entry}, margin {margin})")
    return params.truncated(depth)


def write_profile_csv(path, prof: LayerProfile) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PROFILE_COLUMNS)
        for k in range(len(prof.mean_dist)):
            norm = repr(float(prof.param_norm[k])) if k < prof.depth else ""
            w.writerow([k, repr(float(prof.mean_dist[k])), repr(float(prof.max_dist[k])),
                        repr(float(prof.stacked_dist[k])), repr(float(prof.stage_cost[k])), norm])


def _fmt(v):
    if isinstance(v, (list, tuple)):
        return ",".join(_fmt(x) for x in v)
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def report_text(report: TurnpikeReport) -> str:
    lines = [
        ("epsilon", report.epsilon),
        ("depth", report.depth),
        ("q_eps", report.q_eps),
        ("q_eps_count", len(report.q_eps)),
        ("q_bar_count", len(report.q_bar)),
        ("entry_layer", report.entry_layer),
        ("q_eps_state_input_count", len(report.q_eps_state_input)),
        ("q_eps_stacked_count", len(report.q_eps_stacked)),
        ("alpha_eps", report.alpha_eps),
        ("sum_alpha", report.sum_alpha),
        ("sum_stage", report.sum_stage),
        ("cardinality_bound", report.cardinality_bound),
        ("bound_ok", report.bound_ok),
        ("dissipation_ok", all(report.dissipation_ok)),
        ("dissipation_failures", [k for k, ok in enumerate(report.dissipation_ok) if not ok]),
    ]
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in lines)
