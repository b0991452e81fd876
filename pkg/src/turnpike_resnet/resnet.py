"""Residual networks as controlled discrete-time systems.

Two layer types are supported:

* ``plain``:       x + s(A x + b)
* ``bottleneck``:  x + s2(A2 s1(A1 x + b1) + b2)

All parameters of a network live in one flat float64 vector; per-layer
matrices are views into it.  Within a layer the order is each weight matrix
flattened row-major followed by its bias, so ``layer_vector(k)`` is the
vectorized control input of layer ``k``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("identity", "tanh", "relu")
ARCHS = ("plain", "bottleneck")


class NumericalError(RuntimeError):
    """Raised when a forward pass or objective produces non-finite values."""


def activate(kind: str, z: np.ndarray) -> np.ndarray:
    if kind == "identity":
        return z
    if kind == "tanh":
        return np.tanh(z)
    if kind == "relu":
        return np.maximum(z, 0.0)
    raise ValueError(f"unknown activation {kind!r}")


def activate_grad(kind: str, z: np.ndarray, out: np.ndarray) -> np.ndarray:
    """Derivative of the activation given its input ``z`` and output ``out``."""
    if kind == "identity":
        return np.ones_like(z)
    if kind == "tanh":
        return 1.0 - out * out
    if kind == "relu":
        # derivative at exactly 0 is 0
        return (z > 0).astype(z.dtype)
    raise ValueError(f"unknown activation {kind!r}")


def _layer_shapes(arch, state_dim, hidden_dim):
    n, h = state_dim, hidden_dim
    if arch == "plain":
        return (("A", (n, n)), ("b", (n,)))
    if arch == "bottleneck":
        return (("A1", (h, n)), ("b1", (h,)), ("A2", (n, h)), ("b2", (n,)))
    raise ValueError(f"unknown architecture {arch!r}")


@dataclass
class NetworkParams:
    arch: str
    depth: int
    state_dim: int
    activations: tuple
    hidden_dim: int = 0
    flat: np.ndarray = field(default=None, repr=False)

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}, got {self.arch!r}")
        self.activations = tuple(self.activations)
        want = 1 if self.arch == "plain" else 2
        if len(self.activations) != want:
            raise ValueError(f"{self.arch} needs {want} activation(s), got {self.activations}")
        for a in self.activations:
            if a not in ACTIVATIONS:
                raise ValueError(f"unknown activation {a!r}; choose from {ACTIVATIONS}")
        if self.depth < 0 or self.state_dim < 1:
            raise ValueError("depth must be >= 0 and state_dim >= 1")
        if self.arch == "bottleneck" and self.hidden_dim < 1:
            raise ValueError("bottleneck architecture needs hidden_dim >= 1")
        if self.arch == "plain":
            self.hidden_dim = 0
        self._shapes = _layer_shapes(self.arch, self.state_dim, self.hidden_dim)
        self.layer_size = sum(int(np.prod(s)) for _, s in self._shapes)
        if self.flat is None:
            self.flat = np.zeros(self.depth * self.layer_size)
        self.flat = np.ascontiguousarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.depth * self.layer_size,):
            raise ValueError(
                f"parameter vector has shape {self.flat.shape}, "
                f"expected ({self.depth * self.layer_size},)")
        if not np.all(np.isfinite(self.flat)):
            raise ValueError("network parameters must be finite")
        self.layers = [self._views(k) for k in range(self.depth)]

    def _views(self, k):
        out, pos = {}, k * self.layer_size
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            out[name] = self.flat[pos:pos + size].reshape(shape)
            pos += size
        return out

    def layer_vector(self, k: int) -> np.ndarray:
        return self.flat[k * self.layer_size:(k + 1) * self.layer_size]

    def with_flat(self, flat: np.ndarray) -> "NetworkParams":
        return NetworkParams(self.arch, self.depth, self.state_dim, self.activations,
                             self.hidden_dim, np.array(flat, dtype=np.float64))

    def zeros_like(self) -> "NetworkParams":
        return self.with_flat(np.zeros_like(self.flat))

    def bias_mask(self) -> np.ndarray:
        """Boolean mask over ``flat`` selecting bias entries."""
        mask = np.zeros(self.layer_size, dtype=bool)
        pos = 0
        for name, shape in self._shapes:
            size = int(np.prod(shape))
            if name.startswith("b"):
                mask[pos:pos + size] = True
            pos += size
        return np.tile(mask, self.depth)

    def truncated(self, depth: int) -> "NetworkParams":
        return NetworkParams(self.arch, depth, self.state_dim, self.activations,
                             self.hidden_dim, self.flat[:depth * self.layer_size].copy())

    def same_structure(self, other: "NetworkParams") -> bool:
        return (self.arch, self.depth, self.state_dim, self.hidden_dim, self.activations) == (
            other.arch, other.depth, other.state_dim, other.hidden_dim, other.activations)


# Gradients share the parameter layout.
ParamGradient = NetworkParams


def init_params(arch, depth, state_dim, activations, hidden_dim=0, seed=0) -> NetworkParams:
    """Weights uniform in +-1/sqrt(fan_in), biases zero."""
    params = NetworkParams(arch, depth, state_dim, activations, hidden_dim)
    rng = np.random.default_rng(seed)
    for layer in params.layers:
        for name, w in layer.items():
            if name.startswith("A"):
                bound = 1.0 / np.sqrt(w.shape[1])
                w[...] = rng.uniform(-bound, bound, size=w.shape)
    return params


def layer_forward(x, layer: dict, arch: str, activations, k: int = 0):
    """One residual step applied row-wise to ``x`` (a state or a D x n batch)."""
    x = np.asarray(x, dtype=np.float64)
    try:
        if arch == "plain":
            z = x @ layer["A"].T + layer["b"]
            return x + activate(activations[0], z)
        z1 = x @ layer["A1"].T + layer["b1"]
        h = activate(activations[0], z1)
        z2 = h @ layer["A2"].T + layer["b2"]
        return x + activate(activations[1], z2)
    except ValueError as exc:
        raise ValueError(f"layer {k}: shape mismatch ({exc})") from None


@dataclass
class EnsembleTrajectory:
    states: np.ndarray  # (N+1, D, n)

    @property
    def depth(self) -> int:
        return self.states.shape[0] - 1

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


def forward_ensemble(params: NetworkParams, X0) -> EnsembleTrajectory:
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.ndim != 2 or X0.shape[1] != params.state_dim:
        raise ValueError(
            f"features have shape {X0.shape}, expected (D, {params.state_dim})")
    states = np.empty((params.depth + 1,) + X0.shape)
    states[0] = X0
    for k, layer in enumerate(params.layers):
        # overflow is reported below with layer and sample
        with np.errstate(over="ignore", invalid="ignore"):
            nxt = layer_forward(states[k], layer, params.arch, params.activations, k)
        bad = ~np.isfinite(nxt)
        if np.any(bad):
            i = int(np.argwhere(bad)[0][0])
            raise NumericalError(f"non-finite state after layer {k} for sample {i}")
        states[k + 1] = nxt
    return EnsembleTrajectory(states)


def backward(params: NetworkParams, trajectory: EnsembleTrajectory, terminal_grad,
             stage_grads=None, penalty_grads=None) -> ParamGradient:
    """Reverse-mode gradient of a scalar objective through the network.

    ``terminal_grad`` is dJ/dx_N (D x n); ``stage_grads[k]`` is the direct
    dJ/dx_k for k = 0..N-1 (or None); ``penalty_grads`` is a flat vector of
    direct parameter derivatives added to the result.
    """
    N = params.depth
    states = trajectory.states
    if states.shape[0] != N + 1 or states.shape[2] != params.state_dim:
        raise ValueError(
            f"trajectory of shape {states.shape} does not match a depth-{N} "
            f"network with state_dim {params.state_dim}")
    grad = params.zeros_like()
    lam = np.array(terminal_grad, dtype=np.float64)
    if lam.shape != states.shape[1:]:
        raise ValueError(f"terminal gradient shape {lam.shape} != {states.shape[1:]}")
    if stage_grads is not None and len(stage_grads) not in (N, N + 1):
        raise ValueError(f"expected {N} stage gradients, got {len(stage_grads)}")
    if stage_grads is not None and len(stage_grads) == N + 1 and stage_grads[N] is not None:
        lam = lam + stage_grads[N]
    s1 = params.activations[0]
    for k in range(N - 1, -1, -1):
        x = states[k]
        layer, g = params.layers[k], grad.layers[k]
        if params.arch == "plain":
            z = x @ layer["A"].T + layer["b"]
            out = activate(s1, z)
            G = lam * activate_grad(s1, z, out)
            g["A"][...] = G.T @ x
            g["b"][...] = G.sum(axis=0)
            lam = lam + G @ layer["A"]
        else:
            s2 = params.activations[1]
            z1 = x @ layer["A1"].T + layer["b1"]
            h = activate(s1, z1)
            z2 = h @ layer["A2"].T + layer["b2"]
            out = activate(s2, z2)
            G2 = lam * activate_grad(s2, z2, out)
            g["A2"][...] = G2.T @ h
            g["b2"][...] = G2.sum(axis=0)
            G1 = (G2 @ layer["A2"]) * activate_grad(s1, z1, h)
            g["A1"][...] = G1.T @ x
            g["b1"][...] = G1.sum(axis=0)
            lam = lam + G1 @ layer["A1"]
        if stage_grads is not None and stage_grads[k] is not None:
            lam = lam + stage_grads[k]
    if penalty_grads is not None:
        grad.flat += penalty_grads
    return grad


def preactivations(params: NetworkParams, trajectory: EnsembleTrajectory):
    """Per-layer inputs of the first activation, used for kink detection."""
    out = []
    for k, layer in enumerate(params.layers):
        x = trajectory.states[k]
        if params.arch == "plain":
            out.append(x @ layer["A"].T + layer["b"])
        else:
            z1 = x @ layer["A1"].T + layer["b1"]
            h = activate(params.activations[0], z1)
            out.append(z1)
            out.append(h @ layer["A2"].T + layer["b2"])
    return out


CHECKPOINT_HEADER = "# turnpike-resnet checkpoint v1"


class CheckpointError(ValueError):
    """Malformed checkpoint text; the message carries the offending line."""


def save_checkpoint(path, params: NetworkParams, metadata: dict | None = None) -> None:
    """Write a line-oriented text checkpoint.

    Header lines are ``key = value``; each parameter array follows as a
    ``[layer k NAME rows x cols]`` line and one line of space separated
    shortest round-trip decimals in row-major order.
    """
    meta = {
        "arch": params.arch,
        "depth": params.depth,
        "state_dim": params.state_dim,
        "hidden_dim": params.hidden_dim,
        "activations": ",".join(params.activations),
    }
    for key, value in (metadata or {}).items():
        if key in meta:
            raise ValueError(f"metadata key {key!r} is reserved")
        meta[key] = value
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(CHECKPOINT_HEADER + "\n")
        for key, value in meta.items():
            fh.write(f"{key} = {value}\n")
        for k, layer in enumerate(params.layers):
            for name, arr in layer.items():
                shape = "x".join(str(s) for s in arr.shape)
                fh.write(f"[layer {k} {name} {shape}]\n")
                fh.write(" ".join(map(repr, arr.ravel().tolist())) + "\n")


def load_checkpoint(path):
    """Read a checkpoint; returns ``(params, extra_metadata)``."""
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if not lines or lines[0] != CHECKPOINT_HEADER:
        raise CheckpointError(f"{path}:1: missing checkpoint header")
    meta, i = {}, 1
    while i < len(lines) and lines[i] and not lines[i].startswith("["):
        key, sep, value = lines[i].partition(" = ")
        if not sep:
            raise CheckpointError(f"{path}:{i + 1}: expected 'key = value', got {lines[i][:60]!r}")
        meta[key] = value
        i += 1
    try:
        params = NetworkParams(
            meta.pop("arch"), int(meta.pop("depth")), int(meta.pop("state_dim")),
            tuple(meta.pop("activations").split(",")), int(meta.pop("hidden_dim")))
    except KeyError as exc:
        raise CheckpointError(f"{path}: missing metadata key {exc}") from None
    except ValueError as exc:
        raise CheckpointError(f"{path}: invalid metadata ({exc})") from None
    for k, layer in enumerate(params.layers):
        for name, arr in layer.items():
            shape = "x".join(str(s) for s in arr.shape)
            want = f"[layer {k} {name} {shape}]"
            if i >= len(lines) or lines[i] != want:
                got = lines[i][:60] if i < len(lines) else "end of file"
                raise CheckpointError(f"{path}:{i + 1}: expected {want!r}, got {got!r}")
            try:
                values = [float(v) for v in lines[i + 1].split(" ")] if i + 1 < len(lines) else []
            except ValueError as exc:
                raise CheckpointError(f"{path}:{i + 2}: {exc}") from None
            if len(values) != arr.size:
                raise CheckpointError(
                    f"{path}:{i + 2}: expected {arr.size} values, got {len(values)}")
            arr[...] = np.array(values).reshape(arr.shape)
            i += 2
    if any(line.strip() for line in lines[i:]):
        raise CheckpointError(f"{path}:{i + 1}: trailing content after last layer")
    if not np.all(np.isfinite(params.flat)):
        raise CheckpointError(f"{path}: non-finite parameter values")
    return params, meta
