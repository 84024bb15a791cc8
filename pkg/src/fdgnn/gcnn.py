"""Shared-parameter graph convolution: containers, forward pass, loss, dense gradient.

Each layer combines a self term X @ T0 with a neighborhood term (S @ X) @ T1,
followed by an element-wise activation. The dense implementations here are the
reference against which the per-node message-passing pipeline is validated.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graphs import ShiftOperator

ACTIVATIONS = ("identity", "relu", "leaky-relu", "tanh")

FLATTEN_ORDER = "layer-major, self-weights before neighborhood-weights, row-major"


@dataclass(frozen=True)
class LayerSpec:
    """Width and activation of one convolution layer."""

    g_in: int
    g_out: int
    activation: str = "identity"
    slope: float = 0.01  # negative-branch slope, leaky-relu only

    def __post_init__(self):
        if self.g_in < 1 or self.g_out < 1:
            raise ValueError(f"layer widths must be >= 1, got {self.g_in}x{self.g_out}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


def apply_activation(spec: LayerSpec, h: np.ndarray) -> np.ndarray:
    if spec.activation == "identity":
        return h
    if spec.activation == "relu":
        return np.maximum(h, 0.0)
    if spec.activation == "leaky-relu":
        return np.where(h > 0.0, h, spec.slope * h)
    return np.tanh(h)


def activation_derivative(spec: LayerSpec, h: np.ndarray) -> np.ndarray:
    # At the kink the derivative follows the negative branch, so distributed
    # and dense passes agree bitwise.
    if spec.activation == "identity":
        return np.ones_like(h)
    if spec.activation == "relu":
        return np.where(h > 0.0, 1.0, 0.0)
    if spec.activation == "leaky-relu":
        return np.where(h > 0.0, 1.0, spec.slope)
    t = np.tanh(h)
    return 1.0 - t * t


def validate_specs(specs: tuple[LayerSpec, ...]) -> None:
    if not specs:
        raise ValueError("need at least one layer")
    for a, b in zip(specs, specs[1:]):
        if a.g_out != b.g_in:
            raise ValueError(f"width mismatch between layers: {a.g_out} -> {b.g_in}")


def num_params(specs: tuple[LayerSpec, ...]) -> int:
    return sum(2 * s.g_in * s.g_out for s in specs)


def param_slices(specs: tuple[LayerSpec, ...]) -> list[tuple[slice, slice]]:
    """Flat-vector slices of (self, neighborhood) weights for each layer."""
    out = []
    pos = 0
    for s in specs:
        size = s.g_in * s.g_out
        out.append((slice(pos, pos + size), slice(pos + size, pos + 2 * size)))
        pos += 2 * size
    return out


class ParamSet:
    """Per-layer weight pairs (self term, neighborhood term).

    Flattening to a single vector is layer-major, self-weights first, row-major
    within each matrix; flatten and from_flat are exact inverses.
    """

    __slots__ = ("specs", "theta0", "theta1")

    def __init__(self, specs, theta0, theta1):
        specs = tuple(specs)
        validate_specs(specs)
        if len(theta0) != len(specs) or len(theta1) != len(specs):
            raise ValueError("one weight pair required per layer")
        for s, t0, t1 in zip(specs, theta0, theta1):
            want = (s.g_in, s.g_out)
            if t0.shape != want or t1.shape != want:
                raise ValueError(f"weight shape {t0.shape}/{t1.shape} != {want}")
        self.specs = specs
        self.theta0 = [np.asarray(t, dtype=np.float64) for t in theta0]
        self.theta1 = [np.asarray(t, dtype=np.float64) for t in theta1]

    @property
    def n_layers(self) -> int:
        return len(self.specs)

    @property
    def dim(self) -> int:
        return num_params(self.specs)

    def flatten(self) -> np.ndarray:
        parts = []
        for t0, t1 in zip(self.theta0, self.theta1):
            parts.append(t0.ravel())
            parts.append(t1.ravel())
        return np.concatenate(parts)

    @classmethod
    def from_flat(cls, specs, flat: np.ndarray) -> "ParamSet":
        specs = tuple(specs)
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (num_params(specs),):
            raise ValueError(f"flat vector length {flat.shape} != ({num_params(specs)},)")
        theta0, theta1 = [], []
        for s, (sl0, sl1) in zip(specs, param_slices(specs)):
            theta0.append(flat[sl0].reshape(s.g_in, s.g_out).copy())
            theta1.append(flat[sl1].reshape(s.g_in, s.g_out).copy())
        return cls(specs, theta0, theta1)

    def copy(self) -> "ParamSet":
        return ParamSet(
            self.specs,
            [t.copy() for t in self.theta0],
            [t.copy() for t in self.theta1],
        )


def init_params(specs, scheme: str = "glorot", seed: int = 0) -> ParamSet:
    """Draw a fresh ParamSet; deterministic for a given seed.

    Schemes: glorot (uniform within +-sqrt(6/(g_in+g_out))), zeros, and
    normal (N(0, 1/g_in), used for randomly drawn teacher networks).
    """
    specs = tuple(specs)
    validate_specs(specs)
    rng = np.random.default_rng(seed)
    theta0, theta1 = [], []
    for s in specs:
        shape = (s.g_in, s.g_out)
        if scheme == "glorot":
            bound = np.sqrt(6.0 / (s.g_in + s.g_out))
            theta0.append(rng.uniform(-bound, bound, shape))
            theta1.append(rng.uniform(-bound, bound, shape))
        elif scheme == "zeros":
            theta0.append(np.zeros(shape))
            theta1.append(np.zeros(shape))
        elif scheme == "normal":
            scale = 1.0 / np.sqrt(s.g_in)
            theta0.append(rng.normal(0.0, scale, shape))
            theta1.append(rng.normal(0.0, scale, shape))
        else:
            raise ValueError(f"unknown init scheme {scheme!r}")
    return ParamSet(specs, theta0, theta1)


@dataclass
class Activations:
    """Forward caches: x[l] are layer outputs (x[0] is the input), h[l] the
    pre-activations of layer l+1, a[l] the neighbor aggregates S @ x[l]."""

    x: list = field(default_factory=list)
    h: list = field(default_factory=list)
    a: list = field(default_factory=list)


def _shift_matrix(shift) -> np.ndarray:
    return shift.S if isinstance(shift, ShiftOperator) else np.asarray(shift)


def forward(params: ParamSet, shift, X: np.ndarray):
    """Run all layers; returns the prediction column and the cached activations."""
    S = _shift_matrix(shift)
    X = np.asarray(X, dtype=np.float64)
    n = S.shape[0]
    if X.ndim != 2 or X.shape != (n, params.specs[0].g_in):
        raise ValueError(
            f"features must be ({n}, {params.specs[0].g_in}), got {X.shape}"
        )
    if params.specs[-1].g_out != 1:
        raise ValueError("prediction network must end in a width-1 layer")
    acts = Activations(x=[X])
    cur = X
    for spec, t0, t1 in zip(params.specs, params.theta0, params.theta1):
        agg = S @ cur
        h = cur @ t0 + agg @ t1
        acts.a.append(agg)
        acts.h.append(h)
        cur = apply_activation(spec, h)
        acts.x.append(cur)
    return cur[:, 0].copy(), acts


def node_losses(y: np.ndarray, yhat: np.ndarray) -> np.ndarray:
    """Per-node squared errors."""
    y = np.asarray(y, dtype=np.float64)
    yhat = np.asarray(yhat, dtype=np.float64)
    if y.shape != yhat.shape:
        raise ValueError(f"length mismatch: {y.shape} vs {yhat.shape}")
    return (y - yhat) ** 2


def mse_loss(y: np.ndarray, yhat: np.ndarray) -> float:
    """Mean over nodes of the squared errors."""
    return float(np.mean(node_losses(y, yhat)))


def central_gradient(params: ParamSet, shift, X: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Exact flat gradient of mse_loss(forward(...)) via dense backpropagation."""
    S = _shift_matrix(shift)
    y = np.asarray(y, dtype=np.float64)
    yhat, acts = forward(params, shift, X)
    if y.shape != yhat.shape:
        raise ValueError(f"labels must be ({yhat.shape[0]},), got {y.shape}")
    n = y.shape[0]
    grad = np.zeros(params.dim)
    slices = param_slices(params.specs)
    z = (2.0 / n) * (yhat - y)[:, None]
    for k in reversed(range(params.n_layers)):
        spec = params.specs[k]
        q = z * activation_derivative(spec, acts.h[k])
        grad[slices[k][0]] = (acts.x[k].T @ q).ravel()
        grad[slices[k][1]] = (acts.a[k].T @ q).ravel()
        if k > 0:
            z = q @ params.theta0[k].T + S.T @ (q @ params.theta1[k].T)
    return grad


def save_params(params: ParamSet, path: str | Path) -> None:
    """Checkpoint as JSON: layer widths, activations, and the flat weight vector."""
    payload = {
        "widths": [params.specs[0].g_in] + [s.g_out for s in params.specs],
        "activations": [s.activation for s in params.specs],
        "slopes": [s.slope for s in params.specs],
        "flatten_order": FLATTEN_ORDER,
        "theta": params.flatten().tolist(),
    }
    Path(path).write_text(json.dumps(payload))


def load_params(path: str | Path) -> ParamSet:
    payload = json.loads(Path(path).read_text())
    widths = payload["widths"]
    specs = tuple(
        LayerSpec(widths[i], widths[i + 1], payload["activations"][i], payload["slopes"][i])
        for i in range(len(widths) - 1)
    )
    return ParamSet.from_flat(specs, np.array(payload["theta"], dtype=np.float64))
