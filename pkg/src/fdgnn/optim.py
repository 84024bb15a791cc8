"""Consensus mixing and the distributed gradient-descent update family.

Distributed updates operate on stacked per-node rows: thetas is (n, dim) with
one parameter copy per row, gradients likewise. One update step mixes the
parameter rows through the consensus weights and subtracts a locally
aggregated gradient:

    theta_i <- sum_j W_ij theta_j - alpha_t * f(local batch gradients of i)

The batch gradients handed to an update are evaluated at the already-mixed
copies (mix, then adapt). On topologies where one round of averaging is exact
this makes the node-mean trajectory coincide with centralized gradient
descent, which the test suite checks to tight tolerance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graphs import ConsensusWeights

OPTIMIZER_KINDS = (
    "central-sgd",
    "central-adam",
    "d-naive",
    "d-sgd",
    "d-adam",
    "d-amsgrad",
)
DO_KINDS = ("d-sgd", "d-adam", "d-amsgrad")
NAIVE_MODES = ("per-sample", "per-batch")


@dataclass
class OptimizerConfig:
    kind: str
    alpha: float = 1e-3
    decay: float = 1.0  # per-step multiplicative learning-rate factor
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    K: int = 1  # gradient-consensus rounds, d-naive only
    consensus_on_v: bool = False  # d-amsgrad: also average the second moment

    def __post_init__(self):
        if self.kind not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        # alpha = 0 is allowed as a degenerate frozen run.
        if self.alpha < 0:
            raise ValueError("learning rate must be >= 0")
        if self.decay <= 0:
            raise ValueError("decay factor must be positive")
        if not (0.0 <= self.beta1 < 1.0 and 0.0 <= self.beta2 < 1.0):
            raise ValueError("momentum factors must lie in [0, 1)")
        if self.K < 1:
            raise ValueError("consensus round count K must be >= 1")


@dataclass
class MomentState:
    """First/second moment buffers; vhat only for the max-normalized variant."""

    m: np.ndarray
    v: np.ndarray
    vhat: np.ndarray | None = None
    t: int = 0

    @classmethod
    def zeros(cls, shape, with_vhat: bool = False) -> "MomentState":
        return cls(
            m=np.zeros(shape),
            v=np.zeros(shape),
            vhat=np.zeros(shape) if with_vhat else None,
        )


def _weight_matrix(W) -> np.ndarray:
    return W.W if isinstance(W, ConsensusWeights) else np.asarray(W)


def consensus_round(values: np.ndarray, W) -> np.ndarray:
    """One neighbor-averaging round; preserves the mean exactly for doubly
    stochastic weights."""
    Wm = _weight_matrix(W)
    values = np.asarray(values, dtype=np.float64)
    if values.shape[0] != Wm.shape[0]:
        raise ValueError(
            f"need one row per node: {values.shape[0]} rows vs {Wm.shape[0]} nodes"
        )
    return Wm @ values


def run_consensus(values: np.ndarray, W, rounds: int) -> np.ndarray:
    out = np.asarray(values, dtype=np.float64)
    for _ in range(rounds):
        out = consensus_round(out, W)
    return out


def dsgd_update(thetas, W, alpha_t, batch_grads, premixed=None):
    """Mix the parameter rows, subtract the per-node summed batch gradient."""
    psi = consensus_round(thetas, W) if premixed is None else premixed
    return psi - alpha_t * batch_grads


def dadam_update(thetas, moments: MomentState, W, alpha_t, batch_grads, cfg, premixed=None):
    """Parameter consensus followed by a local bias-corrected adaptive step.

    Moments stay strictly local, so they can drift apart across nodes when
    local gradients differ.
    """
    psi = consensus_round(thetas, W) if premixed is None else premixed
    moments.t += 1
    moments.m = cfg.beta1 * moments.m + (1.0 - cfg.beta1) * batch_grads
    moments.v = cfg.beta2 * moments.v + (1.0 - cfg.beta2) * batch_grads**2
    m_hat = moments.m / (1.0 - cfg.beta1**moments.t)
    v_hat = moments.v / (1.0 - cfg.beta2**moments.t)
    return psi - alpha_t * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


def damsgrad_update(thetas, moments: MomentState, W, alpha_t, batch_grads, cfg, premixed=None):
    """Consensus on parameters and first moments, then a max-normalized step.

    vhat is a running coordinatewise maximum of the second moment and never
    decreases. No bias correction, matching the max-normalized scheme.
    """
    if moments.vhat is None:
        raise ValueError("moments must carry a vhat buffer")
    psi = consensus_round(thetas, W) if premixed is None else premixed
    moments.t += 1
    m_mixed = consensus_round(moments.m, W)
    v_prev = consensus_round(moments.v, W) if cfg.consensus_on_v else moments.v
    moments.m = cfg.beta1 * m_mixed + (1.0 - cfg.beta1) * batch_grads
    moments.v = cfg.beta2 * v_prev + (1.0 - cfg.beta2) * batch_grads**2
    moments.vhat = np.maximum(moments.vhat, moments.v)
    return psi - alpha_t * moments.m / (np.sqrt(moments.vhat) + cfg.epsilon)


def dnaive_update(thetas, W, K, alpha_t, grads, mode: str = "per-batch"):
    """Average gradient estimates by K consensus rounds, then step locally.

    per-batch consensus runs once on the locally summed batch gradients
    (n, dim). per-sample runs on each sample's gradients (B, n, dim) and sums
    the results; consensus is linear, so both modes agree up to floating-point
    reordering.
    """
    if K < 1:
        raise ValueError("consensus round count K must be >= 1")
    if mode not in NAIVE_MODES:
        raise ValueError(f"unknown naive mode {mode!r}")
    thetas = np.asarray(thetas, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if mode == "per-sample":
        if grads.ndim != 3:
            raise ValueError("per-sample mode needs (B, n, dim) gradients")
        B, n, dim = grads.shape
        # One consensus round on the (n, B*dim) block equals B independent
        # per-sample rounds.
        mixed = run_consensus(
            grads.transpose(1, 0, 2).reshape(n, B * dim), W, K
        ).reshape(n, B, dim)
        step = mixed.sum(axis=1)
    else:
        if grads.ndim != 2:
            raise ValueError("per-batch mode needs (n, dim) gradients")
        step = run_consensus(grads, W, K)
    return thetas - alpha_t * step


def central_update(theta, grad, cfg: OptimizerConfig, moments: MomentState | None = None, alpha_t=None):
    """One centralized step on a flat parameter vector."""
    alpha = cfg.alpha if alpha_t is None else alpha_t
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.asarray(grad, dtype=np.float64)
    if cfg.kind == "central-sgd":
        return theta - alpha * grad
    if cfg.kind != "central-adam":
        raise ValueError(f"{cfg.kind!r} is not a centralized kind")
    if moments is None:
        raise ValueError("adam needs a MomentState")
    moments.t += 1
    moments.m = cfg.beta1 * moments.m + (1.0 - cfg.beta1) * grad
    moments.v = cfg.beta2 * moments.v + (1.0 - cfg.beta2) * grad**2
    m_hat = moments.m / (1.0 - cfg.beta1**moments.t)
    v_hat = moments.v / (1.0 - cfg.beta2**moments.t)
    return theta - alpha * m_hat / (np.sqrt(v_hat) + cfg.epsilon)


class CentralOptimizer:
    """Stateful wrapper for the centralized baseline kinds."""

    def __init__(self, cfg: OptimizerConfig, dim: int):
        if cfg.kind not in ("central-sgd", "central-adam"):
            raise ValueError(f"{cfg.kind!r} is not a centralized kind")
        self.cfg = cfg
        self.moments = MomentState.zeros(dim) if cfg.kind == "central-adam" else None

    def step(self, theta, grad, alpha_t):
        return central_update(theta, grad, self.cfg, self.moments, alpha_t)


class DistOptimizer:
    """Network-wide state for the distributed update kinds.

    `mix` produces the working copies a mini-batch computes its gradients at;
    `apply` finishes the update from those gradients. The naive kind skips
    parameter mixing entirely.
    """

    def __init__(self, cfg: OptimizerConfig, n: int, dim: int):
        if cfg.kind not in ("d-naive", "d-sgd", "d-adam", "d-amsgrad"):
            raise ValueError(f"{cfg.kind!r} is not a distributed kind")
        self.cfg = cfg
        self.n = n
        self.dim = dim
        if cfg.kind in ("d-adam", "d-amsgrad"):
            self.moments = MomentState.zeros((n, dim), with_vhat=cfg.kind == "d-amsgrad")
        else:
            self.moments = None

    @property
    def mixes_params(self) -> bool:
        return self.cfg.kind in DO_KINDS

    def mix(self, thetas, W) -> np.ndarray:
        if self.mixes_params:
            return consensus_round(thetas, W)
        return np.asarray(thetas, dtype=np.float64)

    def apply(self, thetas, psi, W, batch_grads, alpha_t, per_sample_grads=None, naive_mode="per-batch"):
        kind = self.cfg.kind
        if kind == "d-sgd":
            return dsgd_update(thetas, W, alpha_t, batch_grads, premixed=psi)
        if kind == "d-adam":
            return dadam_update(thetas, self.moments, W, alpha_t, batch_grads, self.cfg, premixed=psi)
        if kind == "d-amsgrad":
            return damsgrad_update(thetas, self.moments, W, alpha_t, batch_grads, self.cfg, premixed=psi)
        grads = per_sample_grads if naive_mode == "per-sample" else batch_grads
        if grads is None:
            raise ValueError(f"missing gradients for naive mode {naive_mode!r}")
        return dnaive_update(thetas, W, self.cfg.K, alpha_t, grads, naive_mode)
