"""Per-node computation driven by neighbor messages.

Each agent owns one parameter copy plus forward caches, backward adjoints and
a gradient accumulator. All cross-node coupling goes through message values
handed over by the round scheduler; an agent never reads another agent's
state.

Protocol for one sample, with L layers:

* forward round l (l = 1..L): every node broadcasts its layer-(l-1) feature
  row; on delivery each node combines its own row with the weighted neighbor
  rows and applies layer l.
* backward: the top-layer adjoint needs no messages. The adjoint broadcast of
  layer l (l = L..2) lets neighbors recurse one layer down, so L-1 rounds of
  message passing complete the backward pass.

`stacked_gradients` executes the identical per-node arithmetic for all nodes
and a whole mini-batch at once; it is the fast path used by training runs and
is tested to agree with the message-level ops.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gcnn import (
    ParamSet,
    activation_derivative,
    apply_activation,
    param_slices,
)
from .graphs import Graph, ShiftOperator, metropolis_row


class ProtocolError(RuntimeError):
    """A message-passing precondition was violated."""


@dataclass(frozen=True)
class FwdFeature:
    """A node's feature row after `layer` applications (layer 0 = raw input)."""

    layer: int
    values: np.ndarray


@dataclass(frozen=True)
class BwdAdjoint:
    """Neighborhood-weight adjoint product of the tagged layer (1-based)."""

    layer: int
    values: np.ndarray


@dataclass(frozen=True)
class ConsensusChunk:
    """A contiguous slice of a flat per-node vector being averaged."""

    offset: int
    values: np.ndarray


@dataclass(frozen=True)
class Degree:
    value: int


@dataclass(frozen=True)
class Message:
    sender: int
    round: int
    payload: object


class AgentState:
    """State exclusively owned by one node."""

    def __init__(self, node_id, params, shift_row, neighbor_degrees, degree=None):
        self.node_id = int(node_id)
        self.params: ParamSet = params
        # shift_row holds S_ij for j in the closed neighborhood, self included
        # (possibly zero). Neighbors come from the topology, not the support.
        self.shift_row = dict(shift_row)
        if self.node_id not in self.shift_row:
            raise ValueError("shift_row must include the node's own entry")
        self.neighbor_ids = tuple(sorted(j for j in self.shift_row if j != self.node_id))
        self.neighbor_degrees = dict(neighbor_degrees)
        self.degree = len(self.neighbor_ids) if degree is None else int(degree)
        self.grad_accum = np.zeros(params.dim)
        self.opt_state = None
        self._slices = param_slices(params.specs)
        self._fwd: dict[int, dict] = {}
        self._bwd: dict[int, dict] = {}
        self._sample_grads: dict[int, np.ndarray] = {}
        self._fwd_sample: int | None = None
        self._bwd_sample: int | None = None
        self._completed: int | None = None

    @property
    def n_layers(self) -> int:
        return self.params.n_layers

    def w_row(self) -> dict[int, float]:
        """Own consensus weights, computed from local degree knowledge."""
        row = metropolis_row(self.degree, self.neighbor_degrees)
        row[self.node_id] = 1.0 - sum(row.values())
        return row

    def begin_sample(self, sample: int, x0: np.ndarray) -> None:
        x0 = np.asarray(x0, dtype=np.float64)
        if x0.shape != (self.params.specs[0].g_in,):
            raise ValueError(f"feature row must be ({self.params.specs[0].g_in},)")
        self._fwd[sample] = {"x": [x0.copy()], "h": {}, "a": {}}
        self._fwd_sample = sample

    def reset_accumulator(self) -> None:
        self.grad_accum[:] = 0.0
        self._fwd.clear()
        self._bwd.clear()
        self._sample_grads.clear()
        self._fwd_sample = None
        self._bwd_sample = None
        self._completed = None


def _gather(state, inbox, payload_type, tag_layer, width):
    got = {}
    for msg in inbox:
        payload = msg.payload
        if not isinstance(payload, payload_type):
            raise ProtocolError(f"unexpected payload {type(payload).__name__}")
        if payload.layer != tag_layer:
            raise ProtocolError(
                f"payload for layer {payload.layer}, expected {tag_layer}"
            )
        if payload.values.shape != (width,):
            raise ProtocolError(
                f"payload width {payload.values.shape} != ({width},)"
            )
        got[msg.sender] = payload.values
    missing = set(state.neighbor_ids) - set(got)
    if missing:
        raise ProtocolError(f"node {state.node_id} missing messages from {sorted(missing)}")
    return got


def local_forward_layer(state: AgentState, l: int, inbox, s_row=None):
    """Apply layer l from the node's own row plus received neighbor rows.

    Returns the new feature row to broadcast, or the scalar prediction after
    the last layer.
    """
    L = state.n_layers
    if not 1 <= l <= L:
        raise ValueError(f"layer {l} out of range 1..{L}")
    sample = state._fwd_sample
    if sample is None:
        raise ProtocolError("begin_sample must run before the forward pass")
    fw = state._fwd[sample]
    if len(fw["x"]) != l:
        raise ProtocolError(f"forward layer {l} out of order")
    row = s_row if s_row is not None else state.shift_row
    spec = state.params.specs[l - 1]
    x_prev = fw["x"][l - 1]
    features = _gather(state, inbox, FwdFeature, l - 1, spec.g_in)
    agg = row[state.node_id] * x_prev
    for j in state.neighbor_ids:
        agg = agg + row[j] * features[j]
    h = x_prev @ state.params.theta0[l - 1] + agg @ state.params.theta1[l - 1]
    x_new = apply_activation(spec, h)
    fw["a"][l] = agg
    fw["h"][l] = h
    fw["x"].append(x_new)
    if l < L:
        return FwdFeature(l, x_new.copy())
    return float(x_new[0])


def local_backward_init(state: AgentState, y_i: float, yhat_i: float) -> None:
    """Seed the backward recursion with the summed-loss residual adjoint."""
    sample = state._fwd_sample
    if sample is None or len(state._fwd[sample]["x"]) != state.n_layers + 1:
        raise ProtocolError("forward pass must finish before backward starts")
    state._bwd[sample] = {
        "z": np.array([2.0 * (yhat_i - y_i)]),
        "q": None,
        "layer": state.n_layers,
    }
    state._sample_grads = {sample: np.zeros(state.params.dim)}
    state._bwd_sample = sample


def local_backward_layer(state: AgentState, l: int, inbox):
    """Run the backward step of layer l and emit its adjoint broadcast.

    For l = L the inbox is empty (the top adjoint is local). For l < L the
    inbox must hold every neighbor's layer-(l+1) adjoint product; each is
    scaled by the symmetric shift entry before entering the recursion. Layer
    partials are accumulated into the per-sample buffer and grad_accum. The
    returned adjoint (None for l = 1) is what neighbors need to recurse past
    layer l.
    """
    sample = state._bwd_sample
    if sample is None:
        raise ProtocolError("backward pass not initialized")
    st = state._bwd[sample]
    if st["layer"] != l:
        raise ProtocolError(f"backward layer {l} out of order, expected {st['layer']}")
    params = state.params
    L = state.n_layers
    if l == L:
        if inbox:
            raise ProtocolError("top backward layer consumes no messages")
        z = st["z"]
    else:
        spec_up = params.specs[l]
        adjoints = _gather(state, inbox, BwdAdjoint, l + 1, spec_up.g_in)
        q_up = st["q"]
        z = params.theta0[l] @ q_up + state.shift_row[state.node_id] * (
            params.theta1[l] @ q_up
        )
        for j in state.neighbor_ids:
            z = z + state.shift_row[j] * adjoints[j]
    fw = state._fwd[sample]
    spec = params.specs[l - 1]
    q = z * activation_derivative(spec, fw["h"][l])
    d0 = np.outer(fw["x"][l - 1], q)
    d1 = np.outer(fw["a"][l], q)
    sl0, sl1 = state._slices[l - 1]
    buf = state._sample_grads[sample]
    buf[sl0] += d0.ravel()
    buf[sl1] += d1.ravel()
    state.grad_accum[sl0] += d0.ravel()
    state.grad_accum[sl1] += d1.ravel()
    st["q"] = q
    st["layer"] = l - 1
    if l >= 2:
        return BwdAdjoint(l, (params.theta1[l - 1] @ q).copy())
    state._completed = sample
    del state._fwd[sample]
    del state._bwd[sample]
    if state._fwd_sample == sample:
        state._fwd_sample = None
    state._bwd_sample = None
    return None


def local_gradient(state: AgentState) -> np.ndarray:
    """Flat per-sample gradient of the summed loss w.r.t. this node's copy."""
    sample = state._completed
    if sample is None or sample not in state._sample_grads:
        raise ProtocolError("no completed backward pass to read a gradient from")
    return state._sample_grads[sample].copy()


def make_agents(graph: Graph, shift: ShiftOperator, params: ParamSet) -> list[AgentState]:
    """One agent per node, each with its own parameter copy and shift row."""
    S = shift.S
    agents = []
    for i in range(graph.n):
        row = {i: float(S[i, i])}
        for j in graph.neighbors(i):
            row[j] = float(S[i, j])
        nbr_deg = {j: graph.degree(j) for j in graph.neighbors(i)}
        agents.append(AgentState(i, params.copy(), row, nbr_deg, graph.degree(i)))
    return agents


@dataclass
class StackedResult:
    yhat: np.ndarray  # (B, n)
    grads: np.ndarray | None  # (n, dim) or (B, n, dim)


def stacked_gradients(
    specs,
    theta0_stack,
    theta1_stack,
    S: np.ndarray,
    X: np.ndarray,
    y: np.ndarray | None,
    per_sample: bool = False,
    forward_only: bool = False,
) -> StackedResult:
    """Bulk-synchronous execution of every node's local forward/backward steps.

    theta*_stack hold each node's own weight copy, one (n, g_in, g_out) array
    per layer; nodes may hold different copies. X is (B, n, g0), y is (B, n).
    Gradients are per-node flattened sensitivities of the summed per-node
    losses, summed over the batch unless per_sample is set.
    """
    specs = tuple(specs)
    S = np.asarray(S, dtype=np.float64)
    X = np.asarray(X, dtype=np.float64)
    n = S.shape[0]
    B = X.shape[0]
    if X.shape != (B, n, specs[0].g_in):
        raise ValueError(f"features must be (B, {n}, {specs[0].g_in}), got {X.shape}")
    caches = []
    cur = X
    for k, spec in enumerate(specs):
        agg = np.matmul(S, cur)
        h = np.einsum("bni,nio->bno", cur, theta0_stack[k]) + np.einsum(
            "bni,nio->bno", agg, theta1_stack[k]
        )
        caches.append((cur, agg, h))
        cur = apply_activation(spec, h)
    yhat = cur[..., 0].copy()
    if forward_only:
        return StackedResult(yhat, None)

    y = np.asarray(y, dtype=np.float64)
    if y.shape != (B, n):
        raise ValueError(f"labels must be ({B}, {n}), got {y.shape}")
    dim = sum(2 * s.g_in * s.g_out for s in specs)
    slices = param_slices(specs)
    grads = np.zeros((B, n, dim)) if per_sample else np.zeros((n, dim))
    s_diag = np.diag(S).copy()
    s_off_t = S.T.copy()
    np.fill_diagonal(s_off_t, 0.0)
    z = (2.0 * (yhat - y))[..., None]
    for k in reversed(range(len(specs))):
        xprev, agg, h = caches[k]
        q = z * activation_derivative(specs[k], h)
        if per_sample:
            d0 = np.einsum("bni,bno->bnio", xprev, q)
            d1 = np.einsum("bni,bno->bnio", agg, q)
            grads[:, :, slices[k][0]] = d0.reshape(B, n, -1)
            grads[:, :, slices[k][1]] = d1.reshape(B, n, -1)
        else:
            d0 = np.einsum("bni,bno->nio", xprev, q)
            d1 = np.einsum("bni,bno->nio", agg, q)
            grads[:, slices[k][0]] = d0.reshape(n, -1)
            grads[:, slices[k][1]] = d1.reshape(n, -1)
        if k > 0:
            msg = np.einsum("nio,bno->bni", theta1_stack[k], q)
            z = (
                np.einsum("nio,bno->bni", theta0_stack[k], q)
                + s_diag[None, :, None] * msg
                + np.matmul(s_off_t, msg)
            )
    return StackedResult(yhat, grads)


def stack_flat_params(specs, flat_stack: np.ndarray):
    """Reshape per-node flat parameter rows into per-layer weight stacks."""
    specs = tuple(specs)
    n = flat_stack.shape[0]
    theta0, theta1 = [], []
    for spec, (sl0, sl1) in zip(specs, param_slices(specs)):
        theta0.append(flat_stack[:, sl0].reshape(n, spec.g_in, spec.g_out))
        theta1.append(flat_stack[:, sl1].reshape(n, spec.g_in, spec.g_out))
    return theta0, theta1
