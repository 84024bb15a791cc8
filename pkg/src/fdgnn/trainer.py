"""End-to-end training loops: distributed protocol runs and the centralized baseline.

Both loops log per-minibatch metrics against a cumulative message-passing
round axis. Distributed strategies charge their full schedule; the
centralized baseline charges the L*B forward-pass rounds per batch so the
axes are comparable.

Gradient scaling convention: a node's batch gradient is the plain sum of its
per-sample local gradients, and the 1/n averaging across nodes happens
through consensus. The centralized baseline therefore steps on the sum over
the batch of per-sample mean-squared-error gradients, making learning rates
directly comparable between the two loops.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .datagen import (
    DatasetSpec,
    Sample,
    default_teacher_specs,
    draw_features,
    make_dataset,
)
from .gcnn import LayerSpec, ParamSet, central_gradient, forward, init_params, mse_loss
from .graphs import (
    Graph,
    build_shift,
    generate_ba,
    generate_er,
    load_edge_list,
    metropolis_weights,
)
from .netsim import Network, run_minibatch
from .optim import (
    DO_KINDS,
    CentralOptimizer,
    OptimizerConfig,
    OPTIMIZER_KINDS,
)
from .netsim import STRATEGIES, check_pairing

GRAPH_KINDS = ("ba", "er", "file")
TOPOLOGY_MODES = ("fixed", "redraw-per-batch")
ENGINES = ("agents", "stacked")


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the last finite consensus average."""

    def __init__(self, message, step, last_params):
        super().__init__(message)
        self.step = step
        self.last_params = last_params


@dataclass
class RunConfig:
    """Everything one training run depends on; `seed` governs all randomness."""

    graph: str = "ba"
    n: int = 30
    m: int = 2
    p: float = 0.3
    graph_file: str | None = None
    shift: str = "normalized-adjacency"
    layers: int = 2
    hidden: int = 8
    n_train: int = 300
    n_test: int = 100
    noise_var: float = 0.01
    teacher_hidden: int = 16
    optimizer: str = "d-sgd"
    strategy: str = "piggyback-do"
    alpha: float = 1e-3
    decay: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    K: int = 1
    consensus_on_v: bool = False
    batch: int = 30
    epochs: int = 300
    eval_every: int = 10
    seed: int = 0
    topology_mode: str = "fixed"
    engine: str = "stacked"
    track_trace: bool = False

    def validate(self) -> None:
        if self.graph not in GRAPH_KINDS:
            raise ValueError(f"unknown graph kind {self.graph!r}")
        if self.graph == "file" and not self.graph_file:
            raise ValueError("graph kind 'file' needs graph_file")
        if self.optimizer not in OPTIMIZER_KINDS:
            raise ValueError(f"unknown optimizer {self.optimizer!r}")
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}")
        if self.strategy == "fwd-only":
            raise ValueError("fwd-only is an accounting baseline, not a training strategy")
        if self.optimizer not in ("central-sgd", "central-adam"):
            check_pairing(self.strategy, self.optimizer)
        if self.layers < 1:
            raise ValueError("need at least one layer")
        if self.batch < 1 or self.n_train < self.batch:
            raise ValueError("need n_train >= batch >= 1")
        if self.epochs < 1 or self.eval_every < 1:
            raise ValueError("epochs and eval_every must be >= 1")
        if self.topology_mode not in TOPOLOGY_MODES:
            raise ValueError(f"unknown topology mode {self.topology_mode!r}")
        if self.topology_mode == "redraw-per-batch" and self.graph == "file":
            raise ValueError("cannot redraw topology for a fixed graph file")
        if self.engine not in ENGINES:
            raise ValueError(f"unknown engine {self.engine!r}")

    def optimizer_config(self) -> OptimizerConfig:
        return OptimizerConfig(
            kind=self.optimizer,
            alpha=self.alpha,
            decay=self.decay,
            beta1=self.beta1,
            beta2=self.beta2,
            epsilon=self.epsilon,
            K=self.K,
            consensus_on_v=self.consensus_on_v,
        )

    def model_specs(self, g0: int = 10) -> tuple[LayerSpec, ...]:
        widths = [g0] + [self.hidden] * (self.layers - 1) + [1]
        specs = []
        for k in range(self.layers):
            act = "identity" if k == self.layers - 1 else "leaky-relu"
            specs.append(LayerSpec(widths[k], widths[k + 1], act))
        return tuple(specs)


@dataclass(frozen=True)
class MetricsRecord:
    t: int
    rounds: int
    train_mse: float
    test_mse: float
    consensus_gap: float
    ledger_snapshot: tuple[int, int, int]


@dataclass
class MetricsLog:
    records: list = field(default_factory=list)

    def to_csv(self, path: str | Path) -> None:
        lines = ["t,rounds,train_mse,test_mse,consensus_gap"]
        for r in self.records:
            lines.append(
                f"{r.t},{r.rounds},{r.train_mse!r},{r.test_mse!r},{r.consensus_gap!r}"
            )
        Path(path).write_text("\n".join(lines) + "\n")

    @property
    def final(self) -> MetricsRecord:
        return self.records[-1]


@dataclass
class TrainResult:
    node_params: list
    theta_star: ParamSet
    log: MetricsLog
    ledger: object | None = None


def _spawn_seeds(seed: int, k: int) -> list[int]:
    return [int(c.generate_state(1)[0]) for c in np.random.SeedSequence(seed).spawn(k)]


def _build_graph(config: RunConfig, seed: int) -> Graph:
    if config.graph == "ba":
        return generate_ba(config.n, config.m, seed)
    if config.graph == "er":
        return generate_er(config.n, config.p, seed)
    g = load_edge_list(config.graph_file)
    if not g.is_connected():
        raise ValueError(f"graph file {config.graph_file} is not connected")
    return g


def evaluate_mse(params: ParamSet, shift, samples) -> float:
    """Mean over samples of the node-mean squared error under `params`."""
    total = 0.0
    for s in samples:
        yhat, _ = forward(params, shift, s.X)
        total += mse_loss(s.y, yhat)
    return total / len(samples)


def _setup(config: RunConfig):
    config.validate()
    graph_seed, data_seed, init_seed, redraw_seed = _spawn_seeds(config.seed, 4)
    graph = _build_graph(config, graph_seed)
    shift = build_shift(graph, config.shift)
    dspec = DatasetSpec(
        n_samples=config.n_train + config.n_test,
        teacher_specs=default_teacher_specs(10, config.teacher_hidden),
        noise_var=config.noise_var,
        seed=data_seed,
    )
    samples, teacher = make_dataset(graph, dspec, config.shift)
    train = samples[: config.n_train]
    test = samples[config.n_train :]
    specs = config.model_specs(dspec.g0)
    params0 = init_params(specs, "glorot", init_seed)
    return graph, shift, dspec, teacher, train, test, specs, params0, redraw_seed


def _redraw(config: RunConfig, teacher, dspec, redraw_rng):
    """Fresh topology and batch for dynamic-topology training."""
    graph = _build_graph(config, int(redraw_rng.integers(2**31)))
    shift = build_shift(graph, config.shift)
    sigma = np.sqrt(dspec.noise_var)
    batch = []
    for _ in range(config.batch):
        X = draw_features(dspec.feature_plan, graph.n, redraw_rng)
        clean, _ = forward(teacher, shift, X)
        noise = redraw_rng.normal(0.0, sigma, graph.n) if sigma > 0 else 0.0
        batch.append(Sample(X=X, y=clean + noise))
    return graph, shift, batch


def train_distributed(config: RunConfig, on_update=None) -> TrainResult:
    """Run the full synchronous-round protocol for `epochs` passes.

    Returns the per-node parameter copies, their average, and the metrics
    log. Test evaluation uses the node-average parameters in a dense forward
    pass; it is instrumentation, not part of the protocol.
    """
    if config.optimizer in ("central-sgd", "central-adam"):
        raise ValueError("use train_centralized for the centralized kinds")
    graph, shift, dspec, teacher, train, test, specs, params0, redraw_seed = _setup(config)
    weights = metropolis_weights(graph)
    net = Network(
        graph, shift, weights, params0, config.optimizer_config(),
        track_trace=config.track_trace,
    )
    eval_shift = shift
    redraw_rng = np.random.default_rng(redraw_seed)
    log = MetricsLog()
    batches = config.n_train // config.batch
    total = config.epochs * batches
    test_mse = evaluate_mse(params0, eval_shift, test)
    last_good = params0
    t = 0
    for _ in range(config.epochs):
        for bi in range(batches):
            if config.topology_mode == "redraw-per-batch":
                new_graph, new_shift, batch = _redraw(config, teacher, dspec, redraw_rng)
                net.set_topology(new_graph, new_shift, metropolis_weights(new_graph))
            else:
                batch = train[bi * config.batch : (bi + 1) * config.batch]
            alpha_t = config.alpha * config.decay**t
            result = run_minibatch(
                net, batch, config.strategy, alpha_t=alpha_t, engine=config.engine
            )
            t += 1
            if not np.isfinite(result.train_mse):
                raise TrainingDiverged(
                    f"non-finite training loss at update {t}", t, last_good
                )
            if t % config.eval_every == 0 or t == total:
                theta_bar = net.mean_params()
                test_mse = evaluate_mse(theta_bar, eval_shift, test)
                last_good = theta_bar
            log.records.append(
                MetricsRecord(
                    t,
                    net.ledger.rounds,
                    result.train_mse,
                    test_mse,
                    net.consensus_gap(),
                    net.ledger.snapshot(),
                )
            )
            if on_update is not None:
                on_update(t, net)
    return TrainResult(
        [a.params.copy() for a in net.agents], net.mean_params(), log, net.ledger
    )


def train_centralized(config: RunConfig, on_update=None) -> TrainResult:
    """Mini-batch baseline on a single shared parameter vector.

    The round axis charges L*B forward-pass rounds per mini-batch.
    """
    if config.optimizer not in ("central-sgd", "central-adam"):
        raise ValueError("use train_distributed for the distributed kinds")
    graph, shift, dspec, teacher, train, test, specs, params0, redraw_seed = _setup(config)
    theta = params0.flatten()
    opt = CentralOptimizer(config.optimizer_config(), theta.size)
    eval_shift = shift
    redraw_rng = np.random.default_rng(redraw_seed)
    log = MetricsLog()
    batches = config.n_train // config.batch
    total = config.epochs * batches
    rounds = 0
    rounds_per_batch = config.layers * config.batch
    test_mse = evaluate_mse(params0, eval_shift, test)
    last_good = params0
    t = 0
    for _ in range(config.epochs):
        for bi in range(batches):
            if config.topology_mode == "redraw-per-batch":
                graph, shift, batch = _redraw(config, teacher, dspec, redraw_rng)
            else:
                batch = train[bi * config.batch : (bi + 1) * config.batch]
            params = ParamSet.from_flat(specs, theta)
            grad = np.zeros_like(theta)
            batch_mse = 0.0
            for s in batch:
                yhat, _ = forward(params, shift, s.X)
                batch_mse += mse_loss(s.y, yhat)
                grad += central_gradient(params, shift, s.X, s.y)
            batch_mse /= len(batch)
            alpha_t = config.alpha * config.decay**t
            theta = opt.step(theta, grad, alpha_t)
            t += 1
            rounds += rounds_per_batch
            if not np.isfinite(batch_mse):
                raise TrainingDiverged(
                    f"non-finite training loss at update {t}", t, last_good
                )
            if t % config.eval_every == 0 or t == total:
                cur = ParamSet.from_flat(specs, theta)
                test_mse = evaluate_mse(cur, eval_shift, test)
                last_good = cur
            log.records.append(
                MetricsRecord(t, rounds, batch_mse, test_mse, 0.0, (rounds, 0, 0))
            )
            if on_update is not None:
                on_update(t, theta)
    final = ParamSet.from_flat(specs, theta)
    return TrainResult([final], final, log)
