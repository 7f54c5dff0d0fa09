"""Discrete-time execution of federated delayed averaging.

Devices run full-batch gradient descent on their local losses. Local models
are sent to the aggregator at times ``k*tau - delta``; the averaged model
arrives back at ``k*tau``, where each device keeps ``1 - alpha`` of its own
post-step model and takes ``alpha`` of the delayed global one.

Time runs over ``(-delta, K*tau - delta]``. Period ``k`` covers
``k*tau - delta + 1 .. (k+1)*tau - delta`` and starts from the global
snapshot ``w(k*tau - delta)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .artifacts import write_csv
from .errors import ConfigError, LogicError, NumericalError
from .ml_core import (Dataset, FederatedProblem, LossModel, flat_norm, gd_step, validate_weights,
                      weighted_sum)

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class SimConfig:
    N: int
    tau: int
    delta: int
    alpha: float
    eta: float
    K: int
    init: np.ndarray | None = None
    seed: int = 0

    def __post_init__(self):
        for name in ("N", "tau", "delta", "K", "seed"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, (int, np.integer)):
                raise ConfigError(f"must be an integer, got {v!r}", f"sim.{name}")
            object.__setattr__(self, name, int(v))
        if self.N < 1:
            raise ConfigError("need at least one device", "sim.N")
        if self.tau < 1:
            raise ConfigError("aggregation period must be at least 1", "sim.tau")
        if not 0 <= self.delta <= self.tau:
            raise ConfigError(f"delay must satisfy 0 <= delta <= tau={self.tau}, got {self.delta}", "sim.delta")
        if self.K < 1:
            raise ConfigError("need at least one aggregation period", "sim.K")
        if not 0.0 <= float(self.alpha) <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}", "sim.alpha")
        if not float(self.eta) > 0:
            raise ConfigError(f"learning rate must be positive, got {self.eta}", "sim.eta")
        object.__setattr__(self, "alpha", float(self.alpha))
        object.__setattr__(self, "eta", float(self.eta))
        if self.init is not None:
            init = np.array(self.init, dtype=np.float64)
            if not np.all(np.isfinite(init)):
                raise ConfigError("initial parameters must be finite", "sim.init")
            init.setflags(write=False)
            object.__setattr__(self, "init", init)

    @property
    def T(self) -> int:
        return self.K * self.tau

    def init_for(self, problem: FederatedProblem) -> np.ndarray:
        if self.init is None:
            return problem.init_params()
        if self.init.shape != problem.param_shape:
            raise ConfigError(f"init shape {self.init.shape} does not match model shape {problem.param_shape}",
                              "sim.init")
        return np.array(self.init)

    def to_dict(self) -> dict:
        return {"N": self.N, "tau": self.tau, "delta": self.delta, "alpha": self.alpha, "eta": self.eta,
                "K": self.K, "seed": self.seed,
                "init": None if self.init is None else self.init.tolist()}


@dataclass(frozen=True)
class Timeline:
    tau: int
    delta: int
    K: int

    @classmethod
    def of(cls, config: SimConfig) -> "Timeline":
        return cls(config.tau, config.delta, config.K)

    @property
    def t_min(self) -> int:
        return -self.delta

    @property
    def t_max(self) -> int:
        return self.K * self.tau - self.delta

    @property
    def sync_times(self) -> list[int]:
        return [k * self.tau for k in range(self.K)]

    @property
    def send_times(self) -> list[int]:
        return [k * self.tau - self.delta for k in range(self.K)]

    def ticks(self) -> range:
        return range(self.t_min + 1, self.t_max + 1)

    def period(self, k: int) -> range:
        return range(k * self.tau - self.delta + 1, (k + 1) * self.tau - self.delta + 1)

    def period_of(self, t: int) -> int:
        if not self.t_min < t <= self.t_max:
            raise LogicError(f"t={t} lies outside ({self.t_min}, {self.t_max}]")
        return (t + self.delta - 1) // self.tau

    def sync_index(self, t: int) -> int | None:
        """k when t = k*tau is a synchronization tick, else None."""
        if t % self.tau == 0 and 0 <= t // self.tau < self.K and self.t_min < t <= self.t_max:
            return t // self.tau
        return None

    def send_index(self, t: int) -> int | None:
        """k in 0..K when t = k*tau - delta (k = K is the final global model)."""
        s = t + self.delta
        if s % self.tau == 0 and 0 <= s // self.tau <= self.K:
            return s // self.tau
        return None

    def alpha_t(self, t: int, alpha: float) -> float:
        return alpha if self.sync_index(t) is not None else 0.0


def _check_finite(w, device, t):
    if not np.all(np.isfinite(w)):
        raise NumericalError(f"non-finite parameters on device {device} at t={t}")
    return w


def local_update(device_state, model: LossModel, dataset: Dataset, eta: float, *, device=None, t=None):
    """One full-batch gradient step on the device's own loss."""
    new = gd_step(lambda w: model.grad(dataset, w), device_state, eta)
    return _check_finite(new, device, t)


def _mix(delayed_global, post_step, alpha: float):
    return alpha * delayed_global + (1.0 - alpha) * post_step


def sync_update(local, delayed_global, model: LossModel, dataset: Dataset, eta: float, alpha: float, *,
                device=None, t=None):
    """Local step followed by the alpha-weighted merge with the delayed global model."""
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must lie in [0, 1], got {alpha}")
    return _mix(delayed_global, local_update(local, model, dataset, eta, device=device, t=t), alpha)


def aggregate(device_params, weights):
    """Weighted average of device parameters, summed in device order."""
    weights = np.asarray(weights, dtype=np.float64)
    if len(device_params) != len(weights):
        raise ConfigError(f"{len(device_params)} device models for {len(weights)} weights")
    return weighted_sum(weights, list(device_params))


def select_final(snapshots) -> tuple[int, np.ndarray]:
    """Index and parameters of the lowest-loss snapshot; ties go to the earliest."""
    if not snapshots:
        raise LogicError("cannot select a final model from an empty snapshot list")
    best = 0
    for k, (_, loss) in enumerate(snapshots):
        if loss < snapshots[best][1]:
            best = k
    return best, snapshots[best][0]


@dataclass(eq=False)
class _Recorder:
    config: SimConfig
    weights: np.ndarray
    history: np.ndarray
    t_filled: int
    presync: dict = field(default_factory=dict)

    @property
    def t_min(self) -> int:
        return -self.config.delta


def snapshot_for_sync(record, k: int) -> np.ndarray:
    """The global model w(k*tau - delta) that devices receive at k*tau.

    With a positive delay this is the average of the device models at the
    send time. With zero delay it averages the post-step, pre-merge values
    at k*tau, so alpha = 1 reduces to plain FedAvg. ``k = 0`` always yields
    the shared initialization.
    """
    cfg = record.config
    if k < 0:
        raise LogicError(f"snapshot index must be non-negative, got {k}")
    if k == 0:
        return np.array(record.history[0, 0])
    t = k * cfg.tau - cfg.delta
    if t < record.t_min:
        raise LogicError(f"snapshot time {t} precedes t_min={record.t_min}")
    if t > record.t_filled:
        raise LogicError(f"snapshot at t={t} requested before it was recorded (last t={record.t_filled})")
    if k in record.presync:
        return aggregate(record.presync[k], record.weights)
    return aggregate(record.history[:, t - record.t_min], record.weights)


@dataclass(frozen=True, eq=False)
class Trajectory:
    """Full history of one run.

    ``history[i, t - t_min]`` is device i at time t. ``globals_[k]`` is the
    global model at send time ``k*tau - delta`` for k = 0..K; the first K of
    these are the candidates for the final model and ``globals_[K]`` is the
    model at the end of training.
    """

    config: SimConfig
    weights: np.ndarray
    history: np.ndarray
    globals_: np.ndarray
    global_losses: np.ndarray
    surrogate_losses: np.ndarray
    presync: dict
    sync_events: tuple
    selected_k: int

    @property
    def timeline(self) -> Timeline:
        return Timeline.of(self.config)

    @property
    def t_min(self) -> int:
        return -self.config.delta

    @property
    def t_filled(self) -> int:
        return self.config.T - self.config.delta

    @property
    def snapshots(self) -> np.ndarray:
        return self.globals_[: self.config.K]

    @property
    def snapshot_times(self) -> list[int]:
        return [k * self.config.tau - self.config.delta for k in range(self.config.K + 1)]

    @property
    def final_global(self) -> np.ndarray:
        return self.globals_[self.config.K]

    @property
    def w_final(self) -> np.ndarray:
        return self.globals_[self.selected_k]

    def device(self, i: int, t: int) -> np.ndarray:
        return self.history[i, t - self.t_min]

    def devices_at(self, t: int) -> np.ndarray:
        if not self.t_min <= t <= self.t_filled:
            raise LogicError(f"t={t} outside [{self.t_min}, {self.t_filled}]")
        return self.history[:, t - self.t_min]

    def global_at(self, t: int) -> np.ndarray:
        k = self.timeline.send_index(t)
        if k is not None:
            return self.globals_[k]
        return aggregate(self.devices_at(t), self.weights)


def run(config: SimConfig, problem: FederatedProblem, *, beta: float | None = None) -> Trajectory:
    """Execute the protocol for K periods and return the recorded trajectory."""
    if config.N != problem.N:
        raise ConfigError(f"config has N={config.N} but the problem has {problem.N} devices", "sim.N")
    weights = validate_weights(problem.weights, problem.N)
    if beta is None:
        beta = problem.smoothness_upper_bound()
    if beta > 0 and config.eta >= 2.0 / beta:
        log.warning("eta=%g violates eta < 2/beta (beta=%g); bounds do not apply", config.eta, beta)

    tl = Timeline.of(config)
    init = config.init_for(problem)
    N, T = problem.N, config.T
    history = np.empty((N, T + 1) + init.shape)
    history[:, 0] = init
    rec = _Recorder(config, weights, history, tl.t_min)
    globals_ = [np.array(init)]
    sync_events = [(0, 0)] if config.delta == 0 else []
    loss, datasets, eta, alpha = problem.loss, problem.datasets, config.eta, config.alpha

    for t in tl.ticks():
        idx = t - tl.t_min
        prev = history[:, idx - 1]
        try:
            post = [local_update(prev[i], loss, datasets[i], eta, device=i, t=t) for i in range(N)]
        except NumericalError as exc:
            raise NumericalError(f"{exc}; step {idx}, max parameter norm before the step "
                                 f"{max(flat_norm(p) for p in prev):.6g}") from None
        k = tl.sync_index(t)
        if k is not None:
            if config.delta == 0:
                rec.presync[k] = np.stack(post)
                rec.t_filled = t
                globals_.append(snapshot_for_sync(rec, k))
            delayed = globals_[k]
            post = [_mix(delayed, p, alpha) for p in post]
            sync_events.append((k, t))
        history[:, idx] = post
        rec.t_filled = t
        ks = tl.send_index(t)
        if ks is not None and ks >= 1 and ks not in rec.presync:
            globals_.append(snapshot_for_sync(rec, ks))

    globals_arr = np.stack(globals_)
    if len(globals_arr) != config.K + 1:
        raise LogicError(f"captured {len(globals_arr)} global snapshots, expected {config.K + 1}")
    g_losses = np.array([problem.global_loss(w) for w in globals_arr])
    surrogate = []
    for k in range(config.K + 1):
        devs = rec.presync[k] if k in rec.presync else history[:, k * config.tau]
        surrogate.append(float(weighted_sum(weights, [problem.local_loss(i, devs[i]) for i in range(N)])))
    selected, _ = select_final([(globals_arr[k], g_losses[k]) for k in range(config.K)])
    history.setflags(write=False)
    return Trajectory(config, weights, history, globals_arr, g_losses, np.array(surrogate),
                      dict(rec.presync), tuple(sync_events), selected)


@dataclass(frozen=True, eq=False)
class AuxTrajectory:
    """Per-period centralized gradient descent ``c_k`` started at ``w(k*tau - delta)``.

    ``paths[k, j]`` is ``c_k(k*tau - delta + j)`` for j = 0..tau.
    """

    tau: int
    delta: int
    paths: np.ndarray

    def start_time(self, k: int) -> int:
        return k * self.tau - self.delta

    def at(self, k: int, t: int) -> np.ndarray:
        j = t - self.start_time(k)
        if not 0 <= j <= self.tau:
            raise LogicError(f"t={t} is outside period {k} of the auxiliary trajectory")
        return self.paths[k, j]


def aux_trajectory(trajectory: Trajectory, problem: FederatedProblem, eta: float | None = None) -> AuxTrajectory:
    cfg = trajectory.config
    eta = cfg.eta if eta is None else eta
    paths = np.empty((cfg.K, cfg.tau + 1) + trajectory.globals_.shape[1:])
    for k in range(cfg.K):
        c = trajectory.globals_[k]
        paths[k, 0] = c
        for j in range(1, cfg.tau + 1):
            c = gd_step(problem.global_grad, c, eta)
            paths[k, j] = c
    if not np.all(np.isfinite(paths)):
        raise NumericalError("auxiliary centralized trajectory became non-finite")
    paths.setflags(write=False)
    return AuxTrajectory(cfg.tau, cfg.delta, paths)


# -- export --------------------------------------------------------------------

TRAJECTORY_HEADER = ("t", "device_id", "param_norm", "local_loss")
SNAPSHOT_HEADER = ("k", "t_snapshot", "global_loss", "surrogate_loss", "is_selected")


def write_trajectory_csv(trajectory: Trajectory, problem: FederatedProblem, path) -> Path:
    hist = trajectory.history
    N, steps = hist.shape[:2]
    norms = np.linalg.norm(hist.reshape(N, steps, -1), axis=2)
    losses = np.stack([problem.loss.values_batch(problem.datasets[i], hist[i]) for i in range(N)])
    rows = ((trajectory.t_min + j, i, norms[i, j], losses[i, j]) for j in range(steps) for i in range(N))
    return write_csv(path, TRAJECTORY_HEADER, rows)


def write_snapshot_csv(trajectory: Trajectory, path) -> Path:
    cfg = trajectory.config
    rows = [(k, k * cfg.tau - cfg.delta, trajectory.global_losses[k], trajectory.surrogate_losses[k],
             k == trajectory.selected_k) for k in range(cfg.K)]
    return write_csv(path, SNAPSHOT_HEADER, rows)
