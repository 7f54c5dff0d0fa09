"""Data sources, non-iid partitioning, accuracy metrics and experiment drivers."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import struct
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FedDelAvgError, ParseError, UnsupportedMetricError
from .fed_sim import SimConfig, Trajectory, aux_trajectory, run
from .ml_core import (CrossEntropy, Dataset, FederatedProblem, LossModel, ProblemConstants,
                      compute_reference_optimum, device_weights, estimate_constants, get_loss)

log = logging.getLogger(__name__)

DEFAULT_TARGET_ACCURACY = 0.80
IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


# -- data sources ----------------------------------------------------------------


def _class_means(classes: int, dim: int, separation: float, rng) -> np.ndarray:
    # orthonormal directions scaled so every pair of means is `separation` apart
    if classes <= dim:
        q, _ = np.linalg.qr(rng.standard_normal((dim, classes)))
        return q.T * (separation / math.sqrt(2.0))
    dirs = rng.standard_normal((classes, dim))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs * (separation / math.sqrt(2.0))


def generate_synthetic(classes: int, dim: int, separation: float, count: int, seed: int = 0, *,
                       anisotropy: float = 1.0, offset: float = 0.0) -> Dataset:
    """Unit-variance Gaussian class clusters with balanced labels.

    ``anisotropy > 1`` passes the features through a fixed random linear map
    whose singular values span ``[1/anisotropy, 1]``. Class geometry is
    unchanged but gradient descent now needs many steps to undo the
    distortion, so accuracy rises gradually instead of after one step.
    ``offset`` shifts every point by a common vector of that norm along the
    all-ones direction, like non-negative pixel intensities that share a
    large mean.
    """
    if classes < 2:
        raise ConfigError(f"need at least 2 classes, got {classes}", "data.classes")
    if dim < 2:
        raise ConfigError(f"need dimension at least 2, got {dim}", "data.dim")
    if count < classes:
        raise ConfigError(f"count={count} is smaller than the class count {classes}", "data.count")
    if separation < 0:
        raise ConfigError("separation must be non-negative", "data.separation")
    if not anisotropy >= 1.0:
        raise ConfigError(f"anisotropy must be at least 1, got {anisotropy}", "data.anisotropy")
    rng = np.random.default_rng(seed)
    means = _class_means(classes, dim, separation, rng)
    labels = rng.permutation(np.arange(count) % classes)
    X = means[labels] + rng.standard_normal((count, dim))
    if anisotropy > 1.0:
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        scales = anisotropy ** (-np.arange(dim) / (dim - 1))
        X = X @ (q * scales) @ q.T
    if offset:
        X = X + offset / math.sqrt(dim)
    return Dataset(X, labels, classes)


def generate_regression(dim: int, count: int, noise: float = 0.5, seed: int = 0) -> Dataset:
    """Linear targets ``y = x . w_true + noise`` with standard normal features."""
    if dim < 1 or count < 1:
        raise ConfigError("regression data needs dim >= 1 and count >= 1", "data")
    rng = np.random.default_rng(seed)
    w_true = rng.standard_normal(dim)
    X = rng.standard_normal((count, dim))
    return Dataset(X, X @ w_true + noise * rng.standard_normal(count))


def with_bias(dataset: Dataset) -> Dataset:
    """Append a constant-1 feature."""
    X = np.hstack([dataset.X, np.ones((len(dataset), 1))])
    return Dataset(X, dataset.y, dataset.num_classes)


def write_idx(path, array: np.ndarray) -> Path:
    """Write an unsigned-byte IDX file (images when 3-D, labels when 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = {1: IDX_LABELS_MAGIC, 3: IDX_IMAGES_MAGIC}.get(array.ndim)
    if magic is None:
        raise ConfigError(f"IDX writer supports 1-D labels or 3-D images, got {array.ndim}-D")
    header = struct.pack(">I", magic) + b"".join(struct.pack(">I", d) for d in array.shape)
    path = Path(path)
    path.write_bytes(header + array.tobytes(order="C"))
    return path


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read IDX file {path}: {exc.strerror}", "data") from None
    header = 4 + 4 * ndim
    if len(raw) < 4:
        raise ParseError(f"{path}: file too short for the magic number", 0)
    (found,) = struct.unpack(">I", raw[:4])
    if found != magic:
        raise ParseError(f"{path}: bad magic number 0x{found:08x}, expected 0x{magic:08x}", 0)
    if len(raw) < header:
        raise ParseError(f"{path}: truncated header", len(raw))
    dims = struct.unpack(">" + "I" * ndim, raw[4:header])
    size = int(np.prod(dims))
    if len(raw) < header + size:
        raise ParseError(f"{path}: truncated payload, expected {size} bytes after the header", len(raw))
    if len(raw) > header + size:
        raise ParseError(f"{path}: {len(raw) - header - size} trailing bytes after the payload", header + size)
    return np.frombuffer(raw, dtype=np.uint8, count=size, offset=header).reshape(dims)


def load_idx(images_path, labels_path, subset: int | None = None, seed: int = 0) -> Dataset:
    """Read an IDX image/label pair; pixels become features in [0, 1]."""
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, 1)
    if len(images) != len(labels):
        raise ParseError(f"{len(images)} images but {len(labels)} labels", 4)
    X = images.reshape(len(images), -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if subset is not None:
        if subset > len(y):
            raise ConfigError(f"subset size {subset} exceeds the {len(y)} available points", "data.subset")
        idx = np.sort(np.random.default_rng(seed).choice(len(y), size=subset, replace=False))
        X, y = X[idx], y[idx]
    return Dataset(X, y, max(10, int(y.max()) + 1))


# -- partitioning ------------------------------------------------------------------


@dataclass(frozen=True)
class PartitionSpec:
    N: int
    skew: float = 1.0
    seed: int = 0
    sizes: tuple | None = None

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ConfigError(f"device count must be a positive integer, got {self.N}", "partition.N")
        if not 0.0 <= self.skew <= 1.0:
            raise ConfigError(f"skew must lie in [0, 1], got {self.skew}", "partition.skew")
        if self.sizes is not None:
            object.__setattr__(self, "sizes", tuple(int(s) for s in self.sizes))

    def resolve_sizes(self, total: int) -> list[int]:
        if self.sizes is None:
            base, extra = divmod(total, self.N)
            sizes = [base + (1 if i < extra else 0) for i in range(self.N)]
        else:
            sizes = list(self.sizes)
            if len(sizes) != self.N:
                raise ConfigError(f"{len(sizes)} sizes given for {self.N} devices", "partition.sizes")
            if sum(sizes) != total:
                raise ConfigError(f"sizes sum to {sum(sizes)} but the dataset has {total} points", "partition.sizes")
        if any(s < 1 for s in sizes):
            raise ConfigError(f"every device needs at least one point, got sizes {sizes}", "partition.sizes")
        return sizes


def _apportion(total: int, sizes: list[int]) -> list[int]:
    """Split ``total`` proportionally to ``sizes`` with largest remainders, capped per device."""
    n = sum(sizes)
    quotas = [total * s / n for s in sizes]
    counts = [min(int(math.floor(q)), s) for q, s in zip(quotas, sizes)]
    order = sorted(range(len(sizes)), key=lambda i: (-(quotas[i] - counts[i]), i))
    short = total - sum(counts)
    for i in order:
        if short == 0:
            break
        if counts[i] < sizes[i]:
            counts[i] += 1
            short -= 1
    return counts


def partition(dataset: Dataset, spec: PartitionSpec) -> tuple[list[Dataset], np.ndarray]:
    """Assign points to devices; ``skew`` is the label-sorted fraction.

    A seeded fraction ``skew`` of the points is sorted by label and cut into
    contiguous shards; the rest is shuffled and dealt out so that each device
    ends up with its requested size.
    """
    n = len(dataset)
    sizes = spec.resolve_sizes(n)
    rng = np.random.default_rng(spec.seed)
    perm = rng.permutation(n)
    n_sorted = int(round(spec.skew * n))
    sorted_part = perm[:n_sorted]
    sorted_part = sorted_part[np.lexsort((sorted_part, dataset.y[sorted_part]))]
    rest = perm[n_sorted:]
    from_sorted = _apportion(n_sorted, sizes)
    parts, a, b = [], 0, 0
    for size, ns in zip(sizes, from_sorted):
        idx = np.concatenate([sorted_part[a:a + ns], rest[b:b + size - ns]])
        a, b = a + ns, b + size - ns
        parts.append(dataset.subset(np.sort(idx)))
    return parts, device_weights([len(p) for p in parts])


# -- metrics -----------------------------------------------------------------------


def accuracy(model: LossModel, params, test: Dataset) -> float:
    """Fraction of argmax predictions that match; ties go to the lowest class index."""
    if not isinstance(model, CrossEntropy):
        raise UnsupportedMetricError(f"accuracy is defined for classification only, not {model.kind}")
    scores = test.X @ np.asarray(params).T
    return float(np.mean(np.argmax(scores, axis=1) == test.y))


@dataclass(frozen=True)
class MetricsRecord:
    k: int
    test_accuracy: float | None
    global_loss: float
    wall_time: float = 0.0


def metrics_series(trajectory: Trajectory, problem: FederatedProblem, test: Dataset | None,
                   wall_time: float = 0.0) -> list[MetricsRecord]:
    """One record per global snapshot k = 0..K."""
    classify = isinstance(problem.loss, CrossEntropy) and test is not None
    return [MetricsRecord(k, accuracy(problem.loss, w, test) if classify else None,
                          float(trajectory.global_losses[k]), wall_time)
            for k, w in enumerate(trajectory.globals_)]


def first_hit(records, target: float) -> int | None:
    """Smallest k whose test accuracy reaches ``target``."""
    for r in records:
        if r.test_accuracy is not None and r.test_accuracy >= target:
            return r.k
    return None


# -- experiment specification --------------------------------------------------------

_SIM_KEYS = {"N", "tau", "delta", "alpha", "eta", "K", "init", "seed"}
_TOP_KEYS = {"sim", "partition", "data", "loss", "alpha_grid", "delta_grid", "tuned_alpha", "target_accuracy",
             "target_fraction", "probes", "reference", "constants", "suite", "bound", "metadata"}


def _get(d: dict, key: str, path: str, kind=None, default=...):
    if key not in d or d[key] is None:
        if default is ...:
            raise ConfigError("missing required field", f"{path}.{key}" if path else key)
        return default
    v = d[key]
    if kind is int and (isinstance(v, bool) or not isinstance(v, int)):
        if isinstance(v, float) and v.is_integer():
            return int(v)
        raise ConfigError(f"expected an integer, got {v!r}", f"{path}.{key}")
    if kind is float and (isinstance(v, bool) or not isinstance(v, (int, float))):
        raise ConfigError(f"expected a number, got {v!r}", f"{path}.{key}")
    return kind(v) if kind in (int, float) else v


def _unknown(d: dict, allowed: set, path: str):
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigError(f"unknown field(s) {extra}", path or "<root>")


@dataclass(frozen=True)
class DataSource:
    kind: str = "synthetic"
    classes: int = 10
    dim: int = 20
    separation: float = 1.0
    anisotropy: float = 1.0
    offset: float = 0.0
    count: int = 5000
    test_count: int = 1000
    noise: float = 0.5
    bias: bool = False
    seed: int = 0
    images: str | None = None
    labels: str | None = None
    subset: int | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "DataSource":
        if not isinstance(d, dict):
            raise ConfigError("expected an object", "data")
        _unknown(d, {"source", "classes", "dim", "separation", "anisotropy", "offset", "count", "test_count", "noise", "bias", "seed",
                     "images", "labels", "subset"}, "data")
        kind = d.get("source", "synthetic")
        if kind not in ("synthetic", "regression", "idx"):
            raise ConfigError(f"unknown data source {kind!r}", "data.source")
        src = cls(kind=kind,
                  classes=_get(d, "classes", "data", int, cls.classes),
                  dim=_get(d, "dim", "data", int, cls.dim),
                  separation=_get(d, "separation", "data", float, cls.separation),
                  anisotropy=_get(d, "anisotropy", "data", float, cls.anisotropy),
                  offset=_get(d, "offset", "data", float, cls.offset),
                  count=_get(d, "count", "data", int, cls.count),
                  test_count=_get(d, "test_count", "data", int, cls.test_count),
                  noise=_get(d, "noise", "data", float, cls.noise),
                  bias=bool(d.get("bias", False)),
                  seed=_get(d, "seed", "data", int, 0),
                  images=d.get("images"), labels=d.get("labels"),
                  subset=_get(d, "subset", "data", int, None))
        if src.test_count < 0:
            raise ConfigError("test_count must be non-negative", "data.test_count")
        if kind == "idx" and (not src.images or not src.labels):
            raise ConfigError("IDX source needs both 'images' and 'labels' paths", "data.images")
        return src

    def load(self) -> tuple[Dataset, Dataset | None]:
        """(train, test) with the test points held out by a seeded permutation."""
        if self.kind == "synthetic":
            full = generate_synthetic(self.classes, self.dim, self.separation, self.count + self.test_count,
                                      self.seed, anisotropy=self.anisotropy, offset=self.offset)
        elif self.kind == "regression":
            full = generate_regression(self.dim, self.count + self.test_count, self.noise, self.seed)
        else:
            full = load_idx(self.images, self.labels, self.subset, self.seed)
        if self.bias:
            full = with_bias(full)
        if self.test_count == 0:
            return full, None
        if self.test_count >= len(full):
            raise ConfigError(f"test_count={self.test_count} leaves no training data", "data.test_count")
        perm = np.random.default_rng(self.seed + 1).permutation(len(full))
        test_idx = np.sort(perm[:self.test_count])
        train_idx = np.sort(perm[self.test_count:])
        return full.subset(train_idx), full.subset(test_idx)


@dataclass(frozen=True)
class ExperimentSpec:
    sim: SimConfig
    partition: PartitionSpec
    data: DataSource
    loss: str = "cross_entropy"
    alpha_grid: tuple | None = None
    delta_grid: tuple | None = None
    tuned_alpha: float | None = None
    target_accuracy: float = DEFAULT_TARGET_ACCURACY
    target_fraction: float | None = None
    probes: dict = field(default_factory=dict)
    reference: dict = field(default_factory=dict)
    constants: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        if not isinstance(d, dict):
            raise ConfigError("experiment spec must be a JSON object")
        _unknown(d, _TOP_KEYS, "")
        sim_d = _get(d, "sim", "")
        if not isinstance(sim_d, dict):
            raise ConfigError("expected an object", "sim")
        _unknown(sim_d, _SIM_KEYS, "sim")
        sim = SimConfig(N=_get(sim_d, "N", "sim", int), tau=_get(sim_d, "tau", "sim", int),
                        delta=_get(sim_d, "delta", "sim", int), alpha=_get(sim_d, "alpha", "sim", float),
                        eta=_get(sim_d, "eta", "sim", float), K=_get(sim_d, "K", "sim", int),
                        init=sim_d.get("init"), seed=_get(sim_d, "seed", "sim", int, 0))
        part_d = d.get("partition", {})
        _unknown(part_d, {"skew", "seed", "sizes", "N"}, "partition")
        if "N" in part_d and part_d["N"] != sim.N:
            raise ConfigError(f"partition.N={part_d['N']} disagrees with sim.N={sim.N}", "partition.N")
        part = PartitionSpec(sim.N, _get(part_d, "skew", "partition", float, 1.0),
                             _get(part_d, "seed", "partition", int, sim.seed), part_d.get("sizes"))
        data = DataSource.from_dict(d.get("data", {}))
        loss = d.get("loss", "cross_entropy" if data.kind != "regression" else "squared_error")
        try:
            get_loss(loss)
        except ConfigError as exc:
            raise ConfigError(str(exc), "loss") from None

        def grid(key, kind):
            if key not in d or d[key] is None:
                return None
            v = d[key]
            if not isinstance(v, list):
                raise ConfigError("expected a list", key)
            for j, x in enumerate(v):
                if kind is int and (isinstance(x, bool) or not float(x).is_integer()):
                    raise ConfigError(f"expected an integer, got {x!r}", f"{key}[{j}]")
            return tuple(kind(x) for x in v)

        target = _get(d, "target_accuracy", "", float, DEFAULT_TARGET_ACCURACY)
        if not 0.0 <= target <= 1.0:
            raise ConfigError("must lie in [0, 1]", "target_accuracy")
        fraction = _get(d, "target_fraction", "", float, None)
        if fraction is not None and not 0.0 < fraction <= 1.0:
            raise ConfigError("must lie in (0, 1]", "target_fraction")
        return cls(sim=sim, partition=part, data=data, loss=loss, alpha_grid=grid("alpha_grid", float),
                   delta_grid=grid("delta_grid", int), tuned_alpha=_get(d, "tuned_alpha", "", float, None),
                   target_accuracy=target, target_fraction=fraction, probes=dict(d.get("probes", {})),
                   reference=dict(d.get("reference", {})), constants=dict(d.get("constants", {})))

    def to_dict(self) -> dict:
        return {
            "sim": self.sim.to_dict(),
            "partition": {"N": self.partition.N, "skew": self.partition.skew, "seed": self.partition.seed,
                          "sizes": None if self.partition.sizes is None else list(self.partition.sizes)},
            "data": {k: v for k, v in self.data.__dict__.items() if k != "kind"} | {"source": self.data.kind},
            "loss": self.loss,
            "alpha_grid": None if self.alpha_grid is None else list(self.alpha_grid),
            "delta_grid": None if self.delta_grid is None else list(self.delta_grid),
            "tuned_alpha": self.tuned_alpha, "target_accuracy": self.target_accuracy,
            "target_fraction": self.target_fraction, "probes": self.probes, "reference": self.reference,
            "constants": self.constants,
        }

    def with_sim(self, **changes) -> "ExperimentSpec":
        return replace(self, sim=replace(self.sim, **changes))


def config_hash(payload) -> str:
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()


# -- single runs ---------------------------------------------------------------------


@dataclass
class Prepared:
    problem: FederatedProblem
    test: Dataset | None
    partition_hash: str


def prepare(spec: ExperimentSpec) -> Prepared:
    train, test = spec.data.load()
    parts, rho = partition(train, spec.partition)
    problem = FederatedProblem(get_loss(spec.loss), tuple(parts), rho)
    h = hashlib.sha256("".join(p.fingerprint() for p in parts).encode()).hexdigest()
    return Prepared(problem, test, h)


@dataclass
class RunResult:
    spec: ExperimentSpec
    trajectory: Trajectory
    metrics: list
    partition_hash: str
    config_hash: str


def run_experiment(spec: ExperimentSpec, prepared: Prepared | None = None) -> RunResult:
    prepared = prepare(spec) if prepared is None else prepared
    t0 = time.perf_counter()
    traj = run(spec.sim, prepared.problem)
    wall = time.perf_counter() - t0
    metrics = metrics_series(traj, prepared.problem, prepared.test, wall)
    return RunResult(spec, traj, metrics, prepared.partition_hash, config_hash(spec.to_dict()))


def collect_probes(trajectory: Trajectory, aux=None, *, perturbations: int = 1, scale: float = 1.0,
                   max_points: int | None = None, seed: int = 0) -> np.ndarray:
    """Trajectory and auxiliary points plus Gaussian perturbations around them.

    ``max_points`` caps the trajectory part by striding through time; global
    snapshots and auxiliary points are always kept.
    """
    shape = trajectory.history.shape[2:]
    hist = trajectory.history
    if max_points is not None and hist.shape[0] * hist.shape[1] > max_points:
        stride = math.ceil(hist.shape[0] * hist.shape[1] / max_points)
        hist = hist[:, ::stride]
    parts = [hist.reshape((-1,) + shape), trajectory.globals_]
    if trajectory.presync:
        parts.extend(trajectory.presync[k] for k in sorted(trajectory.presync))
    if aux is not None:
        parts.append(aux.paths.reshape((-1,) + shape))
    base = np.concatenate(parts)
    rng = np.random.default_rng(seed)
    noisy = [base + scale * rng.standard_normal(base.shape) for _ in range(perturbations)]
    return np.concatenate([base] + noisy)


@dataclass
class Analysis:
    constants: ProblemConstants
    aux: object
    probes: np.ndarray
    reference: object | None


def analyze(result: RunResult, prepared: Prepared, *, with_reference: bool = True) -> Analysis:
    """Auxiliary trajectories, estimated constants and (optionally) the reference optimum."""
    spec, traj, problem = result.spec, result.trajectory, prepared.problem
    pcfg = spec.probes
    aux = aux_trajectory(traj, problem)
    probes = collect_probes(traj, aux, perturbations=int(pcfg.get("perturbations", 1)),
                            scale=float(pcfg.get("scale", 1.0)), max_points=pcfg.get("max_points"),
                            seed=int(pcfg.get("seed", spec.sim.seed)))
    constants = estimate_constants(problem, probes, spec.sim.eta, seed=int(pcfg.get("seed", spec.sim.seed)))
    c = spec.constants
    if c:
        _unknown(c, {"L", "beta", "delta_i", "L_scale", "beta_scale", "delta_scale"}, "constants")
        constants = constants.overridden(c.get("L"), c.get("beta"), c.get("delta_i"), float(c.get("L_scale", 1.0)),
                                         float(c.get("beta_scale", 1.0)), float(c.get("delta_scale", 1.0)))
    reference = None
    if with_reference and spec.reference.get("enabled", True):
        rcfg = spec.reference
        steps = int(rcfg.get("steps", int(rcfg.get("multiplier", 50)) * spec.sim.T))
        reference = compute_reference_optimum(problem, spec.sim.init_for(problem), spec.sim.eta, steps,
                                              tol=float(rcfg.get("tol", 1e-10)))
        if not reference.certified:
            log.warning("reference optimum not certified: gradient norm %.3g after %d steps",
                        reference.grad_norm, reference.steps)
        from .theory import compute_phi
        constants = compute_phi(constants, aux, reference, spec.sim.eta)
    return Analysis(constants, aux, probes, reference)


# -- sweeps --------------------------------------------------------------------------


@dataclass
class SweepRun:
    label: str
    alpha: float
    delta: int
    result: RunResult | None
    error: str | None = None

    @property
    def ok(self) -> bool:
        return self.result is not None


@dataclass
class SweepResult:
    runs: list
    target: float
    benchmark: SweepRun | None = None
    rows: list = field(default_factory=list)

    @property
    def failed(self) -> list:
        return [r for r in self.runs if not r.ok]


def _execute(args):
    spec_dict, label, alpha, delta = args
    spec = ExperimentSpec.from_dict(spec_dict)
    try:
        return SweepRun(label, alpha, delta, run_experiment(spec.with_sim(alpha=alpha, delta=delta)))
    except FedDelAvgError as exc:
        return SweepRun(label, alpha, delta, None, f"{type(exc).__name__}: {exc} (alpha={alpha}, delta={delta})")


def _run_points(spec: ExperimentSpec, points, jobs: int = 1) -> list[SweepRun]:
    """Run (label, alpha, delta) points; results come back in grid order."""
    base = spec.to_dict()
    tasks = [(base, label, a, d) for label, a, d in points]
    if jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            return list(pool.map(_execute, tasks))
    prepared = prepare(spec)
    out = []
    for label, a, d in points:
        try:
            out.append(SweepRun(label, a, d, run_experiment(spec.with_sim(alpha=a, delta=d), prepared)))
        except FedDelAvgError as exc:
            out.append(SweepRun(label, a, d, None, f"{type(exc).__name__}: {exc} (alpha={a}, delta={d})"))
    return out


def _check_isolation(runs):
    """Runs in one sweep must share the partition and differ only in (alpha, delta)."""
    ok = [r.result for r in runs if r.ok]
    if len({r.partition_hash for r in ok}) > 1:
        raise ConfigError("sweep runs saw different partitions")
    stripped = set()
    for r in ok:
        d = r.spec.to_dict()
        d["sim"] = {k: v for k, v in d["sim"].items() if k not in ("alpha", "delta")}
        stripped.add(config_hash(d))
    if len(stripped) > 1:
        raise ConfigError("sweep runs differ in more than the swept parameters")


def final_accuracy(result: RunResult) -> float | None:
    return result.metrics[-1].test_accuracy


def alpha_sweep(spec: ExperimentSpec, *, target: float | None = None, jobs: int = 1) -> SweepResult:
    """One run per alpha in the grid at the spec's delay."""
    if not spec.alpha_grid:
        raise ConfigError("alpha sweep needs a non-empty grid", "alpha_grid")
    points = [(f"alpha={a:g}", a, spec.sim.delta) for a in spec.alpha_grid]
    runs = _run_points(spec, points, jobs)
    _check_isolation(runs)
    target = spec.target_accuracy if target is None else target
    out = SweepResult(runs, target)
    out.rows = [(r.label, r.alpha, r.delta, first_hit(r.result.metrics, target) if r.ok else None,
                 final_accuracy(r.result) if r.ok else None, r.error) for r in runs]
    return out


def delay_comparison(spec: ExperimentSpec, *, jobs: int = 1) -> SweepResult:
    """FedAvg at zero delay as benchmark, then tuned alpha and alpha = 1 at every delay.

    The target is ``target_fraction`` times the benchmark's final accuracy when
    that fraction is set, else ``target_accuracy``. Overhead is the relative
    number of extra aggregations needed to reach it.
    """
    if not spec.delta_grid:
        raise ConfigError("delay comparison needs a non-empty grid", "delta_grid")
    tuned = spec.tuned_alpha
    if tuned is None:
        raise ConfigError("delay comparison needs tuned_alpha", "tuned_alpha")
    for j, d in enumerate(spec.delta_grid):
        if not 0 <= d <= spec.sim.tau:
            raise ConfigError(f"delay must lie in [0, {spec.sim.tau}], got {d}", f"delta_grid[{j}]")
    points = [("benchmark", 1.0, 0)]
    for d in spec.delta_grid:
        points += [(f"tuned delta={d}", tuned, d), (f"fedavg delta={d}", 1.0, d)]
    runs = _run_points(spec, points, jobs)
    _check_isolation(runs)
    bench = runs[0]
    if not bench.ok:
        raise ConfigError(f"benchmark run failed: {bench.error}")
    bench_final = final_accuracy(bench.result)
    if bench_final is None:
        raise UnsupportedMetricError("delay comparison needs a classification model with a test set")
    target = spec.target_fraction * bench_final if spec.target_fraction else spec.target_accuracy
    bench_hit = first_hit(bench.result.metrics, target)
    out = SweepResult(runs, target, bench)
    for r in runs:
        hit = first_hit(r.result.metrics, target) if r.ok else None
        overhead = None
        if hit is not None and bench_hit:
            overhead = hit / bench_hit - 1.0
        out.rows.append((r.label, r.alpha, r.delta, hit, final_accuracy(r.result) if r.ok else None, overhead,
                         r.error))
    return out


# -- built-in verification suite -----------------------------------------------------


@dataclass(frozen=True)
class SuiteCase:
    index: int
    loss: str
    N: int
    tau: int
    delta: int
    alpha: float
    K: int
    seed: int


def suite_cases(runs: int = 20, seed: int = 0) -> list[SuiteCase]:
    """Seeded mix of logistic and least-squares runs covering every (N, tau, delay, alpha) axis."""
    rng = np.random.default_rng(seed)
    cases = []
    Ns, taus, alphas = (2, 5, 10), (5, 10), (0.2, 0.5, 1.0)
    for j in range(runs):
        tau = taus[(j // 2) % 2]
        # pin the delay extremes early so small suites still hit them
        delta = {0: 0, 1: tau, 2: tau, 3: 0}.get(j, int(rng.integers(0, tau + 1)))
        cases.append(SuiteCase(j, "cross_entropy" if j % 2 == 0 else "squared_error", Ns[(j // 4) % 3], tau,
                               delta, alphas[j % 3], 8 if tau == 10 else 12, seed * 1000 + j))
    return cases


def suite_spec(case: SuiteCase, constants: dict | None = None) -> ExperimentSpec:
    """Small well-conditioned problem with eta = 0.9 / (analytic smoothness bound)."""
    if case.loss == "cross_entropy":
        data = {"source": "synthetic", "classes": 3, "dim": 4, "separation": 2.0, "count": 30 * case.N,
                "test_count": 0, "seed": case.seed}
    else:
        data = {"source": "regression", "dim": 4, "count": 30 * case.N, "test_count": 0, "noise": 0.5,
                "seed": case.seed}
    base = {"sim": {"N": case.N, "tau": case.tau, "delta": case.delta, "alpha": case.alpha, "eta": 1.0,
                    "K": case.K, "seed": case.seed},
            "partition": {"skew": 1.0, "seed": case.seed}, "data": data, "loss": case.loss,
            "probes": {"perturbations": 1, "scale": 1.0}, "reference": {"multiplier": 50, "tol": 1e-11},
            "constants": dict(constants or {})}
    spec = ExperimentSpec.from_dict(base)
    beta_upper = prepare(spec).problem.smoothness_upper_bound()
    return spec.with_sim(eta=0.9 / beta_upper)


def load_spec_file(path, overrides=()) -> dict:
    try:
        with open(path) as fh:
            d = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", "--config") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: invalid JSON: {exc.msg}", exc.pos) from None
    return apply_overrides(d, overrides)


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(d: dict, overrides) -> dict:
    """Apply ``a.b.c=value`` assignments; values are parsed as JSON when possible."""
    d = copy.deepcopy(d)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value", "--set")
        key, _, raw = item.partition("=")
        parts = key.strip().split(".")
        if not all(parts):
            raise ConfigError(f"bad override key {key!r}", "--set")
        node = d
        for p in parts[:-1]:
            nxt = node.setdefault(p, {})
            if not isinstance(nxt, dict):
                raise ConfigError(f"cannot descend into non-object field {p!r}", key)
            node = nxt
        node[parts[-1]] = _parse_value(raw)
    return d
