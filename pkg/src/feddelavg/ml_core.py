"""Convex loss models, full-batch gradients and estimation of problem constants.

Parameters are plain numpy arrays: a length-``m`` vector for least squares and
an ``(s, m)`` matrix for multinomial logistic regression (row ``j`` scores
class ``j``). Every norm is the Euclidean norm of the flattened array.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError, InvariantError, NumericalError, PreconditionError

log = logging.getLogger(__name__)

WEIGHT_SUM_TOL = 1e-12
CERTIFICATE_GRAD_NORM = 1e-8
DIVERGENCE_PATIENCE = 10


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class DataPoint:
    features: np.ndarray
    label: float


@dataclass(frozen=True, eq=False)
class Dataset:
    """A non-empty design matrix ``X`` (D x m) with labels ``y``.

    ``num_classes`` is set for classification data and ``None`` for regression.
    """

    X: np.ndarray
    y: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2 or X.shape[0] == 0:
            raise ConfigError(f"dataset needs a non-empty 2-D feature matrix, got shape {X.shape}")
        if self.num_classes is None:
            y = np.asarray(self.y, dtype=np.float64)
        else:
            if self.num_classes < 2:
                raise ConfigError("classification data needs at least 2 classes")
            y = np.asarray(self.y)
            if y.size and not np.all(np.equal(np.mod(y, 1), 0)):
                raise ConfigError("class labels must be integers")
            y = y.astype(np.int64)
            if y.size and (y.min() < 0 or y.max() >= self.num_classes):
                raise ConfigError(f"class labels must lie in [0, {self.num_classes})")
        if y.shape != (X.shape[0],):
            raise ConfigError(f"label vector shape {y.shape} does not match {X.shape[0]} rows")
        if not np.all(np.isfinite(X)) or not np.all(np.isfinite(y)):
            raise ConfigError("dataset contains non-finite values")
        object.__setattr__(self, "X", _frozen(X))
        object.__setattr__(self, "y", _frozen(y))

    @classmethod
    def from_points(cls, points: Sequence[DataPoint], num_classes: int | None = None) -> "Dataset":
        if not points:
            raise ConfigError("dataset must contain at least one point")
        dims = {np.asarray(p.features).shape for p in points}
        if len(dims) != 1:
            raise ConfigError(f"feature dimensions differ across points: {sorted(dims)}")
        X = np.stack([np.asarray(p.features, dtype=np.float64) for p in points])
        y = np.array([p.label for p in points])
        return cls(X, y, num_classes)

    def __len__(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def points(self) -> list[DataPoint]:
        return [DataPoint(self.X[j], self.y[j].item()) for j in range(len(self))]

    def subset(self, indices) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.X[idx], self.y[idx], self.num_classes)

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(np.ascontiguousarray(self.X).tobytes())
        h.update(np.ascontiguousarray(self.y).tobytes())
        return h.hexdigest()


class LossModel:
    """Base class: a convex per-point loss averaged over a dataset.

    Single-parameter methods take ``w`` with :meth:`param_shape`; the batched
    methods take a stack ``W`` of shape ``(P, *param_shape)``.
    """

    kind = "abstract"

    def param_shape(self, dataset: Dataset) -> tuple[int, ...]:
        raise NotImplementedError

    def point_losses(self, dataset: Dataset, w: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def value_and_grad(self, dataset: Dataset, w: np.ndarray) -> tuple[float, np.ndarray]:
        raise NotImplementedError

    def values_batch(self, dataset: Dataset, W: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def grads_batch(self, dataset: Dataset, W: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def curvature_bound(self, dataset: Dataset) -> float:
        """An analytic upper bound on the smoothness constant of the local loss."""
        raise NotImplementedError

    def check(self, dataset: Dataset, w: np.ndarray, batched: bool = False) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        expected = self.param_shape(dataset)
        got = w.shape[1:] if batched else w.shape
        if got != expected:
            raise ConfigError(f"{self.kind}: parameter shape {got} does not match expected {expected}")
        return w

    def value(self, dataset: Dataset, w: np.ndarray) -> float:
        return float(np.mean(self.point_losses(dataset, w)))

    def grad(self, dataset: Dataset, w: np.ndarray) -> np.ndarray:
        return self.value_and_grad(dataset, w)[1]

    def init_params(self, dataset: Dataset) -> np.ndarray:
        return np.zeros(self.param_shape(dataset))

    def __repr__(self):
        return f"{type(self).__name__}()"

    def __eq__(self, other):
        return type(self) is type(other)

    def __hash__(self):
        return hash(self.kind)


class SquaredError(LossModel):
    """Least squares, f(x, y; w) = (y - w.x)^2 / 2."""

    kind = "squared_error"

    def param_shape(self, dataset):
        if dataset.num_classes is not None:
            raise ConfigError("squared_error expects regression labels (num_classes=None)")
        return (dataset.dim,)

    def point_losses(self, dataset, w):
        w = self.check(dataset, w)
        r = dataset.X @ w - dataset.y
        return 0.5 * r * r

    def value_and_grad(self, dataset, w):
        w = self.check(dataset, w)
        r = dataset.X @ w - dataset.y
        return float(0.5 * np.mean(r * r)), dataset.X.T @ r / len(dataset)

    def values_batch(self, dataset, W):
        W = self.check(dataset, W, batched=True)
        R = W @ dataset.X.T - dataset.y
        return 0.5 * np.mean(R * R, axis=1)

    def grads_batch(self, dataset, W):
        W = self.check(dataset, W, batched=True)
        R = W @ dataset.X.T - dataset.y
        return R @ dataset.X / len(dataset)

    def curvature_bound(self, dataset):
        return float(np.linalg.eigvalsh(dataset.X.T @ dataset.X / len(dataset))[-1])


class CrossEntropy(LossModel):
    """Multinomial logistic regression with softmax cross-entropy, no bias term."""

    kind = "cross_entropy"

    def param_shape(self, dataset):
        if dataset.num_classes is None:
            raise ConfigError("cross_entropy expects class labels (num_classes set)")
        return (dataset.num_classes, dataset.dim)

    @staticmethod
    def _log_softmax(Z, axis):
        Z = Z - Z.max(axis=axis, keepdims=True)
        return Z - np.log(np.sum(np.exp(Z), axis=axis, keepdims=True))

    def point_losses(self, dataset, w):
        w = self.check(dataset, w)
        logp = self._log_softmax(dataset.X @ w.T, axis=1)
        return -logp[np.arange(len(dataset)), dataset.y]

    def value_and_grad(self, dataset, w):
        w = self.check(dataset, w)
        D = len(dataset)
        logp = self._log_softmax(dataset.X @ w.T, axis=1)
        rows = np.arange(D)
        value = float(-np.mean(logp[rows, dataset.y]))
        P = np.exp(logp)
        P[rows, dataset.y] -= 1.0
        return value, P.T @ dataset.X / D

    def _batch_logp(self, dataset, W):
        W = self.check(dataset, W, batched=True)
        P, s, m = W.shape
        Z = (W.reshape(P * s, m) @ dataset.X.T).reshape(P, s, len(dataset))
        return self._log_softmax(Z, axis=1)

    def values_batch(self, dataset, W):
        logp = self._batch_logp(dataset, W)
        picked = logp[:, dataset.y, np.arange(len(dataset))]
        return -np.mean(picked, axis=1)

    def grads_batch(self, dataset, W):
        logp = self._batch_logp(dataset, W)
        Pm = np.exp(logp)
        Pm[:, dataset.y, np.arange(len(dataset))] -= 1.0
        return Pm @ dataset.X / len(dataset)

    def curvature_bound(self, dataset):
        # diag(p) - p p^T has spectral norm at most 1/2
        return 0.5 * float(np.linalg.eigvalsh(dataset.X.T @ dataset.X / len(dataset))[-1])


_LOSSES = {
    "squared_error": SquaredError,
    "least_squares": SquaredError,
    "cross_entropy": CrossEntropy,
    "multinomial_cross_entropy": CrossEntropy,
    "logistic": CrossEntropy,
}


def get_loss(kind: str) -> LossModel:
    try:
        return _LOSSES[kind]()
    except KeyError:
        raise ConfigError(f"unknown loss kind {kind!r}; choose from {sorted(_LOSSES)}") from None


# -- weights and aggregation -------------------------------------------------


def device_weights(sizes: Sequence[int]) -> np.ndarray:
    """rho_i = D_i / sum_j D_j."""
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or sizes.size == 0 or np.any(sizes <= 0):
        raise ConfigError(f"device sizes must be positive, got {sizes.tolist()}")
    return sizes / sizes.sum()


def validate_weights(weights, n: int | None = None) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 1 or w.size == 0:
        raise InvariantError("weights must be a non-empty vector")
    if n is not None and w.size != n:
        raise ConfigError(f"expected {n} weights, got {w.size}")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise InvariantError("weights must be finite and non-negative")
    if abs(w.sum() - 1.0) > WEIGHT_SUM_TOL:
        raise InvariantError(f"weights sum to {w.sum()!r}, not 1 within {WEIGHT_SUM_TOL}")
    return w


def weighted_sum(weights, arrays) -> np.ndarray:
    """sum_i weights[i] * arrays[i], accumulated in index order."""
    if len(weights) != len(arrays):
        raise ConfigError(f"{len(arrays)} arrays for {len(weights)} weights")
    out = weights[0] * arrays[0]
    for r, a in zip(weights[1:], arrays[1:]):
        out = out + r * a
    return out


# -- the federated problem ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class FederatedProblem:
    """One loss family evaluated on N device datasets with weights rho."""

    loss: LossModel
    datasets: tuple
    weights: np.ndarray = None

    def __post_init__(self):
        datasets = tuple(self.datasets)
        if not datasets:
            raise ConfigError("at least one device dataset is required")
        shapes = {self.loss.param_shape(ds) for ds in datasets}
        if len(shapes) != 1:
            raise ConfigError(f"device datasets imply different parameter shapes: {sorted(shapes)}")
        weights = device_weights([len(ds) for ds in datasets]) if self.weights is None else self.weights
        object.__setattr__(self, "datasets", datasets)
        object.__setattr__(self, "weights", _frozen(validate_weights(weights, len(datasets))))

    @property
    def N(self) -> int:
        return len(self.datasets)

    @property
    def param_shape(self) -> tuple[int, ...]:
        return self.loss.param_shape(self.datasets[0])

    def init_params(self) -> np.ndarray:
        return np.zeros(self.param_shape)

    def local_loss(self, i: int, w) -> float:
        return self.loss.value(self.datasets[i], w)

    def local_grad(self, i: int, w) -> np.ndarray:
        return self.loss.grad(self.datasets[i], w)

    def global_loss(self, w) -> float:
        return float(weighted_sum(self.weights, [self.loss.value(ds, w) for ds in self.datasets]))

    def global_grad(self, w) -> np.ndarray:
        return weighted_sum(self.weights, [self.loss.grad(ds, w) for ds in self.datasets])

    def global_value_and_grad(self, w) -> tuple[float, np.ndarray]:
        pairs = [self.loss.value_and_grad(ds, w) for ds in self.datasets]
        value = weighted_sum(self.weights, [v for v, _ in pairs])
        return float(value), weighted_sum(self.weights, [g for _, g in pairs])

    def global_losses_batch(self, W) -> np.ndarray:
        return weighted_sum(self.weights, [self.loss.values_batch(ds, W) for ds in self.datasets])

    def smoothness_upper_bound(self) -> float:
        """Analytic bound on beta valid for every local loss (and hence for F)."""
        return max(self.loss.curvature_bound(ds) for ds in self.datasets)


# -- the elementary operations ----------------------------------------------


def loss_point(model: LossModel, point: DataPoint, params) -> float:
    ds = Dataset(np.atleast_2d(point.features), np.array([point.label]),
                 None if isinstance(model, SquaredError) else int(np.asarray(params).shape[0]))
    return float(model.point_losses(ds, params)[0])


def local_loss(model: LossModel, dataset: Dataset, params) -> float:
    return model.value(dataset, params)


def global_loss(models: Sequence[tuple[LossModel, Dataset]], weights, params) -> float:
    weights = validate_weights(weights, len(models))
    return float(weighted_sum(weights, [m.value(ds, params) for m, ds in models]))


def grad_local(model: LossModel, dataset: Dataset, params) -> np.ndarray:
    return model.grad(dataset, params)


def gd_step(gradient_source: Callable[[np.ndarray], np.ndarray], params, eta: float) -> np.ndarray:
    if not eta > 0:
        raise ConfigError(f"learning rate must be positive, got {eta}")
    return params - eta * gradient_source(params)


def flat_norm(a) -> float:
    return float(np.linalg.norm(np.ravel(a)))


# -- constants -----------------------------------------------------------------

ESTIMATED = "estimated"
SUPPLIED = "supplied"
UNSET = "unset"


@dataclass(frozen=True)
class ProblemConstants:
    """Lipschitz/smoothness/dissimilarity constants plus the convergence factors.

    ``omega`` and ``phi`` stay ``None`` until :meth:`with_phi` is called.
    The assumption ``delta_i <= 2L`` is deliberately not enforced here so that
    corrupted constants can still be fed to the verifier and reported.
    """

    L: float
    beta: float
    delta_i: tuple
    weights: tuple
    delta: float = None
    omega: float | None = None
    phi: float | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        delta_i = tuple(float(d) for d in self.delta_i)
        weights = tuple(float(r) for r in validate_weights(self.weights, len(delta_i)))
        if self.L < 0 or self.beta < 0 or any(d < 0 for d in delta_i):
            raise InvariantError("L, beta and delta_i must be non-negative")
        delta = float(weighted_sum(weights, delta_i))
        if self.delta is not None and self.delta != delta:
            raise InvariantError(f"delta={self.delta!r} differs from sum rho_i delta_i={delta!r}")
        object.__setattr__(self, "delta_i", delta_i)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "delta", delta)
        prov = {k: UNSET for k in ("L", "beta", "delta_i", "delta", "omega", "phi")}
        prov.update(self.provenance)
        object.__setattr__(self, "provenance", prov)

    def with_phi(self, omega: float, eta: float) -> "ProblemConstants":
        """phi = omega (1 - beta eta / 2)."""
        prov = dict(self.provenance, omega=ESTIMATED, phi=ESTIMATED)
        return replace(self, omega=float(omega), phi=float(omega) * (1.0 - self.beta * eta / 2.0), provenance=prov)

    def dissimilarity_within_range(self) -> bool:
        return all(d <= 2.0 * self.L for d in self.delta_i)

    def overridden(self, L=None, beta=None, delta_i=None, L_scale=1.0, beta_scale=1.0,
                   delta_scale=1.0) -> "ProblemConstants":
        """Replace or rescale fields; touched fields are marked as supplied."""
        prov = dict(self.provenance)
        new_L, new_beta, new_delta_i = self.L, self.beta, self.delta_i
        if L is not None or L_scale != 1.0:
            new_L = (self.L if L is None else float(L)) * L_scale
            prov["L"] = SUPPLIED
        if beta is not None or beta_scale != 1.0:
            new_beta = (self.beta if beta is None else float(beta)) * beta_scale
            prov["beta"] = SUPPLIED
        if delta_i is not None or delta_scale != 1.0:
            base = self.delta_i if delta_i is None else tuple(delta_i)
            new_delta_i = tuple(float(d) * delta_scale for d in base)
            prov["delta_i"] = prov["delta"] = SUPPLIED
        # phi depends on beta, so a new beta invalidates it until with_phi is called again
        phi = self.phi if new_beta == self.beta else None
        return ProblemConstants(new_L, new_beta, new_delta_i, self.weights, None, self.omega, phi, prov)

    def to_dict(self) -> dict:
        return {
            "L": self.L, "beta": self.beta, "delta_i": list(self.delta_i), "delta": self.delta,
            "weights": list(self.weights), "omega": self.omega, "phi": self.phi,
            "provenance": dict(self.provenance),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemConstants":
        return cls(d["L"], d["beta"], tuple(d["delta_i"]), tuple(d["weights"]), None,
                   d.get("omega"), d.get("phi"), dict(d.get("provenance", {})))


def _chunked_grads(loss: LossModel, dataset: Dataset, W: np.ndarray, chunk: int = 256) -> np.ndarray:
    return np.concatenate([loss.grads_batch(dataset, W[a:a + chunk]) for a in range(0, len(W), chunk)])


def estimate_constants(problem: FederatedProblem, probe_params, eta: float, *, pair_samples: int = 4000,
                       curvature_points: int = 16, curvature_iters: int = 25, seed: int = 0) -> ProblemConstants:
    """Estimate L, beta and delta_i as maxima over a probe set.

    L is the largest local gradient norm, delta_i the largest local/global
    gradient gap, and beta the largest gradient-difference ratio over probe
    pairs. Besides consecutive and randomly drawn pairs, beta also scans
    pairs (w, w + h v) with v refined by power iteration, which recovers the
    top Hessian eigenvalue at the probe points.
    """
    probes = np.asarray(probe_params, dtype=np.float64)
    if probes.ndim < 2 or len(probes) < 2:
        raise ConfigError("estimate_constants needs at least 2 probe points")
    P = len(probes)
    flat = probes.reshape(P, -1)
    if np.all(flat == flat[0]):
        raise ConfigError("probe points must contain at least 2 distinct points")
    if not eta > 0:
        raise ConfigError(f"learning rate must be positive, got {eta}")

    grads = [_chunked_grads(problem.loss, ds, probes).reshape(P, -1) for ds in problem.datasets]
    g_global = weighted_sum(problem.weights, grads)
    L = max(float(np.max(np.linalg.norm(g, axis=1))) for g in grads)
    delta_i = tuple(float(np.max(np.linalg.norm(g - g_global, axis=1))) for g in grads)

    rng = np.random.default_rng(seed)
    if P <= 90:
        a, b = np.triu_indices(P, k=1)
    else:
        a = np.concatenate([np.arange(P - 1), rng.integers(0, P, pair_samples)])
        b = np.concatenate([np.arange(1, P), rng.integers(0, P, pair_samples)])
    dist = np.linalg.norm(flat[a] - flat[b], axis=1)
    keep = dist > 0
    a, b, dist = a[keep], b[keep], dist[keep]
    beta = 0.0
    for g in grads:
        if len(dist):
            beta = max(beta, float(np.max(np.linalg.norm(g[a] - g[b], axis=1) / dist)))

    if curvature_points > 0 and curvature_iters > 0:
        beta = max(beta, _curvature_scan(problem, probes, curvature_points, curvature_iters, rng))

    prov = {"L": ESTIMATED, "beta": ESTIMATED, "delta_i": ESTIMATED, "delta": ESTIMATED}
    return ProblemConstants(L, beta, delta_i, tuple(problem.weights), None, None, None, prov)


def _curvature_scan(problem, probes, n_points, iters, rng, h=1e-4) -> float:
    P = len(probes)
    idx = np.unique(np.linspace(0, P - 1, min(n_points, P)).round().astype(int))
    base = probes[idx]
    shape = base.shape
    best = 0.0
    for ds in problem.datasets:
        V = rng.standard_normal(shape)
        V /= np.linalg.norm(V.reshape(len(idx), -1), axis=1).reshape((-1,) + (1,) * (V.ndim - 1))
        g0 = problem.loss.grads_batch(ds, base)
        for _ in range(iters):
            moved = base + h * V
            step = np.linalg.norm((moved - base).reshape(len(idx), -1), axis=1)
            diff = (problem.loss.grads_batch(ds, moved) - g0).reshape(len(idx), -1)
            dn = np.linalg.norm(diff, axis=1)
            ok = step > 0
            if np.any(ok):
                best = max(best, float(np.max(dn[ok] / step[ok])))
            dn[dn == 0] = 1.0
            V = (diff / dn[:, None]).reshape(shape)
    return best


@dataclass(frozen=True)
class ReferenceOptimum:
    """Approximate minimiser of F with its gradient-norm certificate."""

    params: np.ndarray
    loss: float
    grad_norm: float
    steps: int

    @property
    def certified(self) -> bool:
        return self.grad_norm < CERTIFICATE_GRAD_NORM


def compute_reference_optimum(problem: FederatedProblem, init, eta: float, steps: int, *,
                              beta: float | None = None, tol: float = 0.0) -> ReferenceOptimum:
    """Long-horizon centralized gradient descent on the global loss.

    Stops early once the gradient norm drops to ``tol`` (never, by default).
    Raises :class:`NumericalError` when the loss rises for
    ``DIVERGENCE_PATIENCE`` consecutive steps.
    """
    if not eta > 0:
        raise ConfigError(f"learning rate must be positive, got {eta}")
    if beta is not None and beta > 0 and eta >= 2.0 / beta:
        raise PreconditionError(f"step size must satisfy eta < 2/beta (eta={eta}, 2/beta={2.0 / beta})")
    w = np.array(init, dtype=np.float64)
    loss, g = problem.global_value_and_grad(w)
    rises = 0
    done = 0
    for done in range(steps):
        if flat_norm(g) <= tol:
            break
        w = w - eta * g
        new_loss, g = problem.global_value_and_grad(w)
        if not np.isfinite(new_loss):
            raise NumericalError(f"centralized GD diverged at step {done + 1}; step size must satisfy eta < 2/beta")
        rises = rises + 1 if new_loss > loss else 0
        if rises >= DIVERGENCE_PATIENCE:
            raise NumericalError(
                f"centralized GD loss increased for {DIVERGENCE_PATIENCE} consecutive steps (step {done + 1}); "
                f"step size must satisfy eta < 2/beta (eta={eta})")
        loss = new_loss
    else:
        done = steps
    return ReferenceOptimum(w, float(loss), flat_norm(g), done)
