"""Closed-form convergence bounds for delayed averaging and their empirical checks.

Notation follows the simulator: ``eta`` learning rate, ``beta`` smoothness,
``L`` Lipschitz constant, ``delta`` average gradient dissimilarity, ``tau``
aggregation period, ``delta_comm`` the communication delay and ``alpha`` the
synchronization weight. ``g = 1 + eta*beta`` is the per-step growth factor.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import BoundDivergenceError, ConfigError, PreconditionError
from .ml_core import FederatedProblem, ProblemConstants, ReferenceOptimum, flat_norm

GAP_SLACK = 1e-10
VERIFY_ATOL = 1e-10
VERIFY_RTOL = 1e-9
PHI_NOTE = ("phi = omega * (1 - beta*eta/2) with omega = 1 / max_k ||c_k(k*tau - delta) - w*||^2, "
            "computed from the simulated period starts and a GD-certified w*")


@dataclass(frozen=True)
class BoundParams:
    L: float
    beta: float
    delta: float
    eta: float
    tau: int
    delta_comm: int
    alpha: float
    K: int
    phi: float | None = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ConfigError(f"eta must be positive, got {self.eta}", "eta")
        if self.L < 0 or self.beta < 0 or self.delta < 0:
            raise ConfigError("L, beta and delta must be non-negative")
        if self.beta * self.eta >= 2.0:
            raise PreconditionError(f"bounds require η < 2/β (eta={self.eta}, beta={self.beta}, "
                                    f"2/beta={2.0 / self.beta})", "eta")
        if int(self.tau) != self.tau or self.tau < 1:
            raise ConfigError(f"tau must be a positive integer, got {self.tau}", "tau")
        if int(self.delta_comm) != self.delta_comm or not 0 <= self.delta_comm <= self.tau:
            raise ConfigError(f"delay must be an integer in [0, tau], got {self.delta_comm}", "delta_comm")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigError(f"K must be a positive integer, got {self.K}", "K")
        if not 0.0 <= self.alpha <= 1.0:
            raise ConfigError(f"alpha must lie in [0, 1], got {self.alpha}", "alpha")
        object.__setattr__(self, "tau", int(self.tau))
        object.__setattr__(self, "delta_comm", int(self.delta_comm))
        object.__setattr__(self, "K", int(self.K))

    @property
    def T(self) -> int:
        return self.K * self.tau

    @classmethod
    def from_run(cls, constants: ProblemConstants, config) -> "BoundParams":
        return cls(constants.L, constants.beta, constants.delta, config.eta, config.tau, config.delta,
                   config.alpha, config.K, constants.phi)

    @classmethod
    def from_dict(cls, d: dict, path: str = "bound") -> "BoundParams":
        if not isinstance(d, dict):
            raise ConfigError("expected an object", path)
        allowed = {"L", "beta", "delta", "eta", "tau", "delta_comm", "alpha", "K", "phi"}
        extra = sorted(set(d) - allowed)
        if extra:
            raise ConfigError(f"unknown field(s) {extra}", path)
        values = {}
        for key in sorted(allowed - {"phi"}):
            if key not in d:
                raise ConfigError("missing required field", f"{path}.{key}")
            v = d[key]
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"expected a number, got {v!r}", f"{path}.{key}")
            values[key] = v
        phi = d.get("phi")
        if phi is not None and (isinstance(phi, bool) or not isinstance(phi, (int, float))):
            raise ConfigError(f"expected a number, got {phi!r}", f"{path}.phi")
        return cls(phi=phi, **values)

    @classmethod
    def from_metadata(cls, meta: dict) -> "BoundParams":
        """Rebuild from the metadata JSON written by a simulation run."""
        try:
            c, sim = meta["constants"], meta["sim"]
        except (KeyError, TypeError):
            raise ConfigError("metadata needs 'constants' and 'sim' objects") from None
        try:
            return cls(c["L"], c["beta"], c["delta"], sim["eta"], sim["tau"], sim["delta"], sim["alpha"], sim["K"],
                       c.get("phi"))
        except KeyError as exc:
            raise ConfigError("missing required field", f"metadata.{exc.args[0]}") from None


def _growth_minus_one(p: BoundParams, x) -> float:
    """(1 + eta*beta)^x - 1."""
    return math.expm1(x * math.log1p(p.eta * p.beta))


def _growth(p: BoundParams, x) -> float:
    return math.exp(x * math.log1p(p.eta * p.beta))


def h(x, params: BoundParams) -> float:
    """(delta/beta)[(1+eta beta)^x - 1] - eta delta x."""
    if x < 0:
        raise ConfigError(f"h is defined for x >= 0, got {x}")
    p = params
    if p.beta == 0:
        return 0.0
    return p.delta / p.beta * _growth_minus_one(p, x) - p.eta * p.delta * x


def _require_alpha(alpha: float):
    if alpha <= 0:
        raise BoundDivergenceError(
            "bound diverges without aggregation: alpha must be > 0 for the deviation bound epsilon^(k)", "alpha")
    if alpha > 1:
        raise ConfigError(f"alpha must lie in (0, 1], got {alpha}", "alpha")


def epsilon_k(k: int, params: BoundParams, alpha: float | None = None) -> float:
    """[1 - (1-alpha)^k] 2 eta L (tau/alpha - delay)."""
    alpha = params.alpha if alpha is None else alpha
    _require_alpha(alpha)
    if k < 0:
        raise ConfigError(f"period index must be non-negative, got {k}")
    p = params
    return (1.0 - (1.0 - alpha) ** k) * 2.0 * p.eta * p.L * (p.tau / alpha - p.delta_comm)


def _psi_tail(alpha: float, p: BoundParams) -> float:
    # the k-independent part of psi
    return ((1 - alpha) * h(p.tau, p) + alpha * h(p.tau - p.delta_comm, p)
            + alpha * p.eta * p.delta_comm * p.L * _growth(p, p.tau - p.delta_comm))


def psi(alpha: float, k: int, params: BoundParams) -> float:
    """Bound on ||w((k+1)tau - delay) - c_k((k+1)tau - delay)||."""
    _require_alpha(alpha)
    eps = epsilon_k(k, params, alpha)
    return (1 - alpha) * eps * _growth_minus_one(params, params.tau) + _psi_tail(alpha, params)


def psi_inf(alpha: float, params: BoundParams) -> float:
    """Limit of psi(alpha, k) as k grows."""
    _require_alpha(alpha)
    p = params
    eps_inf = 2.0 * p.eta * p.L * (p.tau / alpha - p.delta_comm)
    return (1 - alpha) * eps_inf * _growth_minus_one(p, p.tau) + _psi_tail(alpha, p)


def Psi(alpha: float, params: BoundParams) -> float:
    """sum_{k=1..K} psi(alpha, k) in closed form."""
    _require_alpha(alpha)
    p = params
    return p.K * psi_inf(alpha, p) - _growth_minus_one(p, p.tau) * (1 - alpha) ** 2 / alpha * epsilon_k(p.K, p, alpha)


def psi_sum(alpha: float, params: BoundParams) -> float:
    """sum_{k=1..K} psi(alpha, k) by direct summation."""
    return math.fsum(psi(alpha, k, params) for k in range(1, params.K + 1))


def _require_phi(params: BoundParams) -> float:
    if params.phi is None or not params.phi > 0:
        raise PreconditionError(f"the gap bound requires phi > 0 (got {params.phi}); run with a certified w*", "phi")
    return params.phi


def theorem1_bound(params: BoundParams, alpha: float | None = None, *, Psi_value: float | None = None,
                   psi_K: float | None = None) -> float:
    """Upper bound on F(w^K) - F(w*) after T = K*tau steps."""
    alpha = params.alpha if alpha is None else alpha
    phi = _require_phi(params)
    eta, T, L = params.eta, params.T, params.L
    Psi_value = Psi(alpha, params) if Psi_value is None else Psi_value
    psi_K = psi(alpha, params.K, params) if psi_K is None else psi_K
    if math.isinf(phi):
        return L * psi_K
    a = 1.0 / (2.0 * eta * phi * T)
    return a + math.sqrt(a * a + L * Psi_value / (eta * phi * T)) + L * psi_K


def asymptotic_gap(alpha: float, params: BoundParams) -> float:
    """Limit of the gap bound as K grows."""
    phi = _require_phi(params)
    pinf = psi_inf(alpha, params)
    if math.isinf(phi):
        return params.L * pinf
    return math.sqrt(params.L / (params.eta * phi * params.tau)) * math.sqrt(pinf) + params.L * pinf


def _alpha_terms(params: BoundParams) -> tuple[float, float]:
    """(numerator, denominator) of the squared optimal alpha."""
    p = params
    A = _growth_minus_one(p, p.tau)
    B = _growth(p, p.tau - p.delta_comm)
    num = 2.0 * p.eta * p.L * p.tau * A
    den = p.eta * p.delta_comm * p.L * (2.0 * A + B)  # 2(1+eb)^tau + (1+eb)^(tau-D) - 2
    if p.beta > 0:
        den -= p.delta / p.beta * B * _growth_minus_one(p, p.delta_comm)
    den += p.eta * p.delta * p.delta_comm
    return num, den


def delta_threshold(params: BoundParams) -> float:
    """Dissimilarity level above which alpha = 1 minimises psi_inf.

    Returns ``-inf`` for zero delay (alpha = 1 is optimal for every delta) and
    ``+inf`` when the denominator is not positive.
    """
    p = params
    if p.delta_comm == 0:
        return -math.inf
    eb = p.eta * p.beta
    den = _growth(p, p.tau) - _growth(p, p.tau - p.delta_comm) - eb * p.delta_comm
    num = eb * p.L * (p.delta_comm * _growth(p, p.tau - p.delta_comm)
                      - 2.0 * _growth_minus_one(p, p.tau) * (p.tau - p.delta_comm))
    if not den > 0:
        return math.inf if num > 0 else -math.inf
    return num / den


def increasing_at_one(params: BoundParams) -> bool:
    """Whether psi_inf is non-decreasing at alpha = 1 (so some alpha < 1 is at least as good)."""
    num, den = _alpha_terms(params)
    return den >= num


def optimal_alpha(params: BoundParams) -> float:
    """Minimiser of psi_inf over (0, 1]; 1 whenever the interior formula does not apply."""
    if params.delta_comm == 0 or params.delta >= delta_threshold(params):
        return 1.0
    num, den = _alpha_terms(params)
    if not den > 0 or not num > 0:
        return 1.0
    a = math.sqrt(num / den)
    return min(a, 1.0)


@dataclass
class BoundReport:
    params: dict
    epsilon_by_k: list
    psi_by_k: list
    Psi: float
    Psi_direct: float
    h_tau: float
    h_tau_minus_delta: float
    psi_inf: float
    gap_bound: float | None
    asymptotic_gap: float | None
    optimal_alpha: float
    psi_inf_at_optimum: float
    delta_threshold: float
    monotone_in_alpha: bool
    notes: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        for key in ("delta_threshold",):
            if not math.isfinite(d[key]):
                d["notes"] = d["notes"] + [f"{key} is {d[key]}"]
                d[key] = None
        return d


def bound_report(params: BoundParams) -> BoundReport:
    alpha = params.alpha
    eps = [epsilon_k(k, params) for k in range(params.K + 1)]
    psis = [psi(alpha, k, params) for k in range(1, params.K + 1)]
    Psi_closed = Psi(alpha, params)
    notes = [PHI_NOTE]
    gap = asym = None
    if params.phi is not None and params.phi > 0:
        gap = theorem1_bound(params, Psi_value=Psi_closed, psi_K=psis[-1])
        asym = asymptotic_gap(alpha, params)
    else:
        notes.append("phi unavailable: gap bounds omitted")
    a_opt = optimal_alpha(params)
    thr = delta_threshold(params)
    if params.delta_comm == 0:
        notes.append("zero delay: the threshold denominator vanishes and alpha = 1 is optimal")
    return BoundReport(
        params=asdict(params), epsilon_by_k=eps, psi_by_k=psis, Psi=Psi_closed, Psi_direct=psi_sum(alpha, params),
        h_tau=h(params.tau, params), h_tau_minus_delta=h(params.tau - params.delta_comm, params),
        psi_inf=psi_inf(alpha, params), gap_bound=gap, asymptotic_gap=asym, optimal_alpha=a_opt,
        psi_inf_at_optimum=psi_inf(a_opt, params), delta_threshold=thr,
        monotone_in_alpha=not increasing_at_one(params), notes=notes)


# -- empirical verification --------------------------------------------------


@dataclass(frozen=True)
class CheckRow:
    check: str
    k: int
    measured: float
    bound: float
    slack: float
    passed: bool


def _row(check, k, measured, bound) -> CheckRow:
    measured, bound = float(measured), float(bound)
    tol = VERIFY_ATOL + VERIFY_RTOL * max(abs(bound), abs(measured))
    return CheckRow(check, int(k), measured, bound, bound - measured, bool(measured <= bound + tol))


@dataclass
class GapSeries:
    """F(c_k(t)) - F(w*) for every period, plus the terminal gap."""

    gaps: np.ndarray
    terminal: float

    def all_nonnegative(self, slack: float = GAP_SLACK) -> bool:
        return bool(np.all(self.gaps >= -slack)) and self.terminal >= -slack


@dataclass
class VerificationReport:
    rows: list
    constants: ProblemConstants
    bound_params: BoundParams
    gap_series: GapSeries
    measured_gap: float
    reference: ReferenceOptimum
    metadata: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def failures(self) -> list:
        return [r for r in self.rows if not r.passed]

    def summary(self) -> dict:
        out: dict = {}
        for r in self.rows:
            s = out.setdefault(r.check, {"rows": 0, "violations": 0, "min_slack": math.inf})
            s["rows"] += 1
            s["violations"] += 0 if r.passed else 1
            s["min_slack"] = min(s["min_slack"], r.slack)
        return out


def gap_series(aux, problem: FederatedProblem, w_star: ReferenceOptimum, terminal_loss: float) -> GapSeries:
    K, n = aux.paths.shape[:2]
    flat = aux.paths.reshape((K * n,) + aux.paths.shape[2:])
    losses = problem.global_losses_batch(flat).reshape(K, n)
    return GapSeries(losses - w_star.loss, terminal_loss - w_star.loss)


def compute_phi(constants: ProblemConstants, aux, w_star: ReferenceOptimum, eta: float) -> ProblemConstants:
    """Attach omega and phi derived from the period starts and the reference optimum."""
    starts = aux.paths[:, 0]
    worst = max(flat_norm(s - w_star.params) ** 2 for s in starts)
    omega = math.inf if worst == 0 else 1.0 / worst
    return constants.with_phi(omega, eta)


def _hull_points(probes: np.ndarray, count: int, rng) -> np.ndarray:
    P = len(probes)
    a = rng.integers(0, P, count)
    b = rng.integers(0, P, count)
    c = rng.integers(0, P, count)
    lam = rng.dirichlet(np.ones(3), count)
    shape = (count,) + (1,) * (probes.ndim - 1)
    return (lam[:, 0].reshape(shape) * probes[a] + lam[:, 1].reshape(shape) * probes[b]
            + lam[:, 2].reshape(shape) * probes[c])


def verify_bounds(trajectory, aux, constants: ProblemConstants, w_star: ReferenceOptimum,
                  problem: FederatedProblem, *, probes=None, expansion_pairs: int = 200, hull_points: int = 100,
                  seed: int = 0) -> VerificationReport:
    """Compare every intermediate bound against the simulated run.

    Rows are emitted per (check, k) and keep the worst case over devices and
    steps inside that period. ``constants.phi`` is (re)derived here from the
    auxiliary starts and ``w_star`` when it has not been computed yet.
    """
    if w_star is None or not isinstance(w_star, ReferenceOptimum):
        raise PreconditionError("verification needs a reference optimum; run compute_reference_optimum first")
    cfg = trajectory.config
    if cfg.alpha <= 0:
        raise BoundDivergenceError("verification requires alpha > 0: the deviation bound diverges at alpha = 0")
    if constants.phi is None:
        constants = compute_phi(constants, aux, w_star, cfg.eta)
    bp = BoundParams.from_run(constants, cfg)
    rng = np.random.default_rng(seed)
    tl = trajectory.timeline
    eta, alpha, tau, D, K = cfg.eta, cfg.alpha, cfg.tau, cfg.delta, cfg.K
    L, beta = constants.L, constants.beta
    weights = problem.weights
    rows: list[CheckRow] = []

    for i, d_i in enumerate(constants.delta_i):
        rows.append(_row("dissimilarity_range", i, d_i, 2.0 * L))

    # expansiveness of one centralized step
    pts = np.concatenate([trajectory.globals_, aux.paths.reshape((-1,) + aux.paths.shape[2:])])
    ia = rng.integers(0, len(pts), expansion_pairs)
    ib = rng.integers(0, len(pts), expansion_pairs)
    factor = math.sqrt(1.0 + beta * beta * eta * eta)
    worst = None
    for a, b in zip(ia, ib):
        dist = flat_norm(pts[a] - pts[b])
        if dist == 0:
            continue
        lhs = flat_norm((pts[a] - eta * problem.global_grad(pts[a])) - (pts[b] - eta * problem.global_grad(pts[b])))
        r = _row("step_expansion", 0, lhs, factor * dist)
        if worst is None or r.slack < worst.slack:
            worst = r
    if worst is not None:
        rows.append(worst)

    # gradient norms at the probes and at fresh points inside their hull
    if probes is None:
        probes = np.concatenate([trajectory.history.reshape((-1,) + trajectory.history.shape[2:]), pts])
    probes = np.asarray(probes)
    fresh = _hull_points(probes, hull_points, rng)
    for label, cloud in (("grad_norm_probes", probes), ("grad_norm_hull", fresh)):
        norms = [np.max(np.linalg.norm(problem.loss.grads_batch(ds, cloud[s:s + 512]).reshape(
            len(cloud[s:s + 512]), -1), axis=1)) for ds in problem.datasets for s in range(0, len(cloud), 512)]
        rows.append(_row(label, 0, max(norms), L))

    # device spread around the global model at send times
    for k in range(K + 1):
        t = k * tau - D
        g = trajectory.globals_[k]
        # zero delay: compare the pre-merge values that were averaged into the snapshot
        devs = trajectory.presync[k] if k in trajectory.presync else trajectory.devices_at(t)
        spread = max(flat_norm(devs[i] - g) for i in range(cfg.N))
        rows.append(_row("device_spread", k, spread, epsilon_k(k, bp)))

    growth = 1.0 + eta * beta
    for k in range(K):
        # one-step recursion of ||w_i(t) - c_k(t)|| on non-sync steps
        worst = None
        for t in tl.period(k):
            if tl.sync_index(t) is not None:
                continue
            c_prev, c_now = aux.at(k, t - 1), aux.at(k, t)
            for i in range(cfg.N):
                lhs = flat_norm(trajectory.device(i, t) - c_now)
                rhs = growth * flat_norm(trajectory.device(i, t - 1) - c_prev) + eta * constants.delta_i[i]
                r = _row("local_recursion", k, lhs, rhs)
                if worst is None or r.slack < worst.slack:
                    worst = r
        if worst is not None:
            rows.append(worst)

        # global model against c_k at the sync time
        eps = epsilon_k(k, bp)
        sync_bound = alpha * D * L * eta + (1 - alpha) * (_growth_minus_one(bp, D) * eps + h(D, bp))
        measured = flat_norm(trajectory.global_at(k * tau) - aux.at(k, k * tau))
        rows.append(_row("sync_gap", k, measured, sync_bound))

        # global model against c_k at the end of the period
        t_end = (k + 1) * tau - D
        measured = flat_norm(trajectory.globals_[k + 1] - aux.at(k, t_end))
        rows.append(_row("period_end_gap", k, measured, psi(alpha, k, bp)))

    gaps = gap_series(aux, problem, w_star, float(trajectory.global_losses[trajectory.selected_k]))
    rows.append(_row("gap_nonnegative", 0, -float(min(gaps.gaps.min(), gaps.terminal)), GAP_SLACK))
    measured_gap = max(gaps.terminal, 0.0)
    rows.append(_row("optimality_gap", K, measured_gap, theorem1_bound(bp)))
    meta = {"phi_note": PHI_NOTE, "w_star_certified": w_star.certified, "w_star_grad_norm": w_star.grad_norm,
            "eta_beta": eta * beta}
    return VerificationReport(rows, constants, bp, gaps, measured_gap, w_star, meta)


VERIFICATION_HEADER = ("check_name", "k", "measured", "bound", "slack", "pass")


def verification_rows(report: VerificationReport):
    return [(r.check, r.k, r.measured, r.bound, r.slack, r.passed) for r in report.rows]
