"""Independent correctness machinery.

* :func:`solve_entropy_balance` solves the finite max-entropy balancing
  problem exactly through its one-dimensional dual.
* :func:`dual_grid_search` maximizes the same dual by brute-force zooming
  grids; it shares no code path with the Newton solver.
* :func:`monte_carlo_bias` measures estimator bias in a synthetic world and
  compares it with the closed-form expectation.
* :func:`finite_diff_check` compares analytic gradients with central
  differences.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .estimators import EstimatorKind, dr_estimate, ips_estimate, naive_estimate
from .exceptions import ContractError, ConvergenceError, InfeasibleError


# --------------------------------------------------------------------------
# Exact entropy-balancing solver
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BalanceProblem:
    """Minimize ``sum w log w`` subject to a mean target per block and one shared moment target.

    ``moments`` / ``mean_target`` describe the first block; ``split`` is an
    optional second block ``(moments, mean_target)`` sharing the moment
    constraint (the two-block DR and AutoDebias forms).
    """

    moments: np.ndarray
    mean_target: float
    moment_target: float
    split: tuple | None = None

    def __post_init__(self):
        a = np.asarray(self.moments, dtype=np.float64).reshape(-1)
        object.__setattr__(self, "moments", a)
        if len(a) < 1:
            raise ContractError("a balance problem needs at least one sample")
        if self.split is not None:
            a2, t2 = self.split
            a2 = np.asarray(a2, dtype=np.float64).reshape(-1)
            if len(a2) < 1:
                raise ContractError("second block needs at least one sample")
            object.__setattr__(self, "split", (a2, float(t2)))
        for a_k, t_k in self.blocks:
            if not np.isfinite(a_k).all():
                raise ContractError("moments must be finite")
            if not t_k > 0:
                raise ContractError("mean targets must be positive")
        if not math.isfinite(self.moment_target):
            raise ContractError("moment target must be finite")

    @property
    def blocks(self):
        out = [(self.moments, float(self.mean_target))]
        if self.split is not None:
            out.append(self.split)
        return out

    def achievable_interval(self):
        lo = sum(len(a) * t * float(a.min()) for a, t in self.blocks)
        hi = sum(len(a) * t * float(a.max()) for a, t in self.blocks)
        return lo, hi


@dataclass
class DualSolution:
    weights: list
    duals: dict
    kkt_residual: float
    iterations: int
    constraint_residuals: dict = field(default_factory=dict)

    @property
    def flat_weights(self):
        return np.concatenate(self.weights)


def _block_weights(a, budget, nu):
    x = -nu * a
    return budget * np.exp(x - logsumexp(x))


def _moment_and_slope(blocks, nu):
    value, slope = 0.0, 0.0
    for a, t in blocks:
        w = _block_weights(a, len(a) * t, nu)
        m = w @ a
        value += m
        slope -= w @ (a - m / (len(a) * t)) ** 2
    return value, slope


def _solution(problem, nu, iterations, tol):
    blocks = problem.blocks
    weights, mus = [], []
    stationarity = 0.0
    mean_res = 0.0
    moment = 0.0
    for a, t in blocks:
        budget = len(a) * t
        w = _block_weights(a, budget, nu)
        mu = -1.0 - math.log(budget) + float(logsumexp(-nu * a))
        stationarity = max(stationarity, float(np.max(np.abs(np.log(w) + 1.0 + mu + nu * a))))
        mean_res = max(mean_res, abs(w.mean() - t) / t)
        moment += float(w @ a)
        weights.append(w)
        mus.append(mu)
    moment_res = abs(moment - problem.moment_target)
    kkt = max(stationarity, mean_res, moment_res)
    duals = {"nu": float(nu), "mu": mus}
    residuals = {"stationarity": stationarity, "mean": mean_res, "moment": moment_res}
    return DualSolution(weights, duals, kkt, iterations, residuals)


def solve_entropy_balance(problem, tol=1e-12, max_iter=200):
    """Exact max-entropy weights via safeguarded Newton on the dual variable.

    Stationarity gives ``w_j = exp(-1 - mu_k - nu * a_j)`` in block ``k``;
    each ``mu_k`` is fixed by that block's mean constraint, leaving a single
    monotone equation in ``nu`` for the shared moment constraint.
    """
    blocks = problem.blocks
    lo, hi = problem.achievable_interval()
    m = float(problem.moment_target)
    scale = max(1.0, abs(m), abs(lo), abs(hi))
    if hi - lo <= tol * scale:
        if abs(m - lo) <= tol * scale:
            return _solution(problem, 0.0, 0, tol)
        raise InfeasibleError(f"moment target {m} outside achievable value {lo}", (lo, hi))
    if not lo < m < hi:
        raise InfeasibleError(f"moment target {m} outside the achievable interval ({lo}, {hi})", (lo, hi))

    def G(nu):
        value, slope = _moment_and_slope(blocks, nu)
        return value - m, slope

    nu = 0.0
    g, dg = G(nu)
    it = 0
    if abs(g) <= tol * scale:
        return _solution(problem, nu, it, tol)

    # G decreases in nu; bracket the root
    spread = max(np.ptp(a) for a, _ in blocks) or 1.0
    step = 1.0 / spread
    left, right = (0.0, None) if g > 0 else (None, 0.0)
    probe = 0.0
    while left is None or right is None:
        it += 1
        if it > max_iter:
            raise ConvergenceError("could not bracket the dual root", residual=abs(g))
        probe = probe + step if right is None else probe - step
        step *= 2.0
        gp, _ = G(probe)
        if gp > 0:
            left = probe
        else:
            right = probe
        if gp == 0:
            return _solution(problem, probe, it, tol)

    nu = 0.5 * (left + right)
    g, dg = G(nu)
    best = (abs(g), nu)
    target_tol = tol * max(1.0, abs(m))
    while it < max_iter and abs(g) > target_tol:
        it += 1
        if g > 0:
            left = nu
        else:
            right = nu
        if right - left <= 4.0 * np.finfo(float).eps * max(1.0, abs(nu)):
            break  # bracket at floating-point resolution
        newton = nu - g / dg if dg < 0 else None
        nu_next = newton if newton is not None and left < newton < right else 0.5 * (left + right)
        if nu_next == nu:
            break
        nu = nu_next
        g, dg = G(nu)
        if abs(g) < best[0]:
            best = (abs(g), nu)
    nu = best[1]
    sol = _solution(problem, nu, it, tol)
    if sol.constraint_residuals["moment"] > max(1e3 * tol, 1e-10) * scale:
        raise ConvergenceError(
            f"moment residual {sol.constraint_residuals['moment']:.3e} after {it} iterations", residual=sol.kkt_residual
        )
    return sol


def _lse(x):
    top = float(np.max(x))
    return top + math.log(float(np.sum(np.exp(x - top))))


def dual_value(problem, nu):
    """Lagrangian dual ``min_w [sum w log w + nu (sum w a - m)]`` over the mean constraints.

    Per block with budget ``B = n * t`` the inner minimum is
    ``B log B - B logsumexp(-nu a)``. Written independently of the solver.
    """
    return _dual_core(problem, nu) + sum(len(a) * t * math.log(len(a) * t) for a, t in problem.blocks)


def _dual_core(problem, nu):
    # the dual without its nu-independent part, which only adds rounding error
    total = -nu * problem.moment_target
    for a, t in problem.blocks:
        total -= len(a) * t * _lse(-nu * a)
    return total


def _dual_slope(problem, nu):
    # d/dnu of the dual: achieved moment under the block softmax minus the target
    total = -problem.moment_target
    for a, t in problem.blocks:
        x = -nu * a
        e = np.exp(x - x.max())
        total += len(a) * t * float(e @ a) / float(e.sum())
    return total


def dual_grid_search(problem, points=201, rounds=60, half_width=None):
    """Maximize the concave dual over ``nu`` by repeatedly zooming a dense grid.

    Each round keeps the grid cell where the dual's slope changes sign.
    Returns ``(nu, weights)``; this is the reference the Newton solver is
    checked against.
    """
    if half_width is None:
        half_width = 1.0
        while _dual_slope(problem, half_width) > 0 or _dual_slope(problem, -half_width) < 0:
            half_width *= 2.0
            if half_width > 1e8:
                break
    center, width = 0.0, half_width
    for _ in range(rounds):
        grid = np.linspace(center - width, center + width, points)
        slopes = np.array([_dual_slope(problem, v) for v in grid])
        up = np.flatnonzero(slopes > 0)
        k = int(up[-1]) if len(up) else 0
        k = min(k, points - 2)
        center = 0.5 * (grid[k] + grid[k + 1])
        width = grid[1] - grid[0]
        if width <= 4 * np.finfo(float).eps * max(1.0, abs(center)):
            break
    weights = []
    for a, t in problem.blocks:
        x = -center * a
        e = np.exp(x - x.max())
        weights.append(len(a) * t * e / e.sum())
    return center, weights


def read_problem(path):
    """Parse a ``key = value`` problem file (``a``, ``mean_target``, ``moment_target``, optional ``a2``/``mean_target2``)."""
    fields = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ContractError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (x.strip() for x in line.split("=", 1))
            fields[key] = value
    try:
        a = [float(x) for x in fields["a"].replace(",", " ").split()]
        split = None
        if "a2" in fields:
            split = ([float(x) for x in fields["a2"].replace(",", " ").split()], float(fields["mean_target2"]))
        return BalanceProblem(a, float(fields["mean_target"]), float(fields["moment_target"]), split)
    except KeyError as exc:
        raise ContractError(f"{path}: missing field {exc.args[0]!r}") from None
    except ValueError as exc:
        raise ContractError(f"{path}: {exc}") from None


# --------------------------------------------------------------------------
# Monte-Carlo bias in synthetic worlds
# --------------------------------------------------------------------------

PROPENSITY_SOURCES = ("true", "nominal", "misspecified")


@dataclass
class BiasReport:
    estimator: EstimatorKind
    propensity_source: str
    confound_strength: float
    empirical_bias: float
    analytic_bias: float
    standard_error: float
    replicates: int

    @property
    def z_score(self):
        return (self.empirical_bias - self.analytic_bias) / self.standard_error

    HEADER = (
        "estimator",
        "propensity_source",
        "confound_strength",
        "empirical_bias",
        "analytic_bias",
        "standard_error",
        "replicates",
    )

    def row(self):
        return [
            self.estimator.method,
            self.propensity_source,
            repr(self.confound_strength),
            repr(self.empirical_bias),
            repr(self.analytic_bias),
            repr(self.standard_error),
            self.replicates,
        ]

    def to_csv(self, header=True):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        if header:
            writer.writerow(self.HEADER)
        writer.writerow(self.row())
        return buf.getvalue()


def _logit(p):
    return np.log(p) - np.log1p(-p)


def _nominal_hat(world, source, misspecification):
    if source == "nominal":
        return world.nominal_propensity
    if source == "misspecified":
        return 1.0 / (1.0 + np.exp(-(_logit(world.nominal_propensity) + misspecification)))
    return None


def analytic_bias(world, estimator, propensity_source="nominal", misspecification=0.5):
    """Closed-form ``E[estimate] - E[ideal]`` averaging over the confounder and the mask.

    For IPS and DR with a fixed propensity estimate ``q`` and imputation
    ``g = E[e | x]`` the per-pair bias is ``sum_h P(h) (p_h / q - 1)(E[e|h] - c)``
    with ``c = 0`` for IPS and ``c = g`` for DR; with ``q = p`` this is the
    covariance ``Cov((o - p) / p, e - c)``. The naive estimator is a ratio and
    is reported with its first-order (ratio of expectations) value.
    """
    kind = EstimatorKind.parse(estimator) if isinstance(estimator, str) else estimator
    p_h = world.propensity_given_h
    e_h = world.error_mean_given_h()
    g = e_h.mean(axis=0)
    if kind.family == "naive":
        return float((p_h * e_h).mean(axis=0).sum() / p_h.mean(axis=0).sum() - g.mean())
    if propensity_source == "true":
        return 0.0
    q = _nominal_hat(world, propensity_source, misspecification)
    if kind.family == "ips":
        return float(np.mean(0.5 * ((p_h / q - 1.0) * e_h).sum(axis=0)))
    if kind.family == "dr":
        return float(np.mean(0.5 * ((p_h / q - 1.0) * (e_h - g)).sum(axis=0)))
    raise ContractError(f"no bias formula for {kind.family!r}")


def monte_carlo_bias(
    world,
    estimator,
    propensity_source="nominal",
    replicates=10_000,
    seed=0,
    misspecification=0.5,
    chunk=1000,
):
    """Resample ``(h, o, e)`` ``replicates`` times and report the estimator bias.

    Each replicate compares the estimator (with the chosen propensity source
    and, for DR, the exact imputation ``g``) against that replicate's ideal
    loss over all pairs.
    """
    kind = EstimatorKind.parse(estimator) if isinstance(estimator, str) else estimator
    if kind.family not in ("naive", "ips", "dr"):
        raise ContractError(f"monte_carlo_bias supports naive, ips and dr, not {kind.family!r}")
    if propensity_source not in PROPENSITY_SOURCES:
        raise ContractError(f"propensity_source must be one of {PROPENSITY_SOURCES}")
    if replicates < 100:
        raise ContractError(f"need at least 100 replicates, got {replicates}")

    g = world.imputation_oracle().reshape(-1)
    q_fixed = _nominal_hat(world, propensity_source, misspecification)
    q_fixed = None if q_fixed is None else q_fixed.reshape(-1)
    n_chunks = -(-replicates // chunk)
    children = np.random.SeedSequence(seed).spawn(n_chunks)
    biases = []
    for k, child in enumerate(children):
        size = min(chunk, replicates - k * chunk)
        rng = np.random.default_rng(child)
        _, o, e, p_true = world.resample(rng, size=size)
        o = o.reshape(size, -1)
        e = e.reshape(size, -1)
        q = p_true.reshape(size, -1) if q_fixed is None else q_fixed
        if kind.family == "naive":
            est = naive_estimate(o, e)
        elif kind.family == "ips":
            est = ips_estimate(o, e, q)
        else:
            est = dr_estimate(o, e, g, q)
        biases.append(est - e.mean(axis=1))
    biases = np.concatenate(biases)
    return BiasReport(
        estimator=kind,
        propensity_source=propensity_source,
        confound_strength=world.confound_strength,
        empirical_bias=float(biases.mean()),
        analytic_bias=analytic_bias(world, kind, propensity_source, misspecification),
        standard_error=float(biases.std(ddof=1) / math.sqrt(len(biases))),
        replicates=len(biases),
    )


# --------------------------------------------------------------------------
# Finite differences
# --------------------------------------------------------------------------


def finite_diff_check(fun, params, step=1e-5, grad=None, max_coords=200, seed=0, return_details=False):
    """Max relative error between an analytic gradient and central differences.

    ``fun(x)`` returns the objective value, or ``(value, gradient)`` when
    ``grad`` is omitted. Up to ``max_coords`` coordinates are sampled.
    The relative error of coordinate ``j`` is
    ``|g_j - n_j| / max(|g_j|, |n_j|, 1e-6 * max(|g|_inf, |n|_inf), 1e-12)``
    so coordinates whose true derivative is negligible do not divide by zero.
    """
    x = np.array(params, dtype=np.float64)
    if grad is None:
        value, analytic = fun(x)
        objective = lambda y: fun(y)[0]  # noqa: E731
    else:
        value, analytic = fun(x), grad(x)
        objective = fun
    analytic = np.asarray(analytic, dtype=np.float64).reshape(-1)
    if analytic.shape != x.shape:
        raise ContractError(f"gradient shape {analytic.shape} does not match parameters {x.shape}")
    if not np.isfinite(value):
        raise FloatingPointError(f"objective is not finite at the base point: {value}")

    rng = np.random.default_rng(seed)
    n = len(x)
    coords = np.arange(n) if n <= max_coords else np.sort(rng.choice(n, size=max_coords, replace=False))
    numeric = np.empty(len(coords))
    for k, j in enumerate(coords):
        xp = x.copy()
        xm = x.copy()
        xp[j] += step
        xm[j] -= step
        fp, fm = objective(xp), objective(xm)
        if not (np.isfinite(fp) and np.isfinite(fm)):
            raise FloatingPointError(f"objective not finite when perturbing coordinate {j}")
        numeric[k] = (fp - fm) / (2.0 * step)
    ga = analytic[coords]
    floor = max(1e-6 * max(np.max(np.abs(ga), initial=0.0), np.max(np.abs(numeric), initial=0.0)), 1e-12)
    denom = np.maximum(np.maximum(np.abs(ga), np.abs(numeric)), floor)
    rel = np.abs(ga - numeric) / denom
    err = float(rel.max(initial=0.0))
    if return_details:
        return err, {"coords": coords, "analytic": ga, "numeric": numeric, "relative": rel}
    return err
