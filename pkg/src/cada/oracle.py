"""Independent brute-force and analytic verifiers.

Small finite-state machinery that certifies, by exact enumeration, the
variational claim the guided sampler rests on: the cost-plus-KL objective
over path distributions is minimized by the exponentially tilted prior.
Also holds the conjugate-Gaussian posterior mean used to validate Tweedie
estimates and the finite-difference gradient checker shared by tests.

Nothing here is used by the main pipeline.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, NumericalError

ENUMERATION_BUDGET = 100_000


@dataclass(frozen=True)
class FiniteChain:
    """Finite-alphabet Markov chain with per-step state costs.

    ``p0``: (A,) initial distribution.  ``transition``: (A, A) row-stochastic
    matrix Q(x' | x).  ``costs``: (T, A), cost of occupying state x at step
    t (steps 1..T).  ``beta``: tilt temperature, > 0.
    """

    p0: np.ndarray
    transition: np.ndarray
    costs: np.ndarray
    beta: float

    def __post_init__(self):
        object.__setattr__(self, "p0", np.asarray(self.p0, dtype=np.float64))
        object.__setattr__(self, "transition", np.asarray(self.transition, dtype=np.float64))
        object.__setattr__(self, "costs", np.asarray(self.costs, dtype=np.float64))
        a = self.p0.shape[0]
        if self.transition.shape != (a, a):
            raise InvalidInput(f"transition must be ({a}, {a}), got {self.transition.shape}")
        if self.costs.ndim != 2 or self.costs.shape[1] != a:
            raise InvalidInput(f"costs must be (T, {a}), got {self.costs.shape}")
        if abs(self.p0.sum() - 1.0) > 1e-12 or np.any(self.p0 < 0):
            raise InvalidInput("p0 is not a distribution")
        if np.any(np.abs(self.transition.sum(axis=1) - 1.0) > 1e-12) or np.any(self.transition < 0):
            raise InvalidInput("transition rows must each sum to 1")
        if not self.beta > 0:
            raise InvalidInput(f"beta must be > 0, got {self.beta}")

    @property
    def horizon(self):
        return self.costs.shape[0]

    @property
    def alphabet_size(self):
        return self.p0.shape[0]


def _enumerate_paths(chain):
    """All state paths (x_0..x_T) with their log prior weight and total cost."""
    a, t = chain.alphabet_size, chain.horizon
    n_paths = a ** (t + 1)
    if n_paths > ENUMERATION_BUDGET:
        raise InvalidInput(f"{n_paths} paths exceed the enumeration budget {ENUMERATION_BUDGET}")
    grids = np.meshgrid(*([np.arange(a)] * (t + 1)), indexing="ij")
    paths = np.stack([g.reshape(-1) for g in grids], axis=1)  # (M, T+1)
    with np.errstate(divide="ignore"):
        log_p0 = np.log(chain.p0)
        log_q = np.log(chain.transition)
    log_prior = log_p0[paths[:, 0]]
    cost = np.zeros(len(paths))
    for step in range(1, t + 1):
        log_prior = log_prior + log_q[paths[:, step - 1], paths[:, step]]
        cost = cost + chain.costs[step - 1, paths[:, step]]
    return paths, log_prior, cost


@dataclass
class TiltedDistribution:
    paths: np.ndarray       # (M, T+1) integer states
    log_prior: np.ndarray   # (M,) log Q(path); -inf off the prior support
    costs: np.ndarray       # (M,) total path cost
    probs: np.ndarray       # (M,) normalized tilted probabilities

    @property
    def prior_probs(self):
        return np.exp(self.log_prior)


def tilted_closed_form(chain):
    """Exact tilted path distribution: P* proportional to Q * exp(-cost/beta).

    Computed in log space over the fully enumerated path set; normalization
    is exact up to float rounding.
    """
    paths, log_prior, cost = _enumerate_paths(chain)
    log_w = log_prior - cost / chain.beta
    finite = np.isfinite(log_w)
    if not finite.any():
        raise InvalidInput("prior has empty support")
    shift = log_w[finite].max()
    w = np.exp(np.where(finite, log_w - shift, -np.inf))
    return TiltedDistribution(paths=paths, log_prior=log_prior, costs=cost, probs=w / w.sum())


def path_objective(probs, tilt, beta):
    """C(P) = E_P[cost] + beta * KL(P || Q) over the enumerated path set.

    Infinite when P puts mass outside the prior support.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != tilt.probs.shape or np.any(probs < 0) or abs(probs.sum() - 1.0) > 1e-9:
        raise InvalidInput("not a distribution over the enumerated paths")
    on = probs > 0
    if np.any(~np.isfinite(tilt.log_prior[on])):
        return math.inf
    kl = float(np.sum(probs[on] * (np.log(probs[on]) - tilt.log_prior[on])))
    return float(np.sum(probs[on] * tilt.costs[on])) + beta * kl


def stationarity_residual(chain, tilt):
    """Sup-norm distance of cost/beta + 1 + log(P*/Q) from a constant,
    over the prior support.  Zero (to rounding) at the exact tilt."""
    on = np.isfinite(tilt.log_prior) & (tilt.probs > 0)
    vals = tilt.costs[on] / chain.beta + 1.0 + np.log(tilt.probs[on]) - tilt.log_prior[on]
    return float(vals.max() - vals.min()) / 2.0


@dataclass
class TiltReport:
    stationarity: float
    n_trials: int
    n_violations: int
    worst_margin: float
    violations: list = field(default_factory=list)
    passed: bool = False


def verify_tilt_optimality(chain, trials=10_000, seed=0, residual_tol=1e-8, slack=1e-12):
    """Certify the tilt numerically: stationarity residual below tolerance
    and objective dominance over random simplex perturbations.

    Half the trials are global Dirichlet draws, half local mixtures
    (1-eps) * P* + eps * Dirichlet with small eps.  ``slack`` absorbs float
    rounding in the comparison; a genuine violation would be far larger.
    """
    tilt = tilted_closed_form(chain)
    best = path_objective(tilt.probs, tilt, chain.beta)
    rng = np.random.default_rng(seed)
    m = len(tilt.probs)
    report = TiltReport(
        stationarity=stationarity_residual(chain, tilt),
        n_trials=trials, n_violations=0, worst_margin=math.inf,
    )
    for trial in range(trials):
        draw = rng.dirichlet(np.ones(m))
        if trial % 2:
            eps = rng.uniform(0.0, 0.1)
            probs = (1.0 - eps) * tilt.probs + eps * draw
        else:
            probs = draw
        margin = path_objective(probs, tilt, chain.beta) - best
        if margin < report.worst_margin:
            report.worst_margin = margin
        if margin < -slack:
            report.n_violations += 1
            if len(report.violations) < 5:
                report.violations.append(probs)
    report.passed = report.stationarity <= residual_tol and report.n_violations == 0
    return report


def random_chain(rng, alphabet_size=3, horizon=2, beta=1.0, cost_scale=1.0):
    """Random strictly-positive chain for property suites."""
    p0 = rng.dirichlet(np.ones(alphabet_size) * 5.0)
    transition = rng.dirichlet(np.ones(alphabet_size) * 5.0, size=alphabet_size)
    costs = cost_scale * rng.uniform(0.0, 2.0, size=(horizon, alphabet_size))
    return FiniteChain(p0=p0, transition=transition, costs=costs, beta=beta)


def linear_gaussian_tweedie(mu_s, sigma_s, prior_mean, prior_var, z):
    """Conjugate posterior mean E[x0 | z] for z = mu_s x0 + sigma_s eps with
    x0 ~ N(prior_mean, prior_var).  The noiseless limit returns z / mu_s."""
    z = np.asarray(z, dtype=np.float64)
    if sigma_s == 0:
        return z / mu_s
    precision = mu_s ** 2 / sigma_s ** 2 + 1.0 / prior_var
    return (mu_s * z / sigma_s ** 2 + prior_mean / prior_var) / precision


def fd_gradient(fn, x, h=1e-6):
    """Centered-difference gradient of a scalar function of an array."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat_x = x.reshape(-1)
    flat_g = grad.reshape(-1)
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + h
        hi = float(fn(x))
        flat_x[i] = orig - h
        lo = float(fn(x))
        flat_x[i] = orig
        if not (math.isfinite(hi) and math.isfinite(lo)):
            raise NumericalError(f"non-finite objective at coordinate {i}")
        flat_g[i] = (hi - lo) / (2.0 * h)
    return grad
