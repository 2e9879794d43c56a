"""Randomized objectives for posterior sampling.

Posterior samples are obtained by maximizing ``n_rml`` randomized
log-posteriors: each instance perturbs the data (and, for Gaussian priors,
the prior mean) with a fresh draw from the corresponding distribution, then
treats the perturbed log posterior as an objective to maximize.  For a
linear simulator with a Gaussian prior each maximizer has a closed form,
which doubles as the exactness oracle in the tests.
"""

from dataclasses import dataclass

import numpy as np

from .problems import (
    NEG_INF,
    GaussianSpec,
    ProblemSpec,
    chol_spd,
    mahalanobis_sq,
    solve_spd,
)


@dataclass(frozen=True)
class RMLInstance:
    """One randomized objective: perturbed data, and perturbed prior mean
    when the prior is Gaussian (``prior_mean_n`` is None for box priors)."""

    index: int
    data_n: np.ndarray
    prior_mean_n: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "data_n", np.atleast_1d(np.asarray(self.data_n, dtype=float)))
        if self.prior_mean_n is not None:
            object.__setattr__(self, "prior_mean_n",
                               np.atleast_1d(np.asarray(self.prior_mean_n, dtype=float)))

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "data_n": self.data_n.tolist(),
            "prior_mean_n": None if self.prior_mean_n is None else self.prior_mean_n.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RMLInstance":
        mean = d.get("prior_mean_n")
        return cls(index=int(d["index"]),
                   data_n=np.asarray(d["data_n"], dtype=float),
                   prior_mean_n=None if mean is None else np.asarray(mean, dtype=float))


def draw_randomizations(problem: ProblemSpec, n_rml: int,
                        rng: np.random.Generator) -> list[RMLInstance]:
    """Draw the ``n_rml`` randomized instances for a problem.

    Data perturbations use the lower-Cholesky convention
    ``data + L xi`` with ``xi`` standard normal drawn coordinate-ascending;
    Gaussian prior means are perturbed the same way.  No simulator
    evaluations are consumed and the output is fully determined by ``rng``.
    """
    if n_rml < 1:
        raise ValueError("n_rml must be >= 1")
    gaussian = problem.has_gaussian_prior
    instances = []
    for n in range(1, n_rml + 1):
        data_n = problem.likelihood.data + problem.likelihood.gaussian.chol @ \
            rng.standard_normal(problem.output_dim)
        mean_n = None
        if gaussian:
            mean_n = problem.prior.sample(rng)
        instances.append(RMLInstance(index=n, data_n=data_n, prior_mean_n=mean_n))
    return instances


def randomized_log_likelihood(instance: RMLInstance, problem: ProblemSpec, fx=None) -> float:
    """Log likelihood of the instance's perturbed data given a cached
    forward value ``fx``."""
    if fx is None:
        raise ValueError("forward value required (pass fx or use objective())")
    fx = np.atleast_1d(np.asarray(fx, dtype=float))
    lik = problem.likelihood
    maha = mahalanobis_sq(instance.data_n - fx, lik.obs_cov,
                          chol=lik.gaussian.chol, name="obs_cov")
    return -0.5 * (lik.dim * np.log(2.0 * np.pi) + lik.gaussian.log_det() + maha)


def objective(instance: RMLInstance, x, problem: ProblemSpec, fx=None) -> float:
    """The randomized objective O_n at ``x``.

    Gaussian prior: perturbed log likelihood plus the log prior density
    recentered on the perturbed mean.  Box prior: perturbed log likelihood
    inside the box, -inf outside (short-circuited before any simulator
    call, so infeasible points never consume budget).
    """
    x = np.asarray(x, dtype=float)
    if problem.has_gaussian_prior:
        if instance.prior_mean_n is None:
            raise ValueError(f"instance {instance.index} lacks a perturbed prior mean")
        prior_term = _shifted_prior(problem.prior, instance.prior_mean_n, x)
    else:
        if not problem.prior.contains(x):
            return NEG_INF
        prior_term = 0.0
    if fx is None:
        fx = problem.simulator(x)
    return randomized_log_likelihood(instance, problem, fx=fx) + prior_term


def _shifted_prior(prior: GaussianSpec, mean_n: np.ndarray, x: np.ndarray) -> float:
    # same covariance factor as the prior, recentered on the perturbed mean
    maha = mahalanobis_sq(np.asarray(x, dtype=float) - mean_n, prior.cov,
                          chol=prior.chol, name=prior.name)
    return -0.5 * (prior.dim * np.log(2.0 * np.pi) + prior.log_det() + maha)


def oracle_linear_rml(B: np.ndarray, instance: RMLInstance, problem: ProblemSpec) -> np.ndarray:
    """Closed-form maximizer of O_n when the simulator is ``x -> B x`` and
    the prior is Gaussian.

    Solves ``(B^T S^-1 B + P^-1) x = B^T S^-1 d_n + P^-1 mu_n`` through the
    Cholesky factor of the (SPD) normal matrix.
    """
    if not problem.has_gaussian_prior:
        raise ValueError("linear RML oracle requires a Gaussian prior")
    if instance.prior_mean_n is None:
        raise ValueError(f"instance {instance.index} lacks a perturbed prior mean")
    B = np.asarray(B, dtype=float)
    prior: GaussianSpec = problem.prior
    lik = problem.likelihood
    Sinv_B = solve_spd(lik.gaussian.chol, B)
    Pinv = solve_spd(prior.chol, np.eye(prior.dim))
    normal = B.T @ Sinv_B + Pinv
    rhs = B.T @ solve_spd(lik.gaussian.chol, instance.data_n) + Pinv @ instance.prior_mean_n
    try:
        chol = chol_spd(normal, name="RML normal matrix")
    except ValueError as exc:
        raise RuntimeError(f"internal error: {exc}") from exc
    return solve_spd(chol, rhs)


def linear_gaussian_posterior(B: np.ndarray,
                              problem: ProblemSpec) -> tuple[np.ndarray, np.ndarray]:
    """Analytic posterior mean and covariance for ``x -> B x`` with a
    Gaussian prior (conjugate update; used by exactness checks)."""
    if not problem.has_gaussian_prior:
        raise ValueError("analytic posterior requires a Gaussian prior")
    B = np.asarray(B, dtype=float)
    prior: GaussianSpec = problem.prior
    lik = problem.likelihood
    Pinv = solve_spd(prior.chol, np.eye(prior.dim))
    normal = B.T @ solve_spd(lik.gaussian.chol, B) + Pinv
    chol = chol_spd(normal, name="posterior precision")
    cov = solve_spd(chol, np.eye(prior.dim))
    mean = solve_spd(chol, B.T @ solve_spd(lik.gaussian.chol, lik.data) + Pinv @ prior.mean)
    return mean, cov
