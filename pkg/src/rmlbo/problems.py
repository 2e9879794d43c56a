"""Inverse-problem ingredients.

Defines simulators, Gaussian and box priors, the Gaussian likelihood, and
the dense SPD algebra (Cholesky-backed Mahalanobis norms and log densities)
that every other module builds on.

Conventions:
  * all SPD solves go through cached lower Cholesky factors, never an
    explicit inverse;
  * out-of-support log densities are the IEEE ``-inf`` sentinel, which
    propagates through sums (``-inf + finite == -inf``) so an infeasible
    point can never win an argmax.
"""

import threading
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

NEG_INF = float("-inf")

LOG_2PI = float(np.log(2.0 * np.pi))


class SimulatorError(RuntimeError):
    """Simulator evaluation failed; carries the offending input."""

    def __init__(self, message, x):
        super().__init__(message)
        self.x = np.asarray(x, dtype=float)


def chol_spd(mat: np.ndarray, name: str = "matrix") -> np.ndarray:
    """Lower Cholesky factor of an SPD matrix.

    On factorization failure a jitter of ``1e-10 * mean(diag)`` is added
    once; a second failure is a hard error naming the matrix.
    """
    mat = np.asarray(mat, dtype=float)
    if mat.ndim != 2 or mat.shape[0] != mat.shape[1]:
        raise ValueError(f"{name} must be square, got shape {mat.shape}")
    try:
        return np.linalg.cholesky(mat)
    except np.linalg.LinAlgError:
        jitter = 1e-10 * float(np.mean(np.diag(mat)))
        try:
            return np.linalg.cholesky(mat + jitter * np.eye(mat.shape[0]))
        except np.linalg.LinAlgError:
            raise ValueError(f"{name} is not positive definite (Cholesky failed twice)")


def mahalanobis_sq(y: np.ndarray, cov: np.ndarray, chol: np.ndarray | None = None,
                   name: str = "covariance") -> float:
    """Squared Mahalanobis norm ``y^T cov^{-1} y`` via triangular solves.

    ``chol`` may supply a cached lower factor of ``cov``; otherwise the
    matrix is factorized on the fly.
    """
    y = np.asarray(y, dtype=float)
    cov = np.asarray(cov, dtype=float)
    if y.ndim != 1:
        raise ValueError(f"mahalanobis_sq expects a vector, got shape {y.shape}")
    if cov.shape != (y.size, y.size):
        raise ValueError(
            f"dimension mismatch: vector of length {y.size} against {name} "
            f"of shape {cov.shape}")
    if chol is None:
        chol = chol_spd(cov, name=name)
    w = solve_triangular(chol, y, lower=True, check_finite=False)
    return float(w @ w)


class GaussianSpec:
    """Dense multivariate Gaussian with a cached Cholesky factor.

    ``covariance`` must be symmetric within 1e-12 relative tolerance and
    positive definite (one round of diagonal jitter is tolerated).
    """

    def __init__(self, mean, covariance, name: str = "covariance"):
        self.mean = np.atleast_1d(np.asarray(mean, dtype=float))
        cov = np.asarray(covariance, dtype=float)
        if cov.ndim == 0:
            cov = cov.reshape(1, 1)
        if cov.shape != (self.mean.size, self.mean.size):
            raise ValueError(
                f"{name} shape {cov.shape} does not match mean of length {self.mean.size}")
        scale = max(float(np.max(np.abs(cov))), 1e-300)
        if float(np.max(np.abs(cov - cov.T))) > 1e-12 * scale:
            raise ValueError(f"{name} is not symmetric within 1e-12 relative tolerance")
        self.cov = cov
        self.chol = chol_spd(cov, name=name)
        self.name = name

    @property
    def dim(self) -> int:
        return self.mean.size

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.chol))))

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        # lower-Cholesky convention: mean + L @ xi, xi drawn coordinate-ascending
        return self.mean + self.chol @ rng.standard_normal(self.dim)

    def to_dict(self) -> dict:
        return {"kind": "gaussian", "mean": self.mean.tolist(), "cov": self.cov.tolist()}


@dataclass(frozen=True)
class BoxPrior:
    """Uniform prior on an axis-aligned box [lower_i, upper_i]."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lower", np.atleast_1d(np.asarray(self.lower, dtype=float)))
        object.__setattr__(self, "upper", np.atleast_1d(np.asarray(self.upper, dtype=float)))
        if self.lower.shape != self.upper.shape:
            raise ValueError("box bounds must have matching shapes")
        if not np.all(self.lower < self.upper):
            raise ValueError("box prior requires lower < upper in every coordinate")

    @property
    def dim(self) -> int:
        return self.lower.size

    def contains(self, x: np.ndarray) -> bool:
        x = np.asarray(x, dtype=float)
        return bool(np.all(x >= self.lower) and np.all(x <= self.upper))

    def clip(self, x: np.ndarray) -> np.ndarray:
        return np.clip(np.asarray(x, dtype=float), self.lower, self.upper)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(self.lower, self.upper)

    def to_dict(self) -> dict:
        return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


class SimulatorHandle:
    """Deterministic forward map R^D -> R^m with an evaluation counter.

    The counter increments by exactly one per evaluation and is never reset;
    increments are lock-protected so concurrent callers stay consistent.
    Calls made inside the :meth:`analysis` context are tallied separately
    and do not count against an optimization budget.
    """

    def __init__(self, fn, input_dim: int, output_dim: int, name: str = "simulator"):
        if input_dim < 1 or output_dim < 1:
            raise ValueError("simulator dimensions must be positive")
        self._fn = fn
        self.input_dim = int(input_dim)
        self.output_dim = int(output_dim)
        self.name = name
        self.eval_counter = 0
        self.analysis_counter = 0
        self._analysis_depth = 0
        self._lock = threading.Lock()

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.shape != (self.input_dim,):
            raise ValueError(
                f"{self.name} expects input of shape ({self.input_dim},), got {x.shape}")
        try:
            out = np.asarray(self._fn(x), dtype=float).reshape(self.output_dim)
        except Exception as exc:
            raise SimulatorError(f"{self.name} failed at input {x!r}: {exc}", x) from exc
        with self._lock:
            if self._analysis_depth > 0:
                self.analysis_counter += 1
            else:
                self.eval_counter += 1
        return out

    @contextmanager
    def analysis(self):
        """Route evaluations to the analysis counter (budget-exempt)."""
        with self._lock:
            self._analysis_depth += 1
        try:
            yield self
        finally:
            with self._lock:
                self._analysis_depth -= 1


@dataclass(frozen=True)
class LikelihoodSpec:
    """Gaussian likelihood: data vector plus SPD observation covariance."""

    data: np.ndarray
    obs_cov: np.ndarray
    gaussian: GaussianSpec = field(init=False, repr=False)

    def __post_init__(self):
        object.__setattr__(self, "data", np.atleast_1d(np.asarray(self.data, dtype=float)))
        # centering the spec on the data lets log_likelihood reuse the cached factor
        object.__setattr__(self, "gaussian",
                           GaussianSpec(self.data, self.obs_cov, name="obs_cov"))
        object.__setattr__(self, "obs_cov", self.gaussian.cov)

    @property
    def dim(self) -> int:
        return self.data.size

    def to_dict(self) -> dict:
        return {"data": self.data.tolist(), "obs_cov": self.obs_cov.tolist()}


@dataclass
class ProblemSpec:
    """One Bayesian inverse problem: simulator + prior + likelihood."""

    simulator: SimulatorHandle
    prior: "BoxPrior | GaussianSpec"
    likelihood: LikelihoodSpec

    def __post_init__(self):
        if self.prior.dim != self.simulator.input_dim:
            raise ValueError(
                f"prior dimension {self.prior.dim} does not match simulator "
                f"input_dim {self.simulator.input_dim}")
        if self.likelihood.dim != self.simulator.output_dim:
            raise ValueError(
                f"likelihood dimension {self.likelihood.dim} does not match simulator "
                f"output_dim {self.simulator.output_dim}")

    @property
    def input_dim(self) -> int:
        return self.simulator.input_dim

    @property
    def output_dim(self) -> int:
        return self.simulator.output_dim

    @property
    def has_gaussian_prior(self) -> bool:
        return isinstance(self.prior, GaussianSpec)


def log_gaussian_density(x, spec: GaussianSpec) -> float:
    """Full log density of ``x`` under the Gaussian ``spec``."""
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.size != spec.dim:
        raise ValueError(f"point of length {x.size} against Gaussian of dimension {spec.dim}")
    maha = mahalanobis_sq(x - spec.mean, spec.cov, chol=spec.chol, name=spec.name)
    return -0.5 * (spec.dim * LOG_2PI + spec.log_det() + maha)


def log_likelihood(x, problem: ProblemSpec, fx=None) -> float:
    """Gaussian log likelihood of the observed data at ``x``.

    Consumes one simulator evaluation unless ``fx`` supplies the
    pre-computed forward value, in which case no evaluation occurs and the
    result is bit-identical to the direct path.
    """
    if fx is None:
        fx = problem.simulator(np.asarray(x, dtype=float))
    fx = np.atleast_1d(np.asarray(fx, dtype=float))
    lik = problem.likelihood
    maha = mahalanobis_sq(lik.data - fx, lik.obs_cov, chol=lik.gaussian.chol, name="obs_cov")
    return -0.5 * (lik.dim * LOG_2PI + lik.gaussian.log_det() + maha)


def log_prior(x, prior) -> float:
    """Log prior density: 0 inside a box (unnormalized), -inf outside;
    the full log density for Gaussian priors."""
    if isinstance(prior, BoxPrior):
        return 0.0 if prior.contains(x) else NEG_INF
    if isinstance(prior, GaussianSpec):
        return log_gaussian_density(x, prior)
    raise TypeError(f"unsupported prior type {type(prior).__name__}")


def sample_prior(prior, rng: np.random.Generator) -> np.ndarray:
    """One draw from a box or Gaussian prior."""
    if isinstance(prior, (BoxPrior, GaussianSpec)):
        return prior.sample(rng)
    raise TypeError(f"unsupported prior type {type(prior).__name__}")


def prior_from_dict(d: dict) -> "BoxPrior | GaussianSpec":
    """Deserialize a prior from its JSON form (row-major dense arrays)."""
    kind = d.get("kind")
    if kind == "box":
        return BoxPrior(np.asarray(d["lower"], dtype=float),
                        np.asarray(d["upper"], dtype=float))
    if kind == "gaussian":
        return GaussianSpec(np.asarray(d["mean"], dtype=float),
                            np.asarray(d["cov"], dtype=float), name="prior covariance")
    raise ValueError(f"unknown prior kind {kind!r}")


def solve_spd(chol: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve ``A x = b`` given the lower Cholesky factor of A."""
    return cho_solve((chol, True), np.asarray(b, dtype=float), check_finite=False)
