"""Maximum-entropy transition kernels for one short step.

A kernel row is the arrival distribution for a walker starting at the row's
source node: entries are probability masses (density times the arrival
node's quadrature weight) and every row sums to one. The exact form weights
arrival points by exp(S) against a quadratic step-length penalty; the
Gaussian form expands the exponent about its maximum. The multiplier alpha
is fixed by a mean squared step-length constraint, solved by bracketing
bisection on log(alpha).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from .core import (
    Boundary,
    PhysicalConstants,
    ScalarField,
    SpatialGrid,
    gradient,
)
from .errors import ConfigurationError, NoSolutionError

#: Entries below this after normalization are flushed to zero and the row
#: renormalized, keeping the matrix free of denormals.
FLUSH_THRESHOLD = 1e-300


class KernelForm(str, enum.Enum):
    EXACT = "exact"
    GAUSSIAN = "gaussian"
    BAYES = "bayes"


@dataclass(frozen=True, eq=False)
class TransitionKernel:
    """Row-stochastic step matrix; entry [i, j] is the mass moved i -> j."""

    grid: SpatialGrid
    matrix: np.ndarray
    alpha: float
    form: KernelForm

    def __post_init__(self) -> None:
        matrix = np.array(self.matrix, dtype=np.float64, copy=True)
        n = self.grid.n[0]
        if matrix.shape != (n, n):
            raise ConfigurationError(f"kernel must be {n}x{n}, got {matrix.shape}")
        if matrix.min() < 0.0:
            raise ConfigurationError("kernel entries must be non-negative")
        row_err = np.abs(matrix.sum(axis=1) - 1.0).max()
        if row_err > 1e-12:
            raise ConfigurationError(f"kernel rows must sum to 1, max error {row_err:.3e}")
        matrix.setflags(write=False)
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "form", KernelForm(self.form))


@dataclass(frozen=True)
class StepMoments:
    """Mean and covariance of the displacement drawn from one kernel row."""

    mean_step: np.ndarray
    covariance: np.ndarray

    def __post_init__(self) -> None:
        mean = np.atleast_1d(np.asarray(self.mean_step, dtype=np.float64))
        cov = np.atleast_2d(np.asarray(self.covariance, dtype=np.float64))
        if not np.allclose(cov, cov.T, atol=1e-12):
            raise ConfigurationError("covariance must be symmetric")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ConfigurationError("covariance must be positive semi-definite")
        object.__setattr__(self, "mean_step", mean)
        object.__setattr__(self, "covariance", cov)


def displacements(grid: SpatialGrid) -> np.ndarray:
    """Signed node displacements d[i, j] = x_j - x_i, minimum-image if periodic."""
    x = grid.nodes
    d = x[None, :] - x[:, None]
    if grid.boundary is Boundary.PERIODIC:
        span = grid.length()
        d = d - span * np.round(d / span)
    return d


def _normalize_rows(weights: np.ndarray) -> np.ndarray:
    sums = weights.sum(axis=1, keepdims=True)
    if np.any(sums <= 0.0) or not np.all(np.isfinite(sums)):
        raise ConfigurationError("kernel row normalization failed")
    matrix = weights / sums
    matrix[matrix < FLUSH_THRESHOLD] = 0.0
    return matrix / matrix.sum(axis=1, keepdims=True)


def _check_inputs(entropy: ScalarField, alpha: float) -> None:
    if not (math.isfinite(alpha) and alpha > 0.0):
        raise ConfigurationError(f"alpha must be positive, got {alpha!r}")


def build_exact_kernel(
    entropy: ScalarField,
    alpha: float,
    consts: PhysicalConstants | None = None,
) -> TransitionKernel:
    """Row i proportional to exp[S(x_j) - (alpha / 2 sigma2) (x_j - x_i)^2].

    Normalization is discrete, uses the grid quadrature weights, and is
    protected against overflow by per-row max subtraction.
    """
    _check_inputs(entropy, alpha)
    consts = consts or PhysicalConstants.natural()
    grid = entropy.grid
    d = displacements(grid)
    logits = entropy.values[None, :] - (alpha / (2.0 * consts.sigma2)) * d * d
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits) * grid.weights[None, :]
    return TransitionKernel(grid, _normalize_rows(weights), alpha, KernelForm.EXACT)


def build_gaussian_kernel(
    entropy: ScalarField,
    alpha: float,
    consts: PhysicalConstants | None = None,
) -> TransitionKernel:
    """Quadratic expansion of the exact kernel about its maximum.

    Row i is a discretized Gaussian with mean x_i + (sigma2/alpha) dS(x_i)
    and variance sigma2/alpha.
    """
    _check_inputs(entropy, alpha)
    consts = consts or PhysicalConstants.natural()
    grid = entropy.grid
    shift = (consts.sigma2 / alpha) * gradient(entropy).values
    x = grid.nodes
    offset = x[None, :] - (x + shift)[:, None]
    if grid.boundary is Boundary.PERIODIC:
        span = grid.length()
        offset = offset - span * np.round(offset / span)
    logits = -(alpha / (2.0 * consts.sigma2)) * offset * offset
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits) * grid.weights[None, :]
    return TransitionKernel(grid, _normalize_rows(weights), alpha, KernelForm.GAUSSIAN)


def kernel_moments(kernel: TransitionKernel, source_index: int) -> StepMoments:
    """Discrete mean and covariance of the step drawn from one row."""
    n = kernel.grid.n[0]
    if not 0 <= source_index < n:
        raise ConfigurationError(f"row index {source_index} outside 0..{n - 1}")
    row = kernel.matrix[source_index]
    d = displacements(kernel.grid)[source_index]
    mean = float(np.sum(row * d))
    var = float(np.sum(row * d * d) - mean * mean)
    return StepMoments(np.array([mean]), np.array([[max(var, 0.0)]]))


def step_length_profile(
    kernel: TransitionKernel, consts: PhysicalConstants | None = None
) -> np.ndarray:
    """Per-source expected squared step length in the metric (1/sigma2)."""
    consts = consts or PhysicalConstants.natural()
    d = displacements(kernel.grid)
    return np.sum(kernel.matrix * d * d, axis=1) / consts.sigma2


def mean_squared_step(
    entropy: ScalarField, alpha: float, consts: PhysicalConstants | None = None
) -> float:
    """Grid-averaged expected squared step length under the exact kernel."""
    kernel = build_exact_kernel(entropy, alpha, consts)
    return float(step_length_profile(kernel, consts).mean())


def solve_alpha(
    entropy: ScalarField,
    kappa: float,
    consts: PhysicalConstants | None = None,
    rel_tol: float = 1e-8,
) -> float:
    """Multiplier alpha whose grid-averaged squared step length equals kappa.

    The constraint is enforced on the grid average (a single alpha for the
    whole grid); per-source residuals are available from
    step_length_profile. Solved by bracketing bisection on log(alpha); the
    average step length is monotone decreasing in alpha.
    """
    consts = consts or PhysicalConstants.natural()
    if not (math.isfinite(kappa) and kappa > 0.0):
        raise ConfigurationError(f"kappa must be positive, got {kappa!r}")

    def residual(a: float) -> float:
        return mean_squared_step(entropy, a, consts) - kappa

    lo = hi = 1.0 / kappa
    f_lo = f_hi = residual(lo)
    # expand downward until the average exceeds kappa
    while f_lo < 0.0:
        lo /= 8.0
        if lo < 1e-14:
            reachable = mean_squared_step(entropy, lo, consts)
            raise NoSolutionError(
                f"kappa={kappa:g} exceeds the largest mean squared step "
                f"{reachable:g} attainable on this grid"
            )
        f_lo = residual(lo)
    while f_hi > 0.0:
        hi *= 8.0
        if hi > 1e18:
            raise NoSolutionError(
                f"kappa={kappa:g} is below the smallest resolvable step on this grid"
            )
        f_hi = residual(hi)

    log_lo, log_hi = math.log(lo), math.log(hi)
    alpha = math.exp(0.5 * (log_lo + log_hi))
    for _ in range(200):
        alpha = math.exp(0.5 * (log_lo + log_hi))
        f_mid = residual(alpha)
        if abs(f_mid) <= rel_tol * kappa:
            return alpha
        if f_mid > 0.0:
            log_lo = math.log(alpha)
        else:
            log_hi = math.log(alpha)
        if log_hi - log_lo < 1e-15:
            break
    if abs(residual(alpha)) <= 10 * rel_tol * kappa:
        return alpha
    raise NoSolutionError(
        f"bisection failed to meet |<dl^2> - kappa| <= {rel_tol:g}*kappa at alpha={alpha:g}"
    )
