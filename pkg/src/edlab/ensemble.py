"""Walker ensembles, Chapman-Kolmogorov propagation, and Bayes reversal.

Walker noise is counter-based: the standard normals for step s are a pure
function of (seed, s, walker index, axis), produced from a Philox stream
keyed on (seed, s) and an inverse-CDF transform. Splitting the walker array
into chunks therefore cannot change any trajectory, which is what makes
runs bit-identical across worker counts.
"""

from __future__ import annotations

import inspect
import math
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri

from .core import (
    Boundary,
    FieldRole,
    PhysicalConstants,
    ScalarField,
    SpatialGrid,
    gradient,
    normalize_density,
)
from .errors import (
    ConfigurationError,
    InstabilityError,
    InvalidDensityError,
    SingularReversalError,
)
from .kernel import KernelForm, TransitionKernel

_STEP_DOMAIN = 1
_INIT_DOMAIN = 2
_MAX_STEPS = 2**31


@dataclass(frozen=True)
class TimeStepConfig:
    dt: float
    n_steps: int

    def __post_init__(self) -> None:
        if not (math.isfinite(self.dt) and self.dt > 0.0):
            raise ConfigurationError(f"dt must be positive, got {self.dt!r}")
        if not (isinstance(self.n_steps, int) and 0 <= self.n_steps < _MAX_STEPS):
            raise ConfigurationError(f"n_steps must be a non-negative int, got {self.n_steps!r}")

    def implied_alpha(self, consts: PhysicalConstants) -> float:
        """The multiplier tau/dt that this step size corresponds to."""
        return consts.tau / self.dt


@dataclass(frozen=True, eq=False)
class Ensemble:
    """Walker positions plus the stream cursor that makes runs replayable.

    step_index is the per-walker stream counter: the next step consumes the
    noise block (rng_seed, step_index), the one after (rng_seed,
    step_index + 1), and so on.
    """

    positions: np.ndarray
    t: float = 0.0
    rng_seed: int = 0
    step_index: int = 0

    def __post_init__(self) -> None:
        pos = np.array(self.positions, dtype=np.float64, copy=True)
        if pos.ndim == 1:
            pos = pos[:, None]
        if pos.ndim != 2 or pos.shape[0] == 0:
            raise ConfigurationError("positions must be a non-empty (n_walkers, dim) array")
        if not np.all(np.isfinite(pos)):
            raise ConfigurationError("walker positions must be finite")
        pos.setflags(write=False)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "rng_seed", int(self.rng_seed) % 2**63)

    @property
    def n_walkers(self) -> int:
        return self.positions.shape[0]

    @property
    def dim(self) -> int:
        return self.positions.shape[1]


@dataclass(frozen=True)
class TrajectoryHistory:
    """Positions recorded every k-th instant during an evolution."""

    steps: tuple
    times: tuple
    positions: tuple  # one (n_walkers, dim) array per recorded instant


def _raw_to_standard_normal(raw: np.ndarray) -> np.ndarray:
    # map uint64 -> open (0, 1) -> N(0, 1); no rejection, so the value for a
    # given counter position never depends on neighbouring draws
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    return ndtri(u)


def step_normals(seed: int, step_index: int, n_walkers: int, dim: int) -> np.ndarray:
    """Standard normals for one step; a pure function of all four arguments."""
    if not 0 <= step_index < _MAX_STEPS:
        raise ConfigurationError(f"step_index out of range: {step_index!r}")
    bg = np.random.Philox(
        np.random.SeedSequence(entropy=int(seed) % 2**63, spawn_key=(_STEP_DOMAIN, step_index))
    )
    raw = bg.random_raw(n_walkers * dim)
    return _raw_to_standard_normal(raw).reshape(n_walkers, dim)


def init_uniforms(seed: int, n: int) -> np.ndarray:
    """Deterministic U(0,1) block used to draw initial walker positions."""
    bg = np.random.Philox(
        np.random.SeedSequence(entropy=int(seed) % 2**63, spawn_key=(_INIT_DOMAIN,))
    )
    raw = bg.random_raw(n)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def _fold_reflecting(x: np.ndarray, lo: float, hi: float) -> np.ndarray:
    width = hi - lo
    y = np.mod(x - lo, 2.0 * width)
    return lo + np.where(y > width, 2.0 * width - y, y)


def apply_boundary(positions: np.ndarray, grid: SpatialGrid | None) -> np.ndarray:
    if grid is None:
        return positions
    out = np.array(positions, copy=True)
    for axis in range(grid.dim):
        lo = grid.x_min[axis]
        if grid.boundary is Boundary.PERIODIC:
            span = grid.length(axis)
            out[..., axis] = lo + np.mod(out[..., axis] - lo, span)
        else:
            out[..., axis] = _fold_reflecting(out[..., axis], lo, grid.x_max[axis])
    return out


def _displace(positions, grad_entropy, dt, consts, noise, grid):
    drift = consts.diffusion * np.asarray(grad_entropy, dtype=np.float64)
    moved = positions + drift * dt + noise
    return apply_boundary(moved, grid)


def sample_step(
    x: np.ndarray,
    grad_entropy_at_x: np.ndarray,
    dt: float,
    consts: PhysicalConstants,
    rng: np.random.Generator,
    grid: SpatialGrid | None = None,
) -> np.ndarray:
    """One step x + b dt + dw with b = (sigma2/tau) dS and Gaussian dw.

    The fluctuation has variance (sigma2/tau) dt per axis. Accepts a single
    position or an (n, dim) batch; wraps or reflects if a grid is given.
    """
    if dt <= 0.0:
        raise ConfigurationError(f"dt must be positive, got {dt!r}")
    x = np.asarray(x, dtype=np.float64)
    noise = rng.normal(0.0, math.sqrt(consts.diffusion * dt), size=x.shape)
    return _displace(x, grad_entropy_at_x, dt, consts, noise, grid)


def _resolve_gradient_provider(entropy_provider, grid):
    """Turn the accepted provider shapes into callable(positions, t) -> grads."""
    if entropy_provider is None:
        return lambda pos, t: np.zeros_like(pos)
    if isinstance(entropy_provider, ScalarField):
        field_grid = entropy_provider.grid
        grad = gradient(entropy_provider).values
        nodes = field_grid.nodes

        def static_field(pos, t):
            if field_grid.boundary is Boundary.PERIODIC:
                g = np.interp(pos[:, 0], nodes, grad, period=field_grid.length())
            else:
                g = np.interp(pos[:, 0], nodes, grad)
            return g[:, None]

        return static_field
    if callable(entropy_provider):
        n_params = len(inspect.signature(entropy_provider).parameters)
        if n_params == 1:
            # time-indexed entropy field: re-resolve at each step start
            cache = {}

            def timed_field(pos, t):
                if t not in cache:
                    cache.clear()
                    cache[t] = _resolve_gradient_provider(entropy_provider(t), grid)
                return cache[t](pos, t)

            return timed_field
        return lambda pos, t: np.asarray(entropy_provider(pos, t), dtype=np.float64)
    raise ConfigurationError(
        "entropy provider must be None, a ScalarField, a callable t -> field, "
        "or a callable (positions, t) -> gradients"
    )


def evolve_ensemble(
    ensemble: Ensemble,
    entropy_provider,
    cfg: TimeStepConfig,
    consts: PhysicalConstants,
    grid: SpatialGrid | None = None,
    record_every: int | None = None,
    n_workers: int = 1,
):
    """Apply cfg.n_steps sampling steps; returns (ensemble, history | None).

    The entropy field is sampled at each step's start instant. Results are
    bit-identical for any n_workers because each walker's noise comes from
    the step's counter-based block, indexed by walker id.
    """
    if n_workers < 1:
        raise ConfigurationError("n_workers must be >= 1")
    provider = _resolve_gradient_provider(entropy_provider, grid)
    pos = np.array(ensemble.positions, copy=True)
    n, dim = pos.shape
    scale = math.sqrt(consts.diffusion * cfg.dt)
    bounds = np.array_split(np.arange(n), n_workers)

    history_steps, history_times, history_positions = [], [], []

    def record(step, t):
        history_steps.append(step)
        history_times.append(t)
        snap = pos.copy()
        snap.setflags(write=False)
        history_positions.append(snap)

    if record_every:
        record(ensemble.step_index, ensemble.t)

    t = ensemble.t
    for s in range(cfg.n_steps):
        step_id = ensemble.step_index + s
        grads = provider(pos, t)
        grads = np.broadcast_to(np.asarray(grads, dtype=np.float64), pos.shape)
        if not np.all(np.isfinite(grads)):
            bad = int(np.flatnonzero(~np.isfinite(grads).all(axis=1))[0])
            raise InstabilityError(
                f"non-finite entropy gradient at t={t:g}, step {step_id}, walker {bad}"
            )
        noise = scale * step_normals(ensemble.rng_seed, step_id, n, dim)
        for chunk in bounds:
            if chunk.size:
                lo, hi = chunk[0], chunk[-1] + 1
                pos[lo:hi] = _displace(
                    pos[lo:hi], grads[lo:hi], cfg.dt, consts, noise[lo:hi], grid
                )
        t = ensemble.t + (s + 1) * cfg.dt
        if record_every and ((s + 1) % record_every == 0):
            record(ensemble.step_index + s + 1, t)

    out = Ensemble(pos, t, ensemble.rng_seed, ensemble.step_index + cfg.n_steps)
    history = None
    if record_every:
        history = TrajectoryHistory(
            tuple(history_steps), tuple(history_times), tuple(history_positions)
        )
    return out, history


def ensemble_density(ensemble: Ensemble, grid: SpatialGrid) -> ScalarField:
    """Histogram walkers on the grid's node-centered cells, normalized."""
    if grid.dim != 1 or ensemble.dim != 1:
        raise ConfigurationError("density estimation is implemented for 1-d grids")
    if ensemble.n_walkers == 0:
        raise InvalidDensityError("cannot estimate a density from an empty ensemble")
    x = ensemble.positions[:, 0]
    edges = grid.cell_edges
    if grid.boundary is Boundary.PERIODIC:
        span = grid.length()
        x = edges[0] + np.mod(x - edges[0], span)
    else:
        x = _fold_reflecting(x, grid.x_min[0], grid.x_max[0])
    counts, _ = np.histogram(x, bins=edges)
    widths = np.diff(edges)
    values = counts / (ensemble.n_walkers * widths)
    return normalize_density(ScalarField(grid, values, FieldRole.DENSITY))


def ck_propagate(rho: ScalarField, kernel: TransitionKernel) -> ScalarField:
    """One Chapman-Kolmogorov step: push the density through the kernel."""
    if rho.grid != kernel.grid:
        raise ConfigurationError("density and kernel live on different grids")
    weights = rho.grid.weights
    mass = rho.values * weights
    mass_out = mass @ kernel.matrix
    values = np.clip(mass_out / weights, 0.0, None)
    return ScalarField(rho.grid, values, FieldRole.DENSITY)


def bayes_reverse_kernel(
    kernel: TransitionKernel,
    rho_prior: ScalarField,
    rho_posterior: ScalarField,
) -> TransitionKernel:
    """Reverse kernel fixed by the two marginals: P(x | x') rows over x'.

    Entry [j, i] = prior(x_i) P(x_j | x_i) / posterior(x_j), in mass form.
    The posterior must be the forward propagation of the prior; unreachable
    arrival nodes (zero incoming mass and zero posterior) get an identity
    row, which never matters because they carry no mass.
    """
    if rho_prior.grid != kernel.grid or rho_posterior.grid != kernel.grid:
        raise ConfigurationError("marginals and kernel live on different grids")
    propagated = ck_propagate(rho_prior, kernel)
    scale = float(rho_posterior.values.max())
    mismatch = np.abs(propagated.values - rho_posterior.values).max()
    if mismatch > 1e-8 * max(scale, 1.0):
        raise ConfigurationError(
            f"posterior is not the forward propagation of the prior "
            f"(max deviation {mismatch:.3e})"
        )
    weights = kernel.grid.weights
    mass_in = rho_prior.values * weights
    mass_out = rho_posterior.values * weights
    incoming = mass_in @ kernel.matrix
    floor = np.max(mass_out) * 1e-12
    starved = mass_out <= floor
    if np.any(starved & (incoming > floor)):
        node = int(np.flatnonzero(starved & (incoming > floor))[0])
        coord = kernel.grid.nodes[node]
        raise SingularReversalError(
            f"posterior below floor at reachable node {node} (x={coord:g})"
        )
    safe = np.where(mass_out > 0.0, mass_out, 1.0)
    reverse = (kernel.matrix * mass_in[:, None]).T / safe[:, None]
    unreachable = mass_out <= 0.0
    if np.any(unreachable):
        idx = np.flatnonzero(unreachable)
        reverse[idx, :] = 0.0
        reverse[idx, idx] = 1.0
    reverse /= reverse.sum(axis=1, keepdims=True)
    return TransitionKernel(kernel.grid, reverse, kernel.alpha, KernelForm.BAYES)


def compose(first: TransitionKernel, second: TransitionKernel) -> TransitionKernel:
    """Kernel for two successive steps (matrix product of the mass forms)."""
    if first.grid != second.grid:
        raise ConfigurationError("kernels live on different grids")
    return TransitionKernel(
        first.grid, first.matrix @ second.matrix, first.alpha, first.form
    )
