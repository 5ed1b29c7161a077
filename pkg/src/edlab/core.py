"""Grids, scalar fields, physical constants, and discrete calculus.

Everything downstream (step kernels, walker ensembles, field dynamics, the
reference wave solver) works on the uniform grids and read-only fields
defined here. Fields and grids are immutable after construction, so they
are safe to share across workers; operations return new values.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, InvalidDensityError

#: Relative density floor. Values of a density below DENSITY_FLOOR times its
#: maximum are treated as vacuum: clamped before any log and excluded from
#: phase and velocity updates.
DENSITY_FLOOR = 1e-12

_MIN_POINTS = 8


class Boundary(str, enum.Enum):
    PERIODIC = "periodic"
    REFLECTING = "reflecting"


class FieldRole(str, enum.Enum):
    DENSITY = "density"
    ENTROPY = "entropy"
    PHASE = "phase"
    POTENTIAL = "potential"
    GENERIC = "generic"


@dataclass(frozen=True)
class PhysicalConstants:
    """The three independent scales sigma2, tau, eta; mass is derived.

    sigma2 is the length scale of the configuration-space metric (1/sigma2
    per axis), tau the unit of duration, eta the action scale. The relation
    mass = eta * tau / sigma2 holds exactly because mass is never stored.
    """

    sigma2: float = 1.0
    tau: float = 1.0
    eta: float = 1.0

    def __post_init__(self) -> None:
        for name in ("sigma2", "tau", "eta"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value <= 0.0:
                raise ConfigurationError(
                    f"constant {name!r} must be positive and finite, got {value!r}"
                )
            object.__setattr__(self, name, value)

    @property
    def mass(self) -> float:
        return self.eta * self.tau / self.sigma2

    @property
    def diffusion(self) -> float:
        """sigma2 / tau, the fluctuation variance accrued per unit time."""
        return self.sigma2 / self.tau

    @classmethod
    def natural(cls) -> "PhysicalConstants":
        return cls(1.0, 1.0, 1.0)

    @classmethod
    def from_mass(cls, mass: float, tau: float = 1.0, eta: float = 1.0) -> "PhysicalConstants":
        """Build constants with a target mass; sigma2 is derived."""
        if not (math.isfinite(mass) and mass > 0.0):
            raise ConfigurationError(f"mass must be positive and finite, got {mass!r}")
        return cls(sigma2=eta * tau / mass, tau=tau, eta=eta)


def _axis_tuple(value, dim, name, cast):
    if isinstance(value, (tuple, list, np.ndarray)):
        items = tuple(cast(v) for v in value)
        if len(items) != dim:
            raise ConfigurationError(f"{name} must have {dim} entries, got {len(items)}")
        return items
    return (cast(value),) * dim


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform grid. Scalar extents are broadcast across all axes.

    Field solvers use dim == 1; walker sampling supports dim in 1..3.
    Periodic spacing is (x_max - x_min) / n (x_max excluded), reflecting
    spacing is (x_max - x_min) / (n - 1) (both endpoints are nodes).
    """

    x_min: tuple = 0.0
    x_max: tuple = 1.0
    n: tuple = 64
    boundary: Boundary = Boundary.PERIODIC
    dim: int = 1

    def __post_init__(self) -> None:
        if not isinstance(self.dim, int) or not 1 <= self.dim <= 3:
            raise ConfigurationError(f"dim must be 1, 2 or 3, got {self.dim!r}")
        object.__setattr__(self, "boundary", Boundary(self.boundary))
        object.__setattr__(self, "x_min", _axis_tuple(self.x_min, self.dim, "x_min", float))
        object.__setattr__(self, "x_max", _axis_tuple(self.x_max, self.dim, "x_max", float))
        object.__setattr__(self, "n", _axis_tuple(self.n, self.dim, "n", int))
        for axis in range(self.dim):
            if self.n[axis] < _MIN_POINTS:
                raise ConfigurationError(
                    f"grid needs at least {_MIN_POINTS} points per axis, got {self.n[axis]}"
                )
            if not self.x_max[axis] > self.x_min[axis]:
                raise ConfigurationError("x_max must exceed x_min on every axis")

    def spacing(self, axis: int = 0) -> float:
        extent = self.x_max[axis] - self.x_min[axis]
        if self.boundary is Boundary.PERIODIC:
            return extent / self.n[axis]
        return extent / (self.n[axis] - 1)

    def axis_nodes(self, axis: int = 0) -> np.ndarray:
        h = self.spacing(axis)
        if self.boundary is Boundary.PERIODIC:
            return self.x_min[axis] + h * np.arange(self.n[axis])
        return np.linspace(self.x_min[axis], self.x_max[axis], self.n[axis])

    def length(self, axis: int = 0) -> float:
        """Extent of the sampled domain (includes the wrap cell if periodic)."""
        if self.boundary is Boundary.PERIODIC:
            return self.n[axis] * self.spacing(axis)
        return self.x_max[axis] - self.x_min[axis]

    @property
    def h(self) -> float:
        return self.spacing(0)

    @property
    def nodes(self) -> np.ndarray:
        return self.axis_nodes(0)

    @property
    def weights(self) -> np.ndarray:
        """Quadrature weights: rectangle rule (periodic), trapezoid (reflecting)."""
        if self.dim != 1:
            raise ConfigurationError("quadrature weights are defined for 1-d grids only")
        h = self.h
        w = np.full(self.n[0], h)
        if self.boundary is Boundary.REFLECTING:
            w[0] = w[-1] = h / 2.0
        return w

    @property
    def cell_edges(self) -> np.ndarray:
        """Node-centered cell edges used for histogramming walkers."""
        if self.dim != 1:
            raise ConfigurationError("cell edges are defined for 1-d grids only")
        h = self.h
        if self.boundary is Boundary.PERIODIC:
            return self.x_min[0] - h / 2.0 + h * np.arange(self.n[0] + 1)
        inner = self.x_min[0] + h / 2.0 + h * np.arange(self.n[0] - 1)
        return np.concatenate(([self.x_min[0]], inner, [self.x_max[0]]))


@dataclass(frozen=True, eq=False)
class ScalarField:
    """Real values on the nodes of a 1-d grid. Values are read-only."""

    grid: SpatialGrid
    values: np.ndarray
    role: FieldRole = FieldRole.GENERIC
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.grid.dim != 1:
            raise ConfigurationError("scalar fields live on 1-d grids")
        values = np.array(self.values, dtype=np.float64, copy=True)
        if values.shape != (self.grid.n[0],):
            raise ConfigurationError(
                f"field shape {values.shape} does not match grid size {self.grid.n[0]}"
            )
        if not np.all(np.isfinite(values)):
            raise ConfigurationError("field values must be finite")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "role", FieldRole(self.role))

    def with_values(self, values, role: FieldRole | None = None, meta: dict | None = None) -> "ScalarField":
        return ScalarField(self.grid, values, role or self.role, meta or {})


def constant_field(grid: SpatialGrid, value: float, role: FieldRole = FieldRole.GENERIC) -> ScalarField:
    return ScalarField(grid, np.full(grid.n[0], float(value)), role)


def field_from_function(grid: SpatialGrid, fn, role: FieldRole = FieldRole.GENERIC) -> ScalarField:
    return ScalarField(grid, fn(grid.nodes), role)


def _gradient_values(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    h = grid.h
    if grid.boundary is Boundary.PERIODIC:
        return (np.roll(values, -1) - np.roll(values, 1)) / (2.0 * h)
    out = np.empty_like(values)
    out[1:-1] = (values[2:] - values[:-2]) / (2.0 * h)
    out[0] = (-3.0 * values[0] + 4.0 * values[1] - values[2]) / (2.0 * h)
    out[-1] = (3.0 * values[-1] - 4.0 * values[-2] + values[-3]) / (2.0 * h)
    return out


def gradient(f: ScalarField) -> ScalarField:
    """Central-difference derivative; one-sided 3-point stencils at
    reflecting edges. Exact for affine fields in the interior."""
    return ScalarField(f.grid, _gradient_values(f.values, f.grid), FieldRole.GENERIC)


def _laplacian_values(values: np.ndarray, grid: SpatialGrid) -> np.ndarray:
    h2 = grid.h * grid.h
    if grid.boundary is Boundary.PERIODIC:
        return (np.roll(values, -1) - 2.0 * values + np.roll(values, 1)) / h2
    out = np.empty_like(values)
    out[1:-1] = (values[2:] - 2.0 * values[1:-1] + values[:-2]) / h2
    # mirror ghost nodes: zero-gradient (reflecting) walls
    out[0] = 2.0 * (values[1] - values[0]) / h2
    out[-1] = 2.0 * (values[-2] - values[-1]) / h2
    return out


def laplacian(f: ScalarField) -> ScalarField:
    """Second-difference Laplacian; mirrored ghosts at reflecting walls."""
    return ScalarField(f.grid, _laplacian_values(f.values, f.grid), FieldRole.GENERIC)


def integrate(f: ScalarField) -> float:
    """Rectangle rule on periodic grids, trapezoid rule on reflecting ones."""
    return float(np.sum(f.values * f.grid.weights))


def normalize_density(f: ScalarField) -> ScalarField:
    """Scale a non-negative field so it integrates to one."""
    values = np.array(f.values, dtype=np.float64)
    peak = values.max(initial=0.0)
    if values.min(initial=0.0) < -1e-13 * max(peak, 1.0):
        raise InvalidDensityError("density has negative values")
    values = np.clip(values, 0.0, None)
    total = float(np.sum(values * f.grid.weights))
    if not (total > 0.0 and math.isfinite(total)):
        raise InvalidDensityError("density does not integrate to a positive number")
    return ScalarField(f.grid, values / total, FieldRole.DENSITY, dict(f.meta))


def density_floor_value(rho: ScalarField) -> float:
    """Absolute floor for this density: DENSITY_FLOOR relative to its peak."""
    return DENSITY_FLOOR * float(rho.values.max(initial=0.0))


def active_mask(rho: ScalarField) -> np.ndarray:
    """Nodes carrying non-vacuum mass (at or above the relative floor)."""
    return rho.values >= density_floor_value(rho)


def density_moments(rho: ScalarField) -> tuple[float, float]:
    """Mean and variance of a normalized density under the grid quadrature."""
    w = rho.grid.weights
    x = rho.grid.nodes
    total = float(np.sum(rho.values * w))
    mean = float(np.sum(rho.values * x * w)) / total
    var = float(np.sum(rho.values * (x - mean) ** 2 * w)) / total
    return mean, var


@dataclass(frozen=True, eq=False)
class HydrodynamicState:
    """Density and phase at one instant: the two coupled degrees of freedom."""

    rho: ScalarField
    phi: ScalarField
    t: float = 0.0

    def __post_init__(self) -> None:
        if self.rho.grid != self.phi.grid:
            raise ConfigurationError("rho and phi must share a grid")
        if self.rho.role is not FieldRole.DENSITY:
            raise ConfigurationError("rho must have the density role")
        total = integrate(self.rho)
        if abs(total - 1.0) > 1e-8:
            raise InvalidDensityError(f"rho must be normalized, integrates to {total!r}")

    @property
    def grid(self) -> SpatialGrid:
        return self.rho.grid
