"""Coupled density-phase field dynamics.

The density obeys a continuity equation with current velocity v, the phase
obeys a Hamilton-Jacobi equation augmented by the quantum-potential term,
and the pair conserves the energy functional implemented here. The
continuity step is a conservative finite-volume update with Lax-Wendroff
interface fluxes; the phase step is explicit; coupled_step interleaves them
with Strang splitting and automatically sub-cycles to respect the wave
stability bound of the explicit pair.

Vacuum handling: nodes with rho below the relative density floor carry no
usable phase information. The phase is only updated on active nodes (and
interpolated across dead zones), the transport velocity is tapered to zero
just outside the active span, and the quantum-potential term is evaluated
from the raw sqrt(rho) values so smooth sub-floor tails never produce
artificial stencil spikes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .core import (
    Boundary,
    FieldRole,
    HydrodynamicState,
    PhysicalConstants,
    ScalarField,
    SpatialGrid,
    active_mask,
    density_floor_value,
    gradient,
    integrate,
    laplacian,
    normalize_density,
    _gradient_values,
    _laplacian_values,
)
from .errors import (
    ConfigurationError,
    InstabilityError,
    InvalidDensityError,
    StepSizeError,
)

#: CFL number allowed for the transport step.
CFL_LIMIT = 0.5

#: Phase increments larger than this per step abort the run.
PHASE_BLOWUP = 1e6

#: Fraction of the kick-drift-kick stability threshold (omega*dt = 2) that
#: coupled_step is allowed to use per sub-step.
_STABILITY_FILL = 1.7

#: Cells over which the transport velocity is ramped to zero beyond the
#: active span, so the near-seam tail keeps being fed smoothly.
_VACUUM_TAPER = 8


@dataclass(frozen=True)
class VelocityFields:
    """Drift, osmotic, and current velocities from one consistent (S, rho)."""

    drift_b: ScalarField
    osmotic_u: ScalarField
    current_v: ScalarField


@dataclass(frozen=True)
class EnergyReport:
    kinetic_current: float
    kinetic_osmotic: float
    potential: float

    @property
    def total(self) -> float:
        return self.kinetic_current + self.kinetic_osmotic + self.potential


def drift_velocity(entropy: ScalarField, consts: PhysicalConstants) -> ScalarField:
    """b = (sigma2/tau) dS, equivalently (eta/m) dS."""
    return ScalarField(entropy.grid, consts.diffusion * gradient(entropy).values)


def osmotic_velocity(rho: ScalarField, consts: PhysicalConstants) -> ScalarField:
    """u = -(sigma2 / 2 tau) grad(rho) / rho, zero below the density floor.

    The division form makes rho * u identical to the diffusive flux
    -(sigma2 / 2 tau) grad(rho) wherever rho is above the floor.
    """
    if rho.values.max(initial=0.0) <= 0.0:
        raise InvalidDensityError("density is zero everywhere")
    mask = active_mask(rho)
    floor = density_floor_value(rho)
    grad_rho = gradient(rho).values
    u = -(0.5 * consts.diffusion) * grad_rho / np.maximum(rho.values, floor)
    return ScalarField(rho.grid, np.where(mask, u, 0.0))


def current_velocity(phi: ScalarField, consts: PhysicalConstants) -> ScalarField:
    """v = (sigma2/tau) grad(phi), equivalently (eta/m) grad(phi)."""
    return ScalarField(phi.grid, consts.diffusion * gradient(phi).values)


def phase_from_entropy(entropy: ScalarField, rho: ScalarField) -> ScalarField:
    """phi = S - log sqrt(rho), with rho clamped at the density floor."""
    if entropy.grid != rho.grid:
        raise ConfigurationError("entropy and density live on different grids")
    floor = density_floor_value(rho)
    if floor <= 0.0:
        raise InvalidDensityError("density is zero everywhere")
    clamped = np.maximum(rho.values, floor)
    n_clamped = int(np.count_nonzero(rho.values < floor))
    meta = {"floored_nodes": n_clamped} if n_clamped else {}
    return ScalarField(entropy.grid, entropy.values - 0.5 * np.log(clamped), FieldRole.PHASE, meta)


def entropy_from_phase(phi: ScalarField, rho: ScalarField) -> ScalarField:
    """S = phi + log sqrt(rho), the inverse change of variables."""
    floor = density_floor_value(rho)
    clamped = np.maximum(rho.values, floor)
    return ScalarField(phi.grid, phi.values + 0.5 * np.log(clamped), FieldRole.ENTROPY)


def velocity_fields(
    entropy: ScalarField, rho: ScalarField, consts: PhysicalConstants
) -> VelocityFields:
    phi = phase_from_entropy(entropy, rho)
    return VelocityFields(
        drift_b=drift_velocity(entropy, consts),
        osmotic_u=osmotic_velocity(rho, consts),
        current_v=current_velocity(phi, consts),
    )


def quantum_potential(rho: ScalarField, consts: PhysicalConstants) -> ScalarField:
    """(eta^2 / 2m) lap(sqrt(rho)) / sqrt(rho) on active nodes, else zero.

    Computed on the raw square root (no clamping) so that smooth
    sub-floor neighbours contribute their true values to the stencil.
    """
    amp = np.sqrt(np.clip(rho.values, 0.0, None))
    lap = _laplacian_values(amp, rho.grid)
    mask = active_mask(rho)
    safe = np.where(amp > 0.0, amp, 1.0)
    q = np.where(mask, lap / safe, 0.0)
    return ScalarField(rho.grid, (consts.eta**2 / (2.0 * consts.mass)) * q)


def effective_velocity(phi: ScalarField, rho: ScalarField, consts: PhysicalConstants) -> ScalarField:
    """Transport velocity: current velocity on active nodes, tapered to zero
    over a few cells beyond the active span, zero deep in the vacuum."""
    v = current_velocity(phi, consts).values
    mask = active_mask(rho)
    out = np.where(mask, v, 0.0)
    idx = np.flatnonzero(mask)
    if idx.size == 0:
        raise InvalidDensityError("density is below the floor everywhere")
    left, right = int(idx[0]), int(idx[-1])
    n = out.size
    for k in range(1, _VACUUM_TAPER):
        ramp = 1.0 - k / _VACUUM_TAPER
        j = right + k
        if j < n and not mask[j]:
            out[j] = v[right] * ramp
        j = left - k
        if j >= 0 and not mask[j]:
            out[j] = v[left] * ramp
    return ScalarField(phi.grid, out)


def fp_step(rho: ScalarField, v: ScalarField, dt: float) -> ScalarField:
    """Conservative finite-volume continuity update for d_t rho = -d(v rho).

    Interface velocities are centered averages of the node values; the
    interface density carries the Lax-Wendroff correction, which keeps the
    explicit update stable up to CFL 1 while remaining second order. Total
    mass is conserved to rounding; negative undershoots are clipped and the
    clipped mass is reported in the result's meta and repaired by
    renormalization.
    """
    if rho.grid != v.grid:
        raise ConfigurationError("density and velocity live on different grids")
    grid = rho.grid
    h = grid.h
    speed = float(np.abs(v.values).max())
    cfl = speed * dt / h
    if cfl > CFL_LIMIT + 1e-12:
        raise StepSizeError(
            f"transport step violates max|v|*dt/h <= {CFL_LIMIT}: got {cfl:.4g} "
            f"(max|v|={speed:.4g}, dt={dt:g}, h={h:g})"
        )
    r = rho.values
    u = v.values
    if grid.boundary is Boundary.PERIODIC:
        r_next = np.roll(r, -1)
        v_face = 0.5 * (u + np.roll(u, -1))
        face_rho = 0.5 * (r + r_next) - (dt / (2.0 * h)) * v_face * (r_next - r)
        flux = v_face * face_rho  # flux[i] sits between node i and i+1
        div = flux - np.roll(flux, 1)
    else:
        v_face = 0.5 * (u[:-1] + u[1:])
        face_rho = 0.5 * (r[:-1] + r[1:]) - (dt / (2.0 * h)) * v_face * (r[1:] - r[:-1])
        inner = v_face * face_rho
        flux = np.concatenate(([0.0], inner, [0.0]))  # zero flux through walls
        div = flux[1:] - flux[:-1]
    widths = grid.weights
    out = r - dt * div / widths
    negative = out < 0.0
    clipped = float(np.sum(-out[negative] * widths[negative])) if negative.any() else 0.0
    if clipped:
        out = np.clip(out, 0.0, None)
        total = float(np.sum(out * widths))
        if total <= 0.0:
            raise InvalidDensityError("transport step removed all mass")
        out *= float(np.sum(r * widths)) / total
    return ScalarField(grid, out, FieldRole.DENSITY, {"clipped_mass": clipped})


def phase_rhs(
    phi: ScalarField, rho: ScalarField, potential: ScalarField, consts: PhysicalConstants
) -> np.ndarray:
    """d_t phi on active nodes: [-(eta^2/2m)(d phi)^2 - V + Q] / eta."""
    grad_phi = _gradient_values(phi.values, phi.grid)
    q = quantum_potential(rho, consts).values
    kinetic = (consts.eta**2 / (2.0 * consts.mass)) * grad_phi * grad_phi
    return (-kinetic - potential.values + q) / consts.eta


def phase_step(
    phi: ScalarField,
    rho: ScalarField,
    potential: ScalarField,
    dt: float,
    consts: PhysicalConstants,
) -> ScalarField:
    """Explicit phase update on active nodes; dead zones are re-filled by
    interpolation from the active region (the phase is meaningless there)."""
    if phi.grid != rho.grid or potential.grid != rho.grid:
        raise ConfigurationError("phase, density and potential must share a grid")
    mask = active_mask(rho)
    if not mask.any():
        raise InvalidDensityError("density is below the floor everywhere")
    rhs = phase_rhs(phi, rho, potential, consts)
    increment = dt * rhs
    worst = float(np.abs(increment[mask]).max())
    if worst > PHASE_BLOWUP:
        node = int(np.flatnonzero(mask)[np.abs(increment[mask]).argmax()])
        raise InstabilityError(
            f"phase step diverged: |d phi| = {worst:.3e} at node {node} "
            f"(x={phi.grid.nodes[node]:g}, dt={dt:g})"
        )
    new = phi.values + np.where(mask, increment, 0.0)
    if not mask.all():
        nodes = phi.grid.nodes
        new = np.interp(nodes, nodes[mask], new[mask])
    return ScalarField(phi.grid, new, FieldRole.PHASE)


def stable_substeps(grid: SpatialGrid, dt: float, consts: PhysicalConstants) -> int:
    """Sub-steps needed so each one satisfies the explicit wave bound.

    The fastest mode of the second-difference Laplacian has frequency
    2 eta / (m h^2); the split scheme is stable while omega * dt <= 2, and
    we leave headroom by filling only _STABILITY_FILL of that.
    """
    omega_max = 2.0 * consts.eta / (consts.mass * grid.h**2)
    return max(1, int(math.ceil(dt * omega_max / _STABILITY_FILL)))


def coupled_step(
    state: HydrodynamicState,
    potential: ScalarField,
    dt: float,
    consts: PhysicalConstants,
    substeps: int | None = None,
) -> HydrodynamicState:
    """Strang update: half phase kick, full transport with the mid-phase
    velocity, half phase kick. Sub-cycles automatically for stability."""
    if potential.grid != state.grid:
        raise ConfigurationError("potential lives on a different grid")
    n_sub = substeps or stable_substeps(state.grid, dt, consts)
    delta = dt / n_sub
    rho, phi = state.rho, state.phi
    clipped = float(rho.meta.get("clipped_mass", 0.0))
    for _ in range(n_sub):
        phi = phase_step(phi, rho, potential, 0.5 * delta, consts)
        v = effective_velocity(phi, rho, consts)
        rho = fp_step(rho, v, delta)
        clipped += float(rho.meta.get("clipped_mass", 0.0))
        phi = phase_step(phi, rho, potential, 0.5 * delta, consts)
    rho = ScalarField(rho.grid, rho.values, FieldRole.DENSITY, {"clipped_mass": clipped})
    return HydrodynamicState(rho, phi, state.t + dt)


def continuity_rhs(rho: ScalarField, v: ScalarField, consts=None) -> np.ndarray:
    """d_t rho = -(central divergence of rho v); the discrete adjoint of the
    phase gradient term in the energy functional."""
    return -_gradient_values(rho.values * v.values, rho.grid)


def rk4_coupled_step(
    state: HydrodynamicState,
    potential: ScalarField,
    dt: float,
    consts: PhysicalConstants,
    substeps: int | None = None,
) -> HydrodynamicState:
    """Monolithic RK4 on the coupled right-hand sides; cross-check integrator."""
    n_sub = substeps or stable_substeps(state.grid, dt, consts)
    delta = dt / n_sub
    grid = state.grid
    mask_template = None

    def rates(r_vals, p_vals):
        rho = ScalarField(grid, np.clip(r_vals, 0.0, None), FieldRole.DENSITY)
        phi = ScalarField(grid, p_vals, FieldRole.PHASE)
        v = effective_velocity(phi, rho, consts)
        drho = continuity_rhs(rho, v)
        mask = active_mask(rho)
        dphi = np.where(mask, phase_rhs(phi, rho, potential, consts), 0.0)
        return drho, dphi

    r = np.array(state.rho.values)
    p = np.array(state.phi.values)
    for _ in range(n_sub):
        k1r, k1p = rates(r, p)
        k2r, k2p = rates(r + 0.5 * delta * k1r, p + 0.5 * delta * k1p)
        k3r, k3p = rates(r + 0.5 * delta * k2r, p + 0.5 * delta * k2p)
        k4r, k4p = rates(r + delta * k3r, p + delta * k3p)
        r = r + (delta / 6.0) * (k1r + 2 * k2r + 2 * k3r + k4r)
        p = p + (delta / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
    rho = normalize_density(ScalarField(grid, np.clip(r, 0.0, None), FieldRole.DENSITY))
    mask = active_mask(rho)
    if not mask.all():
        nodes = grid.nodes
        p = np.interp(nodes, nodes[mask], p[mask])
    return HydrodynamicState(rho, ScalarField(grid, p, FieldRole.PHASE), state.t + dt)


def energy(
    state: HydrodynamicState, potential: ScalarField, consts: PhysicalConstants
) -> EnergyReport:
    """E = int rho [ (eta^2/2m)(d phi)^2 + (eta^2/2m)(d log sqrt(rho))^2 + V ].

    The osmotic term is accumulated as the square of the forward difference
    of sqrt(rho) (the same integral by parts), which needs no density floor
    and is the exact discrete adjoint of the quantum-potential stencil.
    """
    if potential.grid != state.grid:
        raise ConfigurationError("potential lives on a different grid")
    grid = state.grid
    coeff = consts.eta**2 / (2.0 * consts.mass)
    weights = grid.weights
    grad_phi = _gradient_values(state.phi.values, grid)
    kinetic_current = coeff * float(np.sum(state.rho.values * grad_phi**2 * weights))
    amp = np.sqrt(np.clip(state.rho.values, 0.0, None))
    h = grid.h
    if grid.boundary is Boundary.PERIODIC:
        diffs = (np.roll(amp, -1) - amp) / h
        kinetic_osmotic = coeff * float(np.sum(diffs * diffs) * h)
    else:
        diffs = np.diff(amp) / h
        kinetic_osmotic = coeff * float(np.sum(diffs * diffs) * h)
    potential_term = float(np.sum(state.rho.values * potential.values * weights))
    return EnergyReport(kinetic_current, kinetic_osmotic, potential_term)


def hj_residual(
    phi: ScalarField,
    potential: ScalarField,
    phi_dot: ScalarField,
    consts: PhysicalConstants,
) -> ScalarField:
    """Classical Hamilton-Jacobi residual with the action S_HJ = eta phi:
    dS/dt + (1/2m)(dS)^2 + V, i.e. the phase equation minus its
    quantum-potential term."""
    grad = _gradient_values(phi.values, phi.grid)
    action_rate = consts.eta * phi_dot.values
    kinetic = (consts.eta**2 / (2.0 * consts.mass)) * grad * grad
    return ScalarField(phi.grid, action_rate + kinetic + potential.values)


def hamiltonian_matrix(
    grid: SpatialGrid, potential: ScalarField, consts: PhysicalConstants
) -> np.ndarray:
    """Dense -(eta^2/2m) lap + V using exactly the solver's stencil."""
    n = grid.n[0]
    columns = np.eye(n)
    lap = np.column_stack([_laplacian_values(columns[:, j], grid) for j in range(n)])
    return -(consts.eta**2 / (2.0 * consts.mass)) * lap + np.diag(potential.values)


def discrete_ground_state(
    grid: SpatialGrid, potential: ScalarField, consts: PhysicalConstants
) -> tuple[ScalarField, float]:
    """Ground state of the discretized Hamiltonian and its energy.

    Stationary by construction under the coupled dynamics: the
    quantum-potential term built from this density cancels V up to the
    returned constant on every node, so the phase stays spatially uniform
    and the transport velocity stays zero.
    """
    h_mat = hamiltonian_matrix(grid, potential, consts)
    w = grid.weights
    scale = np.sqrt(w)
    symmetric = (h_mat * scale[:, None]) / scale[None, :]
    symmetric = 0.5 * (symmetric + symmetric.T)
    eigenvalues, eigenvectors = scipy.linalg.eigh(symmetric)
    ground = eigenvectors[:, 0] / scale
    rho = normalize_density(ScalarField(grid, ground * ground, FieldRole.DENSITY))
    return rho, float(eigenvalues[0])
