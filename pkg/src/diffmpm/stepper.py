"""One update-stress-last step and trajectory driver."""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import constitutive as cm
from .contact import BoundarySpec, apply_boundary, build_boundary
from .errors import CFLViolationError, NaNDetectedError, TimeStepTooLargeError
from .materials import DruckerPrager, Fluid
from .state import (GridState, ParticleState, SimConfig, SimState, initial_velocities,
                    mass_epsilon, seed_particles)
from .transfer import g2p, grid_update, p2g, smooth_particles


@dataclass
class StepParams:
    """Differentiable parameters consumed inside a step."""

    friction: np.ndarray   # per-segment Coulomb coefficients, all Coulomb walls concatenated
    c: float = 0.0         # fluid sound speed
    mu: float = 0.0        # fluid viscosity

    def copy(self) -> "StepParams":
        return StepParams(np.array(self.friction, dtype=float), self.c, self.mu)


class Scene:
    """Configuration, material, geometry and boundaries of one simulation."""

    def __init__(self, config: SimConfig, material, regions, boundary: BoundarySpec | None = None,
                 ext_force=None, name: str = "scene"):
        self.config = config
        self.material = material
        self.regions = list(regions)
        self.boundary = boundary if boundary is not None else BoundarySpec.all_slip(config.dim)
        self.bd = build_boundary(self.boundary, config)
        self.ext_force = ext_force
        self.name = name
        self.x0, self.region_id = seed_particles(config, self.regions)
        self.mass = material.rho0 * config.dx**config.dim / config.ppc
        self.mass_eps = 1e-12 * self.mass

    @property
    def n_particles(self) -> int:
        return len(self.x0)

    def default_params(self) -> StepParams:
        fr = self.boundary.friction()
        if isinstance(self.material, Fluid):
            return StepParams(fr, self.material.c, self.material.mu)
        return StepParams(fr)

    def initial_state(self) -> SimState:
        cfg = self.config
        n, d = self.x0.shape
        ps = ParticleState.empty(n, d, cfg.dtype)
        ps.x[:] = self.x0
        ps.v[:] = initial_velocities(self.regions, self.x0, self.region_id)
        ps.m[:] = self.mass
        ps.rho[:] = self.material.rho0
        ps.V[:] = self.mass / self.material.rho0
        return SimState(ps, 0, cfg.dt)

    # initial-velocity parameters of all regions, concatenated in region order
    def velocity_fields(self):
        return [r.velocity for r in self.regions if r.velocity is not None]

    def get_velocity_params(self) -> np.ndarray:
        parts = [f.get_params() for f in self.velocity_fields()]
        return np.concatenate(parts) if parts else np.zeros(0)

    def set_velocity_params(self, flat) -> None:
        k = 0
        for f in self.velocity_fields():
            n = len(f.get_params())
            f.set_params(np.asarray(flat[k : k + n], dtype=float))
            k += n

    def velocity_vjp(self, vbar0) -> np.ndarray:
        parts = []
        for k, region in enumerate(self.regions):
            if region.velocity is None:
                continue
            sel = self.region_id == k
            parts.append(region.velocity.vjp(self.x0[sel], vbar0[sel]))
        return np.concatenate(parts) if parts else np.zeros(0)

    def courant(self, vmax=0.0) -> float:
        return cfl_report(self.config, self.material, vmax)

    def check_cfl(self, force=False, vmax=None) -> float:
        if vmax is None:
            vmax = float(np.max(np.linalg.norm(self.initial_state().particles.v, axis=1)))
        cr = self.courant(vmax)
        if cr > 1.0 and not force:
            raise CFLViolationError(cr)
        return cr


def cfl_report(config: SimConfig, material, vmax=0.0) -> float:
    """Courant number ``dt (c_eff + vmax) / dx``."""
    return float(config.dt) * (material.wave_speed() + float(vmax)) / float(config.dx)


def _visc(material, params: StepParams, dt):
    return params.mu / dt if material.viscous_rate_form else params.mu


def forward_grid(state: SimState, scene: Scene, params: StepParams) -> GridState:
    """P2G, explicit update and boundary corrections; ``grid.v`` is final."""
    cfg = scene.config
    grid = p2g(state.particles, cfg)
    if scene.ext_force is not None:
        grid.f += scene.ext_force
    grid_update(grid, cfg.dt, scene.mass_eps)
    apply_boundary(grid.v, grid.active, scene.bd, params.friction)
    return grid


def _smooth_density(ps: ParticleState, rho_half, sigma1, config, c):
    """Swap the per-particle densities for their grid average and shift the
    pressure in ``sigma1`` to match.  Returns ``(rho, V)``."""
    rho = smooth_particles(ps.x, ps.m, rho_half, config)
    dp = c * c * (rho - rho_half)
    for a in range(3):
        sigma1[:, a, a] -= dp
    return rho, ps.m / rho


def constitutive_update(ps: ParticleState, ps1: ParticleState, scene: Scene, params: StepParams):
    """Fill ``sigma, rho, V, eps`` of ``ps1`` from ``ps`` and the new velocity gradient."""
    mat = scene.material
    dt = float(scene.config.dt)
    sigma1 = np.empty_like(ps.sigma)
    rho1 = np.empty_like(ps.rho)
    V1 = np.empty_like(ps.V)
    if isinstance(mat, Fluid):
        bad, J = cm.fluid_kernel(ps.sigma, ps.rho, ps.V, ps1.gv, dt, float(params.c),
                                 float(_visc(mat, params, dt)), mat.rho0, sigma1, rho1, V1)
        if bad < 0 and mat.density_smoothing:
            rho1, V1 = _smooth_density(ps, rho1, sigma1, scene.config, float(params.c))
        eps1 = ps.eps
    elif isinstance(mat, DruckerPrager):
        qphi, kphi, qpsi, tauP, alphaP = mat.derived()
        eps1 = np.empty_like(ps.eps)
        branch = np.empty(ps.n, dtype=np.int64)
        bad, J = cm.dp_kernel(ps.sigma, ps.rho, ps.V, ps1.gv, ps.eps, dt, mat.K, mat.G, qphi, kphi,
                              qpsi, mat.sigma_t, tauP, alphaP, sigma1, rho1, V1, eps1, branch)
    else:
        raise TypeError(f"unsupported material {type(mat).__name__}")
    if bad >= 0:
        raise TimeStepTooLargeError(bad, J)
    ps1.sigma, ps1.rho, ps1.V, ps1.eps = sigma1, rho1, V1, eps1
    return ps1


def step(state: SimState, scene: Scene, params: StepParams | None = None) -> SimState:
    """Advance one step: P2G -> grid update -> corrections -> G2P -> stress update."""
    if params is None:
        params = scene.default_params()
    return finish_step(state, forward_grid(state, scene, params), scene, params)


def finish_step(state: SimState, grid: GridState, scene: Scene, params: StepParams) -> SimState:
    """G2P and stress update given the step's corrected grid."""
    ps1 = g2p(grid, state.particles, scene.config)
    constitutive_update(state.particles, ps1, scene, params)
    return SimState(ps1, state.step + 1, state.dt)


_GUARDED = ("x", "v", "sigma", "rho", "V")


def check_finite(ps: ParticleState, step_no: int) -> None:
    for name in _GUARDED:
        a = getattr(ps, name)
        if not np.isfinite(a.sum()):
            if not np.all(np.isfinite(a)):
                raise NaNDetectedError(step_no, name)


@dataclass
class Snapshot:
    step: int
    t: float
    particles: ParticleState


@dataclass
class RunResult:
    snapshots: list
    final: SimState
    wall_per_1000: list = field(default_factory=list)   # seconds per block of 1000 steps
    wall_total: float = 0.0


def run(scene: Scene, n_steps: int | None = None, stride: int | None = None,
        params: StepParams | None = None, state: SimState | None = None,
        callback=None) -> RunResult:
    """Run ``n_steps`` steps, keeping a snapshot every ``stride`` steps plus the
    initial and final states."""
    cfg = scene.config
    n_steps = cfg.n_steps if n_steps is None else int(n_steps)
    stride = cfg.snapshot_stride if stride is None else int(stride)
    stride = max(1, stride)
    if params is None:
        params = scene.default_params()
    if state is None:
        state = scene.initial_state()
    snaps = [Snapshot(state.step, state.t, state.particles.copy())]
    blocks = []
    t0 = time.perf_counter()
    tb = t0
    for k in range(n_steps):
        state = step(state, scene, params)
        check_finite(state.particles, state.step)
        if (k + 1) % stride == 0 or k + 1 == n_steps:
            snaps.append(Snapshot(state.step, state.t, state.particles.copy()))
        if (k + 1) % 1000 == 0:
            now = time.perf_counter()
            blocks.append(now - tb)
            tb = now
        if callback is not None:
            callback(state)
    return RunResult(snaps, state, blocks, time.perf_counter() - t0)


def kinetic_energy(ps: ParticleState) -> float:
    return 0.5 * float(np.sum(ps.m * np.sum(ps.v**2, axis=1)))


def momentum(ps: ParticleState) -> np.ndarray:
    return np.sum(ps.m[:, None] * ps.v, axis=0)


__all__ = ["Scene", "StepParams", "step", "run", "cfl_report", "forward_grid",
           "constitutive_update", "Snapshot", "RunResult", "mass_epsilon"]
