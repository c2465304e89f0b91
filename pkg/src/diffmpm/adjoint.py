"""Reverse-mode gradients of whole trajectories.

``step_vjp`` applies the transpose of one step to a cotangent.  It recomputes
the grid of the step from the step's input state, so the backward pass only
needs particle states.  ``backprop_trajectory`` stores one state per segment
start in the forward pass and replays each segment during the backward pass.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import constitutive as cm
from .contact import boundary_vjp
from .errors import CheckpointMismatchError, MPMError
from .materials import Fluid
from .state import DIFF_FIELDS, ParticleState, SimState
from .stepper import Scene, StepParams, _visc, finish_step, forward_grid, step
from .transfer import (g2p, g2p_vjp, grid_update_vjp_kernel, p2g_vjp, smooth_particles,
                       smooth_particles_vjp)


@dataclass
class StepCotangent:
    """Cotangents of the differentiable particle fields plus parameter cotangents."""

    x: np.ndarray
    v: np.ndarray
    sigma: np.ndarray
    rho: np.ndarray
    V: np.ndarray
    gv: np.ndarray
    B: np.ndarray
    friction: np.ndarray = field(default_factory=lambda: np.zeros(0))
    c: float = 0.0
    mu: float = 0.0

    @classmethod
    def zeros_like(cls, ps: ParticleState, n_friction: int = 0) -> "StepCotangent":
        z = {k: np.zeros(getattr(ps, k).shape) for k in DIFF_FIELDS}
        return cls(**z, friction=np.zeros(n_friction))

    def state_arrays(self):
        return {k: getattr(self, k) for k in DIFF_FIELDS}

    def scaled_add(self, other: "StepCotangent", a=1.0, b=1.0) -> "StepCotangent":
        kw = {k: a * getattr(self, k) + b * getattr(other, k) for k in DIFF_FIELDS}
        return StepCotangent(**kw, friction=a * self.friction + b * other.friction,
                             c=a * self.c + b * other.c, mu=a * self.mu + b * other.mu)


def step_vjp(state: SimState, scene: Scene, params: StepParams, cot: StepCotangent,
             grid=None, next_state: SimState | None = None) -> StepCotangent:
    """Pull the cotangent of ``step(state)`` back onto ``state``.

    The returned object carries the state cotangent and, in its parameter
    slots, this step's contribution to the parameter cotangents only.  The
    step's grid and output state are recomputed unless supplied.
    """
    cfg = scene.config
    ps = state.particles
    if ps.x.dtype != np.float64:
        raise MPMError("gradients require f64 precision")
    dt = float(cfg.dt)

    if grid is None:
        grid = forward_grid(state, scene, params)
    gv1 = next_state.particles.gv if next_state is not None else g2p(grid, ps, cfg).gv

    out = StepCotangent.zeros_like(ps, len(params.friction))
    gvb1 = np.array(cot.gv, dtype=np.float64)
    mat = scene.material
    if isinstance(mat, Fluid):
        pb = np.zeros(2)
        visc = _visc(mat, params, dt)
        c = float(params.c)
        sig_bar, rho_bar, V_bar = cot.sigma, cot.rho, cot.V
        extra_c = 0.0
        if mat.density_smoothing:
            # rho = S(rho_half), V = m / rho, sigma shifted by -c^2 (rho - rho_half) I
            trd = sum(gv1[:, a, a] * dt for a in range(ps.dim))
            rho_half = ps.rho / (1.0 + trd)
            rho = next_state.particles.rho if next_state is not None else \
                smooth_particles(ps.x, ps.m, rho_half, cfg)
            trs = np.trace(cot.sigma, axis1=1, axis2=2)
            rho_s_bar = cot.rho - c * c * trs - ps.m / (rho * rho) * cot.V
            rho_bar = c * c * trs
            smooth_particles_vjp(ps.x, ps.m, rho_half, cfg, rho_s_bar, rho_bar, out.x)
            V_bar = np.zeros_like(cot.V)
            extra_c = -2.0 * c * float(np.dot(rho - rho_half, trs))
        cm.fluid_vjp_kernel(ps.rho, ps.V, gv1, dt, c, float(visc), mat.rho0,
                            sig_bar, rho_bar, V_bar, out.rho, out.V, gvb1, pb)
        out.c = float(pb[0]) + extra_c
        out.mu = float(pb[1] / dt if mat.viscous_rate_form else pb[1])
    else:
        qphi, kphi, qpsi, tauP, alphaP = mat.derived()
        cm.dp_vjp_kernel(ps.sigma, ps.rho, ps.V, gv1, dt, mat.K, mat.G, qphi, kphi, qpsi,
                         mat.sigma_t, tauP, alphaP, cot.sigma, cot.rho, cot.V, out.sigma, out.rho,
                         out.V, gvb1)

    gvelb = np.zeros_like(grid.v)
    gvoldb = np.zeros_like(grid.v)
    g2p_vjp(grid, ps, cfg, cot.x, cot.v, gvb1, cot.B, out, gvelb, gvoldb)
    vpredb, mub = boundary_vjp(grid.v_pred, gvelb, grid.active, scene.bd, params.friction)
    out.friction = mub
    gmb = np.zeros_like(grid.m)
    gmvb = np.zeros_like(grid.mv)
    gfb = np.zeros_like(grid.f)
    grid_update_vjp_kernel(grid.m, grid.mv, grid.f, dt, grid.active, vpredb, gvoldb, gmb, gmvb, gfb)
    p2g_vjp(ps, cfg, gmb, gmvb, gfb, out)
    return out


# ---------------------------------------------------------------------------
# checkpointing

@dataclass
class CheckpointPlan:
    n_steps: int
    n_segments: int
    bounds: list            # [(start, end)] half-open step ranges
    state_bytes: int = 0

    @property
    def lengths(self):
        return [e - s for s, e in self.bounds]

    @property
    def max_length(self) -> int:
        return max(self.lengths) if self.bounds else 0

    @property
    def peak_states(self) -> int:
        """Most particle states alive at once: the checkpoints not yet consumed
        plus the replayed states of the segment being differentiated."""
        if not self.bounds:
            return 1
        return max(k + 1 + (e - s) + 1 for k, (s, e) in enumerate(self.bounds))

    @property
    def memory_estimate(self) -> int:
        return (self.n_segments + self.max_length) * self.state_bytes


def make_plan(n_steps: int, n_segments: int, state_bytes: int = 0,
              memory_budget: int | None = None) -> CheckpointPlan:
    """Near-equal partition of ``n_steps`` into ``n_segments`` contiguous segments."""
    n_steps = int(n_steps)
    n_segments = int(n_segments)
    if n_steps == 0 and n_segments == 1:
        return CheckpointPlan(0, 1, [(0, 0)], state_bytes)
    if not 1 <= n_segments <= max(n_steps, 1):
        raise MPMError(f"n_segments must lie in [1, {n_steps}], got {n_segments}")
    q, r = divmod(n_steps, n_segments)
    bounds = []
    s = 0
    for k in range(n_segments):
        e = s + q + (1 if k < r else 0)
        bounds.append((s, e))
        s = e
    plan = CheckpointPlan(n_steps, n_segments, bounds, state_bytes)
    if memory_budget is not None and plan.memory_estimate > memory_budget:
        need = n_segments
        while need < n_steps and make_plan(n_steps, need, state_bytes).memory_estimate > memory_budget:
            need += 1
        raise MPMError(
            f"one segment of {plan.max_length} steps needs {plan.memory_estimate} bytes, over the "
            f"budget of {memory_budget}; use at least {need} segments"
        )
    return plan


def state_bytes(ps: ParticleState) -> int:
    return int(sum(a.nbytes for a in ps.arrays().values()))


def state_hash(ps: ParticleState) -> str:
    h = hashlib.blake2b(digest_size=16)
    for k in DIFF_FIELDS:
        h.update(np.ascontiguousarray(getattr(ps, k)).tobytes())
    return h.hexdigest()


class TrajectoryLoss:
    """Loss made of per-step terms; subclasses define the observed steps."""

    steps: frozenset = frozenset()

    def value(self, step_no: int, ps: ParticleState) -> float:
        raise NotImplementedError

    def seed(self, step_no: int, ps: ParticleState, cot: StepCotangent) -> None:
        """Add ``dL_step/dstate`` into ``cot``."""
        raise NotImplementedError


class FunctionLoss(TrajectoryLoss):
    """Wraps ``value_fn(ps) -> (L, {field: dL/dfield})`` evaluated at ``steps``."""

    def __init__(self, steps, fn):
        self.steps = frozenset(int(s) for s in steps)
        self.fn = fn

    def value(self, step_no, ps):
        return float(self.fn(ps)[0])

    def seed(self, step_no, ps, cot):
        for k, g in self.fn(ps)[1].items():
            getattr(cot, k)[...] += g


@dataclass
class GradResult:
    loss: float
    x0: np.ndarray          # dL/d(initial positions)
    v0: np.ndarray          # dL/d(initial velocities)
    velocity_params: np.ndarray
    friction: np.ndarray
    c: float
    mu: float
    peak_stored_states: int
    n_checkpoints: int
    final: SimState | None = None


def backprop_trajectory(scene: Scene, loss: TrajectoryLoss, plan: CheckpointPlan,
                        params: StepParams | None = None, n_steps: int | None = None,
                        verify: bool = True, grid_cache_bytes: int = 512 * 2**20) -> GradResult:
    """Loss value and its gradient w.r.t. initial state and step parameters."""
    if params is None:
        params = scene.default_params()
    n_steps = plan.n_steps if n_steps is None else n_steps
    if n_steps != plan.n_steps:
        raise MPMError("checkpoint plan does not match the trajectory length")
    state = scene.initial_state()
    if state.particles.x.dtype != np.float64:
        raise MPMError("gradients require f64 precision")

    nodes = scene.config.n_nodes
    d = scene.config.dim
    grid_bytes = nodes * (2 + 5 * d) * 8
    checkpoints = {}
    end_hash = {}
    total = 0.0
    if 0 in loss.steps:
        total += loss.value(0, state.particles)
    live = 1
    peak = 1
    for s0, s1 in plan.bounds:
        checkpoints[s0] = state.copy()
        peak = max(peak, len(checkpoints) + live)
        for t in range(s0, s1):
            state = step(state, scene, params)
            if state.step in loss.steps:
                total += loss.value(state.step, state.particles)
        end_hash[s1] = state_hash(state.particles)
    final = state

    cot = StepCotangent.zeros_like(state.particles, len(params.friction))
    fr_bar = np.zeros(len(params.friction))
    c_bar = 0.0
    mu_bar = 0.0
    if n_steps in loss.steps:
        loss.seed(n_steps, final.particles, cot)
    for s0, s1 in reversed(plan.bounds):
        states = [checkpoints[s0]]
        grids = []
        keep_grids = (s1 - s0) * grid_bytes <= grid_cache_bytes
        for t in range(s0, s1):
            if keep_grids:
                grid = forward_grid(states[-1], scene, params)
                grids.append(grid)
                nxt = finish_step(states[-1], grid, scene, params)
            else:
                nxt = step(states[-1], scene, params)
            states.append(nxt)
        peak = max(peak, len(checkpoints) + len(states))
        if verify and state_hash(states[-1].particles) != end_hash[s1]:
            raise CheckpointMismatchError(f"replay of segment [{s0}, {s1}) does not reproduce the forward pass")
        for t in range(s1 - 1, s0 - 1, -1):
            out = step_vjp(states[t - s0], scene, params, cot,
                           grid=grids[t - s0] if keep_grids else None, next_state=states[t - s0 + 1])
            fr_bar += out.friction
            c_bar += out.c
            mu_bar += out.mu
            cot = out
            if t in loss.steps:
                loss.seed(t, states[t - s0].particles, cot)
        del states, grids
        del checkpoints[s0]
    return GradResult(
        loss=total, x0=cot.x, v0=cot.v, velocity_params=scene.velocity_vjp(cot.v),
        friction=fr_bar, c=c_bar, mu=mu_bar, peak_stored_states=peak,
        n_checkpoints=plan.n_segments, final=final,
    )


__all__ = ["StepCotangent", "step_vjp", "CheckpointPlan", "make_plan", "backprop_trajectory",
           "TrajectoryLoss", "FunctionLoss", "GradResult", "state_hash"]
