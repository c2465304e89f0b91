"""Inverse problems: observation operators, masked least-squares loss and Adam.

Observations are stored as ``z_obs[t, l]`` (frame-major) with a matching
``mask[t, l]``.  The loss is ``sum_t sum_l mask * |Q_l(z^t) - z_obs|^2`` and
reaches the parameters through :func:`backprop_trajectory`.
"""
from __future__ import annotations

import csv
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .adjoint import GradResult, TrajectoryLoss, backprop_trajectory, make_plan
from .errors import DivergenceError, GradientNaNError, ValidationError
from .stepper import Scene, StepParams, step


def purpose_rng(seed: int, tag: str) -> np.random.Generator:
    """Independent generator per purpose, all derived from one user seed."""
    return np.random.default_rng([int(seed), zlib.crc32(tag.encode())])


def sample_indices(n_particles: int, k: int, seed: int = 0, tag: str = "observe") -> np.ndarray:
    """Sorted random subset of ``k`` particle ids, reproducible from ``seed``."""
    if k > n_particles:
        raise ValidationError(f"cannot observe {k} of {n_particles} particles")
    idx = purpose_rng(seed, tag).choice(n_particles, size=k, replace=False)
    return np.sort(idx)


def final_window(n_steps: int, n_frames: int, stride: int) -> np.ndarray:
    """The last ``n_frames`` steps at spacing ``stride``, ending at ``n_steps``."""
    steps = n_steps - stride * np.arange(n_frames)[::-1]
    if steps[0] < 0:
        raise ValidationError("observation window starts before step 0")
    return steps


def monitor_grid(xs, ys):
    """Monitor centres on the tensor grid ``xs x ys`` (x fastest)."""
    return np.array([(x, y) for y in ys for x in xs], dtype=float)


# ---------------------------------------------------------------------------
# observation sets

@dataclass
class ObservationSet:
    mode: str                      # "lagrangian" or "eulerian"
    field: str                     # observed particle field, "x" or "v"
    steps: np.ndarray              # (T,) observed step numbers
    z_obs: np.ndarray              # (T, L, d)
    mask: np.ndarray               # (T, L) of 0/1
    indices: np.ndarray | None = None    # (L,) particle ids (lagrangian)
    centers: np.ndarray | None = None    # (L, d) monitor centres (eulerian)
    half_size: float = 0.0

    def __post_init__(self):
        if self.mode not in ("lagrangian", "eulerian"):
            raise ValidationError(f"unknown observation mode '{self.mode}'")
        if self.field not in ("x", "v"):
            raise ValidationError(f"observed field must be x or v, got '{self.field}'")
        self.steps = np.asarray(self.steps, dtype=np.int64)
        self.z_obs = np.asarray(self.z_obs, dtype=float)
        self.mask = np.asarray(self.mask, dtype=float)
        T, L = len(self.steps), self.n_locations
        if self.z_obs.shape[:2] != (T, L) or self.mask.shape != (T, L):
            raise ValidationError("observation arrays do not match |T_t| x |T_x|")
        self._row = {int(s): k for k, s in enumerate(self.steps)}

    @property
    def n_locations(self) -> int:
        return len(self.indices) if self.mode == "lagrangian" else len(self.centers)

    def row(self, step_no: int) -> int:
        return self._row[int(step_no)]

    def with_values(self, z_obs, mask=None) -> "ObservationSet":
        return ObservationSet(self.mode, self.field, self.steps, z_obs,
                              self.mask if mask is None else mask, self.indices,
                              self.centers, self.half_size)


def _frames(snapshots, steps):
    by_step = {s.step: s.particles for s in snapshots}
    missing = [int(s) for s in steps if int(s) not in by_step]
    if missing:
        raise ValidationError(f"no snapshot for observed steps {missing[:5]}")
    return [by_step[int(s)] for s in steps]


def lagrangian_values(ps, indices, field: str):
    return getattr(ps, field)[indices]


def observe_lagrangian(snapshots, indices, steps, field: str = "x") -> ObservationSet:
    """Values of ``field`` at particles ``indices`` for every step in ``steps``."""
    indices = np.asarray(indices, dtype=np.int64)
    frames = _frames(snapshots, steps)
    n = frames[0].n if frames else 0
    if len(indices) and (indices.min() < 0 or indices.max() >= n):
        raise ValidationError(f"observed particle index out of range [0, {n})")
    z = np.stack([lagrangian_values(ps, indices, field) for ps in frames]) if frames else \
        np.zeros((0, len(indices), 0))
    return ObservationSet("lagrangian", field, steps, z, np.ones(z.shape[:2]), indices=indices)


def region_members(x, center, half_size):
    """Ids of particles inside the closed box ``|x - center| <= half_size``."""
    return np.flatnonzero(np.all(np.abs(x - center) <= half_size, axis=1))


def eulerian_values(ps, centers, half_size, field: str = "v"):
    """Region means of ``field`` and the occupancy mask for one frame."""
    vals = getattr(ps, field)
    out = np.zeros((len(centers), vals.shape[1]))
    mask = np.zeros(len(centers))
    for l, c in enumerate(centers):
        members = region_members(ps.x, c, half_size)
        if len(members):
            out[l] = vals[members].mean(axis=0)
            mask[l] = 1.0
    return out, mask


def observe_eulerian(snapshots, centers, half_size, steps, field: str = "v") -> ObservationSet:
    """Monitor-averaged ``field``; empty monitors report zero with mask 0."""
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    frames = _frames(snapshots, steps)
    vals, masks = [], []
    for ps in frames:
        z, m = eulerian_values(ps, centers, half_size, field)
        vals.append(z)
        masks.append(m)
    d = centers.shape[1]
    z = np.stack(vals) if vals else np.zeros((0, len(centers), d))
    m = np.stack(masks) if masks else np.zeros((0, len(centers)))
    return ObservationSet("eulerian", field, steps, z, m, centers=centers, half_size=float(half_size))


class ObservationLoss(TrajectoryLoss):
    """Masked squared misfit between simulated and observed quantities.

    Eulerian monitor membership is evaluated at the simulated positions and
    treated as fixed when differentiating; a simulated monitor with no
    particles reports zero.
    """

    def __init__(self, obs: ObservationSet):
        self.obs = obs
        self.steps = frozenset(int(s) for s in obs.steps)

    def _residual(self, step_no, ps):
        obs = self.obs
        r = obs.row(step_no)
        if obs.mode == "lagrangian":
            q = lagrangian_values(ps, obs.indices, obs.field)
            members = None
        else:
            vals = getattr(ps, obs.field)
            q = np.zeros_like(obs.z_obs[r])
            members = []
            for l, c in enumerate(obs.centers):
                m = region_members(ps.x, c, obs.half_size)
                members.append(m)
                if len(m):
                    q[l] = vals[m].mean(axis=0)
        # a monitor empty in the simulation reports zero
        return (q - obs.z_obs[r]) * obs.mask[r][:, None], members

    def value(self, step_no, ps):
        res, _ = self._residual(step_no, ps)
        return float(np.sum(res * res))

    def seed(self, step_no, ps, cot):
        res, members = self._residual(step_no, ps)
        target = getattr(cot, self.obs.field)
        if members is None:
            np.add.at(target, self.obs.indices, 2.0 * res)
        else:
            for l, m in enumerate(members):
                if len(m):
                    target[m] += 2.0 * res[l] / len(m)


# ---------------------------------------------------------------------------
# parameterisations

class ParameterField:
    """A trainable block mapped onto a scene and its step parameters."""

    kind = "base"
    lower = None   # elementwise lower bound applied after every update

    def get(self, scene: Scene, params: StepParams) -> np.ndarray:
        raise NotImplementedError

    def set(self, values, scene: Scene, params: StepParams) -> None:
        raise NotImplementedError

    def gradient(self, res: GradResult) -> np.ndarray:
        raise NotImplementedError

    def labels(self, n):
        return [f"p{k}" for k in range(n)]


class VelocityParameter(ParameterField):
    """Parameters of the scene's initial-velocity generators (scalar or MLP)."""

    kind = "velocity"

    def get(self, scene, params):
        return scene.get_velocity_params()

    def set(self, values, scene, params):
        scene.set_velocity_params(values)

    def gradient(self, res):
        return res.velocity_params

    def labels(self, n):
        return ["alpha"] if n == 1 else super().labels(n)


class FrictionParameter(ParameterField):
    """Per-segment Coulomb coefficients; entries outside ``trainable`` stay fixed."""

    kind = "friction"

    def __init__(self, trainable=None):
        self.trainable = None if trainable is None else np.asarray(trainable, dtype=np.int64)
        self.lower = 0.0

    def _sel(self, params):
        return np.arange(len(params.friction)) if self.trainable is None else self.trainable

    def get(self, scene, params):
        return params.friction[self._sel(params)].copy()

    def set(self, values, scene, params):
        params.friction[self._sel(params)] = values

    def gradient(self, res):
        g = res.friction
        return g if self.trainable is None else g[self.trainable]

    def labels(self, n):
        return [f"mu{k}" for k in range(n)]


class FluidParameter(ParameterField):
    """Fluid sound speed and/or viscosity."""

    kind = "fluid"

    def __init__(self, names=("c",)):
        self.names = tuple(names)
        if not set(self.names) <= {"c", "mu"}:
            raise ValidationError("fluid parameters are 'c' and 'mu'")
        self.lower = 0.0

    def get(self, scene, params):
        return np.array([getattr(params, n) for n in self.names], dtype=float)

    def set(self, values, scene, params):
        for n, v in zip(self.names, values):
            setattr(params, n, float(v))

    def gradient(self, res):
        return np.array([getattr(res, n) for n in self.names], dtype=float)

    def labels(self, n):
        return list(self.names)


# ---------------------------------------------------------------------------
# optimiser

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr0: float = 0.1
    decay: float = 0.95
    decay_every: int = 25
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n, **kw) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), **kw)

    @property
    def lr(self) -> float:
        """Learning rate of the next update."""
        return self.lr0 * self.decay ** (self.t // self.decay_every)


def adam_step(state: AdamState, params, grads, lower=None, epoch=None):
    """One Adam update; returns ``(new_state, new_params)``."""
    params = np.asarray(params, dtype=float)
    grads = np.asarray(grads, dtype=float)
    if params.shape != grads.shape or params.shape != state.m.shape:
        raise ValidationError("parameter, gradient and moment shapes differ")
    if not np.all(np.isfinite(grads)):
        raise GradientNaNError(state.t if epoch is None else epoch)
    lr = state.lr
    t = state.t + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = m / (1.0 - state.beta1**t)
    vhat = v / (1.0 - state.beta2**t)
    new = params - lr * mhat / (np.sqrt(vhat) + state.eps)
    if lower is not None:
        new = np.maximum(new, lower)
    out = AdamState(m, v, t, state.lr0, state.decay, state.decay_every, state.beta1, state.beta2,
                    state.eps)
    return out, new


# ---------------------------------------------------------------------------
# driver

@dataclass
class InverseProblem:
    scene: Scene
    parameter: ParameterField
    observations: ObservationSet
    n_steps: int
    initial: np.ndarray | None = None     # starting values; defaults to the scene's current ones
    params: StepParams | None = None
    epochs: int = 300
    segments: int = 10
    lr: float = 0.1
    lr_decay: float = 0.95
    lr_decay_every: int = 25
    plateau_tol: float = 1e-10
    plateau_window: int = 20
    divergence_factor: float = 1e3
    loss_tol: float = 0.0                 # stop once the loss falls to this value
    log_path: str | None = None


@dataclass
class InverseResult:
    values: np.ndarray
    loss_history: list
    param_history: list
    grad_history: list
    stop_reason: str
    wall_time: float
    labels: list = field(default_factory=list)

    @property
    def epochs(self) -> int:
        return len(self.loss_history)


def evaluate(problem: InverseProblem, values, params=None) -> GradResult:
    """Loss and gradient at ``values``."""
    params = (problem.params or problem.scene.default_params()).copy() if params is None else params
    problem.parameter.set(values, problem.scene, params)
    plan = make_plan(problem.n_steps, min(problem.segments, max(problem.n_steps, 1)))
    return backprop_trajectory(problem.scene, ObservationLoss(problem.observations), plan, params)


def invert(problem: InverseProblem, callback=None) -> InverseResult:
    """Adam iterations until ``epochs``, a loss plateau, or ``loss_tol``."""
    scene = problem.scene
    params = (problem.params or scene.default_params()).copy()
    par = problem.parameter
    values = par.get(scene, params) if problem.initial is None else np.array(problem.initial, dtype=float)
    values = np.atleast_1d(values).astype(float)
    labels = par.labels(len(values))
    adam = AdamState.zeros(len(values), lr0=problem.lr, decay=problem.lr_decay,
                           decay_every=problem.lr_decay_every)
    losses, history, grads = [], [], []
    reason = "max_epochs"
    t0 = time.perf_counter()
    log = None
    writer = None
    if problem.log_path:
        log = open(problem.log_path, "w", newline="")
        writer = csv.writer(log)
        cols = labels if len(values) <= 10 else ["param_norm"]
        writer.writerow(["epoch", "loss", *cols, "lr", "wall_time"])
    try:
        for epoch in range(problem.epochs):
            lr = adam.lr
            res = evaluate(problem, values, params)
            g = par.gradient(res)
            losses.append(res.loss)
            history.append(values.copy())
            grads.append(np.array(g, dtype=float))
            if writer is not None:
                cols = list(values) if len(values) <= 10 else [float(np.linalg.norm(values))]
                writer.writerow([epoch, f"{res.loss:.17g}", *[f"{c:.17g}" for c in cols], f"{lr:.6g}",
                                 f"{time.perf_counter() - t0:.3f}"])
                log.flush()
            if callback is not None:
                callback(epoch, res.loss, values)
            if not np.isfinite(res.loss) or res.loss > problem.divergence_factor * max(losses[0], 1e-300):
                raise DivergenceError(epoch, res.loss, (losses, history))
            if res.loss <= problem.loss_tol:
                reason = "loss_tol"
                break
            w = problem.plateau_window
            if len(losses) > w:
                ref = losses[-1 - w]
                if abs(ref - res.loss) <= problem.plateau_tol * max(abs(ref), 1e-300):
                    reason = "plateau"
                    break
            adam, values = adam_step(adam, values, g, par.lower, epoch)
    finally:
        if log is not None:
            log.close()
    par.set(values, scene, params)
    return InverseResult(values, losses, history, grads, reason, time.perf_counter() - t0, labels)


def collect_snapshots(scene: Scene, steps, params: StepParams | None = None):
    """Forward run keeping copies of the particle state at ``steps``."""
    from .stepper import Snapshot, check_finite

    params = scene.default_params() if params is None else params
    wanted = set(int(s) for s in steps)
    state = scene.initial_state()
    out = []
    if 0 in wanted:
        out.append(Snapshot(0, 0.0, state.particles.copy()))
    for _ in range(max(wanted) if wanted else 0):
        state = step(state, scene, params)
        check_finite(state.particles, state.step)
        if state.step in wanted:
            out.append(Snapshot(state.step, state.t, state.particles.copy()))
    return out


def twin_observations(scene: Scene, parameter: ParameterField, truth, template: ObservationSet,
                      params: StepParams | None = None) -> ObservationSet:
    """Observations generated by a forward run at ``truth``.

    ``template`` fixes mode, field, steps and locations; its values are
    ignored.  The scene's own parameters are restored afterwards so that the
    inversion never sees the truth.
    """
    params = (params or scene.default_params()).copy()
    saved = parameter.get(scene, params)
    parameter.set(np.asarray(truth, dtype=float), scene, params)
    try:
        snaps = collect_snapshots(scene, template.steps, params)
    finally:
        parameter.set(saved, scene, params)
    if template.mode == "lagrangian":
        return observe_lagrangian(snaps, template.indices, template.steps, template.field)
    return observe_eulerian(snaps, template.centers, template.half_size, template.steps, template.field)


def lagrangian_template(indices, steps, field="x", d=2) -> ObservationSet:
    T, L = len(steps), len(indices)
    return ObservationSet("lagrangian", field, steps, np.zeros((T, L, d)), np.ones((T, L)),
                          indices=np.asarray(indices, dtype=np.int64))


def eulerian_template(centers, half_size, steps, field="v") -> ObservationSet:
    centers = np.atleast_2d(np.asarray(centers, dtype=float))
    T, L = len(steps), len(centers)
    return ObservationSet("eulerian", field, steps, np.zeros((T, L, centers.shape[1])),
                          np.ones((T, L)), centers=centers, half_size=float(half_size))


def profile_error(field, truth, H0, y0=0.0, n=1001) -> float:
    """Relative L2 distance between two vertical velocity profiles on ``[y0, y0 + H0]``."""
    y = np.linspace(y0, y0 + H0, n)
    a = np.asarray(field.profile(y), dtype=float)
    b = np.asarray(truth.profile(y), dtype=float)
    return float(np.sqrt(np.trapezoid((a - b) ** 2, y) / np.trapezoid(b**2, y)))


__all__ = ["ObservationSet", "observe_lagrangian", "observe_eulerian", "ObservationLoss",
           "sample_indices", "final_window", "monitor_grid", "VelocityParameter",
           "FrictionParameter", "FluidParameter", "AdamState", "adam_step", "InverseProblem",
           "InverseResult", "invert", "evaluate", "twin_observations", "collect_snapshots",
           "profile_error", "purpose_rng", "region_members", "lagrangian_template",
           "eulerian_template", "ParameterField"]
