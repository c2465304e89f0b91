"""Finite-difference checks of trajectory gradients.

Each parameter class of a scene (initial-velocity generator parameters,
Coulomb friction coefficients, fluid sound speed) is perturbed along random
unit directions.  The adjoint directional derivative ``g . d`` is compared
with the central difference ``(L(p + h d) - L(p - h d)) / 2h``.

Contact and friction branches are frozen in the adjoint, so a perturbation
that flips a branch yields a difference quotient that is not a derivative.
Such directions are detected by comparing the quotient at ``h`` and ``2h``
and are redrawn; the number of redraws is reported.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .adjoint import FunctionLoss, backprop_trajectory, make_plan
from .materials import Fluid
from .stepper import Scene, StepParams, step


@dataclass
class DirectionCheck:
    kind: str
    index: int
    adjoint: float
    fd: float
    rel_error: float
    passed: bool


@dataclass
class ClassReport:
    kind: str
    n_params: int
    checks: list
    redrawn: int

    @property
    def max_error(self) -> float:
        return max((c.rel_error for c in self.checks), default=0.0)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)


def default_loss(n_steps: int) -> FunctionLoss:
    """Mass-weighted squared positions and velocities at the middle and final steps."""

    def fn(ps):
        m = ps.m[:, None]
        val = np.sum(m * ps.x**2) + np.sum(m * ps.v**2)
        return val, {"x": 2.0 * m * ps.x, "v": 2.0 * m * ps.v}

    steps = {n_steps} if n_steps < 2 else {n_steps // 2, n_steps}
    return FunctionLoss(steps, fn)


def loss_value(scene: Scene, loss, params: StepParams, n_steps: int) -> float:
    state = scene.initial_state()
    total = loss.value(0, state.particles) if 0 in loss.steps else 0.0
    for _ in range(n_steps):
        state = step(state, scene, params)
        if state.step in loss.steps:
            total += loss.value(state.step, state.particles)
    return total


class _Accessor:
    """get/set for one parameter class on a scene and a StepParams."""

    def __init__(self, kind, scene):
        self.kind = kind
        self.scene = scene

    def get(self, params):
        if self.kind == "velocity":
            return self.scene.get_velocity_params()
        if self.kind == "friction":
            return np.array(params.friction, dtype=float)
        return np.array([params.c], dtype=float)

    def set(self, params, values):
        if self.kind == "velocity":
            self.scene.set_velocity_params(values)
        elif self.kind == "friction":
            params.friction = np.array(values, dtype=float)
        else:
            params.c = float(values[0])

    def gradient(self, res):
        if self.kind == "velocity":
            return res.velocity_params
        if self.kind == "friction":
            return res.friction
        return np.array([res.c])


def parameter_classes(scene: Scene, params: StepParams):
    kinds = []
    if scene.get_velocity_params().size:
        kinds.append("velocity")
    if len(params.friction):
        kinds.append("friction")
    if isinstance(scene.material, Fluid):
        kinds.append("c")
    return kinds


def check_gradients(scene: Scene, n_dirs: int = 20, fd_step: float = 1e-6, tol: float = 1e-5,
                    seed: int = 0, segments: int = 4, n_steps: int | None = None,
                    kinds=None, loss=None, max_redraw: int | None = None):
    """Compare adjoint and finite-difference directional derivatives.

    ``fd_step`` is relative: the perturbation is ``h = fd_step * max(1, |p|)``
    along a unit direction.  Returns one :class:`ClassReport` per class.
    """
    n_steps = scene.config.n_steps if n_steps is None else int(n_steps)
    loss = default_loss(n_steps) if loss is None else loss
    params = scene.default_params()
    kinds = parameter_classes(scene, params) if kinds is None else list(kinds)
    max_redraw = 2 * n_dirs if max_redraw is None else max_redraw
    rng = np.random.default_rng(seed)
    plan = make_plan(n_steps, max(1, min(segments, n_steps)))
    res = backprop_trajectory(scene, loss, plan, params)
    reports = []
    for kind in kinds:
        acc = _Accessor(kind, scene)
        p0 = acc.get(params)
        g = acc.gradient(res)
        h = fd_step * max(1.0, float(np.linalg.norm(p0)))

        def L(p):
            q = params.copy()
            acc.set(q, p)
            try:
                return loss_value(scene, loss, q, n_steps)
            finally:
                acc.set(q, p0)

        checks = []
        redrawn = 0
        while len(checks) < n_dirs:
            d = rng.normal(size=p0.shape)
            d /= np.linalg.norm(d)
            fd1 = (L(p0 + h * d) - L(p0 - h * d)) / (2 * h)
            fd2 = (L(p0 + 2 * h * d) - L(p0 - 2 * h * d)) / (4 * h)
            if abs(fd1 - fd2) > 1e-3 * abs(fd1) + 1e-300 and redrawn < max_redraw:
                redrawn += 1
                continue
            ad = float(g @ d)
            err = abs(ad - fd1) / (abs(fd1) + 1e-300)
            checks.append(DirectionCheck(kind, len(checks), ad, fd1, err, err < tol))
        acc.set(params, p0)
        reports.append(ClassReport(kind, p0.size, checks, redrawn))
    return reports


def format_table(reports) -> str:
    lines = [f"{'class':<10}{'n_params':>9}{'dirs':>6}{'redrawn':>9}{'max_rel_err':>14}  result"]
    for r in reports:
        lines.append(f"{r.kind:<10}{r.n_params:>9}{len(r.checks):>6}{r.redrawn:>9}"
                     f"{r.max_error:>14.3e}  {'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


__all__ = ["check_gradients", "format_table", "default_loss", "loss_value", "ClassReport",
           "DirectionCheck", "parameter_classes"]
