import dataclasses
import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from diffmpm import adjoint
from diffmpm.adjoint import (FunctionLoss, StepCotangent, backprop_trajectory, make_plan,
                             step_vjp)
from diffmpm.errors import CheckpointMismatchError, MPMError
from diffmpm.fields import ConstantVelocity, LinearProfile
from diffmpm.gradcheck import default_loss
from diffmpm.materials import Fluid
from diffmpm.state import Box, SimConfig, SimState
from diffmpm.stepper import Scene, step

from conftest import small_fluid_scene


def _single_particle(n_steps=40, dt=1e-3):
    cfg = SimConfig(dx=0.05, extents=(1.0, 1.0), dt=dt, n_steps=n_steps, gravity=(0.0, 0.0),
                    scheme="pic", ppc=4)
    # box smaller than a sub-cell: exactly one lattice point
    region = Box((0.4, 0.5), (0.42, 0.52), ConstantVelocity([0.3, 0.1]))
    return Scene(cfg, Fluid(1000.0, 5.0), [region])


def _x_loss(n):
    def fn(ps):
        g = np.zeros_like(ps.x)
        g[:, 0] = 1.0
        return ps.x[:, 0].sum(), {"x": g}
    return FunctionLoss([n], fn)


class TestMakePlan:
    def test_single_segment(self):
        assert make_plan(10, 1).bounds == [(0, 10)]

    def test_balanced_partition(self):
        assert make_plan(10, 3).lengths == [4, 3, 3]

    @given(st.integers(1, 500), st.integers(1, 50))
    def test_lengths_differ_by_at_most_one(self, n, k):
        k = min(k, n)
        plan = make_plan(n, k)
        assert sum(plan.lengths) == n
        assert max(plan.lengths) - min(plan.lengths) <= 1
        assert all(b[0] == a[1] for a, b in zip(plan.bounds, plan.bounds[1:]))

    def test_peak_states_for_long_trajectory(self):
        # 10 checkpoints plus the replayed start and 1000 intermediates of the last segment
        assert make_plan(10000, 10).peak_states == 10 + 1001

    def test_invalid_segment_count(self):
        with pytest.raises(MPMError):
            make_plan(10, 0)
        with pytest.raises(MPMError):
            make_plan(10, 11)

    def test_memory_budget_message(self):
        with pytest.raises(MPMError, match="at least"):
            make_plan(1000, 1, state_bytes=1000, memory_budget=100_000)
        plan = make_plan(1000, 10, state_bytes=1000)
        assert plan.memory_estimate == (10 + 100) * 1000


class TestStepVJP:
    def test_zero_cotangent(self, fluid_scene):
        s0 = fluid_scene.initial_state()
        s1 = step(s0, fluid_scene)
        params = fluid_scene.default_params()
        cot = StepCotangent.zeros_like(s1.particles, len(params.friction))
        out = step_vjp(s1, fluid_scene, params, cot)
        for a in out.state_arrays().values():
            assert not np.any(a)
        assert not np.any(out.friction) and out.c == 0.0 and out.mu == 0.0

    def test_linear_in_cotangent(self, fluid_scene):
        state = fluid_scene.initial_state()
        for _ in range(10):
            state = step(state, fluid_scene)
        params = fluid_scene.default_params()
        rng = np.random.default_rng(0)

        def rand():
            c = StepCotangent.zeros_like(state.particles, len(params.friction))
            for a in c.state_arrays().values():
                a[...] = rng.normal(size=a.shape)
            return c

        c1, c2 = rand(), rand()
        o1 = step_vjp(state, fluid_scene, params, c1)
        o2 = step_vjp(state, fluid_scene, params, c2)
        o3 = step_vjp(state, fluid_scene, params, c1.scaled_add(c2, 2.0, -0.5))
        expect = o1.scaled_add(o2, 2.0, -0.5)
        for k, a in o3.state_arrays().items():
            b = getattr(expect, k)
            assert np.allclose(a, b, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(b).max())), k
        assert np.allclose(o3.friction, expect.friction, rtol=1e-12, atol=1e-12)
        assert o3.c == pytest.approx(expect.c, rel=1e-12, abs=1e-12)

    @pytest.mark.parametrize("smoothing", [True, False])
    def test_matches_finite_differences(self, smoothing):
        sc = small_fluid_scene(coulomb=False)
        sc.material = dataclasses.replace(sc.material, density_smoothing=smoothing)
        state = sc.initial_state()
        for _ in range(10):
            state = step(state, sc)
        params = sc.default_params()
        rng = np.random.default_rng(3)
        cot = StepCotangent.zeros_like(state.particles)
        for a in cot.state_arrays().values():
            a[...] = rng.normal(size=a.shape)
        scale = {"x": 1e-3, "v": 1e-2, "sigma": 10.0, "rho": 1.0, "V": 1e-8, "gv": 1e-1, "B": 1e-3}
        dirs = {k: scale[k] * rng.normal(size=a.shape) for k, a in cot.state_arrays().items()}
        dc = 0.5

        def objective(h):
            s = SimState(state.particles.copy(), state.step, state.dt)
            for k, d in dirs.items():
                getattr(s.particles, k)[...] += h * d
            p = dataclasses.replace(params, c=params.c + h * dc)
            out = step(s, sc, p).particles
            return sum(float(np.sum(getattr(cot, k) * getattr(out, k))) for k in dirs)

        # the objective sums O(1e5) terms, so the quotient carries ~1e-6 round-off
        h = 1e-5
        fd = (objective(h) - objective(-h)) / (2 * h)
        back = step_vjp(state, sc, params, cot)
        ad = sum(float(np.sum(getattr(back, k) * d)) for k, d in dirs.items()) + back.c * dc
        assert ad == pytest.approx(fd, rel=1e-4)

    def test_single_particle_free_flight(self):
        n, dt = 40, 1e-3
        sc = _single_particle(n, dt)
        assert sc.n_particles == 1
        res = backprop_trajectory(sc, _x_loss(n), make_plan(n, 4))
        assert res.v0[0] == pytest.approx([n * dt, 0.0], abs=1e-12)
        assert res.x0[0] == pytest.approx([1.0, 0.0], abs=1e-12)

    def test_float32_rejected(self, fluid_scene):
        s = fluid_scene.initial_state()
        s.particles = s.particles.astype(np.float32)
        with pytest.raises(MPMError):
            step_vjp(s, fluid_scene, fluid_scene.default_params(),
                     StepCotangent.zeros_like(s.particles))


class TestBackprop:
    def _grad(self, n_segments, scene=None):
        scene = scene or small_fluid_scene(n_steps=50)
        return backprop_trajectory(scene, default_loss(50), make_plan(50, n_segments))

    def test_segment_invariance(self):
        results = [self._grad(n) for n in (1, 2, 5, 10)]
        ref = results[0]
        for r in results[1:]:
            assert r.loss == ref.loss
            assert np.array_equal(r.velocity_params, ref.velocity_params)
            assert np.array_equal(r.friction, ref.friction)
            assert np.array_equal(r.x0, ref.x0) and np.array_equal(r.v0, ref.v0)
            assert r.c == ref.c

    def test_peak_states_follow_plan(self):
        for n in (1, 5, 10):
            r = self._grad(n)
            plan = make_plan(50, n)
            assert r.peak_stored_states == plan.peak_states
            assert r.n_checkpoints == n

    def test_loss_independent_of_parameters(self, fluid_scene):
        zero = FunctionLoss([fluid_scene.config.n_steps], lambda ps: (0.0, {}))
        r = backprop_trajectory(fluid_scene, zero, make_plan(fluid_scene.config.n_steps, 5))
        assert not np.any(r.velocity_params) and not np.any(r.friction)
        assert r.c == 0.0 and r.mu == 0.0

    def test_sign_of_velocity_gradient(self):
        # loss = sum |x|^2 at the end; pushing harder in +x moves the block outward
        n = 40
        cfg = SimConfig(dx=0.05, extents=(1.5, 0.6), dt=2e-4, n_steps=n, gravity=(0.0, -9.8),
                        scheme="flip", ppc=4)
        sc = Scene(cfg, Fluid(1000.0, 10.0), [Box((0.1, 0.0), (0.4, 0.3), LinearProfile(1.0, 0.3))])

        def fn(ps):
            return float(np.sum(ps.x**2)), {"x": 2.0 * ps.x}

        loss = FunctionLoss([n], fn)
        r = backprop_trajectory(sc, loss, make_plan(n, 4))
        assert r.velocity_params[0] > 0
        h = 1e-6
        vals = []
        for a in (1.0 + h, 1.0 - h):
            sc.set_velocity_params([a])
            vals.append(backprop_trajectory(sc, loss, make_plan(n, 1)).loss)
        sc.set_velocity_params([1.0])
        assert r.velocity_params[0] == pytest.approx((vals[0] - vals[1]) / (2 * h), rel=1e-5)

    def test_checkpoint_mismatch(self, monkeypatch, fluid_scene):
        counter = itertools.count()
        monkeypatch.setattr(adjoint, "state_hash", lambda ps: str(next(counter)))
        with pytest.raises(CheckpointMismatchError):
            backprop_trajectory(fluid_scene, default_loss(fluid_scene.config.n_steps),
                                make_plan(fluid_scene.config.n_steps, 2))

    def test_plan_length_mismatch(self, fluid_scene):
        with pytest.raises(MPMError):
            backprop_trajectory(fluid_scene, default_loss(10), make_plan(10, 2), n_steps=12)

    @settings(max_examples=5)
    @given(st.integers(0, 2**31 - 1))
    def test_matches_finite_differences_along_random_friction(self, seed):
        sc = small_fluid_scene(n_steps=30)
        loss = default_loss(30)
        params = sc.default_params()
        r = backprop_trajectory(sc, loss, make_plan(30, 3), params)
        d = np.random.default_rng(seed).normal(size=len(params.friction))
        h = 1e-6
        vals = []
        for s in (h, -h):
            p = params.copy()
            p.friction = params.friction + s * d
            vals.append(backprop_trajectory(sc, loss, make_plan(30, 1), p).loss)
        fd = (vals[0] - vals[1]) / (2 * h)
        assert r.friction @ d == pytest.approx(fd, rel=1e-5, abs=1e-10)
