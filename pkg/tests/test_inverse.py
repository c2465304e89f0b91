import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffmpm.errors import DivergenceError, GradientNaNError, ValidationError
from diffmpm.fields import (LinearProfile, MLPProfile, mlp_forward, mlp_param_count,
                            mlp_vjp)
from diffmpm.inverse import (AdamState, FrictionParameter, InverseProblem, ObservationLoss,
                             VelocityParameter, adam_step, collect_snapshots, eulerian_template,
                             evaluate, invert, lagrangian_template, monitor_grid,
                             observe_eulerian, observe_lagrangian, region_members,
                             sample_indices, twin_observations)
from diffmpm.scene_io import load_scene
from diffmpm.stepper import Snapshot

from conftest import SCENES, small_fluid_scene

N = 40


@pytest.fixture(scope="module")
def twin():
    sc = small_fluid_scene(n_steps=N)
    steps = np.arange(20, N + 1, 5)
    idx = sample_indices(sc.n_particles, 30, seed=1)
    tmpl = lagrangian_template(idx, steps)
    obs = twin_observations(sc, VelocityParameter(), [1.0], tmpl)
    return sc, obs


class TestObservations:
    def test_all_particles_equals_snapshot(self, fluid_scene):
        snaps = collect_snapshots(fluid_scene, [0, 10])
        idx = np.arange(fluid_scene.n_particles)
        obs = observe_lagrangian(snaps, idx, [10], "x")
        assert np.array_equal(obs.z_obs[0], snaps[1].particles.x)
        assert np.all(obs.mask == 1)

    def test_index_out_of_range(self, fluid_scene):
        snaps = collect_snapshots(fluid_scene, [0])
        with pytest.raises(ValidationError):
            observe_lagrangian(snaps, [fluid_scene.n_particles], [0])

    def test_sampling_reproducible(self):
        a = sample_indices(10000, 100, seed=7)
        assert np.array_equal(a, sample_indices(10000, 100, seed=7))
        assert not np.array_equal(a, sample_indices(10000, 100, seed=8))
        assert len(np.unique(a)) == 100

    def test_single_particle_region(self, fluid_scene):
        snaps = collect_snapshots(fluid_scene, [0])
        ps = snaps[0].particles
        ps.v[:] = np.arange(ps.n)[:, None] * [1.0, -1.0]
        obs = observe_eulerian(snaps, [ps.x[5]], 1e-4, [0])
        assert np.array_equal(obs.z_obs[0, 0], ps.v[5])

    def test_empty_region_masked(self, fluid_scene):
        snaps = collect_snapshots(fluid_scene, [0])
        obs = observe_eulerian(snaps, [[0.7, 0.35]], 0.01, [0])
        assert obs.mask[0, 0] == 0 and np.all(obs.z_obs[0, 0] == 0)

    def test_uniform_flow(self, fluid_scene):
        snaps = collect_snapshots(fluid_scene, [0])
        snaps[0].particles.v[:] = [0.4, -0.1]
        centers = monitor_grid([0.08, 0.12], [0.05, 0.1])
        obs = observe_eulerian(snaps, centers, 0.02, [0])
        assert np.all(obs.mask == 1)
        assert np.allclose(obs.z_obs[0], [0.4, -0.1], atol=1e-15)

    def test_monitor_membership_brute_force(self):
        sc = load_scene(SCENES / "inverse_velocity_2d.yaml")
        centers = monitor_grid([0.2, 0.3, 0.4], [0.1, 0.2, 0.3])
        assert centers.shape == (9, 2)
        x = sc.x0
        for c in centers:
            brute = [p for p in range(len(x))
                     if c[0] - 0.01 <= x[p, 0] <= c[0] + 0.01 and c[1] - 0.01 <= x[p, 1] <= c[1] + 0.01]
            assert list(region_members(x, c, 0.01)) == brute
            assert len(brute) == 16


class TestLoss:
    def test_twin_optimum(self, twin):
        sc, obs = twin
        prob = InverseProblem(sc, VelocityParameter(), obs, N, segments=4)
        res = evaluate(prob, np.array([1.0]))
        assert res.loss < 1e-20
        assert abs(res.velocity_params[0]) < 1e-8

    def test_all_masks_zero(self, twin):
        sc, obs = twin
        blank = obs.with_values(obs.z_obs, np.zeros_like(obs.mask))
        res = evaluate(InverseProblem(sc, VelocityParameter(), blank, N, segments=4), np.array([0.3]))
        assert res.loss == 0.0 and res.velocity_params[0] == 0.0

    def test_single_offset(self, fluid_scene):
        snaps = collect_snapshots(fluid_scene, [0, 10])
        obs = observe_lagrangian(snaps, [3], [10], "x")
        delta = np.array([0.01, -0.02])
        loss = ObservationLoss(obs.with_values(obs.z_obs + delta))
        assert loss.value(10, snaps[1].particles) == pytest.approx(delta @ delta, rel=1e-12)

    def test_more_observations_never_decrease_loss(self, twin):
        sc, obs = twin
        prob = InverseProblem(sc, VelocityParameter(), obs, N, segments=4)
        full = evaluate(prob, np.array([0.5])).loss
        half_mask = obs.mask.copy()
        half_mask[:, ::2] = 0.0
        prob.observations = obs.with_values(obs.z_obs, half_mask)
        assert 0.0 <= evaluate(prob, np.array([0.5])).loss <= full

    def test_eulerian_gradient_matches_finite_differences(self):
        sc = small_fluid_scene(n_steps=N)
        steps = np.arange(20, N + 1, 10)
        tmpl = eulerian_template(monitor_grid([0.1, 0.2], [0.05, 0.1]), 0.03, steps)
        obs = twin_observations(sc, VelocityParameter(), [1.5], tmpl)
        prob = InverseProblem(sc, VelocityParameter(), obs, N, segments=2)
        g = evaluate(prob, np.array([1.0])).velocity_params[0]
        h = 1e-6
        fd = (evaluate(prob, np.array([1.0 + h])).loss - evaluate(prob, np.array([1.0 - h])).loss) / (2 * h)
        assert g == pytest.approx(fd, rel=1e-5)


class TestMLP:
    LAYERS = (1, 30, 30, 30, 1)

    def test_parameter_count(self):
        assert mlp_param_count(self.LAYERS) == 1951
        assert MLPProfile(0.5).get_params().size == 1951

    def test_zero_weights(self):
        y = np.linspace(0, 1, 11)
        assert np.all(mlp_forward(np.zeros(1951), y) == 0.0)

    def test_identity_construction(self):
        # pass y through the first unit of every hidden layer, then an affine read-out
        theta = np.zeros(1951)
        k = 0
        for n_in, n_out in zip(self.LAYERS[:-1], self.LAYERS[1:]):
            W = np.zeros((n_out, n_in))
            b = np.zeros(n_out)
            if n_out == 1:
                W[0, 0], b[0] = 2.5, -0.75
            else:
                W[0, 0] = 1.0
            theta[k : k + W.size] = W.ravel()
            k += W.size
            theta[k : k + n_out] = b
            k += n_out
        y = np.linspace(0, 1, 21)
        assert np.array_equal(mlp_forward(theta, y), 2.5 * y - 0.75)

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        theta = MLPProfile(0.5, seed=3).get_params()
        y = rng.random(50)
        w = rng.normal(size=50)
        g = mlp_vjp(theta, y, w)
        for _ in range(5):
            d = rng.normal(size=theta.size)
            h = 1e-6
            fd = (w @ mlp_forward(theta + h * d, y) - w @ mlp_forward(theta - h * d, y)) / (2 * h)
            assert g @ d == pytest.approx(fd, rel=1e-6, abs=1e-10)

    def test_output_range_at_zero_weights(self):
        f = MLPProfile(0.5, theta=np.zeros(1951))
        assert np.all(f.profile(np.linspace(0, 0.5, 5)) == 1.5)


class TestAdam:
    def test_first_step_closed_form(self):
        g = np.array([3.0, -1e-3, 0.0])
        st0 = AdamState.zeros(3)
        st1, p = adam_step(st0, np.zeros(3), g)
        # at t = 1 the bias-corrected step is lr * g / (|g| + eps)
        assert np.allclose(p, -0.1 * g / (np.abs(g) + 1e-8), rtol=1e-12)
        assert st1.t == 1

    def test_zero_gradient(self):
        st0 = AdamState(np.array([0.5]), np.array([0.2]), 3)
        st1, p = adam_step(st0, np.array([1.0]), np.array([0.0]))
        assert st1.m[0] == pytest.approx(0.45) and st1.v[0] == pytest.approx(0.2 * 0.999)
        st2, p2 = adam_step(AdamState.zeros(1), np.array([1.0]), np.array([0.0]))
        assert p2[0] == 1.0

    def test_constant_gradient_monotone(self):
        st0 = AdamState.zeros(1)
        p = np.array([0.0])
        traj = [0.0]
        for _ in range(100):
            st0, p = adam_step(st0, p, np.array([2.0]))
            traj.append(p[0])
        assert np.all(np.diff(traj) < 0)

    def test_schedule(self):
        assert AdamState.zeros(1, lr0=0.1).lr == 0.1
        assert AdamState(np.zeros(1), np.zeros(1), 25).lr == pytest.approx(0.095)
        assert AdamState(np.zeros(1), np.zeros(1), 74).lr == pytest.approx(0.1 * 0.95**2)

    def test_clamp(self):
        _, p = adam_step(AdamState.zeros(2), np.array([0.01, 0.5]), np.array([1.0, 1.0]), lower=0.0)
        assert p[0] == 0.0 and p[1] == pytest.approx(0.4)

    def test_nan_gradient(self):
        with pytest.raises(GradientNaNError) as err:
            adam_step(AdamState.zeros(1), np.array([1.0]), np.array([np.nan]), epoch=12)
        assert "12" in str(err.value)

    @given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=8))
    def test_step_bounded_by_lr(self, g):
        g = np.array(g)
        _, p = adam_step(AdamState.zeros(len(g)), np.zeros(len(g)), g)
        assert np.all(np.abs(p) <= 0.1 + 1e-12)


class TestInvert:
    def test_recovers_scalar(self, twin):
        sc, obs = twin
        prob = InverseProblem(sc, VelocityParameter(), obs, N, initial=np.array([0.5]),
                              epochs=60, segments=4)
        res = invert(prob)
        assert res.loss_history[-1] < 1e-3 * res.loss_history[0]
        assert abs(res.values[0] - 1.0) < 0.05
        assert len(res.param_history) == res.epochs

    def test_stops_at_twin_optimum(self, twin):
        sc, obs = twin
        prob = InverseProblem(sc, VelocityParameter(), obs, N, initial=np.array([1.0]), epochs=10,
                              segments=4, loss_tol=1e-20)
        res = invert(prob)
        assert res.stop_reason == "loss_tol" and res.epochs == 1

    def test_plateau(self, twin):
        sc, obs = twin
        blank = obs.with_values(obs.z_obs, np.zeros_like(obs.mask))
        prob = InverseProblem(sc, VelocityParameter(), blank, N, initial=np.array([0.3]), epochs=50,
                              segments=4, loss_tol=-1.0, plateau_window=3)
        res = invert(prob)
        assert res.stop_reason == "plateau" and res.epochs == 4

    def test_divergence(self, twin):
        sc, obs = twin
        prob = InverseProblem(sc, VelocityParameter(), obs, N, initial=np.array([0.9]), epochs=20,
                              segments=4, lr=5.0, lr_decay=1.0, divergence_factor=2.0)
        with pytest.raises(DivergenceError):
            invert(prob)

    def test_log_written(self, twin, tmp_path):
        sc, obs = twin
        log = tmp_path / "log.csv"
        prob = InverseProblem(sc, VelocityParameter(), obs, N, initial=np.array([0.5]), epochs=3,
                              segments=4, log_path=str(log))
        invert(prob)
        rows = log.read_text().splitlines()
        assert rows[0] == "epoch,loss,alpha,lr,wall_time"
        assert len(rows) == 4

    def test_friction_parameter_subset(self, fluid_scene):
        par = FrictionParameter([0, 2])
        params = fluid_scene.default_params()
        params.friction[:] = [0.1, 0.2, 0.3, 0.4]
        assert np.array_equal(par.get(fluid_scene, params), [0.1, 0.3])
        par.set(np.array([0.5, 0.6]), fluid_scene, params)
        assert np.array_equal(params.friction, [0.5, 0.2, 0.6, 0.4])
        assert par.labels(2) == ["mu0", "mu1"]
