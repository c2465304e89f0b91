import numpy as np
import pytest

from diffmpm.contact import BoundarySpec, WallSpec
from diffmpm.errors import (CFLViolationError, NaNDetectedError, OutOfDomainError,
                            ValidationError)
from diffmpm.fields import ConstantVelocity
from diffmpm.materials import Fluid
from diffmpm.state import Box, Cylinder, SimConfig, seed_particles
from diffmpm.stepper import Scene, cfl_report, kinetic_energy, momentum, run, step

from conftest import small_dp_scene, small_fluid_scene


def _block(scheme="pic", v0=None, walls=None, dt=1e-3, n_steps=20, extents=(1.0, 1.0)):
    cfg = SimConfig(dx=0.05, extents=extents, dt=dt, n_steps=n_steps, gravity=(0.0, -9.8),
                    scheme=scheme, ppc=4)
    region = Box((0.4, 0.5), (0.6, 0.7), ConstantVelocity(v0) if v0 is not None else None)
    spec = BoundarySpec(walls) if walls else None
    return Scene(cfg, Fluid(1000.0, 5.0), [region], spec)


class TestSeeding:
    def test_particle_count_and_mass(self):
        cfg = SimConfig(dx=0.01, extents=(1.5, 0.6), dt=3e-5, n_steps=1, gravity=(0.0, -9.8), ppc=4)
        x, ids = seed_particles(cfg, [Box((0.0, 0.0), (0.5, 0.5))])
        assert len(x) == 10000
        assert np.all(ids == 0)
        # sub-cell lattice: two points per axis at 1/4 and 3/4 of a cell
        assert np.isclose(x[:, 0].min(), 0.0025) and np.isclose(x[:, 1].max(), 0.4975)

    def test_cylinder_region(self):
        cfg = SimConfig(dx=0.02, extents=(0.4, 0.4, 0.2), dt=1e-4, n_steps=1,
                        gravity=(0.0, 0.0, -9.8), ppc=8)
        x, _ = seed_particles(cfg, [Cylinder((0.2, 0.2), 0.1, (0.0, 0.1))])
        r = np.hypot(x[:, 0] - 0.2, x[:, 1] - 0.2)
        assert np.all(r <= 0.1) and np.all(x[:, 2] <= 0.1)
        vol = np.pi * 0.1**2 * 0.1
        assert abs(len(x) * 0.02**3 / 8 - vol) / vol < 0.05

    def test_invalid_config(self):
        with pytest.raises(ValidationError):
            SimConfig(dx=0.1, extents=(1.0, 1.0), dt=1e-3, n_steps=1, gravity=(0.0, -9.8), scheme="xyz")
        with pytest.raises(ValidationError):
            seed_particles(SimConfig(dx=0.1, extents=(1.0, 1.0), dt=1e-3, n_steps=1,
                                     gravity=(0.0, -9.8), ppc=3), [Box((0, 0), (0.5, 0.5))])

    def test_region_outside_domain_rejected(self):
        cfg = SimConfig(dx=0.1, extents=(1.0, 1.0), dt=1e-3, n_steps=1, gravity=(0.0, -9.8))
        with pytest.raises(ValidationError):
            seed_particles(cfg, [Box((0.5, 0.5), (1.5, 0.9))])


class TestStep:
    def test_free_fall_pic(self):
        # uniform velocity, no divergence: every particle follows the discrete free fall
        sc = _block("pic")
        res = run(sc, 20, stride=20)
        ps = res.final.particles
        n, dt = 20, 1e-3
        assert np.allclose(ps.v[:, 1], -9.8 * n * dt, atol=1e-12)
        assert np.allclose(ps.v[:, 0], 0.0, atol=1e-14)
        expect_y = sc.x0[:, 1] - 9.8 * dt * dt * n * (n + 1) / 2
        assert np.allclose(ps.x[:, 1], expect_y, atol=1e-12)
        assert np.allclose(ps.sigma, 0.0, atol=1e-9)

    @pytest.mark.parametrize("scheme", ["flip", "apic", "tpic", "blend"])
    def test_free_fall_all_schemes(self, scheme):
        sc = _block(scheme, v0=[0.5, 0.0])
        ps = run(sc, 20, stride=20).final.particles
        assert np.allclose(ps.v, [0.5, -9.8 * 20 * 1e-3], atol=1e-11)

    def test_deterministic(self):
        a = run(small_fluid_scene(n_steps=30), stride=30).final.particles
        b = run(small_fluid_scene(n_steps=30), stride=30).final.particles
        for k in ("x", "v", "sigma", "rho"):
            assert np.array_equal(getattr(a, k), getattr(b, k))

    def test_momentum_and_energy_helpers(self):
        sc = _block("pic", v0=[1.0, 2.0])
        ps = sc.initial_state().particles
        M = ps.m.sum()
        assert np.allclose(momentum(ps), [M, 2 * M])
        assert kinetic_energy(ps) == pytest.approx(0.5 * M * 5.0)

    def test_dp_column_settles_without_nan(self):
        res = run(small_dp_scene(n_steps=200), stride=100)
        ps = res.final.particles
        assert np.all(np.isfinite(ps.sigma))
        assert np.all(ps.eps >= 0.0)
        assert ps.x[:, 1].min() >= 0.0

    def test_snapshots_follow_stride(self):
        res = run(small_fluid_scene(n_steps=25), stride=10)
        assert [s.step for s in res.snapshots] == [0, 10, 20, 25]


class TestFailures:
    def test_cfl_refusal(self):
        sc = _block(dt=1.0)
        assert cfl_report(sc.config, sc.material) == pytest.approx(100.0)
        with pytest.raises(CFLViolationError):
            sc.check_cfl()
        assert sc.check_cfl(force=True) > 1

    def test_particle_leaving_grid(self):
        walls = {n: WallSpec("free") for n in ("x-", "x+", "y-", "y+")}
        sc = _block("pic", v0=[60.0, 0.0], walls=walls, dt=1e-3, n_steps=40)
        with pytest.raises(OutOfDomainError):
            run(sc)

    def test_nan_is_reported(self):
        sc = _block("pic")
        state = sc.initial_state()
        state.particles.v[3, 0] = np.nan
        with pytest.raises((NaNDetectedError, OutOfDomainError)):
            run(sc, 2, state=state)

    def test_step_does_not_mutate_input(self, fluid_scene):
        s0 = fluid_scene.initial_state()
        x = s0.particles.x.copy()
        s1 = step(s0, fluid_scene)
        assert np.array_equal(s0.particles.x, x)
        assert s1.step == 1
