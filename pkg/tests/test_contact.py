import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffmpm.contact import (BoundarySpec, ObstacleBox, Segment, WallSpec, apply_boundary,
                             boundary_vjp, build_boundary, coulomb_correct, obstacle_correct,
                             parse_wall_name, segment_index, wall_correct)
from diffmpm.errors import ValidationError
from diffmpm.state import SimConfig

N_DOWN = np.array([0.0, -1.0])  # bottom wall: normal points into the wall


class TestWallRules:
    def test_slip_removes_normal_component(self):
        assert np.array_equal(wall_correct([1.0, -2.0], "slip", [1]), [1.0, 0.0])

    def test_no_slip_removes_everything(self):
        assert np.array_equal(wall_correct([1.0, -2.0], "no_slip", [1]), [0.0, 0.0])

    def test_obstacle_only_blocks_penetration(self):
        n = np.array([1.0, 0.0])
        assert np.array_equal(obstacle_correct([-1.0, 0.5], n), [0.0, 0.5])
        assert np.array_equal(obstacle_correct([1.0, 0.5], n), [1.0, 0.5])

    def test_wall_names(self):
        assert parse_wall_name("y-", 2) == (1, 0)
        assert parse_wall_name("bottom", 3) == (2, 0)
        with pytest.raises(ValidationError):
            parse_wall_name("z+", 2)


class TestCoulomb:
    def test_separating_node_untouched(self):
        v = np.array([2.0, 0.5])
        assert np.array_equal(coulomb_correct(v, N_DOWN, 0.3), v)

    def test_stick(self):
        # |v_t| = 0.1 <= mu v_n = 0.3: tangential motion stops
        assert np.allclose(coulomb_correct([0.1, -1.0], N_DOWN, 0.3), [0.0, 0.0])

    def test_slip_reduces_tangential_speed(self):
        # |v_t| = 2, v_n = 1, mu = 0.3 -> |v_t'| = 2 - 0.3
        assert np.allclose(coulomb_correct([2.0, -1.0], N_DOWN, 0.3), [1.7, 0.0])
        assert np.allclose(coulomb_correct([-2.0, -1.0], N_DOWN, 0.3), [-1.7, 0.0])

    def test_frictionless_equals_slip(self):
        assert np.allclose(coulomb_correct([2.0, -1.0], N_DOWN, 0.0), [2.0, 0.0])

    @given(st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 2))
    def test_never_accelerates_and_never_penetrates(self, vt, vn, mu):
        out = coulomb_correct([vt, vn], N_DOWN, mu)
        assert out @ N_DOWN <= 1e-15
        assert abs(out[0]) <= abs(vt) + 1e-15
        assert out[0] * vt >= 0.0

    def test_segment_index(self):
        edges = np.array([0.0, 0.4, 0.8, 1.2])
        k = segment_index(np.array([-0.1, 0.0, 0.39, 0.4, 0.41, 1.3]), edges)
        assert list(k) == [0, 0, 0, 0, 1, 2]

    def test_segments_must_be_contiguous(self):
        with pytest.raises(ValidationError):
            WallSpec("coulomb", [Segment(0.0, 0.4, 0.1), Segment(0.5, 1.0, 0.1)])
        with pytest.raises(ValidationError):
            WallSpec("coulomb", [Segment(0.0, 0.4, -0.1)])


def _boundary():
    cfg = SimConfig(dx=0.1, extents=(1.2, 0.6), dt=1e-3, n_steps=1, gravity=(0.0, -9.8))
    walls = BoundarySpec.all_slip(2).walls
    walls["y-"] = WallSpec("coulomb", [Segment(0.0, 0.6, 0.2), Segment(0.6, 1.2, 0.5)])
    spec = BoundarySpec(walls, [ObstacleBox((0.5, 0.0), (0.7, 0.2))])
    return cfg, spec, build_boundary(spec, cfg)


class TestBoundaryAdjoint:
    def test_friction_vector_and_node_sets(self):
        cfg, spec, bd = _boundary()
        assert list(spec.friction()) == [0.2, 0.5]
        assert bd.n_friction == 2
        assert len(bd.coul_nodes) == 2 * cfg.grid_shape[0]
        assert len(bd.obs_nodes) == 9

    def test_vjp_matches_finite_differences(self):
        cfg, spec, bd = _boundary()
        rng = np.random.default_rng(3)
        n = cfg.n_nodes
        v = rng.normal(size=(n, 2))
        active = rng.random(n) < 0.8
        mu = spec.friction()
        g = rng.normal(size=(n, 2))

        def f(v, mu):
            return np.sum(apply_boundary(v.copy(), active, bd, mu) * g)

        vb, mub = boundary_vjp(v, g, active, bd, mu)
        dv = rng.normal(size=(n, 2))
        dmu = rng.normal(size=2)
        h = 1e-7
        fd = (f(v + h * dv, mu + h * dmu) - f(v - h * dv, mu - h * dmu)) / (2 * h)
        assert np.sum(vb * dv) + mub @ dmu == pytest.approx(fd, rel=1e-6)

    def test_vjp_is_linear_in_cotangent(self):
        cfg, spec, bd = _boundary()
        rng = np.random.default_rng(4)
        n = cfg.n_nodes
        v = rng.normal(size=(n, 2))
        active = np.ones(n, bool)
        mu = spec.friction()
        g1, g2 = rng.normal(size=(2, n, 2))
        a1, m1 = boundary_vjp(v, g1, active, bd, mu)
        a2, m2 = boundary_vjp(v, g2, active, bd, mu)
        a3, m3 = boundary_vjp(v, 2.0 * g1 - 3.0 * g2, active, bd, mu)
        assert np.allclose(a3, 2.0 * a1 - 3.0 * a2, atol=1e-12)
        assert np.allclose(m3, 2.0 * m1 - 3.0 * m2, atol=1e-12)

    def test_obstacle_outside_domain_rejected(self):
        cfg = SimConfig(dx=0.1, extents=(1.0, 0.5), dt=1e-3, n_steps=1, gravity=(0.0, -9.8))
        with pytest.raises(ValidationError):
            build_boundary(BoundarySpec(BoundarySpec.all_slip(2).walls, [ObstacleBox((0.9, 0.0), (1.2, 0.2))]), cfg)
