import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from diffmpm import constitutive as cm
from diffmpm.errors import TimeStepTooLargeError, ValidationError
from diffmpm.materials import DruckerPrager, Fluid, dp_derived_params

SAND = DruckerPrager(2650.0, 0.7e6, 0.3, math.radians(19.8), 0.0, 0.0, 0.0)
COHESIVE = DruckerPrager(2000.0, 1e6, 0.25, math.radians(30.0), math.radians(10.0), 5e3, 1e3)


def _sym(a):
    a = np.asarray(a, dtype=float).reshape(3, 3)
    return 0.5 * (a + a.T)


def oracle_zone(T, mat):
    """Zone of a trial stress from the signs of the yield functions."""
    qphi, kphi, _, tauP, alphaP = mat.derived()
    sm = np.trace(T) / 3.0
    s = T - sm * np.eye(3)
    tau = math.sqrt(0.5 * np.sum(s * s))
    fs = tau - kphi + qphi * sm
    ft = sm - mat.sigma_t
    h = tau - tauP - alphaP * (sm - mat.sigma_t)
    if fs <= 0 and ft < 0:
        return 1
    if (fs > 0 and ft < 0) or (h > 0 and ft >= 0):
        return 2
    return 3


class TestFluid:
    def test_equation_of_state(self):
        mat = Fluid(1000.0, 35.0)
        gv = np.array([[-0.5, 0.0], [0.0, -0.3]])
        dt = 1e-3
        sig, rho, p = cm.fluid_stress_update(np.zeros((3, 3)), 1000.0, gv, dt, mat)
        J = 1.0 + (-0.8) * dt
        assert rho == pytest.approx(1000.0 / J, rel=1e-14)
        assert p == pytest.approx(35.0**2 * (1000.0 / J - 1000.0), rel=1e-12)
        assert np.allclose(sig, -p * np.eye(3), atol=1e-9)

    def test_viscous_part(self):
        mat = Fluid(1000.0, 10.0, mu=2.0)
        gv = np.array([[0.0, 1.0], [0.0, 0.0]])
        sig, rho, p = cm.fluid_stress_update(np.zeros((3, 3)), 1000.0, gv, 0.01, mat)
        # pure shear: no volume change, shear stress 2 mu dd_xy
        assert p == 0.0
        assert sig[0, 1] == pytest.approx(2.0 * 2.0 * 0.5 * 0.01)
        assert sig[0, 0] == 0.0 and sig[2, 2] == 0.0

    def test_catastrophic_compression(self):
        mat = Fluid(1000.0, 10.0)
        with pytest.raises(TimeStepTooLargeError):
            cm.fluid_stress_update(np.zeros((3, 3)), 1000.0, -2.0 * np.eye(2), 1.0, mat)

    def test_invalid_parameters(self):
        with pytest.raises(ValidationError):
            Fluid(1000.0, -1.0)
        with pytest.raises(ValidationError):
            Fluid(0.0, 1.0)


class TestDruckerPragerConstants:
    def test_plane_strain_fit(self):
        phi = math.radians(19.8)
        qphi, kphi, qpsi, tauP, alphaP = dp_derived_params(phi, 0.0, 0.0, 0.0)
        s = math.sin(phi)
        assert qphi == pytest.approx(6 * s / (math.sqrt(3) * (3 + s)))
        assert kphi == 0.0 and qpsi == 0.0 and tauP == 0.0
        assert alphaP == pytest.approx(math.sqrt(1 + qphi**2) - qphi)

    def test_elastic_moduli(self):
        assert SAND.G == pytest.approx(3 * 0.7e6 * 0.4 / 2.6)
        assert SAND.wave_speed() == pytest.approx(math.sqrt((SAND.K + 4 * SAND.G / 3) / 2650.0))

    def test_tension_cap_beyond_apex_rejected(self):
        with pytest.raises(ValidationError):
            DruckerPrager(2000.0, 1e6, 0.3, math.radians(30.0), 0.0, 0.0, 10.0)


class TestReturnMap:
    def test_elastic_increment_is_hookean(self):
        mat = COHESIVE
        sigma = -1e4 * np.eye(3)
        gv = np.array([[1e-3, 0.0], [0.0, -2e-3]])
        res = cm.dp_stress_update(sigma, gv, 1.0, mat)
        dd = np.diag([1e-3, -2e-3, 0.0])
        expect = sigma + mat.lam * np.trace(dd) * np.eye(3) + 2 * mat.G * dd
        assert res.zone == 1
        assert np.allclose(res.sigma, expect, rtol=1e-13)
        assert res.deps == 0.0

    def test_rigid_rotation_preserves_invariants(self):
        sigma = np.diag([-3e4, -1e4, -2e4])
        W = np.array([[0.0, 0.3], [-0.3, 0.0]])
        T, sm, tau = cm.trial_state(sigma, W, 1e-3, COHESIVE)
        sm0, tau0 = cm.stress_invariants(sigma)
        assert sm == pytest.approx(sm0, rel=1e-12)
        assert tau == pytest.approx(tau0, rel=1e-5)

    @pytest.mark.parametrize("mat", [SAND, COHESIVE], ids=["sand", "cohesive"])
    @given(st.lists(st.floats(-1.0, 1.0), min_size=9, max_size=9), st.floats(1e2, 1e6))
    def test_post_state_feasible(self, mat, a, scale):
        T = _sym(a) * scale
        res = cm.dp_stress_update(T, np.zeros((2, 2)), 1.0, mat)
        qphi, kphi, _, _, _ = mat.derived()
        sm, tau = cm.stress_invariants(res.sigma)
        assert tau - kphi + qphi * sm <= 1e-8 * max(scale, kphi)
        assert sm <= mat.sigma_t + 1e-10 * max(1.0, scale)
        assert res.zone == oracle_zone(T, mat)
        assert res.deps >= 0.0

    def test_apex_return_for_pure_tension(self):
        res = cm.dp_stress_update(5e3 * np.eye(3), np.zeros((2, 2)), 1.0, SAND)
        assert res.zone == 3
        assert np.allclose(res.sigma, 0.0, atol=1e-9)

    def test_shear_return_keeps_mean_stress_without_dilation(self):
        T = np.diag([-1e4, -5e4, -3e4])
        res = cm.dp_stress_update(T, np.zeros((2, 2)), 1.0, SAND)
        sm, _ = cm.stress_invariants(res.sigma)
        assert res.zone == 2
        assert sm == pytest.approx(np.trace(T) / 3.0, rel=1e-12)


class TestReturnMapAdjoint:
    @pytest.mark.parametrize("T", [np.diag([-1e4, -5e4, -3e4]), np.diag([-1e4, -1.1e4, -1.05e4]),
                                   np.diag([3e3, -1e3, 0.0])], ids=["shear", "elastic", "tension"])
    def test_vjp_matches_finite_differences(self, T):
        mat = COHESIVE
        qphi, kphi, qpsi, tauP, alphaP = mat.derived()
        rng = np.random.default_rng(0)
        L = rng.normal(size=(2, 2)) * 1e-3
        gout = _sym(rng.normal(size=9))

        def f(sig, L):
            out = np.zeros((3, 3))
            cm._dp_point(sig, L, 2, 1e-2, mat.K, mat.G, qphi, kphi, qpsi, mat.sigma_t, tauP, alphaP, out)
            return np.sum(out * gout)

        sb = np.zeros((3, 3))
        Lb = np.zeros((2, 2))
        cm._dp_point_vjp(T, L, 2, 1e-2, mat.K, mat.G, qphi, kphi, qpsi, mat.sigma_t, tauP, alphaP,
                         gout, sb, Lb)
        dS = _sym(rng.normal(size=9)) * 10.0
        dL = rng.normal(size=(2, 2)) * 1e-4
        h = 1e-3
        fd = (f(T + h * dS, L + h * dL) - f(T - h * dS, L - h * dL)) / (2 * h)
        ad = np.sum(sb * dS) + np.sum(Lb * dL)
        assert ad == pytest.approx(fd, rel=1e-6, abs=1e-9 * abs(fd) + 1e-9)
