"""Update-stress-last constitutive laws.

Stresses are 3x3 in both 2D (plane strain) and 3D.  Per-particle kernels take
the in-plane velocity gradient embedded in a 3x3 matrix.  Each forward point
function has a transpose (``*_vjp``) that recomputes the forward intermediates
and differentiates the branch the forward pass took.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from numba import njit

from .errors import TimeStepTooLargeError
from .materials import DruckerPrager, Fluid, dp_derived_params  # noqa: F401

SQRT2_3 = math.sqrt(2.0) / 3.0

# return-map branches; zone I = ELASTIC, zone II = SHEAR/SHEAR_CORNER/APEX,
# zone III = TENSION/TENSION_CORNER
ELASTIC, SHEAR, SHEAR_CORNER, APEX, TENSION, TENSION_CORNER = range(6)
ZONE_OF_BRANCH = np.array([1, 2, 2, 2, 3, 3])


@dataclass
class ReturnMapResult:
    sigma: np.ndarray
    deps: float
    zone: int
    branch: int


def strain_increments(gv, dt):
    """Symmetric strain and antisymmetric spin increments of a velocity gradient."""
    gv = np.asarray(gv, dtype=float)
    dd = 0.5 * (gv + gv.T) * dt
    dw = 0.5 * (gv - gv.T) * dt
    return dd, dw


def embed3(gv):
    gv = np.asarray(gv, dtype=float)
    out = np.zeros((3, 3))
    d = gv.shape[0]
    out[:d, :d] = gv
    return out


# ---------------------------------------------------------------------------
# fluid

@njit(cache=True)
def _fluid_point(sig_out, rho, L, d, dt, c, visc, rho0):
    """Returns ``(rho_new, p_new, J)``; ``J <= 0`` signals failure."""
    trd = 0.0
    for a in range(d):
        trd += L[a, a] * dt
    J = 1.0 + trd
    if J <= 0.0:
        return 0.0, 0.0, J
    rho_new = rho / J
    p = c * c * (rho_new - rho0)
    for i in range(3):
        for j in range(3):
            sig_out[i, j] = 0.0
    for i in range(d):
        for j in range(d):
            sig_out[i, j] = 2.0 * visc * 0.5 * (L[i, j] + L[j, i]) * dt
    iso = -p - 2.0 / 3.0 * visc * trd
    for i in range(3):
        sig_out[i, i] += iso
    return rho_new, p, J


def fluid_stress_update(sigma, rho, gv, dt, material: Fluid):
    """Single-particle fluid update; returns ``(sigma_new, rho_new, p_new)``."""
    gv = np.asarray(gv, dtype=float)
    d = gv.shape[0]
    out = np.zeros((3, 3))
    visc = material.mu / dt if material.viscous_rate_form else material.mu
    rho_new, p, J = _fluid_point(out, float(rho), gv, d, float(dt), material.c, visc, material.rho0)
    if J <= 0.0:
        raise TimeStepTooLargeError(0, J)
    return out, rho_new, p


# ---------------------------------------------------------------------------
# Drucker-Prager

@njit(cache=True)
def _dp_trial(sig, L, d, dt, K, G, T):
    """Jaumann-rotated elastic trial stress into ``T``."""
    lam = K - 2.0 * G / 3.0
    dd = np.zeros((3, 3))
    dw = np.zeros((3, 3))
    for i in range(d):
        for j in range(d):
            dd[i, j] = 0.5 * (L[i, j] + L[j, i]) * dt
            dw[i, j] = 0.5 * (L[i, j] - L[j, i]) * dt
    trd = dd[0, 0] + dd[1, 1] + dd[2, 2]
    for i in range(3):
        for j in range(3):
            acc = sig[i, j]
            for k in range(3):
                acc += sig[i, k] * dw[j, k] + sig[j, k] * dw[i, k]
            T[i, j] = acc + 2.0 * G * dd[i, j]
        T[i, i] += lam * trd
    return dd, dw


@njit(cache=True)
def _invariants(T, s):
    sm = (T[0, 0] + T[1, 1] + T[2, 2]) / 3.0
    ss = 0.0
    for i in range(3):
        for j in range(3):
            s[i, j] = T[i, j]
        s[i, i] -= sm
    for i in range(3):
        for j in range(3):
            ss += s[i, j] * s[i, j]
    return sm, math.sqrt(0.5 * ss)


@njit(cache=True)
def _classify(sm, tau, qphi, kphi, st, tauP, alphaP):
    fs = tau - kphi + qphi * sm
    ft = sm - st
    h = tau - tauP - alphaP * (sm - st)
    if fs <= 0.0 and ft < 0.0:
        return 1
    if (fs > 0.0 and ft < 0.0) or (h > 0.0 and ft >= 0.0):
        return 2
    return 3


@njit(cache=True)
def _dp_point(sig, L, d, dt, K, G, qphi, kphi, qpsi, st, tauP, alphaP, out):
    """Return-mapped stress into ``out``; returns ``(deps, branch)``."""
    T = np.empty((3, 3))
    s = np.empty((3, 3))
    _dp_trial(sig, L, d, dt, K, G, T)
    sm, tau = _invariants(T, s)
    zone = _classify(sm, tau, qphi, kphi, st, tauP, alphaP)
    if zone == 1:
        for i in range(3):
            for j in range(3):
                out[i, j] = T[i, j]
        return 0.0, ELASTIC
    if zone == 2:
        fs = tau - kphi + qphi * sm
        dlam = fs / (G + K * qphi * qpsi)
        deps = dlam * math.sqrt(1.0 / 3.0 + 2.0 / 9.0 * qpsi * qpsi)
        if tau == 0.0:
            sm_new = kphi / qphi
            if sm_new > st:
                sm_new = st
            for i in range(3):
                for j in range(3):
                    out[i, j] = 0.0
                out[i, i] = sm_new
            return deps, APEX
        sm_new = sm - K * qpsi * dlam
        if sm_new > st:
            # beyond the tension cap: return to the shear/tension corner
            r = tauP / tau
            for i in range(3):
                for j in range(3):
                    out[i, j] = r * s[i, j]
                out[i, i] += st
            return deps + SQRT2_3 * (sm_new - st) / K, SHEAR_CORNER
        r = (kphi - qphi * sm_new) / tau
        for i in range(3):
            for j in range(3):
                out[i, j] = r * s[i, j]
            out[i, i] += sm_new
        return deps, SHEAR
    deps = SQRT2_3 * (sm - st) / K
    if tau > tauP:
        r = tauP / tau
        for i in range(3):
            for j in range(3):
                out[i, j] = r * s[i, j]
            out[i, i] += st
        return deps, TENSION_CORNER
    for i in range(3):
        for j in range(3):
            out[i, j] = s[i, j]
        out[i, i] += st
    return deps, TENSION


@njit(cache=True)
def _dp_point_vjp(sig, L, d, dt, K, G, qphi, kphi, qpsi, st, tauP, alphaP, gout, sig_bar, L_bar):
    """Accumulate the transpose of :func:`_dp_point` applied to ``gout``."""
    T = np.empty((3, 3))
    s = np.empty((3, 3))
    out = np.empty((3, 3))
    dd, dw = _dp_trial(sig, L, d, dt, K, G, T)
    sm, tau = _invariants(T, s)
    _, branch = _dp_point(sig, L, d, dt, K, G, qphi, kphi, qpsi, st, tauP, alphaP, out)

    Tb = np.zeros((3, 3))
    if branch == ELASTIC:
        for i in range(3):
            for j in range(3):
                Tb[i, j] = gout[i, j]
    elif branch == SHEAR:
        fs = tau - kphi + qphi * sm
        c1 = K * qpsi / (G + K * qphi * qpsi)
        sm_new = sm - c1 * fs
        tau_new = kphi - qphi * sm_new
        r = tau_new / tau
        rb = 0.0
        smb_new = 0.0
        for i in range(3):
            smb_new += gout[i, i]
            for j in range(3):
                rb += gout[i, j] * s[i, j]
        smb_new += -qphi * rb / tau
        taub = -rb * tau_new / (tau * tau) - c1 * smb_new
        smb = smb_new * (1.0 - c1 * qphi)
        sb = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                sb[i, j] = r * gout[i, j] + taub * s[i, j] / (2.0 * tau)
        trs = (sb[0, 0] + sb[1, 1] + sb[2, 2]) / 3.0
        for i in range(3):
            for j in range(3):
                Tb[i, j] = sb[i, j]
            Tb[i, i] += smb / 3.0 - trs
    elif branch == SHEAR_CORNER or branch == TENSION_CORNER:
        r = tauP / tau
        rb = 0.0
        for i in range(3):
            for j in range(3):
                rb += gout[i, j] * s[i, j]
        taub = -rb * tauP / (tau * tau)
        sb = np.empty((3, 3))
        for i in range(3):
            for j in range(3):
                sb[i, j] = r * gout[i, j] + taub * s[i, j] / (2.0 * tau)
        trs = (sb[0, 0] + sb[1, 1] + sb[2, 2]) / 3.0
        for i in range(3):
            for j in range(3):
                Tb[i, j] = sb[i, j]
            Tb[i, i] -= trs
    elif branch == TENSION:
        trg = (gout[0, 0] + gout[1, 1] + gout[2, 2]) / 3.0
        for i in range(3):
            for j in range(3):
                Tb[i, j] = gout[i, j]
            Tb[i, i] -= trg
    # APEX: constant output, zero cotangent

    lam = K - 2.0 * G / 3.0
    trT = Tb[0, 0] + Tb[1, 1] + Tb[2, 2]
    ddb = np.empty((3, 3))
    dwb = np.zeros((3, 3))
    for i in range(3):
        for j in range(3):
            ddb[i, j] = 2.0 * G * Tb[i, j]
        ddb[i, i] += lam * trT
    # rotation term: R_ij = sig_ij + sig_ik dw_jk + sig_jk dw_ik
    for i in range(3):
        for j in range(3):
            acc = Tb[i, j]
            for k in range(3):
                acc += Tb[i, k] * dw[k, j] + Tb[k, i] * dw[k, j]
            sig_bar[i, j] += acc
    for i in range(3):
        for j in range(3):
            acc = 0.0
            for k in range(3):
                acc += Tb[k, i] * sig[k, j] + Tb[i, k] * sig[k, j]
            dwb[i, j] = acc
    for a in range(d):
        for b in range(d):
            L_bar[a, b] += 0.5 * dt * (ddb[a, b] + ddb[b, a]) + 0.5 * dt * (dwb[a, b] - dwb[b, a])


def dp_stress_update(sigma, gv, dt, material: DruckerPrager) -> ReturnMapResult:
    """Single-particle Drucker-Prager update (Jaumann rotation, trial, return map)."""
    gv = np.asarray(gv, dtype=float)
    d = gv.shape[0]
    qphi, kphi, qpsi, tauP, alphaP = material.derived()
    out = np.zeros((3, 3))
    deps, branch = _dp_point(np.asarray(sigma, dtype=float), gv, d, float(dt), material.K,
                             material.G, qphi, kphi, qpsi, material.sigma_t, tauP, alphaP, out)
    return ReturnMapResult(out, deps, int(ZONE_OF_BRANCH[branch]), int(branch))


def trial_state(sigma, gv, dt, material: DruckerPrager):
    """Trial stress and its invariants ``(T, sigma_m, tau)``."""
    gv = np.asarray(gv, dtype=float)
    T = np.empty((3, 3))
    s = np.empty((3, 3))
    _dp_trial(np.asarray(sigma, dtype=float), gv, gv.shape[0], float(dt), material.K, material.G, T)
    sm, tau = _invariants(T, s)
    return T, sm, tau


def stress_invariants(sigma):
    sigma = np.asarray(sigma, dtype=float)
    s = np.empty((3, 3))
    return _invariants(sigma, s)


# ---------------------------------------------------------------------------
# batched kernels used by the stepper

@njit(cache=True)
def fluid_kernel(sigma, rho, V, gv, dt, c, visc, rho0, sigma_out, rho_out, V_out):
    n, d = gv.shape[0], gv.shape[1]
    s = np.empty((3, 3))
    for p in range(n):
        rho_new, _, J = _fluid_point(s, rho[p], gv[p], d, dt, c, visc, rho0)
        if J <= 0.0:
            return p, J
        for i in range(3):
            for j in range(3):
                sigma_out[p, i, j] = s[i, j]
        rho_out[p] = rho_new
        V_out[p] = J * V[p]
    return -1, 1.0


@njit(cache=True)
def fluid_vjp_kernel(rho, V, gv, dt, c, visc, rho0, sig_bar_o, rho_bar_o, V_bar_o,
                     rho_bar, V_bar, gv_bar, param_bar):
    """``param_bar[0]`` accumulates d/dc, ``param_bar[1]`` d/dvisc."""
    n, d = gv.shape[0], gv.shape[1]
    for p in range(n):
        L = gv[p]
        trd = 0.0
        for a in range(d):
            trd += L[a, a] * dt
        J = 1.0 + trd
        rho_new = rho[p] / J
        g = sig_bar_o[p]
        trg = g[0, 0] + g[1, 1] + g[2, 2]
        pbar = -trg
        rb_new = rho_bar_o[p] + c * c * pbar
        param_bar[0] += 2.0 * c * (rho_new - rho0) * pbar
        vb = -2.0 / 3.0 * trd * trg
        for a in range(d):
            for b in range(d):
                vb += 2.0 * g[a, b] * 0.5 * (L[a, b] + L[b, a]) * dt
        param_bar[1] += vb
        Jb = -rho[p] / (J * J) * rb_new + V[p] * V_bar_o[p]
        trdb = Jb - 2.0 / 3.0 * visc * trg
        rho_bar[p] += rb_new / J
        V_bar[p] += J * V_bar_o[p]
        for a in range(d):
            gv_bar[p, a, a] += dt * trdb
            for b in range(d):
                gv_bar[p, a, b] += dt * visc * (g[a, b] + g[b, a])


@njit(cache=True)
def dp_kernel(sigma, rho, V, gv, eps, dt, K, G, qphi, kphi, qpsi, st, tauP, alphaP,
              sigma_out, rho_out, V_out, eps_out, branch_out):
    n, d = gv.shape[0], gv.shape[1]
    s = np.empty((3, 3))
    for p in range(n):
        L = gv[p]
        trd = 0.0
        for a in range(d):
            trd += L[a, a] * dt
        J = 1.0 + trd
        if J <= 0.0:
            return p, J
        deps, br = _dp_point(sigma[p], L, d, dt, K, G, qphi, kphi, qpsi, st, tauP, alphaP, s)
        for i in range(3):
            for j in range(3):
                sigma_out[p, i, j] = s[i, j]
        rho_out[p] = rho[p] / J
        V_out[p] = J * V[p]
        eps_out[p] = eps[p] + deps
        branch_out[p] = br
    return -1, 1.0


@njit(cache=True)
def dp_vjp_kernel(sigma, rho, V, gv, dt, K, G, qphi, kphi, qpsi, st, tauP, alphaP,
                  sig_bar_o, rho_bar_o, V_bar_o, sig_bar, rho_bar, V_bar, gv_bar):
    n, d = gv.shape[0], gv.shape[1]
    for p in range(n):
        L = gv[p]
        trd = 0.0
        for a in range(d):
            trd += L[a, a] * dt
        J = 1.0 + trd
        _dp_point_vjp(sigma[p], L, d, dt, K, G, qphi, kphi, qpsi, st, tauP, alphaP,
                      sig_bar_o[p], sig_bar[p], gv_bar[p])
        Jb = -rho[p] / (J * J) * rho_bar_o[p] + V[p] * V_bar_o[p]
        rho_bar[p] += rho_bar_o[p] / J
        V_bar[p] += J * V_bar_o[p]
        for a in range(d):
            gv_bar[p, a, a] += dt * Jb
