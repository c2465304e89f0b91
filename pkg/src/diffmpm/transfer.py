"""Particle-to-grid scatter, explicit grid update and grid-to-particle gather.

Kernels loop over particles serially in storage order, so every nodal sum is
accumulated in a fixed order and results are bit-reproducible.  Each forward
kernel has a transpose (``*_vjp_kernel``) that accumulates cotangents,
including the dependence of the spline weights on particle positions.

Scheme codes: 0 PIC, 1 FLIP, 2 BLEND, 3 APIC, 4 TPIC.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .errors import OutOfDomainError
from .shape import grid_strides
from .state import SCHEME_CODE, GridState, ParticleState, mass_epsilon

PIC, FLIP, BLEND, APIC, TPIC = 0, 1, 2, 3, 4
_DDW = np.array([1.0, -2.0, 1.0])


def flip_fraction(scheme: str, alpha: float = 1.0) -> float:
    """Weight of the incremental (FLIP) velocity in the particle update."""
    if scheme == "flip":
        return 1.0
    if scheme == "blend":
        return float(alpha)
    return 0.0


@njit(cache=True, inline="always")
def _prepare(x, p, origin, inv_dx, shape, strides, w, dw, base, fx, nodes, phis, grads):
    """Node ids, weights and weight gradients of one particle's stencil.

    Slot ``k`` has per-axis offsets ``(k % 3, k // 3 % 3, k // 9)``.  Returns
    False when the stencil would leave the grid.
    """
    d = x.shape[1]
    ok = True
    for a in range(d):
        u = (x[p, a] - origin[a]) * inv_dx
        b = int(np.floor(u - 0.5))
        if b < 0 or b + 2 > shape[a] - 1:
            ok = False
        f = u - b
        base[a] = b
        fx[a] = f
        w[a, 0] = 0.5 * (1.5 - f) ** 2
        w[a, 1] = 0.75 - (f - 1.0) ** 2
        w[a, 2] = 0.5 * (f - 0.5) ** 2
        dw[a, 0] = (f - 1.5) * inv_dx
        dw[a, 1] = -2.0 * (f - 1.0) * inv_dx
        dw[a, 2] = (f - 0.5) * inv_dx
    if not ok:
        return False
    if d == 2:
        k = 0
        for j1 in range(3):
            for j0 in range(3):
                nodes[k] = (base[0] + j0) * strides[0] + (base[1] + j1) * strides[1]
                phis[k] = w[0, j0] * w[1, j1]
                grads[k, 0] = dw[0, j0] * w[1, j1]
                grads[k, 1] = w[0, j0] * dw[1, j1]
                k += 1
    else:
        k = 0
        for j2 in range(3):
            for j1 in range(3):
                for j0 in range(3):
                    nodes[k] = ((base[0] + j0) * strides[0] + (base[1] + j1) * strides[1]
                                + (base[2] + j2) * strides[2])
                    phis[k] = w[0, j0] * w[1, j1] * w[2, j2]
                    grads[k, 0] = dw[0, j0] * w[1, j1] * w[2, j2]
                    grads[k, 1] = w[0, j0] * dw[1, j1] * w[2, j2]
                    grads[k, 2] = w[0, j0] * w[1, j1] * dw[2, j2]
                    k += 1
    return True


@njit(cache=True, inline="always")
def _prepare_hess(d, w, dw, inv_dx, hess):
    """Second derivatives ``hess[k, b, c] = d^2 phi_k / dx_b dx_c``."""
    inv2 = inv_dx * inv_dx
    if d == 2:
        k = 0
        for j1 in range(3):
            for j0 in range(3):
                hess[k, 0, 0] = _DDW[j0] * inv2 * w[1, j1]
                hess[k, 1, 1] = w[0, j0] * _DDW[j1] * inv2
                hess[k, 0, 1] = dw[0, j0] * dw[1, j1]
                hess[k, 1, 0] = hess[k, 0, 1]
                k += 1
    else:
        k = 0
        for j2 in range(3):
            for j1 in range(3):
                for j0 in range(3):
                    hess[k, 0, 0] = _DDW[j0] * inv2 * w[1, j1] * w[2, j2]
                    hess[k, 1, 1] = w[0, j0] * _DDW[j1] * inv2 * w[2, j2]
                    hess[k, 2, 2] = w[0, j0] * w[1, j1] * _DDW[j2] * inv2
                    hess[k, 0, 1] = dw[0, j0] * dw[1, j1] * w[2, j2]
                    hess[k, 0, 2] = dw[0, j0] * w[1, j1] * dw[2, j2]
                    hess[k, 1, 2] = w[0, j0] * dw[1, j1] * dw[2, j2]
                    hess[k, 1, 0] = hess[k, 0, 1]
                    hess[k, 2, 0] = hess[k, 0, 2]
                    hess[k, 2, 1] = hess[k, 1, 2]
                    k += 1


def stencil_offsets(d):
    """Per-axis offsets of stencil slot ``k`` (axis 0 fastest)."""
    k = np.arange(3**d)
    return np.stack([(k // 3**a) % 3 for a in range(d)], axis=1).astype(np.int64)


@njit(cache=True, inline="always")
def _rel(OFF, fx, dx, k, a):
    """Component ``a`` of ``x_i - x_p`` for stencil slot ``k``."""
    return (OFF[k, a] - fx[a]) * dx


@njit(cache=True, inline="always")
def _moment_inverse(d, nk, OFF, fx, dx, phis, Dinv):
    """Inverse of the APIC moment matrix ``sum phi r r^T`` for one particle."""
    D = np.zeros((d, d))
    for k in range(nk):
        for a in range(d):
            ra = _rel(OFF, fx, dx, k, a)
            for b in range(d):
                D[a, b] += phis[k] * ra * _rel(OFF, fx, dx, k, b)
    Dinv[:, :] = np.linalg.inv(D)


@njit(cache=True)
def moment_matrix_kernel(x, origin, dx, shape, strides, OFF, out):
    n, d = x.shape
    nk = OFF.shape[0]
    w = np.empty((d, 3))
    dw = np.empty((d, 3))
    base = np.empty(d, dtype=np.int64)
    fx = np.empty(d)
    nodes = np.empty(nk, dtype=np.int64)
    phis = np.empty(nk)
    grads = np.empty((nk, d))
    for p in range(n):
        if not _prepare(x, p, origin, 1.0 / dx, shape, strides, w, dw, base, fx, nodes, phis, grads):
            return p
        for a in range(d):
            for b in range(d):
                acc = 0.0
                for k in range(nk):
                    acc += phis[k] * _rel(OFF, fx, dx, k, a) * _rel(OFF, fx, dx, k, b)
                out[p, a, b] = acc
    return -1


@njit(cache=True)
def p2g_kernel(x, v, m, V, sigma, gv, B, code, origin, dx, shape, strides, OFF, gravity,
               gm, gmv, gf):
    n, d = x.shape
    nk = OFF.shape[0]
    w = np.empty((d, 3))
    dw = np.empty((d, 3))
    base = np.empty(d, dtype=np.int64)
    fx = np.empty(d)
    nodes = np.empty(nk, dtype=np.int64)
    phis = np.empty(nk)
    grads = np.empty((nk, d))
    A = np.zeros((d, d))
    Dinv = np.empty((d, d))
    affine = code == APIC or code == TPIC
    for p in range(n):
        if not _prepare(x, p, origin, 1.0 / dx, shape, strides, w, dw, base, fx, nodes, phis, grads):
            return p
        if code == APIC:
            _moment_inverse(d, nk, OFF, fx, dx, phis, Dinv)
            for a in range(d):
                for b in range(d):
                    acc = 0.0
                    for c in range(d):
                        acc += B[p, a, c] * Dinv[c, b]
                    A[a, b] = acc
        elif code == TPIC:
            for a in range(d):
                for b in range(d):
                    A[a, b] = gv[p, a, b]
        mp = m[p]
        Vp = V[p]
        for k in range(nk):
            i = nodes[k]
            mphi = mp * phis[k]
            gm[i] += mphi
            for a in range(d):
                va = v[p, a]
                if affine:
                    for b in range(d):
                        va += A[a, b] * _rel(OFF, fx, dx, k, b)
                gmv[i, a] += mphi * va
                fa = 0.0
                for b in range(d):
                    fa += sigma[p, a, b] * grads[k, b]
                gf[i, a] += -Vp * fa + mphi * gravity[a]
    return -1


@njit(cache=True)
def grid_update_kernel(gm, gmv, gf, dt, eps, v_old, v_pred, active):
    G, d = gmv.shape
    for i in range(G):
        if gm[i] > eps:
            active[i] = True
            inv = 1.0 / gm[i]
            for a in range(d):
                vo = gmv[i, a] * inv
                v_old[i, a] = vo
                v_pred[i, a] = vo + dt * gf[i, a] * inv
        else:
            active[i] = False
            for a in range(d):
                v_old[i, a] = 0.0
                v_pred[i, a] = 0.0


@njit(cache=True)
def g2p_kernel(x, v, F, code, beta, dt, origin, dx, shape, strides, OFF, gvel, gvold,
               x1, v1, gv1, B1, F1):
    n, d = x.shape
    nk = OFF.shape[0]
    w = np.empty((d, 3))
    dw = np.empty((d, 3))
    base = np.empty(d, dtype=np.int64)
    fx = np.empty(d)
    nodes = np.empty(nk, dtype=np.int64)
    phis = np.empty(nk)
    grads = np.empty((nk, d))
    inv_dx = 1.0 / dx
    for p in range(n):
        if not _prepare(x, p, origin, inv_dx, shape, strides, w, dw, base, fx, nodes, phis, grads):
            return p
        for a in range(d):
            vpic = 0.0
            dv = 0.0
            for k in range(nk):
                i = nodes[k]
                vi = gvel[i, a]
                vpic += phis[k] * vi
                dv += phis[k] * (vi - gvold[i, a])
            v1[p, a] = beta * (v[p, a] + dv) + (1.0 - beta) * vpic
            x1[p, a] = x[p, a] + dt * vpic
            for b in range(d):
                L = 0.0
                for k in range(nk):
                    L += gvel[nodes[k], a] * grads[k, b]
                gv1[p, a, b] = L
                Bp = 0.0
                if code == APIC:
                    for k in range(nk):
                        Bp += phis[k] * gvel[nodes[k], a] * _rel(OFF, fx, dx, k, b)
                B1[p, a, b] = Bp
        for a in range(d):
            for b in range(d):
                acc = F[p, a, b]
                for c in range(d):
                    acc += dt * gv1[p, a, c] * F[p, c, b]
                F1[p, a, b] = acc
    for p in range(n):
        for a in range(d):
            u = (x1[p, a] - origin[a]) * inv_dx
            if not (u >= 0.5 and u < shape[a] - 1.5):
                return p
    return -1


# ---------------------------------------------------------------------------
# transposes

@njit(cache=True)
def g2p_vjp_kernel(x, v, code, beta, dt, origin, dx, shape, strides, OFF, gvel, gvold,
                   xb1, vb1, gvb1, Bb1, xb, vb, gvelb, gvoldb):
    """Cotangents of ``(x1, v1, gv1, B1)`` pulled back onto ``x, v`` and the
    grid velocities ``gvel`` (post-correction) and ``gvold``."""
    n, d = x.shape
    nk = OFF.shape[0]
    w = np.empty((d, 3))
    dw = np.empty((d, 3))
    base = np.empty(d, dtype=np.int64)
    fx = np.empty(d)
    nodes = np.empty(nk, dtype=np.int64)
    phis = np.empty(nk)
    grads = np.empty((nk, d))
    hess = np.empty((nk, d, d))
    apic_ = np.empty(d)
    aflip = np.empty(d)
    gbar = np.empty(d)
    xacc = np.empty(d)
    inv_dx = 1.0 / dx
    for p in range(n):
        _prepare(x, p, origin, inv_dx, shape, strides, w, dw, base, fx, nodes, phis, grads)
        _prepare_hess(d, w, dw, inv_dx, hess)
        for a in range(d):
            apic_[a] = (1.0 - beta) * vb1[p, a] + dt * xb1[p, a]
            aflip[a] = beta * vb1[p, a]
            vb[p, a] += beta * vb1[p, a]
            xacc[a] = xb1[p, a]
        for k in range(nk):
            i = nodes[k]
            phi = phis[k]
            phib = 0.0
            for a in range(d):
                vi = gvel[i, a]
                acc = phi * (apic_[a] + aflip[a])
                for b in range(d):
                    acc += gvb1[p, a, b] * grads[k, b]
                phib += apic_[a] * vi + aflip[a] * (vi - gvold[i, a])
                if code == APIC:
                    for b in range(d):
                        rb = _rel(OFF, fx, dx, k, b)
                        acc += phi * Bb1[p, a, b] * rb
                        phib += Bb1[p, a, b] * vi * rb
                gvelb[i, a] += acc
                gvoldb[i, a] -= phi * aflip[a]
            for b in range(d):
                s = 0.0
                for a in range(d):
                    s += gvb1[p, a, b] * gvel[i, a]
                gbar[b] = s
            for c in range(d):
                acc = phib * grads[k, c]
                for b in range(d):
                    acc += hess[k, b, c] * gbar[b]
                xacc[c] += acc
            if code == APIC:
                # r = x_i - x_p
                for b in range(d):
                    s = 0.0
                    for a in range(d):
                        s += Bb1[p, a, b] * gvel[i, a]
                    xacc[b] -= phi * s
        for a in range(d):
            xb[p, a] += xacc[a]


@njit(cache=True)
def grid_update_vjp_kernel(gm, gmv, gf, dt, active, vpredb, voldb, gmb, gmvb, gfb):
    G, d = gmv.shape
    for i in range(G):
        if not active[i]:
            continue
        inv = 1.0 / gm[i]
        mb = 0.0
        for a in range(d):
            vo_tot = voldb[i, a] + vpredb[i, a]
            gfb[i, a] += dt * vpredb[i, a] * inv
            gmvb[i, a] += vo_tot * inv
            mb -= (gmv[i, a] * inv * vo_tot + dt * gf[i, a] * inv * vpredb[i, a]) * inv
        gmb[i] += mb


@njit(cache=True)
def p2g_vjp_kernel(x, v, m, V, sigma, gv, B, code, origin, dx, shape, strides, OFF, gravity,
                   gmb, gmvb, gfb, xb, vb, Vb, sigb, gvb, Bb):
    n, d = x.shape
    nk = OFF.shape[0]
    w = np.empty((d, 3))
    dw = np.empty((d, 3))
    base = np.empty(d, dtype=np.int64)
    fx = np.empty(d)
    nodes = np.empty(nk, dtype=np.int64)
    phis = np.empty(nk)
    grads = np.empty((nk, d))
    hess = np.empty((nk, d, d))
    A = np.zeros((d, d))
    Ab = np.empty((d, d))
    Dinv = np.empty((d, d))
    va = np.empty(d)
    gbar = np.empty(d)
    xacc = np.empty(d)
    affine = code == APIC or code == TPIC
    inv_dx = 1.0 / dx
    for p in range(n):
        _prepare(x, p, origin, inv_dx, shape, strides, w, dw, base, fx, nodes, phis, grads)
        _prepare_hess(d, w, dw, inv_dx, hess)
        if code == APIC:
            _moment_inverse(d, nk, OFF, fx, dx, phis, Dinv)
            for a in range(d):
                for b in range(d):
                    acc = 0.0
                    for c in range(d):
                        acc += B[p, a, c] * Dinv[c, b]
                    A[a, b] = acc
        elif code == TPIC:
            for a in range(d):
                for b in range(d):
                    A[a, b] = gv[p, a, b]
        Ab[:, :] = 0.0
        xacc[:] = 0.0
        mp = m[p]
        Vp = V[p]
        for k in range(nk):
            i = nodes[k]
            phi = phis[k]
            phib = mp * gmb[i]
            for a in range(d):
                s = v[p, a]
                if affine:
                    for b in range(d):
                        s += A[a, b] * _rel(OFF, fx, dx, k, b)
                va[a] = s
            for a in range(d):
                g = gmvb[i, a]
                fb = gfb[i, a]
                phib += mp * g * va[a] + mp * fb * gravity[a]
                vb[p, a] += mp * phi * g
                if affine:
                    for b in range(d):
                        Ab[a, b] += mp * phi * g * _rel(OFF, fx, dx, k, b)
                fa = 0.0
                for b in range(d):
                    fa += sigma[p, a, b] * grads[k, b]
                    sigb[p, a, b] += -Vp * fb * grads[k, b]
                Vb[p] += -fb * fa
            for b in range(d):
                s = 0.0
                for a in range(d):
                    s += sigma[p, a, b] * gfb[i, a]
                gbar[b] = -Vp * s
            for c in range(d):
                acc = phib * grads[k, c]
                for b in range(d):
                    acc += hess[k, b, c] * gbar[b]
                xacc[c] += acc
            if affine:
                # r = x_i - x_p, rbar = m phi A^T gmvb
                for b in range(d):
                    s = 0.0
                    for a in range(d):
                        s += A[a, b] * gmvb[i, a]
                    xacc[b] -= mp * phi * s
        for a in range(d):
            xb[p, a] += xacc[a]
        if code == APIC:
            for a in range(d):
                for c in range(d):
                    acc = 0.0
                    for b in range(d):
                        acc += Ab[a, b] * Dinv[c, b]
                    Bb[p, a, c] += acc
        elif code == TPIC:
            for a in range(d):
                for b in range(d):
                    gvb[p, a, b] += Ab[a, b]


# ---------------------------------------------------------------------------
# 2D kernels: the same operations with the stencil unrolled into scalars

@njit(cache=True, inline="always")
def _axis(u):
    """Base node, fractional offset, weights and unscaled weight slopes on one axis."""
    b = int(np.floor(u - 0.5))
    f = u - b
    return (b, f, 0.5 * (1.5 - f) ** 2, 0.75 - (f - 1.0) ** 2, 0.5 * (f - 0.5) ** 2,
            f - 1.5, -2.0 * (f - 1.0), f - 0.5)


@njit(cache=True, inline="always")
def _inside2(bx, by, shape):
    return bx >= 0 and by >= 0 and bx + 3 <= shape[0] and by + 3 <= shape[1]


@njit(cache=True, inline="always")
def _affine2(code, p, B, gv, wx, wy, fx, fy, dx):
    """Affine matrix ``A`` of one particle: ``B D^-1`` (APIC), ``grad v`` (TPIC) or zero."""
    if code == APIC:
        d00 = 0.0
        d01 = 0.0
        d11 = 0.0
        for j1 in range(3):
            ry = (j1 - fy) * dx
            for j0 in range(3):
                rx = (j0 - fx) * dx
                phi = wx[j0] * wy[j1]
                d00 += phi * rx * rx
                d01 += phi * rx * ry
                d11 += phi * ry * ry
        det = d00 * d11 - d01 * d01
        i00 = d11 / det
        i01 = -d01 / det
        i11 = d00 / det
        return (B[p, 0, 0] * i00 + B[p, 0, 1] * i01, B[p, 0, 0] * i01 + B[p, 0, 1] * i11,
                B[p, 1, 0] * i00 + B[p, 1, 1] * i01, B[p, 1, 0] * i01 + B[p, 1, 1] * i11,
                i00, i01, i11)
    if code == TPIC:
        return gv[p, 0, 0], gv[p, 0, 1], gv[p, 1, 0], gv[p, 1, 1], 0.0, 0.0, 0.0
    return 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0


@njit(cache=True)
def p2g_kernel_2d(x, v, m, V, sigma, gv, B, code, origin, dx, shape, strides, gravity, gm, gmv, gf):
    n = x.shape[0]
    inv = 1.0 / dx
    s0 = strides[0]
    s1 = strides[1]
    wx = np.empty(3)
    wy = np.empty(3)
    dwx = np.empty(3)
    dwy = np.empty(3)
    g0x = gravity[0]
    g1x = gravity[1]
    affine = code == APIC or code == TPIC
    for p in range(n):
        bx, fx, wx[0], wx[1], wx[2], dwx[0], dwx[1], dwx[2] = _axis((x[p, 0] - origin[0]) * inv)
        by, fy, wy[0], wy[1], wy[2], dwy[0], dwy[1], dwy[2] = _axis((x[p, 1] - origin[1]) * inv)
        if not _inside2(bx, by, shape):
            return p
        A00 = A01 = A10 = A11 = 0.0
        if affine:
            A00, A01, A10, A11, _, _, _ = _affine2(code, p, B, gv, wx, wy, fx, fy, dx)
        mp = m[p]
        Vp = V[p]
        v0 = v[p, 0]
        v1 = v[p, 1]
        s00 = sigma[p, 0, 0]
        s01 = sigma[p, 0, 1]
        s10 = sigma[p, 1, 0]
        s11 = sigma[p, 1, 1]
        for j1 in range(3):
            ry = (j1 - fy) * dx
            for j0 in range(3):
                i = (bx + j0) * s0 + (by + j1) * s1
                phi = wx[j0] * wy[j1]
                g0 = dwx[j0] * wy[j1] * inv
                g1 = wx[j0] * dwy[j1] * inv
                mphi = mp * phi
                gm[i] += mphi
                if affine:
                    rx = (j0 - fx) * dx
                    gmv[i, 0] += mphi * (v0 + A00 * rx + A01 * ry)
                    gmv[i, 1] += mphi * (v1 + A10 * rx + A11 * ry)
                else:
                    gmv[i, 0] += mphi * v0
                    gmv[i, 1] += mphi * v1
                gf[i, 0] += -Vp * (s00 * g0 + s01 * g1) + mphi * g0x
                gf[i, 1] += -Vp * (s10 * g0 + s11 * g1) + mphi * g1x
    return -1


@njit(cache=True)
def g2p_kernel_2d(x, v, F, code, beta, dt, origin, dx, shape, strides, gvel, gvold,
                  x1, v1, gv1, B1, F1):
    n = x.shape[0]
    inv = 1.0 / dx
    s0 = strides[0]
    s1 = strides[1]
    wx = np.empty(3)
    wy = np.empty(3)
    dwx = np.empty(3)
    dwy = np.empty(3)
    for p in range(n):
        bx, fx, wx[0], wx[1], wx[2], dwx[0], dwx[1], dwx[2] = _axis((x[p, 0] - origin[0]) * inv)
        by, fy, wy[0], wy[1], wy[2], dwy[0], dwy[1], dwy[2] = _axis((x[p, 1] - origin[1]) * inv)
        if not _inside2(bx, by, shape):
            return p
        vp0 = 0.0
        vp1 = 0.0
        dv0 = 0.0
        dv1 = 0.0
        L00 = 0.0
        L01 = 0.0
        L10 = 0.0
        L11 = 0.0
        B00 = 0.0
        B01 = 0.0
        B10 = 0.0
        B11 = 0.0
        for j1 in range(3):
            ry = (j1 - fy) * dx
            for j0 in range(3):
                i = (bx + j0) * s0 + (by + j1) * s1
                phi = wx[j0] * wy[j1]
                g0 = dwx[j0] * wy[j1] * inv
                g1 = wx[j0] * dwy[j1] * inv
                a0 = gvel[i, 0]
                a1 = gvel[i, 1]
                vp0 += phi * a0
                vp1 += phi * a1
                dv0 += phi * (a0 - gvold[i, 0])
                dv1 += phi * (a1 - gvold[i, 1])
                L00 += a0 * g0
                L01 += a0 * g1
                L10 += a1 * g0
                L11 += a1 * g1
                if code == APIC:
                    rx = (j0 - fx) * dx
                    B00 += phi * a0 * rx
                    B01 += phi * a0 * ry
                    B10 += phi * a1 * rx
                    B11 += phi * a1 * ry
        v1[p, 0] = beta * (v[p, 0] + dv0) + (1.0 - beta) * vp0
        v1[p, 1] = beta * (v[p, 1] + dv1) + (1.0 - beta) * vp1
        x1[p, 0] = x[p, 0] + dt * vp0
        x1[p, 1] = x[p, 1] + dt * vp1
        gv1[p, 0, 0] = L00
        gv1[p, 0, 1] = L01
        gv1[p, 1, 0] = L10
        gv1[p, 1, 1] = L11
        B1[p, 0, 0] = B00
        B1[p, 0, 1] = B01
        B1[p, 1, 0] = B10
        B1[p, 1, 1] = B11
        F1[p, 0, 0] = F[p, 0, 0] + dt * (L00 * F[p, 0, 0] + L01 * F[p, 1, 0])
        F1[p, 0, 1] = F[p, 0, 1] + dt * (L00 * F[p, 0, 1] + L01 * F[p, 1, 1])
        F1[p, 1, 0] = F[p, 1, 0] + dt * (L10 * F[p, 0, 0] + L11 * F[p, 1, 0])
        F1[p, 1, 1] = F[p, 1, 1] + dt * (L10 * F[p, 0, 1] + L11 * F[p, 1, 1])
    for p in range(n):
        for a in range(2):
            u = (x1[p, a] - origin[a]) * inv
            if not (u >= 0.5 and u < shape[a] - 1.5):
                return p
    return -1


@njit(cache=True)
def g2p_vjp_kernel_2d(x, v, code, beta, dt, origin, dx, shape, strides, gvel, gvold,
                      xb1, vb1, gvb1, Bb1, xb, vb, gvelb, gvoldb):
    n = x.shape[0]
    inv = 1.0 / dx
    inv2 = inv * inv
    s0 = strides[0]
    s1 = strides[1]
    wx = np.empty(3)
    wy = np.empty(3)
    dwx = np.empty(3)
    dwy = np.empty(3)
    apic_flag = code == APIC
    for p in range(n):
        bx, fx, wx[0], wx[1], wx[2], dwx[0], dwx[1], dwx[2] = _axis((x[p, 0] - origin[0]) * inv)
        by, fy, wy[0], wy[1], wy[2], dwy[0], dwy[1], dwy[2] = _axis((x[p, 1] - origin[1]) * inv)
        c0 = (1.0 - beta) * vb1[p, 0] + dt * xb1[p, 0]
        c1 = (1.0 - beta) * vb1[p, 1] + dt * xb1[p, 1]
        f0 = beta * vb1[p, 0]
        f1 = beta * vb1[p, 1]
        vb[p, 0] += f0
        vb[p, 1] += f1
        G00 = gvb1[p, 0, 0]
        G01 = gvb1[p, 0, 1]
        G10 = gvb1[p, 1, 0]
        G11 = gvb1[p, 1, 1]
        Q00 = Bb1[p, 0, 0]
        Q01 = Bb1[p, 0, 1]
        Q10 = Bb1[p, 1, 0]
        Q11 = Bb1[p, 1, 1]
        xa0 = xb1[p, 0]
        xa1 = xb1[p, 1]
        for j1 in range(3):
            ry = (j1 - fy) * dx
            for j0 in range(3):
                rx = (j0 - fx) * dx
                i = (bx + j0) * s0 + (by + j1) * s1
                phi = wx[j0] * wy[j1]
                g0 = dwx[j0] * wy[j1] * inv
                g1 = wx[j0] * dwy[j1] * inv
                h00 = _DDW[j0] * wy[j1] * inv2
                h11 = wx[j0] * _DDW[j1] * inv2
                h01 = dwx[j0] * dwy[j1] * inv2
                a0 = gvel[i, 0]
                a1 = gvel[i, 1]
                e0 = phi * (c0 + f0) + G00 * g0 + G01 * g1
                e1 = phi * (c1 + f1) + G10 * g0 + G11 * g1
                phib = c0 * a0 + c1 * a1 + f0 * (a0 - gvold[i, 0]) + f1 * (a1 - gvold[i, 1])
                if apic_flag:
                    e0 += phi * (Q00 * rx + Q01 * ry)
                    e1 += phi * (Q10 * rx + Q11 * ry)
                    phib += (Q00 * rx + Q01 * ry) * a0 + (Q10 * rx + Q11 * ry) * a1
                gvelb[i, 0] += e0
                gvelb[i, 1] += e1
                gvoldb[i, 0] -= phi * f0
                gvoldb[i, 1] -= phi * f1
                gb0 = G00 * a0 + G10 * a1
                gb1 = G01 * a0 + G11 * a1
                xa0 += phib * g0 + h00 * gb0 + h01 * gb1
                xa1 += phib * g1 + h01 * gb0 + h11 * gb1
                if apic_flag:
                    xa0 -= phi * (Q00 * a0 + Q10 * a1)
                    xa1 -= phi * (Q01 * a0 + Q11 * a1)
        xb[p, 0] += xa0
        xb[p, 1] += xa1


@njit(cache=True)
def p2g_vjp_kernel_2d(x, v, m, V, sigma, gv, B, code, origin, dx, shape, strides, gravity,
                      gmb, gmvb, gfb, xb, vb, Vb, sigb, gvb, Bb):
    n = x.shape[0]
    inv = 1.0 / dx
    inv2 = inv * inv
    s0 = strides[0]
    s1 = strides[1]
    wx = np.empty(3)
    wy = np.empty(3)
    dwx = np.empty(3)
    dwy = np.empty(3)
    gr0 = gravity[0]
    gr1 = gravity[1]
    affine = code == APIC or code == TPIC
    for p in range(n):
        bx, fx, wx[0], wx[1], wx[2], dwx[0], dwx[1], dwx[2] = _axis((x[p, 0] - origin[0]) * inv)
        by, fy, wy[0], wy[1], wy[2], dwy[0], dwy[1], dwy[2] = _axis((x[p, 1] - origin[1]) * inv)
        A00 = A01 = A10 = A11 = i00 = i01 = i11 = 0.0
        if affine:
            A00, A01, A10, A11, i00, i01, i11 = _affine2(code, p, B, gv, wx, wy, fx, fy, dx)
        mp = m[p]
        Vp = V[p]
        v0 = v[p, 0]
        v1 = v[p, 1]
        s00 = sigma[p, 0, 0]
        s01 = sigma[p, 0, 1]
        s10 = sigma[p, 1, 0]
        s11 = sigma[p, 1, 1]
        Ab00 = 0.0
        Ab01 = 0.0
        Ab10 = 0.0
        Ab11 = 0.0
        vb0 = 0.0
        vb1 = 0.0
        Vbp = 0.0
        sb00 = 0.0
        sb01 = 0.0
        sb10 = 0.0
        sb11 = 0.0
        xa0 = 0.0
        xa1 = 0.0
        for j1 in range(3):
            ry = (j1 - fy) * dx
            for j0 in range(3):
                rx = (j0 - fx) * dx
                i = (bx + j0) * s0 + (by + j1) * s1
                phi = wx[j0] * wy[j1]
                g0 = dwx[j0] * wy[j1] * inv
                g1 = wx[j0] * dwy[j1] * inv
                h00 = _DDW[j0] * wy[j1] * inv2
                h11 = wx[j0] * _DDW[j1] * inv2
                h01 = dwx[j0] * dwy[j1] * inv2
                q0 = gmvb[i, 0]
                q1 = gmvb[i, 1]
                fb0 = gfb[i, 0]
                fb1 = gfb[i, 1]
                va0 = v0 + A00 * rx + A01 * ry
                va1 = v1 + A10 * rx + A11 * ry
                mphi = mp * phi
                phib = mp * (gmb[i] + q0 * va0 + q1 * va1 + fb0 * gr0 + fb1 * gr1)
                vb0 += mphi * q0
                vb1 += mphi * q1
                if affine:
                    Ab00 += mphi * q0 * rx
                    Ab01 += mphi * q0 * ry
                    Ab10 += mphi * q1 * rx
                    Ab11 += mphi * q1 * ry
                sb00 -= Vp * fb0 * g0
                sb01 -= Vp * fb0 * g1
                sb10 -= Vp * fb1 * g0
                sb11 -= Vp * fb1 * g1
                Vbp -= fb0 * (s00 * g0 + s01 * g1) + fb1 * (s10 * g0 + s11 * g1)
                gb0 = -Vp * (s00 * fb0 + s10 * fb1)
                gb1 = -Vp * (s01 * fb0 + s11 * fb1)
                xa0 += phib * g0 + h00 * gb0 + h01 * gb1
                xa1 += phib * g1 + h01 * gb0 + h11 * gb1
                if affine:
                    xa0 -= mphi * (A00 * q0 + A10 * q1)
                    xa1 -= mphi * (A01 * q0 + A11 * q1)
        xb[p, 0] += xa0
        xb[p, 1] += xa1
        vb[p, 0] += vb0
        vb[p, 1] += vb1
        Vb[p] += Vbp
        sigb[p, 0, 0] += sb00
        sigb[p, 0, 1] += sb01
        sigb[p, 1, 0] += sb10
        sigb[p, 1, 1] += sb11
        if code == APIC:
            # A = B D^-1 with D^-1 symmetric
            Bb[p, 0, 0] += Ab00 * i00 + Ab01 * i01
            Bb[p, 0, 1] += Ab00 * i01 + Ab01 * i11
            Bb[p, 1, 0] += Ab10 * i00 + Ab11 * i01
            Bb[p, 1, 1] += Ab10 * i01 + Ab11 * i11
        elif code == TPIC:
            gvb[p, 0, 0] += Ab00
            gvb[p, 0, 1] += Ab01
            gvb[p, 1, 0] += Ab10
            gvb[p, 1, 1] += Ab11


def p2g_vjp(ps, config, gmb, gmvb, gfb, out) -> None:
    """Accumulate the transpose of :func:`p2g` into the cotangent ``out``."""
    origin, dx, shape, strides, OFF = grid_args(config)
    code = SCHEME_CODE[config.scheme]
    g = np.asarray(config.gravity, dtype=np.float64)
    args = (ps.x, ps.v, ps.m, ps.V, ps.sigma, ps.gv, ps.B, code, origin, dx, shape, strides)
    tail = (g, gmb, gmvb, gfb, out.x, out.v, out.V, out.sigma, out.gv, out.B)
    if ps.dim == 2:
        p2g_vjp_kernel_2d(*args, *tail)
    else:
        p2g_vjp_kernel(*args, OFF, *tail)


def g2p_vjp(grid, ps, config, xb1, vb1, gvb1, Bb1, out, gvelb, gvoldb) -> None:
    """Accumulate the transpose of :func:`g2p` into ``out`` and the grid cotangents."""
    origin, dx, shape, strides, OFF = grid_args(config)
    code = SCHEME_CODE[config.scheme]
    beta = flip_fraction(config.scheme, config.flip_alpha)
    args = (ps.x, ps.v, code, beta, float(config.dt), origin, dx, shape, strides)
    tail = (grid.v, grid.v_old, xb1, vb1, gvb1, Bb1, out.x, out.v, gvelb, gvoldb)
    if ps.dim == 2:
        g2p_vjp_kernel_2d(*args, *tail)
    else:
        g2p_vjp_kernel(*args, OFF, *tail)


# ---------------------------------------------------------------------------
# mass-weighted smoothing of a particle scalar through the grid

@njit(cache=True)
def _smooth_scatter(x, m, q, origin, dx, shape, strides, OFF, gm, gq):
    n, d = x.shape
    nk = OFF.shape[0]
    w = np.empty((d, 3))
    dw = np.empty((d, 3))
    base = np.empty(d, dtype=np.int64)
    fx = np.empty(d)
    nodes = np.empty(nk, dtype=np.int64)
    phis = np.empty(nk)
    grads = np.empty((nk, d))
    inv_dx = 1.0 / dx
    for p in range(n):
        if not _prepare(x, p, origin, inv_dx, shape, strides, w, dw, base, fx, nodes, phis, grads):
            return p
        for k in range(nk):
            i = nodes[k]
            gm[i] += phis[k] * m[p]
            gq[i] += phis[k] * m[p] * q[p]
    return -1


@njit(cache=True)
def _smooth_gather(x, origin, dx, shape, strides, OFF, gm, gq, out):
    n, d = x.shape
    nk = OFF.shape[0]
    w = np.empty((d, 3))
    dw = np.empty((d, 3))
    base = np.empty(d, dtype=np.int64)
    fx = np.empty(d)
    nodes = np.empty(nk, dtype=np.int64)
    phis = np.empty(nk)
    grads = np.empty((nk, d))
    inv_dx = 1.0 / dx
    for p in range(n):
        _prepare(x, p, origin, inv_dx, shape, strides, w, dw, base, fx, nodes, phis, grads)
        s = 0.0
        for k in range(nk):
            i = nodes[k]
            if gm[i] > 0.0:
                s += phis[k] * (gq[i] / gm[i])
        out[p] = s


@njit(cache=True)
def _smooth_vjp(x, m, q, origin, dx, shape, strides, OFF, gm, gq, ob, qb, xb):
    n, d = x.shape
    nk = OFF.shape[0]
    w = np.empty((d, 3))
    dw = np.empty((d, 3))
    base = np.empty(d, dtype=np.int64)
    fx = np.empty(d)
    nodes = np.empty(nk, dtype=np.int64)
    phis = np.empty(nk)
    grads = np.empty((nk, d))
    inv_dx = 1.0 / dx
    gb = np.zeros(gm.shape[0])
    # transpose of the gather
    for p in range(n):
        _prepare(x, p, origin, inv_dx, shape, strides, w, dw, base, fx, nodes, phis, grads)
        for k in range(nk):
            i = nodes[k]
            if gm[i] > 0.0:
                gb[i] += phis[k] * ob[p]
                g = gq[i] / gm[i]
                for a in range(d):
                    xb[p, a] += grads[k, a] * g * ob[p]
    # node ratio gq / gm, then the scatter
    gqb = np.zeros(gm.shape[0])
    gmb = np.zeros(gm.shape[0])
    for i in range(gm.shape[0]):
        if gm[i] > 0.0:
            gqb[i] = gb[i] / gm[i]
            gmb[i] = -gb[i] * gq[i] / (gm[i] * gm[i])
    for p in range(n):
        _prepare(x, p, origin, inv_dx, shape, strides, w, dw, base, fx, nodes, phis, grads)
        for k in range(nk):
            i = nodes[k]
            qb[p] += phis[k] * m[p] * gqb[i]
            c = m[p] * (q[p] * gqb[i] + gmb[i])
            for a in range(d):
                xb[p, a] += grads[k, a] * c


@njit(cache=True)
def _smooth_scatter_2d(x, m, q, origin, dx, shape, strides, gm, gq):
    inv = 1.0 / dx
    s0 = strides[0]
    s1 = strides[1]
    for p in range(x.shape[0]):
        bx, fx, wx0, wx1, wx2, _, _, _ = _axis((x[p, 0] - origin[0]) * inv)
        by, fy, wy0, wy1, wy2, _, _, _ = _axis((x[p, 1] - origin[1]) * inv)
        if not _inside2(bx, by, shape):
            return p
        wx = (wx0, wx1, wx2)
        wy = (wy0, wy1, wy2)
        mp = m[p]
        mq = mp * q[p]
        for j1 in range(3):
            for j0 in range(3):
                i = (bx + j0) * s0 + (by + j1) * s1
                phi = wx[j0] * wy[j1]
                gm[i] += phi * mp
                gq[i] += phi * mq
    return -1


@njit(cache=True)
def _smooth_gather_2d(x, origin, dx, shape, strides, gm, gq, out):
    inv = 1.0 / dx
    s0 = strides[0]
    s1 = strides[1]
    for p in range(x.shape[0]):
        bx, fx, wx0, wx1, wx2, _, _, _ = _axis((x[p, 0] - origin[0]) * inv)
        by, fy, wy0, wy1, wy2, _, _, _ = _axis((x[p, 1] - origin[1]) * inv)
        wx = (wx0, wx1, wx2)
        wy = (wy0, wy1, wy2)
        acc = 0.0
        for j1 in range(3):
            for j0 in range(3):
                i = (bx + j0) * s0 + (by + j1) * s1
                if gm[i] > 0.0:
                    acc += wx[j0] * wy[j1] * (gq[i] / gm[i])
        out[p] = acc


@njit(cache=True)
def _smooth_vjp_2d(x, m, q, origin, dx, shape, strides, gm, gq, ob, qb, xb):
    inv = 1.0 / dx
    s0 = strides[0]
    s1 = strides[1]
    nn = gm.shape[0]
    gb = np.zeros(nn)
    for p in range(x.shape[0]):
        bx, fx, wx0, wx1, wx2, dx0, dx1, dx2 = _axis((x[p, 0] - origin[0]) * inv)
        by, fy, wy0, wy1, wy2, dy0, dy1, dy2 = _axis((x[p, 1] - origin[1]) * inv)
        wx = (wx0, wx1, wx2)
        wy = (wy0, wy1, wy2)
        dwx = (dx0, dx1, dx2)
        dwy = (dy0, dy1, dy2)
        o = ob[p]
        for j1 in range(3):
            for j0 in range(3):
                i = (bx + j0) * s0 + (by + j1) * s1
                if gm[i] > 0.0:
                    gb[i] += wx[j0] * wy[j1] * o
                    g = gq[i] / gm[i] * o
                    xb[p, 0] += dwx[j0] * wy[j1] * inv * g
                    xb[p, 1] += wx[j0] * dwy[j1] * inv * g
    gqb = np.zeros(nn)
    gmb = np.zeros(nn)
    for i in range(nn):
        if gm[i] > 0.0:
            gqb[i] = gb[i] / gm[i]
            gmb[i] = -gb[i] * gq[i] / (gm[i] * gm[i])
    for p in range(x.shape[0]):
        bx, fx, wx0, wx1, wx2, dx0, dx1, dx2 = _axis((x[p, 0] - origin[0]) * inv)
        by, fy, wy0, wy1, wy2, dy0, dy1, dy2 = _axis((x[p, 1] - origin[1]) * inv)
        wx = (wx0, wx1, wx2)
        wy = (wy0, wy1, wy2)
        dwx = (dx0, dx1, dx2)
        dwy = (dy0, dy1, dy2)
        mp = m[p]
        qp = q[p]
        acc = 0.0
        for j1 in range(3):
            for j0 in range(3):
                i = (bx + j0) * s0 + (by + j1) * s1
                acc += wx[j0] * wy[j1] * gqb[i]
                c = mp * (qp * gqb[i] + gmb[i])
                xb[p, 0] += dwx[j0] * wy[j1] * inv * c
                xb[p, 1] += wx[j0] * dwy[j1] * inv * c
        qb[p] += mp * acc


def smooth_particles(x, m, q, config):
    """Mass-weighted grid average of ``q`` interpolated back to the particles.

    ``q~_p = sum_i phi_ip (sum_r phi_ir m_r q_r) / (sum_r phi_ir m_r)``.  A
    uniform field is reproduced exactly.
    """
    origin, dx, shape, strides, OFF = grid_args(config)
    gm = np.zeros(config.n_nodes)
    gq = np.zeros(config.n_nodes)
    out = np.empty(len(q))
    if x.shape[1] == 2:
        bad = _smooth_scatter_2d(x, m, q, origin, dx, shape, strides, gm, gq)
    else:
        bad = _smooth_scatter(x, m, q, origin, dx, shape, strides, OFF, gm, gq)
    if bad >= 0:
        raise OutOfDomainError(bad, x[bad])
    if x.shape[1] == 2:
        _smooth_gather_2d(x, origin, dx, shape, strides, gm, gq, out)
    else:
        _smooth_gather(x, origin, dx, shape, strides, OFF, gm, gq, out)
    return out.astype(q.dtype, copy=False)


def smooth_particles_vjp(x, m, q, config, ob, qb, xb) -> None:
    """Accumulate the transpose of :func:`smooth_particles` applied to ``ob``."""
    origin, dx, shape, strides, OFF = grid_args(config)
    gm = np.zeros(config.n_nodes)
    gq = np.zeros(config.n_nodes)
    ob = np.asarray(ob, dtype=np.float64)
    if x.shape[1] == 2:
        _smooth_scatter_2d(x, m, q, origin, dx, shape, strides, gm, gq)
        _smooth_vjp_2d(x, m, q, origin, dx, shape, strides, gm, gq, ob, qb, xb)
    else:
        _smooth_scatter(x, m, q, origin, dx, shape, strides, OFF, gm, gq)
        _smooth_vjp(x, m, q, origin, dx, shape, strides, OFF, gm, gq, ob, qb, xb)


# ---------------------------------------------------------------------------
# Python API

_OFFSETS = {2: stencil_offsets(2), 3: stencil_offsets(3)}


def grid_args(config):
    """``(origin, dx, shape, strides, offsets)`` as passed to the kernels."""
    shape = np.asarray(config.grid_shape, dtype=np.int64)
    return (np.asarray(config.origin, dtype=np.float64), float(config.dx), shape,
            grid_strides(shape), _OFFSETS[config.dim])


def p2g(ps: ParticleState, config, gravity=None, grid: GridState | None = None) -> GridState:
    """Scatter mass, momentum and internal plus body forces onto a fresh grid."""
    origin, dx, shape, strides, OFF = grid_args(config)
    d = ps.dim
    g = np.asarray(config.gravity if gravity is None else gravity, dtype=np.float64)
    if grid is None:
        grid = GridState.zeros(config.n_nodes, d, ps.x.dtype)
    else:
        grid.m[:] = 0.0
        grid.mv[:] = 0.0
        grid.f[:] = 0.0
    args = (ps.x, ps.v, ps.m, ps.V, ps.sigma, ps.gv, ps.B, SCHEME_CODE[config.scheme], origin, dx,
            shape, strides)
    if d == 2:
        bad = p2g_kernel_2d(*args, g, grid.m, grid.mv, grid.f)
    else:
        bad = p2g_kernel(*args, OFF, g, grid.m, grid.mv, grid.f)
    if bad >= 0:
        raise OutOfDomainError(bad, ps.x[bad])
    return grid


def grid_update(grid: GridState, dt, eps) -> GridState:
    """Explicit momentum update; fills ``v_old``, ``v_pred`` and ``active``.
    ``grid.v`` starts as a copy of ``v_pred`` for the boundary corrections."""
    grid_update_kernel(grid.m, grid.mv, grid.f, float(dt), float(eps), grid.v_old, grid.v_pred,
                       grid.active)
    grid.v[:] = grid.v_pred
    return grid


def g2p(grid: GridState, ps: ParticleState, config) -> ParticleState:
    """Gather updated grid velocities; returns a new state with ``x, v, gv, B, F``
    advanced and the remaining fields shared with ``ps``."""
    origin, dx, shape, strides, OFF = grid_args(config)
    beta = flip_fraction(config.scheme, config.flip_alpha)
    out = ParticleState(x=np.empty_like(ps.x), v=np.empty_like(ps.v), m=ps.m, V=ps.V, rho=ps.rho,
                        sigma=ps.sigma, gv=np.empty_like(ps.gv), B=np.empty_like(ps.B),
                        eps=ps.eps, F=np.empty_like(ps.F))
    args = (ps.x, ps.v, ps.F, SCHEME_CODE[config.scheme], beta, float(config.dt), origin, dx, shape,
            strides)
    tail = (grid.v, grid.v_old, out.x, out.v, out.gv, out.B, out.F)
    if ps.dim == 2:
        bad = g2p_kernel_2d(*args, *tail)
    else:
        bad = g2p_kernel(*args, OFF, *tail)
    if bad >= 0:
        raise OutOfDomainError(bad, out.x[bad] if np.all(np.isfinite(out.x[bad])) else ps.x[bad])
    return out


def moment_matrix(x, config):
    """APIC moment matrices ``D_p = sum_i phi_ip r r^T`` for positions ``x``."""
    origin, dx, shape, strides, OFF = grid_args(config)
    x = np.ascontiguousarray(x, dtype=np.float64)
    out = np.empty((len(x), x.shape[1], x.shape[1]))
    bad = moment_matrix_kernel(x, origin, dx, shape, strides, OFF, out)
    if bad >= 0:
        raise OutOfDomainError(bad, x[bad])
    return out


__all__ = ["p2g", "grid_update", "g2p", "moment_matrix", "flip_fraction", "mass_epsilon"]
