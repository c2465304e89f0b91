"""Quadratic B-spline interpolation on a uniform background grid.

The scalar functions here are the reference definitions; the ``_stencil``
helper is the inlined form used inside the compiled transfer kernels.
"""
from __future__ import annotations

import numpy as np
from numba import njit

from .errors import OutOfDomainError

# second derivatives of the three stencil weights w.r.t. the fractional offset
DDW = (1.0, -2.0, 1.0)


@njit(cache=True)
def _omega(xi):
    a = abs(xi)
    if a < 0.5:
        return 0.75 - a * a
    if a < 1.5:
        return 0.5 * a * a - 1.5 * a + 1.125
    return 0.0


@njit(cache=True)
def _domega(xi):
    a = abs(xi)
    s = 1.0 if xi >= 0.0 else -1.0
    if a < 0.5:
        return -2.0 * xi
    if a < 1.5:
        return s * (a - 1.5)
    return 0.0


def bspline_weight(xi):
    """Quadratic B-spline ``omega(xi)``; accepts scalars or arrays."""
    xi = np.asarray(xi, dtype=float)
    a = np.abs(xi)
    out = np.where(a < 0.5, 0.75 - a**2, np.where(a < 1.5, 0.5 * a**2 - 1.5 * a + 1.125, 0.0))
    return float(out) if out.ndim == 0 else out


def bspline_derivative(xi):
    xi = np.asarray(xi, dtype=float)
    a = np.abs(xi)
    out = np.where(a < 0.5, -2.0 * xi, np.where(a < 1.5, np.sign(xi) * (a - 1.5), 0.0))
    return float(out) if out.ndim == 0 else out


@njit(cache=True, inline="always")
def _stencil(xp, origin, inv_dx, shape, w, dw, base, fx):
    """Fill per-axis weights for one particle. Returns False when the 3-node
    stencil would leave the grid."""
    d = xp.shape[0]
    for a in range(d):
        u = (xp[a] - origin[a]) * inv_dx
        b = int(np.floor(u - 0.5))
        if b < 0 or b + 2 > shape[a] - 1:
            return False
        f = u - b
        base[a] = b
        fx[a] = f
        w[a, 0] = 0.5 * (1.5 - f) ** 2
        w[a, 1] = 0.75 - (f - 1.0) ** 2
        w[a, 2] = 0.5 * (f - 0.5) ** 2
        dw[a, 0] = f - 1.5
        dw[a, 1] = -2.0 * (f - 1.0)
        dw[a, 2] = f - 0.5
    return True


@njit(cache=True, inline="always")
def _node(k, d, base, strides, offs):
    """Decode stencil slot ``k`` into per-axis offsets and the flat node id."""
    node = 0
    kk = k
    for a in range(d):
        j = kk % 3
        kk //= 3
        offs[a] = j
        node += (base[a] + j) * strides[a]
    return node


@njit(cache=True)
def _shape_and_grad(xp, origin, dx, shape, strides):
    d = xp.shape[0]
    nk = 3**d
    w = np.empty((d, 3))
    dw = np.empty((d, 3))
    base = np.empty(d, dtype=np.int64)
    fx = np.empty(d)
    offs = np.empty(d, dtype=np.int64)
    nodes = np.empty(nk, dtype=np.int64)
    phi = np.empty(nk)
    grad = np.empty((nk, d))
    if not _stencil(xp, origin, 1.0 / dx, shape, w, dw, base, fx):
        return False, base, nodes, phi, grad
    for k in range(nk):
        nodes[k] = _node(k, d, base, strides, offs)
        p = 1.0
        for a in range(d):
            p *= w[a, offs[a]]
        phi[k] = p
        for a in range(d):
            g = dw[a, offs[a]] / dx
            for b in range(d):
                if b != a:
                    g *= w[b, offs[b]]
            grad[k, a] = g
    return True, base, nodes, phi, grad


def grid_strides(shape):
    """Flat-index strides with axis 0 varying fastest."""
    strides = np.ones(len(shape), dtype=np.int64)
    for a in range(1, len(shape)):
        strides[a] = strides[a - 1] * shape[a - 1]
    return strides


def node_positions(origin, dx, shape):
    """Coordinates of every grid node, shape ``(prod(shape), d)`` in flat order."""
    axes = [origin[a] + dx * np.arange(shape[a]) for a in range(len(shape))]
    mesh = np.meshgrid(*axes, indexing="ij")
    # flat order has axis 0 fastest, i.e. Fortran order
    return np.stack([m.ravel(order="F") for m in mesh], axis=1)


def shape_and_grad(xp, dx, origin, shape, index=0):
    """Weights and gradients of the ``3**d`` stencil nodes around ``xp``.

    Returns ``(base, nodes, phi, grad)`` where ``base`` is the lowest per-axis
    node index, ``nodes`` the flat node ids, ``phi`` the tensor-product weights
    and ``grad`` their spatial gradients (already scaled by ``1/dx``).
    """
    xp = np.asarray(xp, dtype=float)
    origin = np.asarray(origin, dtype=float)
    shape = np.asarray(shape, dtype=np.int64)
    ok, base, nodes, phi, grad = _shape_and_grad(xp, origin, float(dx), shape, grid_strides(shape))
    if not ok:
        raise OutOfDomainError(index, xp)
    return base, nodes, phi, grad
