"""Grid boundary conditions: domain walls, rigid obstacles and Coulomb friction walls.

All corrections act on nodal velocities after the explicit update, in the
fixed order walls -> obstacles -> Coulomb walls.  Each node-level rule is a
piecewise-linear map; the ``*_vjp`` kernels apply its transpose on the branch
that the forward pass selected (branches are re-derived from the same inputs,
so they always agree with the forward decision).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .errors import ValidationError

WALL_KINDS = ("slip", "no_slip", "fixed", "coulomb", "free")

# wall name -> (axis, side); "bottom"/"top" refer to the last (vertical) axis
_AXIS_NAMES = {"x": 0, "y": 1, "z": 2}


def parse_wall_name(name: str, dim: int):
    aliases = {"left": "x-", "right": "x+", "bottom": "v-", "top": "v+"}
    key = aliases.get(name, name)
    if len(key) != 2 or key[1] not in "+-":
        raise ValidationError(f"unknown wall '{name}'")
    axis = dim - 1 if key[0] == "v" else _AXIS_NAMES.get(key[0])
    if axis is None or axis >= dim:
        raise ValidationError(f"unknown wall '{name}' for a {dim}D domain")
    return axis, (0 if key[1] == "-" else 1)


@dataclass
class Segment:
    lo: float
    hi: float
    mu: float


@dataclass
class WallSpec:
    kind: str = "slip"
    segments: list = field(default_factory=list)
    segment_axis: int = 0

    def __post_init__(self):
        if self.kind not in WALL_KINDS:
            raise ValidationError(f"unknown wall kind '{self.kind}'")
        if self.kind == "coulomb":
            if not self.segments:
                raise ValidationError("coulomb wall needs at least one segment")
            for k, s in enumerate(self.segments):
                if s.mu < 0:
                    raise ValidationError(f"segment {k} has negative friction")
                if k and abs(s.lo - self.segments[k - 1].hi) > 1e-12:
                    raise ValidationError("coulomb segments must partition the wall contiguously")

    @property
    def mu(self):
        return np.array([s.mu for s in self.segments], dtype=float)

    @property
    def edges(self):
        return np.array([self.segments[0].lo] + [s.hi for s in self.segments], dtype=float)


@dataclass
class ObstacleBox:
    """Stationary axis-aligned rigid box."""

    lo: tuple
    hi: tuple


@dataclass
class BoundarySpec:
    walls: dict = field(default_factory=dict)
    obstacles: list = field(default_factory=list)

    @classmethod
    def all_slip(cls, dim):
        names = ["x-", "x+", "y-", "y+", "z-", "z+"][: 2 * dim]
        return cls(walls={n: WallSpec("slip") for n in names})

    def coulomb_walls(self):
        return [(name, w) for name, w in self.walls.items() if w.kind == "coulomb"]

    def friction(self) -> np.ndarray:
        """Concatenated per-segment coefficients of all Coulomb walls."""
        parts = [w.mu for _, w in self.coulomb_walls()]
        return np.concatenate(parts) if parts else np.zeros(0)


def segment_index(coord, edges):
    """Segment id of a coordinate; edge points go to the lower-index segment,
    coordinates outside the wall clamp to the first/last segment."""
    n = len(edges) - 1
    k = np.searchsorted(edges[1:-1], coord, side="left")
    return np.clip(k, 0, n - 1)


@dataclass
class BoundaryData:
    """Node lists derived from a :class:`BoundarySpec` for a given grid."""

    slip_nodes: np.ndarray     # (S,) node ids
    slip_axes: np.ndarray      # (S,) axis whose component is zeroed
    fixed_nodes: np.ndarray    # (Q,)
    obs_nodes: np.ndarray      # (O,)
    obs_normals: np.ndarray    # (O, d) outward obstacle normal
    coul_nodes: np.ndarray     # (C,)
    coul_normals: np.ndarray   # (C, d) contact normal pointing into the wall
    coul_seg: np.ndarray       # (C,) index into the friction vector
    n_friction: int


def build_boundary(spec: BoundarySpec, config) -> BoundaryData:
    d = config.dim
    shape = config.grid_shape
    band = 2
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in shape], indexing="ij"), axis=-1)
    idx = idx.reshape(-1, d, order="F")
    pos = config.origin + idx * config.dx
    node_ids = np.arange(len(idx))

    slip_n, slip_a, fixed, coul_n, coul_norm, coul_seg = [], [], [], [], [], []
    seg_offset = 0
    for name, wall in spec.walls.items():
        axis, side = parse_wall_name(name, d)
        if side == 0:
            in_band = idx[:, axis] < band
        else:
            in_band = idx[:, axis] >= shape[axis] - band
        nodes = node_ids[in_band]
        if wall.kind == "slip":
            slip_n.append(nodes)
            slip_a.append(np.full(len(nodes), axis))
        elif wall.kind in ("no_slip", "fixed"):
            fixed.append(nodes)
        elif wall.kind == "coulomb":
            normal = np.zeros(d)
            normal[axis] = -1.0 if side == 0 else 1.0
            seg = segment_index(pos[nodes, wall.segment_axis], wall.edges)
            coul_n.append(nodes)
            coul_norm.append(np.broadcast_to(normal, (len(nodes), d)))
            coul_seg.append(seg + seg_offset)
            seg_offset += len(wall.segments)

    obs_n, obs_norm = [], []
    for k, ob in enumerate(spec.obstacles):
        lo, hi = np.asarray(ob.lo, float), np.asarray(ob.hi, float)
        if len(lo) != d or np.any(hi <= lo):
            raise ValidationError(f"obstacles[{k}] is malformed")
        if np.any(lo < 0) or np.any(hi > np.asarray(config.extents)):
            raise ValidationError(f"obstacles[{k}] lies outside the domain")
        inside = np.all((pos >= lo - 1e-12) & (pos <= hi + 1e-12), axis=1)
        p = pos[inside]
        # nearest face decides the normal
        depth = np.concatenate([p - lo, hi - p], axis=1)
        face = np.argmin(depth, axis=1)
        normals = np.zeros((len(p), d))
        ax = face % d
        normals[np.arange(len(p)), ax] = np.where(face < d, -1.0, 1.0)
        obs_n.append(node_ids[inside])
        obs_norm.append(normals)

    cat = lambda lst, dt=np.int64: np.concatenate(lst).astype(dt) if lst else np.zeros(0, dt)
    catv = lambda lst: np.concatenate(lst).astype(float) if lst else np.zeros((0, d))
    return BoundaryData(
        slip_nodes=cat(slip_n), slip_axes=cat(slip_a), fixed_nodes=cat(fixed),
        obs_nodes=cat(obs_n), obs_normals=catv(obs_norm),
        coul_nodes=cat(coul_n), coul_normals=catv(coul_norm), coul_seg=cat(coul_seg),
        n_friction=seg_offset,
    )


# ---------------------------------------------------------------------------
# node-level rules (reference forms, also used by tests)

def wall_correct(v, kind, normal_axes):
    """Apply one node's wall rules; ``normal_axes`` lists the walls meeting there."""
    v = np.array(v, dtype=float)
    if kind in ("no_slip", "fixed"):
        return np.zeros_like(v)
    for a in normal_axes:
        v[a] = 0.0
    return v


def obstacle_correct(v, n):
    v = np.asarray(v, dtype=float)
    n = np.asarray(n, dtype=float)
    vn = v @ n
    if vn < 0.0:
        return v - vn * n
    return v.copy()


def coulomb_correct(v, n, mu):
    out = np.asarray(v, dtype=float).copy()
    _coulomb_node(out, np.asarray(n, dtype=float), float(mu))
    return out


@njit(cache=True)
def _coulomb_node(v, n, mu):
    d = v.shape[0]
    vn = 0.0
    for a in range(d):
        vn += v[a] * n[a]
    if vn <= 0.0:
        return
    s2 = 0.0
    for a in range(d):
        t = v[a] - vn * n[a]
        s2 += t * t
    s = np.sqrt(s2)
    if s == 0.0:
        for a in range(d):
            v[a] = v[a] - vn * n[a]
        return
    mup = mu if mu < s / vn else s / vn
    c = 1.0 - mup * vn / s
    for a in range(d):
        v[a] = (v[a] - vn * n[a]) * c


@njit(cache=True)
def apply_boundary_kernel(v, active, slip_nodes, slip_axes, fixed_nodes, obs_nodes, obs_normals,
                          coul_nodes, coul_normals, coul_seg, mu):
    d = v.shape[1]
    for k in range(slip_nodes.shape[0]):
        i = slip_nodes[k]
        if active[i]:
            v[i, slip_axes[k]] = 0.0
    for k in range(fixed_nodes.shape[0]):
        i = fixed_nodes[k]
        if active[i]:
            for a in range(d):
                v[i, a] = 0.0
    for k in range(obs_nodes.shape[0]):
        i = obs_nodes[k]
        if not active[i]:
            continue
        vn = 0.0
        for a in range(d):
            vn += v[i, a] * obs_normals[k, a]
        if vn < 0.0:
            for a in range(d):
                v[i, a] -= vn * obs_normals[k, a]
    for k in range(coul_nodes.shape[0]):
        i = coul_nodes[k]
        if active[i]:
            _coulomb_node(v[i], coul_normals[k], mu[coul_seg[k]])


@njit(cache=True)
def boundary_vjp_kernel(v_pred, vbar, active, slip_nodes, slip_axes, fixed_nodes, obs_nodes,
                        obs_normals, coul_nodes, coul_normals, coul_seg, mu, mu_bar):
    """Transpose of :func:`apply_boundary_kernel` at the forward branch.

    ``v_pred`` is the velocity before corrections; ``vbar`` holds the
    cotangent of the corrected velocity and is overwritten in place with the
    cotangent of ``v_pred``.  Friction cotangents accumulate into ``mu_bar``.
    """
    d = v_pred.shape[1]
    # replay the forward corrections, keeping every rule's input
    v = v_pred.copy()
    for k in range(slip_nodes.shape[0]):
        i = slip_nodes[k]
        if active[i]:
            v[i, slip_axes[k]] = 0.0
    for k in range(fixed_nodes.shape[0]):
        i = fixed_nodes[k]
        if active[i]:
            for a in range(d):
                v[i, a] = 0.0
    obs_vn = np.zeros(obs_nodes.shape[0])
    for k in range(obs_nodes.shape[0]):
        i = obs_nodes[k]
        if not active[i]:
            continue
        vn = 0.0
        for a in range(d):
            vn += v[i, a] * obs_normals[k, a]
        obs_vn[k] = vn
        if vn < 0.0:
            for a in range(d):
                v[i, a] -= vn * obs_normals[k, a]
    U = np.zeros((coul_nodes.shape[0], d))
    for k in range(coul_nodes.shape[0]):
        i = coul_nodes[k]
        if active[i]:
            for a in range(d):
                U[k, a] = v[i, a]
            _coulomb_node(v[i], coul_normals[k], mu[coul_seg[k]])

    for k in range(coul_nodes.shape[0] - 1, -1, -1):
        i = coul_nodes[k]
        if not active[i]:
            continue
        u = U[k]
        n = coul_normals[k]
        vn = 0.0
        for a in range(d):
            vn += u[a] * n[a]
        if vn <= 0.0:
            continue
        s2 = 0.0
        for a in range(d):
            t = u[a] - vn * n[a]
            s2 += t * t
        s = np.sqrt(s2)
        if s == 0.0:
            # pure normal approach: v = P u
            pn = 0.0
            for a in range(d):
                pn += vbar[i, a] * n[a]
            for a in range(d):
                vbar[i, a] -= pn * n[a]
            continue
        m = mu[coul_seg[k]]
        if m < s / vn:
            c = 1.0 - m * vn / s
            gt = 0.0
            for a in range(d):
                gt += vbar[i, a] * (u[a] - vn * n[a])
            mu_bar[coul_seg[k]] += -gt * vn / s
            vn_bar = -gt * m / s
            coef = gt * m * vn / (s * s * s)
            # vt_bar = c g + coef vt, then u_bar = P vt_bar + vn_bar n
            dot = 0.0
            for a in range(d):
                vbar[i, a] = c * vbar[i, a] + coef * (u[a] - vn * n[a])
                dot += vbar[i, a] * n[a]
            for a in range(d):
                vbar[i, a] += (vn_bar - dot) * n[a]
        else:
            for a in range(d):
                vbar[i, a] = 0.0

    for k in range(obs_nodes.shape[0] - 1, -1, -1):
        i = obs_nodes[k]
        if active[i] and obs_vn[k] < 0.0:
            pn = 0.0
            for a in range(d):
                pn += vbar[i, a] * obs_normals[k, a]
            for a in range(d):
                vbar[i, a] -= pn * obs_normals[k, a]

    for k in range(fixed_nodes.shape[0]):
        i = fixed_nodes[k]
        if active[i]:
            for a in range(d):
                vbar[i, a] = 0.0
    for k in range(slip_nodes.shape[0]):
        i = slip_nodes[k]
        if active[i]:
            vbar[i, slip_axes[k]] = 0.0


def apply_boundary(v, active, bd: BoundaryData, mu):
    """Apply all corrections in place to nodal velocities ``v``."""
    apply_boundary_kernel(v, active, bd.slip_nodes, bd.slip_axes, bd.fixed_nodes, bd.obs_nodes,
                          bd.obs_normals, bd.coul_nodes, bd.coul_normals, bd.coul_seg,
                          np.asarray(mu, dtype=np.float64))
    return v


def boundary_vjp(v_pred, vbar, active, bd: BoundaryData, mu):
    """Returns ``(v_pred_bar, mu_bar)``; ``vbar`` is not modified."""
    vb = vbar.copy()
    mu = np.asarray(mu, dtype=np.float64)
    mu_bar = np.zeros(len(mu))
    boundary_vjp_kernel(v_pred, vb, active, bd.slip_nodes, bd.slip_axes, bd.fixed_nodes,
                        bd.obs_nodes, bd.obs_normals, bd.coul_nodes, bd.coul_normals, bd.coul_seg,
                        mu, mu_bar)
    return vb, mu_bar


def apply_wall_bc(v, spec: BoundarySpec, config, active=None):
    """Wall rules only (no obstacles or friction) on a copy of ``v``."""
    walls_only = BoundarySpec(walls={k: w for k, w in spec.walls.items() if w.kind != "coulomb"})
    bd = build_boundary(walls_only, config)
    out = np.array(v, dtype=float)
    act = np.ones(len(out), bool) if active is None else active
    return apply_boundary(out, act, bd, np.zeros(0))
