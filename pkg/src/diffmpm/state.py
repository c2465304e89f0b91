"""Simulation state, configuration and scene construction."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ValidationError
from .fields import VelocityField

SCHEMES = ("pic", "flip", "blend", "apic", "tpic")
SCHEME_CODE = {name: i for i, name in enumerate(SCHEMES)}

# fields carried through the adjoint; eps and F are diagnostics only
DIFF_FIELDS = ("x", "v", "sigma", "rho", "V", "gv", "B")


@dataclass
class ParticleState:
    x: np.ndarray      # (N, d) position [m]
    v: np.ndarray      # (N, d) velocity [m/s]
    m: np.ndarray      # (N,) mass [kg], constant
    V: np.ndarray      # (N,) volume [m^d]
    rho: np.ndarray    # (N,) density [kg/m^d]
    sigma: np.ndarray  # (N, 3, 3) Cauchy stress [Pa]; plane strain in 2D
    gv: np.ndarray     # (N, d, d) velocity gradient [1/s]
    B: np.ndarray      # (N, d, d) affine matrix (APIC only, zeros otherwise)
    eps: np.ndarray    # (N,) equivalent plastic strain
    F: np.ndarray      # (N, d, d) deformation gradient (diagnostic)

    @property
    def n(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    def copy(self) -> "ParticleState":
        return ParticleState(**{f.name: getattr(self, f.name).copy() for f in fields(self)})

    def astype(self, dtype) -> "ParticleState":
        return ParticleState(**{f.name: getattr(self, f.name).astype(dtype) for f in fields(self)})

    def arrays(self):
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def empty(cls, n, d, dtype=np.float64) -> "ParticleState":
        eye = np.broadcast_to(np.eye(d, dtype=dtype), (n, d, d)).copy()
        return cls(
            x=np.zeros((n, d), dtype), v=np.zeros((n, d), dtype), m=np.zeros(n, dtype),
            V=np.zeros(n, dtype), rho=np.zeros(n, dtype), sigma=np.zeros((n, 3, 3), dtype),
            gv=np.zeros((n, d, d), dtype), B=np.zeros((n, d, d), dtype),
            eps=np.zeros(n, dtype), F=eye,
        )


@dataclass
class GridState:
    """Per-step nodal scratch data; arrays are flat over nodes (axis 0 fastest)."""

    m: np.ndarray       # (G,) mass
    mv: np.ndarray      # (G, d) momentum
    f: np.ndarray       # (G, d) force
    v_old: np.ndarray   # (G, d) velocity from momentum, before the update
    v_pred: np.ndarray  # (G, d) updated velocity before boundary corrections
    v: np.ndarray       # (G, d) corrected velocity
    active: np.ndarray  # (G,) bool, m > mass_epsilon

    @classmethod
    def zeros(cls, n_nodes, d, dtype=np.float64) -> "GridState":
        z = lambda: np.zeros((n_nodes, d), dtype)
        return cls(m=np.zeros(n_nodes, dtype), mv=z(), f=z(), v_old=z(), v_pred=z(), v=z(),
                   active=np.zeros(n_nodes, dtype=bool))

    @property
    def a(self):
        """Nodal acceleration ``f / m`` (zero on inactive nodes)."""
        out = np.zeros_like(self.f)
        out[self.active] = self.f[self.active] / self.m[self.active, None]
        return out


@dataclass
class SimState:
    particles: ParticleState
    step: int = 0
    dt: float = 0.0

    @property
    def t(self) -> float:
        return self.step * self.dt

    def copy(self) -> "SimState":
        return SimState(self.particles.copy(), self.step, self.dt)


@dataclass(frozen=True)
class Box:
    lo: tuple
    hi: tuple
    velocity: VelocityField = field(default_factory=lambda: None, compare=False)

    def contains(self, pts):
        lo, hi = np.asarray(self.lo), np.asarray(self.hi)
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def bounds(self):
        return np.asarray(self.lo, float), np.asarray(self.hi, float)

    def measure(self):
        return float(np.prod(np.asarray(self.hi) - np.asarray(self.lo)))


@dataclass(frozen=True)
class Cylinder:
    """Vertical cylinder (3D only); axis along the last coordinate."""

    center: tuple
    radius: float
    z_range: tuple
    velocity: VelocityField = field(default_factory=lambda: None, compare=False)

    def contains(self, pts):
        c = np.asarray(self.center)
        r2 = np.sum((pts[:, :2] - c) ** 2, axis=1)
        z = pts[:, 2]
        return (r2 <= self.radius**2) & (z >= self.z_range[0]) & (z <= self.z_range[1])

    def bounds(self):
        c = np.asarray(self.center, float)
        lo = np.array([c[0] - self.radius, c[1] - self.radius, self.z_range[0]])
        hi = np.array([c[0] + self.radius, c[1] + self.radius, self.z_range[1]])
        return lo, hi

    def measure(self):
        return math.pi * self.radius**2 * (self.z_range[1] - self.z_range[0])


@dataclass
class SimConfig:
    """Grid, time and transfer settings.

    ``extents`` is the size of the wall-bounded box whose lower corner is the
    coordinate origin; the grid carries ``pad`` ghost cells beyond each wall.
    """

    dx: float
    extents: tuple
    dt: float
    n_steps: int
    gravity: tuple
    scheme: str = "flip"
    flip_alpha: float = 1.0
    ppc: int | None = None
    precision: str = "f64"
    snapshot_stride: int = 1000
    pad: int = 1
    seed: int = 0

    def __post_init__(self):
        self.extents = tuple(float(e) for e in self.extents)
        self.gravity = tuple(float(g) for g in self.gravity)
        if self.scheme not in SCHEMES:
            raise ValidationError(f"unknown transfer scheme '{self.scheme}'")
        if not 0.0 <= self.flip_alpha <= 1.0:
            raise ValidationError("flip_alpha must lie in [0, 1]")
        if self.dx <= 0:
            raise ValidationError("domain.dx must be positive")
        if self.dt < 0:
            raise ValidationError("time.dt must be non-negative")
        if len(self.gravity) != len(self.extents):
            raise ValidationError("gravity dimension does not match domain dimension")
        if self.dim not in (2, 3):
            raise ValidationError("only 2D and 3D domains are supported")
        if self.ppc is None:
            self.ppc = 2**self.dim
        if self.precision not in ("f32", "f64"):
            raise ValidationError("precision must be f32 or f64")

    @property
    def dim(self) -> int:
        return len(self.extents)

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32

    @property
    def origin(self) -> np.ndarray:
        return np.full(self.dim, -self.pad * self.dx)

    @property
    def cells(self) -> np.ndarray:
        return np.array([int(round(e / self.dx)) for e in self.extents], dtype=np.int64)

    @property
    def grid_shape(self) -> np.ndarray:
        return self.cells + 1 + 2 * self.pad

    @property
    def n_nodes(self) -> int:
        return int(np.prod(self.grid_shape))

    def with_(self, **kw) -> "SimConfig":
        return replace(self, **kw)


def _lattice(config: SimConfig, lo, hi):
    """Regular sub-cell lattice points of every cell overlapping ``[lo, hi]``."""
    d = config.dim
    n_side = int(round(config.ppc ** (1.0 / d)))
    if n_side**d != config.ppc:
        raise ValidationError(f"particles_per_cell={config.ppc} is not a perfect {d}-th power")
    offs = (np.arange(n_side) + 0.5) / n_side
    axes = []
    for a in range(d):
        c0 = int(math.floor(lo[a] / config.dx + 1e-9))
        c1 = int(math.ceil(hi[a] / config.dx - 1e-9))
        cells = np.arange(c0, c1)
        axes.append(((cells[:, None] + offs[None, :]) * config.dx).ravel())
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


def seed_particles(config: SimConfig, regions):
    """Lattice positions inside ``regions`` and the region id of each particle.

    Particles are ordered region by region and cell by cell, which fixes the
    accumulation order of every grid reduction.
    """
    if not regions:
        raise ValidationError("scene has no geometry regions")
    d = config.dim
    ext = np.asarray(config.extents)
    pts, ids = [], []
    for k, region in enumerate(regions):
        lo, hi = region.bounds()
        if len(lo) != d:
            raise ValidationError(f"geometry[{k}] dimension does not match the domain")
        if np.any(hi <= lo) or region.measure() <= 0:
            raise ValidationError(f"geometry[{k}] is empty")
        if np.any(lo < -1e-12) or np.any(hi > ext + 1e-12):
            raise ValidationError(f"geometry[{k}] escapes the wall-bounded domain")
        cand = _lattice(config, lo, hi)
        p = cand[region.contains(cand)]
        if len(p) == 0:
            raise ValidationError(f"geometry[{k}] contains no particles at this resolution")
        pts.append(p)
        ids.append(np.full(len(p), k, dtype=np.int64))
    return np.concatenate(pts), np.concatenate(ids)


def initial_velocities(regions, x, region_id):
    v = np.zeros_like(x)
    for k, region in enumerate(regions):
        sel = region_id == k
        if region.velocity is not None:
            v[sel] = region.velocity(x[sel])
    return v


def init_scene(config: SimConfig, regions, material):
    """Seed particles in ``regions`` and return ``(ParticleState, GridState)``.

    Each region may carry an initial-velocity generator; regions without one
    start at rest.
    """
    x, ids = seed_particles(config, regions)
    n, d = x.shape
    ps = ParticleState.empty(n, d, config.dtype)
    mp = material.rho0 * config.dx**d / config.ppc
    ps.x[:] = x
    ps.v[:] = initial_velocities(regions, x, ids)
    ps.m[:] = mp
    ps.rho[:] = material.rho0
    ps.V[:] = mp / material.rho0
    return ps, GridState.zeros(config.n_nodes, d, config.dtype)


def mass_epsilon(m: np.ndarray) -> float:
    return 1e-12 * float(np.max(m))
