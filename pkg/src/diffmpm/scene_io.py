"""Scene files, snapshot and observation persistence, and flow metrics.

Scenes and inverse problems are YAML documents checked against a JSON
schema.  Snapshots and observations are whitespace-separated text with a
``#`` header; floats are written with 17 significant digits so a round trip
through a file is exact.
"""
from __future__ import annotations

import math
import os
import re
from dataclasses import dataclass, replace

import jsonschema
import numpy as np
import yaml

from .contact import BoundarySpec, ObstacleBox, Segment, WallSpec
from .errors import MPMError, ValidationError
from .fields import ConstantVelocity, LinearProfile, MLPProfile, ParabolicSine, VelocityField
from .inverse import (FluidParameter, FrictionParameter, InverseProblem, ObservationSet,
                      ParameterField, VelocityParameter, collect_snapshots, eulerian_template,
                      final_window, lagrangian_template, monitor_grid, observe_eulerian,
                      observe_lagrangian, sample_indices, twin_observations)
from .materials import DruckerPrager, Fluid
from .state import SCHEMES, Box, Cylinder, ParticleState, SimConfig
from .stepper import Scene

FORMAT_VERSION = 1


class SceneFileError(ValidationError):
    """Unreadable or schema-violating scene/problem file."""


# ---------------------------------------------------------------------------
# schema

_NUM = {"type": "number"}
_VEC = {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 3}

_VELOCITY = {
    "oneOf": [
        {"type": "object", "additionalProperties": False, "required": ["type", "value"],
         "properties": {"type": {"const": "constant"},
                        "value": {**_VEC, "description": "velocity [m/s]"}}},
        {"type": "object", "additionalProperties": False, "required": ["type", "alpha", "H0"],
         "description": "v_x = alpha (H0 - (y - y0))",
         "properties": {"type": {"const": "linear"},
                        "alpha": {**_NUM, "description": "shear rate [1/s]"},
                        "H0": {**_NUM, "exclusiveMinimum": 0, "description": "column height [m]"},
                        "y0": {**_NUM, "description": "base elevation [m]"}}},
        {"type": "object", "additionalProperties": False, "required": ["type", "H0"],
         "description": "v_x = A (1 - s^2) + B sin(4 pi s), s = (y - y0)/H0",
         "properties": {"type": {"const": "parabolic_sine"},
                        "H0": {**_NUM, "exclusiveMinimum": 0, "description": "column height [m]"},
                        "amplitude": {**_NUM, "description": "A [m/s]"},
                        "perturbation": {**_NUM, "description": "B [m/s]"},
                        "y0": _NUM}},
        {"type": "object", "additionalProperties": False, "required": ["type", "H0"],
         "description": "v_x = offset + scale * MLP((y - y0)/H0) with rectified-linear hidden layers",
         "properties": {"type": {"const": "mlp"},
                        "H0": {**_NUM, "exclusiveMinimum": 0, "description": "input scale [m]"},
                        "layers": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                   "minItems": 2},
                        "y0": _NUM,
                        "out_offset": {**_NUM, "description": "[m/s]"},
                        "out_scale": {**_NUM, "description": "[m/s]"}}},
    ]
}

_REGION = {
    "oneOf": [
        {"type": "object", "additionalProperties": False, "required": ["type", "lo", "hi"],
         "properties": {"type": {"const": "box"}, "lo": {**_VEC, "description": "[m]"},
                        "hi": {**_VEC, "description": "[m]"}, "velocity": _VELOCITY}},
        {"type": "object", "additionalProperties": False,
         "required": ["type", "center", "radius", "z_range"],
         "properties": {"type": {"const": "cylinder"},
                        "center": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2,
                                   "description": "axis position (x, y) [m]"},
                        "radius": {**_NUM, "exclusiveMinimum": 0, "description": "[m]"},
                        "z_range": {"type": "array", "items": _NUM, "minItems": 2, "maxItems": 2,
                                    "description": "[m]"},
                        "velocity": _VELOCITY}},
    ]
}

_WALL = {
    "oneOf": [
        {"enum": ["slip", "no_slip", "fixed", "free"]},
        {"type": "object", "additionalProperties": False, "required": ["kind", "segments"],
         "properties": {
             "kind": {"const": "coulomb"},
             "segment_axis": {"type": "integer", "minimum": 0, "maximum": 2},
             "segments": {"type": "array", "minItems": 1, "items": {
                 "type": "object", "additionalProperties": False, "required": ["lo", "hi", "mu"],
                 "properties": {"lo": {**_NUM, "description": "[m]"}, "hi": {**_NUM, "description": "[m]"},
                                "mu": {**_NUM, "minimum": 0, "description": "friction coefficient [-]"}}}}}},
    ]
}

SCENE_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["domain", "time", "material", "geometry"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "domain": {"type": "object", "additionalProperties": False, "required": ["extents", "dx"],
                   "properties": {"extents": {**_VEC, "description": "wall-bounded box size [m]"},
                                  "dx": {**_NUM, "exclusiveMinimum": 0, "description": "grid spacing [m]"},
                                  "pad": {"type": "integer", "minimum": 1,
                                          "description": "ghost cells beyond each wall"}}},
        "time": {"type": "object", "additionalProperties": False, "required": ["dt", "n_steps"],
                 "properties": {"dt": {**_NUM, "minimum": 0, "description": "time step [s]"},
                                "n_steps": {"type": "integer", "minimum": 0},
                                "snapshot_stride": {"type": "integer", "minimum": 1}}},
        "gravity": {**_VEC, "description": "body acceleration [m/s^2]"},
        "material": {"oneOf": [
            {"type": "object", "additionalProperties": False, "required": ["type", "rho0", "c"],
             "properties": {"type": {"const": "fluid"},
                            "rho0": {**_NUM, "description": "reference density [kg/m^3]"},
                            "c": {**_NUM, "description": "numerical sound speed [m/s]"},
                            "mu": {**_NUM, "description": "dynamic viscosity [Pa s]"},
                            "viscous_rate_form": {"type": "boolean"},
                            "density_smoothing": {"type": "boolean"}}},
            {"type": "object", "additionalProperties": False,
             "required": ["type", "rho0", "K", "nu", "phi_deg"],
             "properties": {"type": {"const": "drucker_prager"},
                            "rho0": {**_NUM, "description": "density [kg/m^3]"},
                            "K": {**_NUM, "description": "bulk modulus [Pa]"},
                            "nu": {**_NUM, "description": "Poisson ratio [-]"},
                            "phi_deg": {**_NUM, "description": "friction angle [deg]"},
                            "psi_deg": {**_NUM, "description": "dilation angle [deg]"},
                            "cohesion": {**_NUM, "description": "[Pa]"},
                            "sigma_t": {**_NUM, "description": "tension cutoff [Pa]"}}},
        ]},
        "geometry": {"type": "array", "minItems": 1, "items": _REGION},
        "boundaries": {"type": "object", "additionalProperties": False,
                       "patternProperties": {"^(x|y|z)[-+]$": _WALL}},
        "obstacles": {"type": "array", "items": {
            "type": "object", "additionalProperties": False, "required": ["lo", "hi"],
            "properties": {"lo": _VEC, "hi": _VEC}}},
        "transfer": {"type": "object", "additionalProperties": False, "required": ["scheme"],
                     "properties": {"scheme": {"enum": list(SCHEMES)},
                                    "alpha": {**_NUM, "minimum": 0, "maximum": 1,
                                              "description": "FLIP fraction of the blend scheme"}}},
        "particles_per_cell": {"type": "integer", "minimum": 1},
        "precision": {"enum": ["f32", "f64"]},
        "seed": {"type": "integer"},
        "reference": {"type": "object", "description": "published values kept as metadata"},
    },
}

PROBLEM_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "required": ["scene", "parameter", "truth", "initial", "observations"],
    "properties": {
        "name": {"type": "string"},
        "description": {"type": "string"},
        "scene": {"type": "string", "description": "scene file, relative to this file"},
        "parameter": {"type": "object", "additionalProperties": False, "required": ["kind"],
                      "properties": {"kind": {"enum": ["velocity", "friction", "fluid"]},
                                     "trainable": {"type": "array", "items": {"type": "integer"}},
                                     "names": {"type": "array", "items": {"enum": ["c", "mu"]}}}},
        "truth": {"oneOf": [{"type": "array", "items": _NUM}, {"type": "object"}],
                  "description": "generating values, or an initial-velocity block for the twin run"},
        "initial": {"oneOf": [{"type": "array", "items": _NUM}, {"type": "object"}],
                    "description": "starting values, or an initial-velocity block"},
        "observations": {"type": "object", "additionalProperties": False, "required": ["mode"],
                         "properties": {
                             "mode": {"enum": ["lagrangian", "eulerian"]},
                             "field": {"enum": ["x", "v"]},
                             "n_particles": {"oneOf": [{"type": "integer", "minimum": 1},
                                                       {"const": "all"}]},
                             "frames": {"type": "integer", "minimum": 1},
                             "stride": {"type": "integer", "minimum": 1},
                             "window": {"enum": ["final", "uniform"]},
                             "monitors": {"type": "object", "additionalProperties": False,
                                          "required": ["xs", "ys", "half_size"],
                                          "properties": {"xs": {"type": "array", "items": _NUM},
                                                         "ys": {"type": "array", "items": _NUM},
                                                         "half_size": {**_NUM, "description": "[m]"}}}}},
        "optimizer": {"type": "object", "additionalProperties": False,
                      "properties": {"epochs": {"type": "integer", "minimum": 1},
                                     "lr": {**_NUM, "exclusiveMinimum": 0},
                                     "lr_decay": _NUM,
                                     "lr_decay_every": {"type": "integer", "minimum": 1},
                                     "segments": {"type": "integer", "minimum": 1},
                                     "plateau_tol": _NUM,
                                     "loss_tol": _NUM}},
        "seed": {"type": "integer"},
        "reference": {"type": "object"},
    },
}


def _error_path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    if err.validator == "required":
        m = re.match(r"'([^']+)' is a required property", err.message)
        if m:
            parts.append(m.group(1))
    elif err.validator == "additionalProperties":
        m = re.search(r"\('([^']+)'", err.message)
        if m:
            parts.append(m.group(1))
    return ".".join(parts) or "<root>"


def validate_document(doc, schema, what="scene") -> None:
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(list(e.absolute_path)), e.message))
    if errors:
        err = jsonschema.exceptions.best_match(errors)
        raise SceneFileError(f"{what} schema violation at '{_error_path(err)}': {err.message}")


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads ``1e5`` and ``7.0e5`` as floats (YAML 1.2 style)."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"""^(?:[-+]?(?:[0-9][0-9_]*)\.[0-9_]*(?:[eE][-+]?[0-9]+)?
                |[-+]?(?:[0-9][0-9_]*)(?:[eE][-+]?[0-9]+)
                |\.[0-9_]+(?:[eE][-+]?[0-9]+)?
                |[-+]?\.(?:inf|Inf|INF)
                |\.(?:nan|NaN|NAN))$""", re.X),
    list("-+0123456789."),
)


def read_yaml(path):
    try:
        with open(path) as f:
            doc = yaml.load(f, Loader=_Loader)
    except FileNotFoundError:
        raise SceneFileError(f"no such file: {path}") from None
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
        raise SceneFileError(f"cannot parse {path}{where}: {getattr(exc, 'problem', exc)}") from None
    if not isinstance(doc, dict):
        raise SceneFileError(f"{path}: top level must be a mapping")
    return doc


# ---------------------------------------------------------------------------
# scene construction

def build_velocity(spec, seed=0):
    if spec is None:
        return None
    t = spec["type"]
    if t == "constant":
        return ConstantVelocity(spec["value"])
    if t == "linear":
        return LinearProfile(spec["alpha"], spec["H0"], spec.get("y0", 0.0))
    if t == "parabolic_sine":
        return ParabolicSine(spec["H0"], spec.get("amplitude", 2.0), spec.get("perturbation", 0.2),
                             spec.get("y0", 0.0))
    if t == "mlp":
        return MLPProfile(spec["H0"], tuple(spec.get("layers", (1, 30, 30, 30, 1))), seed=seed,
                          y0=spec.get("y0", 0.0), out_offset=spec.get("out_offset", 1.5),
                          out_scale=spec.get("out_scale", 1.5))
    raise SceneFileError(f"unknown velocity type '{t}'")


def build_material(spec):
    if spec["type"] == "fluid":
        return Fluid(spec["rho0"], spec["c"], spec.get("mu", 0.0), spec.get("viscous_rate_form", False),
                     spec.get("density_smoothing", True))
    return DruckerPrager(spec["rho0"], spec["K"], spec["nu"], math.radians(spec["phi_deg"]),
                         math.radians(spec.get("psi_deg", 0.0)), spec.get("cohesion", 0.0),
                         spec.get("sigma_t", 0.0))


def build_boundary(spec, dim):
    walls = BoundarySpec.all_slip(dim).walls
    for name, w in (spec or {}).items():
        if isinstance(w, str):
            walls[name] = WallSpec(w)
        else:
            segs = [Segment(s["lo"], s["hi"], s["mu"]) for s in w["segments"]]
            walls[name] = WallSpec("coulomb", segs, w.get("segment_axis", 0))
    return walls


def build_scene(doc, name="scene", mlp_seed=None) -> Scene:
    """Scene from a validated document."""
    dom, tm = doc["domain"], doc["time"]
    d = len(dom["extents"])
    tr = doc.get("transfer", {"scheme": "flip"})
    gravity = doc.get("gravity", [0.0] * (d - 1) + [-9.8])
    seed = int(doc.get("seed", 0))
    cfg = SimConfig(dx=dom["dx"], extents=tuple(dom["extents"]), dt=tm["dt"], n_steps=tm["n_steps"],
                    gravity=tuple(gravity), scheme=tr["scheme"], flip_alpha=tr.get("alpha", 1.0),
                    ppc=doc.get("particles_per_cell"), precision=doc.get("precision", "f64"),
                    snapshot_stride=tm.get("snapshot_stride", max(1, tm["n_steps"] // 10 or 1)),
                    pad=dom.get("pad", 1), seed=seed)
    vseed = seed if mlp_seed is None else mlp_seed
    regions = []
    for k, g in enumerate(doc["geometry"]):
        vel = build_velocity(g.get("velocity"), seed=vseed + k)
        if g["type"] == "box":
            if len(g["lo"]) != d or len(g["hi"]) != d:
                raise SceneFileError(f"geometry[{k}] dimension does not match the domain")
            regions.append(Box(tuple(g["lo"]), tuple(g["hi"]), vel))
        else:
            if d != 3:
                raise SceneFileError(f"geometry[{k}]: cylinders need a 3D domain")
            regions.append(Cylinder(tuple(g["center"]), g["radius"], tuple(g["z_range"]), vel))
    obstacles = [ObstacleBox(tuple(o["lo"]), tuple(o["hi"])) for o in doc.get("obstacles", [])]
    boundary = BoundarySpec(build_boundary(doc.get("boundaries"), d), obstacles)
    return Scene(cfg, build_material(doc["material"]), regions, boundary,
                 name=doc.get("name", name))


def load_scene_doc(path):
    doc = read_yaml(path)
    validate_document(doc, SCENE_SCHEMA, "scene")
    return doc


def load_scene(path, force=False, precision=None, scheme=None, seed=None) -> Scene:
    """Parse, validate and build a scene; refuses CFL numbers above one unless ``force``.

    ``seed`` overrides the file's seed for MLP initialisation.
    """
    doc = load_scene_doc(path)
    if precision is not None:
        doc["precision"] = precision
    if scheme is not None:
        doc.setdefault("transfer", {})["scheme"] = scheme
    stem = os.path.splitext(os.path.basename(str(path)))[0]
    scene = build_scene(doc, name=stem, mlp_seed=seed)
    scene.check_cfl(force=force)
    return scene


# ---------------------------------------------------------------------------
# snapshots

def _columns(d):
    ax = "xyz"[:d]
    cols = ["id"] + [f"x_{a}" for a in ax] + [f"v_{a}" for a in ax] + ["m", "V", "rho"]
    cols += [f"sigma_{a}{b}" for a in "xyz" for b in "xyz"]
    cols += [f"gv_{a}{b}" for a in ax for b in ax]
    cols += [f"B_{a}{b}" for a in ax for b in ax]
    cols += ["eps"] + [f"F_{a}{b}" for a in ax for b in ax]
    return cols


def _pack(ps: ParticleState):
    n = ps.n
    return np.column_stack([np.arange(n, dtype=float), ps.x, ps.v, ps.m, ps.V, ps.rho,
                            ps.sigma.reshape(n, 9), ps.gv.reshape(n, -1), ps.B.reshape(n, -1),
                            ps.eps, ps.F.reshape(n, -1)])


def _unpack(rows, d, dtype):
    n = len(rows)
    k = 1
    out = {}
    for name, width, shape in [("x", d, (n, d)), ("v", d, (n, d)), ("m", 1, (n,)), ("V", 1, (n,)),
                               ("rho", 1, (n,)), ("sigma", 9, (n, 3, 3)), ("gv", d * d, (n, d, d)),
                               ("B", d * d, (n, d, d)), ("eps", 1, (n,)), ("F", d * d, (n, d, d))]:
        out[name] = rows[:, k : k + width].reshape(shape).astype(dtype)
        k += width
    return ParticleState(**out)


def _header_line(kind, meta):
    return f"# {kind} " + " ".join(f"{k}={v}" for k, v in meta.items())


def _parse_header(line, kind, path):
    if not line.startswith(f"# {kind} "):
        raise SceneFileError(f"{path}: not a {kind} file")
    meta = {}
    for tok in line[len(kind) + 3 :].split():
        k, _, v = tok.partition("=")
        meta[k] = v
    return meta


def write_snapshot(path, particles: ParticleState, step=0, t=0.0, dx=0.0, scheme="flip") -> None:
    """Plain-text snapshot, one row per particle in id order."""
    d = particles.dim
    prec = "f64" if particles.x.dtype == np.float64 else "f32"
    meta = {"version": FORMAT_VERSION, "step": int(step), "t": repr(float(t)), "n_p": particles.n,
            "dim": d, "dx": repr(float(dx)), "scheme": scheme, "precision": prec}
    with open(path, "w") as f:
        f.write(_header_line("snapshot", meta) + "\n")
        f.write("# " + " ".join(_columns(d)) + "\n")
        np.savetxt(f, _pack(particles), fmt="%.17g")


@dataclass
class SnapshotFile:
    particles: ParticleState
    step: int
    t: float
    dx: float
    scheme: str


def _read_rows(f, ncol, path):
    rows = []
    for lineno, line in enumerate(f, start=3):
        if not line.strip():
            continue
        parts = line.split()
        last = int(rows[-1][0]) if rows else None
        if len(parts) != ncol:
            raise SceneFileError(f"{path}: truncated or malformed row at line {lineno}; "
                                 f"last good row is particle {last}")
        try:
            rows.append([float(p) for p in parts])
        except ValueError:
            raise SceneFileError(f"{path}: bad number at line {lineno}; last good row is particle {last}") from None
    return rows


def read_snapshot(path) -> SnapshotFile:
    with open(path) as f:
        meta = _parse_header(f.readline().rstrip("\n"), "snapshot", path)
        f.readline()
        d = int(meta["dim"])
        n = int(meta["n_p"])
        cols = _columns(d)
        rows = _read_rows(f, len(cols), path)
    if len(rows) != n:
        last = int(rows[-1][0]) if rows else None
        if len(rows) < n:
            raise SceneFileError(f"{path}: header says n_p={n} but the body has {len(rows)} rows "
                                 f"(truncated; last good row is particle {last})")
        raise SceneFileError(f"{path}: header says n_p={n} but the body has {len(rows)} rows")
    dtype = np.float64 if meta.get("precision", "f64") == "f64" else np.float32
    arr = np.array(rows, dtype=float).reshape(len(rows), len(cols))
    return SnapshotFile(_unpack(arr, d, dtype), int(meta["step"]), float(meta["t"]),
                        float(meta["dx"]), meta.get("scheme", ""))


# ---------------------------------------------------------------------------
# observations

def write_observations(path, obs: ObservationSet) -> None:
    d = obs.z_obs.shape[2] if obs.z_obs.ndim == 3 else 0
    ax = "xyz"[:d]
    meta = {"version": FORMAT_VERSION, "mode": obs.mode, "field": obs.field,
            "n_frames": len(obs.steps), "n_locations": obs.n_locations, "dim": d,
            "half_size": repr(float(obs.half_size))}
    if obs.mode == "lagrangian":
        loc_cols = ["id"]
        loc = obs.indices[:, None].astype(float)
    else:
        loc_cols = [f"c_{a}" for a in ax]
        loc = obs.centers
    cols = ["step"] + loc_cols + [f"{obs.field}_{a}" for a in ax] + ["mask"]
    T, L = obs.mask.shape
    body = np.column_stack([np.repeat(obs.steps, L).astype(float), np.tile(loc, (T, 1)),
                            obs.z_obs.reshape(T * L, d), obs.mask.reshape(-1)])
    with open(path, "w") as f:
        f.write(_header_line("observations", meta) + "\n")
        f.write("# " + " ".join(cols) + "\n")
        np.savetxt(f, body, fmt="%.17g")


def read_observations(path) -> ObservationSet:
    with open(path) as f:
        meta = _parse_header(f.readline().rstrip("\n"), "observations", path)
        f.readline()
        d = int(meta["dim"])
        T, L = int(meta["n_frames"]), int(meta["n_locations"])
        nloc = 1 if meta["mode"] == "lagrangian" else d
        rows = []
        for lineno, line in enumerate(f, start=3):
            parts = line.split()
            if len(parts) != 1 + nloc + d + 1:
                raise SceneFileError(f"{path}: truncated or malformed row at line {lineno}; "
                                     f"last good row is {len(rows)}")
            rows.append([float(p) for p in parts])
    if len(rows) != T * L:
        raise SceneFileError(f"{path}: expected {T * L} rows, found {len(rows)}")
    a = np.array(rows).reshape(T, L, -1)
    steps = a[:, 0, 0].astype(np.int64)
    z = a[:, :, 1 + nloc : 1 + nloc + d]
    mask = a[:, :, -1]
    if meta["mode"] == "lagrangian":
        return ObservationSet("lagrangian", meta["field"], steps, z, mask,
                              indices=a[0, :, 1].astype(np.int64))
    return ObservationSet("eulerian", meta["field"], steps, z, mask, centers=a[0, :, 1 : 1 + d],
                          half_size=float(meta["half_size"]))


# ---------------------------------------------------------------------------
# inverse problem files

@dataclass
class ProblemSetup:
    """An inverse problem ready to run plus what is needed to make its twin data."""

    problem: InverseProblem
    truth: object                 # parameter values, or a velocity generator
    template: ObservationSet
    doc: dict

    def truth_scene(self) -> Scene:
        """Copy of the scene whose initial velocity is the true generator."""
        sc = self.problem.scene
        regions = [replace(r, velocity=self.truth) if r.velocity is not None else r for r in sc.regions]
        return Scene(sc.config, sc.material, regions, sc.boundary, sc.ext_force, sc.name + "-truth")

    def make_observations(self) -> ObservationSet:
        prob = self.problem
        if isinstance(self.truth, VelocityField):
            snaps = collect_snapshots(self.truth_scene(), self.template.steps, prob.params)
            t = self.template
            if t.mode == "lagrangian":
                return observe_lagrangian(snaps, t.indices, t.steps, t.field)
            return observe_eulerian(snaps, t.centers, t.half_size, t.steps, t.field)
        return twin_observations(prob.scene, prob.parameter, self.truth, self.template, prob.params)


def _parameter(spec) -> ParameterField:
    kind = spec["kind"]
    if kind == "velocity":
        return VelocityParameter()
    if kind == "friction":
        return FrictionParameter(spec.get("trainable"))
    return FluidParameter(spec.get("names", ["c"]))


def observation_steps(n_steps, spec):
    frames = spec.get("frames", 100)
    stride = spec.get("stride", 1)
    if spec.get("window", "final") == "final":
        return final_window(n_steps, frames, stride)
    steps = stride * np.arange(1, frames + 1)
    if steps[-1] > n_steps:
        raise SceneFileError("observations.frames * stride exceeds the number of steps")
    return steps


def load_problem(path, segments=None, seed=None, epochs=None, force=False) -> ProblemSetup:
    """Inverse problem file: scene reference, parameter class, truth, start and observations."""
    doc = read_yaml(path)
    validate_document(doc, PROBLEM_SCHEMA, "problem")
    seed = int(doc.get("seed", 0) if seed is None else seed)
    scene_path = os.path.join(os.path.dirname(os.path.abspath(str(path))), doc["scene"])
    sdoc = load_scene_doc(scene_path)
    scene = build_scene(sdoc, name=os.path.splitext(os.path.basename(scene_path))[0], mlp_seed=seed)
    scene.check_cfl(force=force)
    par = _parameter(doc["parameter"])
    params = scene.default_params()
    n_steps = scene.config.n_steps
    d = scene.config.dim

    truth = doc["truth"]
    truth = build_velocity(truth, seed) if isinstance(truth, dict) else np.asarray(truth, dtype=float)
    initial = doc["initial"]
    if isinstance(initial, dict):
        gen = build_velocity(initial, seed)
        regions = [replace(r, velocity=gen) if r.velocity is not None else r for r in scene.regions]
        scene = Scene(scene.config, scene.material, regions, scene.boundary, scene.ext_force, scene.name)
        initial = None
    else:
        initial = np.asarray(initial, dtype=float)

    ospec = doc["observations"]
    steps = observation_steps(n_steps, ospec)
    if ospec["mode"] == "lagrangian":
        k = ospec.get("n_particles", "all")
        idx = np.arange(scene.n_particles) if k == "all" else sample_indices(scene.n_particles, k, seed)
        template = lagrangian_template(idx, steps, ospec.get("field", "x"), d)
    else:
        mon = ospec.get("monitors")
        if mon is None:
            raise SceneFileError("problem schema violation at 'observations.monitors': required for eulerian mode")
        template = eulerian_template(monitor_grid(mon["xs"], mon["ys"]), mon["half_size"], steps,
                                     ospec.get("field", "v"))
    opt = doc.get("optimizer", {})
    problem = InverseProblem(
        scene=scene, parameter=par, observations=template, n_steps=n_steps, initial=initial,
        params=params, epochs=int(epochs or opt.get("epochs", 300)),
        segments=int(segments or opt.get("segments", 10)), lr=opt.get("lr", 0.1),
        lr_decay=opt.get("lr_decay", 0.95), lr_decay_every=opt.get("lr_decay_every", 25),
        plateau_tol=opt.get("plateau_tol", 1e-10), loss_tol=opt.get("loss_tol", 0.0),
    )
    return ProblemSetup(problem, truth, template, doc)


# ---------------------------------------------------------------------------
# metrics

def _positions(snapshot):
    ps = snapshot.particles if hasattr(snapshot, "particles") else snapshot
    return np.asarray(ps.x if hasattr(ps, "x") else ps, dtype=float)


def front_position(snapshot, y_max) -> float:
    """Toe of the flow: largest x among particles below ``y_max``."""
    x = _positions(snapshot)
    sel = x[:, -1] < y_max
    if not np.any(sel):
        raise MPMError(f"no particles below y_max={y_max}")
    return float(np.max(x[sel, 0]))


def analytic_front(t, H0, L0, g=9.8, y=0.0):
    """Shallow-water dam-break front ``(2 sqrt(H0 g) - 3 sqrt(y g)) t + L0``."""
    g = abs(g)
    return (2.0 * math.sqrt(H0 * g) - 3.0 * math.sqrt(y * g)) * np.asarray(t, dtype=float) + L0


def runout_metrics(snapshot, L0):
    """Final runout ``L_f = max x`` and its normalised increase ``(L_f - L0) / L0``."""
    x = _positions(snapshot)
    L_f = float(np.max(x[:, 0]))
    return L_f, (L_f - L0) / L0


def free_surface_height(snapshot) -> float:
    return float(np.max(_positions(snapshot)[:, -1]))


__all__ = ["load_scene", "build_scene", "load_scene_doc", "read_yaml", "validate_document",
           "SCENE_SCHEMA", "PROBLEM_SCHEMA", "SceneFileError", "write_snapshot", "read_snapshot",
           "SnapshotFile", "write_observations", "read_observations", "front_position",
           "analytic_front", "runout_metrics", "free_surface_height", "load_problem", "ProblemSetup"]
