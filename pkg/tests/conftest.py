from pathlib import Path

import numpy as np
import pytest
from hypothesis import settings

from diffmpm.contact import BoundarySpec, Segment, WallSpec
from diffmpm.fields import LinearProfile
from diffmpm.materials import DruckerPrager, Fluid
from diffmpm.state import Box, SimConfig
from diffmpm.stepper import Scene

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

ROOT = Path(__file__).resolve().parent.parent
SCENES = ROOT / "scenes"
PROBLEMS = ROOT / "problems"


def small_fluid_scene(scheme="flip", n_steps=50, coulomb=True, alpha=1.0, c=10.0, mu=1e-3, dt=2e-4):
    cfg = SimConfig(dx=0.02, extents=(0.8, 0.4), dt=dt, n_steps=n_steps, gravity=(0.0, -9.8),
                    scheme=scheme, ppc=4, flip_alpha=0.7)
    walls = {"x-": WallSpec("slip"), "x+": WallSpec("slip"), "y+": WallSpec("slip")}
    if coulomb:
        walls["y-"] = WallSpec("coulomb", [Segment(0.0, 0.2, 0.1), Segment(0.2, 0.4, 0.5),
                                           Segment(0.4, 0.6, 0.1), Segment(0.6, 0.8, 0.2)])
    else:
        walls["y-"] = WallSpec("slip")
    return Scene(cfg, Fluid(1000.0, c, mu), [Box((0.04, 0.0), (0.24, 0.2), LinearProfile(alpha, 0.2))],
                 BoundarySpec(walls))


def small_dp_scene(scheme="flip", n_steps=50):
    cfg = SimConfig(dx=0.02, extents=(0.8, 0.4), dt=1e-4, n_steps=n_steps, gravity=(0.0, -9.8),
                    scheme=scheme, ppc=4)
    mat = DruckerPrager(2000.0, 5e5, 0.3, np.radians(30.0), 0.0, 100.0, 10.0)
    walls = BoundarySpec.all_slip(2).walls
    walls["y-"] = WallSpec("no_slip")
    return Scene(cfg, mat, [Box((0.0, 0.0), (0.2, 0.2), LinearProfile(0.5, 0.2))], BoundarySpec(walls))


@pytest.fixture
def fluid_scene():
    return small_fluid_scene()


@pytest.fixture
def dp_scene():
    return small_dp_scene()


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = []


def record(tag, ok, detail):
    line = f"{tag:<28} {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE.append(line)
    print(line, flush=True)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
