"""Differentiable material point method.

Forward MPM solver (PIC/FLIP/APIC/TPIC transfers, weakly compressible fluid
and Drucker-Prager materials, Coulomb friction walls) with hand-written
reverse-mode adjoints, segmented checkpointing and Adam-based inversion.
"""
from .adjoint import backprop_trajectory, make_plan, step_vjp
from .errors import MPMError, NumericalError, ValidationError
from .materials import DruckerPrager, Fluid
from .state import Box, Cylinder, SimConfig
from .stepper import Scene, StepParams, run, step

__version__ = "0.1.0"

__all__ = ["SimConfig", "Box", "Cylinder", "Fluid", "DruckerPrager", "Scene", "StepParams",
           "run", "step", "step_vjp", "backprop_trajectory", "make_plan", "MPMError",
           "NumericalError", "ValidationError"]
