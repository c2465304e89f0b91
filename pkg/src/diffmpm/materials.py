"""Material parameter blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .errors import ValidationError


@dataclass(frozen=True)
class Fluid:
    """Weakly compressible Newtonian fluid.

    ``c`` is the numerical sound speed [m/s], ``mu`` the dynamic viscosity [Pa s].
    With ``density_smoothing`` the updated particle densities are replaced by
    their mass-weighted grid average before the pressure is evaluated, which
    suppresses the cell-scale pressure noise of per-particle densities.
    """

    rho0: float
    c: float
    mu: float = 0.0
    viscous_rate_form: bool = False
    density_smoothing: bool = True

    kind = "fluid"

    def __post_init__(self):
        if not self.rho0 > 0:
            raise ValidationError("material.rho0 must be positive")
        if not self.c > 0:
            raise ValidationError("material.c must be positive")
        if self.mu < 0:
            raise ValidationError("material.mu must be non-negative")

    def wave_speed(self) -> float:
        return self.c


def dp_derived_params(phi, psi, c, sigma_t):
    """Drucker-Prager constants ``(q_phi, k_phi, q_psi, tau_p, alpha_p)``.

    Angles in radians.
    """
    s_phi = math.sin(phi)
    s_psi = math.sin(psi)
    q_phi = 6.0 * s_phi / (math.sqrt(3.0) * (3.0 + s_phi))
    k_phi = 6.0 * c * math.cos(phi) / (math.sqrt(3.0) * (3.0 + s_phi))
    q_psi = 6.0 * s_psi / (math.sqrt(3.0) * (3.0 + s_psi))
    tau_p = k_phi - q_phi * sigma_t
    alpha_p = math.sqrt(1.0 + q_phi**2) - q_phi
    return q_phi, k_phi, q_psi, tau_p, alpha_p


@dataclass(frozen=True)
class DruckerPrager:
    """Non-associated Drucker-Prager elastoplasticity with a tension cutoff.

    ``K`` bulk modulus [Pa], ``nu`` Poisson ratio, ``phi``/``psi`` friction and
    dilation angles [rad], ``c`` cohesion [Pa], ``sigma_t`` tension cutoff [Pa].
    """

    rho0: float
    K: float
    nu: float
    phi: float
    psi: float = 0.0
    c: float = 0.0
    sigma_t: float = 0.0

    kind = "drucker_prager"

    def __post_init__(self):
        if not self.rho0 > 0:
            raise ValidationError("material.rho0 must be positive")
        if not self.K > 0:
            raise ValidationError("material.K must be positive")
        if not 0.0 <= self.nu < 0.5:
            raise ValidationError("material.nu must lie in [0, 0.5)")
        if not 0.0 <= self.phi < math.pi / 2:
            raise ValidationError("material.phi must lie in [0, pi/2)")
        if not 0.0 <= self.psi <= self.phi:
            raise ValidationError("material.psi must lie in [0, phi]")
        if self.c < 0 or self.sigma_t < 0:
            raise ValidationError("material.c and material.sigma_t must be non-negative")
        if self.tau_p < -1e-12 * max(1.0, self.k_phi):
            # the tension cap would sit beyond the cone apex
            raise ValidationError("material.sigma_t exceeds the cone apex k_phi / q_phi")

    @property
    def G(self) -> float:
        return 3.0 * self.K * (1.0 - 2.0 * self.nu) / (2.0 * (1.0 + self.nu))

    @property
    def lam(self) -> float:
        return self.K - 2.0 * self.G / 3.0

    def derived(self):
        return dp_derived_params(self.phi, self.psi, self.c, self.sigma_t)

    @property
    def q_phi(self):
        return self.derived()[0]

    @property
    def k_phi(self):
        return self.derived()[1]

    @property
    def q_psi(self):
        return self.derived()[2]

    @property
    def tau_p(self):
        return self.derived()[3]

    @property
    def alpha_p(self):
        return self.derived()[4]

    def wave_speed(self) -> float:
        return math.sqrt((self.K + 4.0 * self.G / 3.0) / self.rho0)
