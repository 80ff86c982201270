"""Physical constants shared by every module."""

import math
from dataclasses import dataclass


@dataclass(frozen=True)
class PhysicalConstants:
    mu0: float = 4e-7 * math.pi               # T·m/A
    k_b: float = 1.380649e-23                 # J/K
    hbar: float = 1.054571817e-34             # J·s
    mu_b: float = 9.2740100783e-24            # J/T
    g_nv: float = 2.0028
    gamma_p_moment: float = 1.41e-26          # J/T, proton magnetic moment
    gamma_p_freq: float = 42.577e6            # Hz/T
    gamma_nv_freq: float = 28.02e9            # Hz/T
    rho_water: float = 6.7e28                 # protons per m³
    avogadro: float = 6.02214076e23

    @property
    def water_proton_molarity(self) -> float:
        """Proton concentration of pure water in mol/L."""
        return self.rho_water / self.avogadro / 1e3


CONSTANTS = PhysicalConstants()
