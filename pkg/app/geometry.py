"""Sensor geometry: thermal signal, dipolar volume integrals, back-action maps, design calculators."""

import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import optimize

from app.constants import CONSTANTS
from app.errors import ConfigurationError, SimulationError
from app.signal_model import FWHM_PER_SIGMA

logger = logging.getLogger(__name__)

SHAPE_KINDS = ("hemisphere", "cube", "box")

# NV axis and the two perpendicular unit vectors of the precessing moment
U_NV = np.array([math.sqrt(2.0 / 3.0), 0.0, 1.0 / math.sqrt(3.0)])
Q1 = np.array([1.0 / math.sqrt(3.0), 0.0, -math.sqrt(2.0 / 3.0)])
Q2 = np.array([0.0, 1.0, 0.0])

# G for a semi-infinite sample (closed form of the angular integral)
HALF_SPACE_G = math.sqrt(2.0) * math.pi / 3.0
DEFAULT_KAPPA = 2.4
QUAD_TOLERANCE = 1e-3

_LADDER_START = 32
_LADDER_MAX = 2048
# Back-action FFT grid: minimum lateral domain and largest transform size
_MAP_DOMAIN = 256e-6
_MAP_MAX_N = 2048


class QuadratureError(SimulationError):
    """Raised when a refinement ladder ends before reaching the tolerance."""

    def __init__(self, message: str, achieved_tolerance: float):
        super().__init__(message)
        self.achieved_tolerance = achieved_tolerance


# ─── Types ───

@dataclass(frozen=True)
class SampleVolumeShape:
    """
    Sample volume above an NV at depth `nv_depth` under a flat surface.

    hemisphere: `extent` is the radius, centred on the surface point above the NV.
    cube: `extent` is the side, laterally centred, resting on the surface.
    box: `extent` is the base width, height = aspect × width.
    """

    kind: str
    extent: float             # m
    nv_depth: float           # m
    aspect: float = 1.0

    def __post_init__(self):
        if self.kind not in SHAPE_KINDS:
            raise ConfigurationError(f"shape kind must be one of {SHAPE_KINDS}, got {self.kind!r}")
        if not self.extent > 0 or not self.nv_depth > 0 or not self.aspect > 0:
            raise ConfigurationError("shape extent, nv_depth and aspect must be > 0")

    @classmethod
    def from_ratio(cls, kind: str, ratio: float, nv_depth: float = 1e-6, aspect: float = 1.0) -> "SampleVolumeShape":
        """Shape whose V^(1/3)/d equals `ratio`."""
        if not ratio > 0:
            raise ConfigurationError(f"ratio must be > 0, got {ratio}")
        side = ratio * nv_depth
        if kind == "hemisphere":
            extent = side / (2.0 * math.pi / 3.0) ** (1.0 / 3.0)
        elif kind == "box":
            extent = side / aspect ** (1.0 / 3.0)
        else:
            extent = side
        return cls(kind, extent, nv_depth, aspect)

    @property
    def height(self) -> float:
        if self.kind == "hemisphere":
            return self.extent
        return self.extent * (self.aspect if self.kind == "box" else 1.0)

    @property
    def volume(self) -> float:
        if self.kind == "hemisphere":
            return hemisphere_volume(self.extent)
        return self.extent ** 2 * self.height

    @property
    def ratio(self) -> float:
        return self.volume ** (1.0 / 3.0) / self.nv_depth

    def min_cos(self, phi: np.ndarray) -> np.ndarray:
        """Smallest polar cosine whose ray enters through the sample's base, per azimuth."""
        d = self.nv_depth
        if self.kind == "hemisphere":
            reach = np.full_like(phi, self.extent)
        else:
            reach = 0.5 * self.extent / np.maximum(np.abs(np.cos(phi)), np.abs(np.sin(phi)))
        return d / np.sqrt(d ** 2 + reach ** 2)

    def exit_distance(self, x: np.ndarray, y: np.ndarray, z: np.ndarray) -> np.ndarray:
        """Distance from the NV to where the ray (x, y, z) leaves the sample."""
        d = self.nv_depth
        if self.kind == "hemisphere":
            return d * z + np.sqrt(d ** 2 * z ** 2 + self.extent ** 2 - d ** 2)
        half = 0.5 * self.extent
        with np.errstate(divide="ignore"):
            top = (d + self.height) / z
            side_x = np.where(np.abs(x) > 0, half / np.abs(x), np.inf)
            side_y = np.where(np.abs(y) > 0, half / np.abs(y), np.inf)
        return np.minimum(top, np.minimum(side_x, side_y))


@dataclass(frozen=True)
class NVLayerModel:
    polarized_density: float = 0.8e23   # m⁻³
    fwhm_x: float = 15e-6               # m
    fwhm_y: float = 10e-6               # m
    thickness: float = 15e-6            # m, layer spans (−thickness, 0)

    def __post_init__(self):
        if not self.polarized_density > 0:
            raise ConfigurationError("polarized_density must be > 0")
        if not (self.fwhm_x > 0 and self.fwhm_y > 0 and self.thickness > 0):
            raise ConfigurationError("layer widths and thickness must be > 0")


@dataclass(frozen=True, eq=False)
class BackActionMap:
    x: np.ndarray             # m
    y: np.ndarray             # m
    z: float                  # m, plane height above the surface
    factor: np.ndarray        # (len(y), len(x)), dimensionless
    levels: int = 0
    change: float = 0.0


@dataclass(frozen=True)
class BackActionStats:
    mean: float
    mean_abs: float
    min: float
    max: float

    @property
    def spread(self) -> float:
        return 0.5 * (self.max - self.min)

    def as_dict(self) -> dict:
        return {
            "mean": self.mean, "mean_abs": self.mean_abs,
            "min": self.min, "max": self.max, "spread": self.spread,
        }


# ─── Thermal signal ───

def thermal_prefactor(b0: float, temp: float = 300.0, rho: float = CONSTANTS.rho_water) -> float:
    """C = μ0·γ²·ρ·B0 / (2π·k_B·T), with γ the proton moment."""
    if b0 < 0 or not temp > 0 or rho < 0:
        raise ConfigurationError("thermal_prefactor needs b0 >= 0, temp > 0, rho >= 0")
    c = CONSTANTS
    return c.mu0 * c.gamma_p_moment ** 2 * rho * b0 / (2.0 * math.pi * c.k_b * temp)


def _integrate(shape: SampleVolumeShape, q: np.ndarray, n: int) -> float:
    """Midpoint rule in (ln u, φ); the radial integral of 1/r is taken analytically."""
    phi = (np.arange(n) + 0.5) * (2.0 * np.pi / n)
    s = (np.arange(n) + 0.5) / n
    log_umin = np.log(shape.min_cos(phi))[:, None]
    u = np.exp(log_umin * (1.0 - s[None, :]))
    du = -log_umin * u / n
    sin_t = np.sqrt(1.0 - u ** 2)
    x = sin_t * np.cos(phi)[:, None]
    y = sin_t * np.sin(phi)[:, None]
    r_out = shape.exit_distance(x, y, u)
    radial = np.log(r_out * u / shape.nv_depth)
    r_dot_u = x * U_NV[0] + y * U_NV[1] + u * U_NV[2]
    r_dot_q = x * q[0] + y * q[1] + u * q[2]
    kernel = 3.0 * r_dot_q * r_dot_u - float(q @ U_NV)
    return float(-0.5 * np.sum(kernel * radial * du) * (2.0 * np.pi / n))


def geometric_factor(shape: SampleVolumeShape, ratio: Optional[float] = None,
                     component: str = "q1", tol: float = QUAD_TOLERANCE) -> float:
    """
    Dimensionless dipolar integral G projected on the NV axis.

    Refines the angular grid by doubling until two levels agree within `tol`;
    `component="q2"` integrates the moment component that vanishes by symmetry.
    """
    if ratio is not None:
        shape = SampleVolumeShape.from_ratio(shape.kind, ratio, shape.nv_depth, shape.aspect)
    q = Q1 if component == "q1" else Q2
    n = _LADDER_START
    previous = _integrate(shape, q, n)
    change = math.inf
    while n < _LADDER_MAX:
        n *= 2
        value = _integrate(shape, q, n)
        change = abs(value - previous)
        logger.debug(f"G[{shape.kind}, ratio={shape.ratio:.4g}, {component}] n={n}: {value:.6g} (Δ={change:.2e})")
        # A vanishing component is judged against the half-space scale
        scale = max(abs(value), 1e-6 * HALF_SPACE_G)
        if change <= tol * scale:
            return value
        previous = value
    raise QuadratureError(
        f"geometric factor for {shape.kind} at ratio {shape.ratio:.4g} did not converge",
        achieved_tolerance=change / max(abs(previous), 1e-300),
    )


def mean_signal(b0: float, temp: float, rho: float, shape: SampleVolumeShape) -> float:
    """Projected thermal field at the NV (T)."""
    return thermal_prefactor(b0, temp, rho) * geometric_factor(shape)


def statistical_noise_std(d_nv: float, rho: float = CONSTANTS.rho_water) -> float:
    """RMS field of statistically polarized spins in a half-space at depth d."""
    if not d_nv > 0:
        raise ConfigurationError(f"d_nv must be > 0, got {d_nv}")
    c = CONSTANTS
    return math.sqrt(rho * c.mu0 ** 2 * c.gamma_p_moment ** 2 / (96.0 * math.pi * d_nv ** 3))


def crossover_depth(b0: float, temp: float = 300.0, rho: float = CONSTANTS.rho_water,
                    g_asymptotic: float = 1.5, margin: float = 2.0) -> float:
    """Depth beyond which the thermal signal exceeds `margin` × the statistical RMS."""
    if not (b0 > 0 and temp > 0 and rho > 0 and margin > 0):
        raise ConfigurationError("crossover_depth needs positive inputs")
    if math.isinf(g_asymptotic):
        return 0.0
    ratio = 2.0 * math.pi * CONSTANTS.k_b * temp * margin / (CONSTANTS.gamma_p_moment * b0 * g_asymptotic)
    return ratio ** (2.0 / 3.0) * (96.0 * math.pi) ** (-1.0 / 3.0) * rho ** (-1.0 / 3.0)


def min_thermal_volume(b0: float, temp: float = 300.0, rho: float = CONSTANTS.rho_water) -> float:
    """(2·k_B·T / γ·B0)² / ρ, the volume where thermal exceeds statistical polarization."""
    if not (b0 > 0 and temp > 0 and rho > 0):
        raise ConfigurationError("min_thermal_volume needs positive inputs")
    return (2.0 * CONSTANTS.k_b * temp / (CONSTANTS.gamma_p_moment * b0)) ** 2 / rho


def hemisphere_volume(radius: float) -> float:
    return 2.0 * math.pi / 3.0 * radius ** 3


def detection_volume(d_nv: float, kappa: float = DEFAULT_KAPPA) -> float:
    if not d_nv > 0:
        raise ConfigurationError(f"d_nv must be > 0, got {d_nv}")
    return hemisphere_volume(kappa * d_nv)


def kappa_from_geometric_factor(kind: str = "hemisphere", bracket: tuple[float, float] = (0.5, 10.0)) -> float:
    """Ratio V^(1/3)/d at which G reaches half of the half-space value."""
    def excess(ratio):
        return geometric_factor(SampleVolumeShape.from_ratio(kind, ratio)) - 0.5 * HALF_SPACE_G

    kappa = optimize.brentq(excess, *bracket, xtol=1e-4)
    logger.debug(f"half-asymptote ratio for {kind}: {kappa:.4f}")
    return float(kappa)


# ─── Back-action ───

def back_action_prefactor(polarized_density: float) -> float:
    """μ0·μ_B·ρ_NV / (8π)."""
    if polarized_density < 0:
        raise ConfigurationError("polarized_density must be >= 0")
    return CONSTANTS.mu0 * CONSTANTS.mu_b * polarized_density / (8.0 * math.pi)


def _layer_plane(layer: NVLayerModel, z: float, h: float, n: int) -> np.ndarray:
    """
    Factor on an n×n grid of spacing h at height z, origin at index n//2.

    Plane-wave form of the layer integral: 2π·(û_z − i·û_∥·k̂)²·P(k)·e^{−kz}·(1 − e^{−k·t}).
    """
    k1 = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
    kx, ky = np.meshgrid(k1, k1, indexing="xy")
    k = np.hypot(kx, ky)
    with np.errstate(invalid="ignore", divide="ignore"):
        kx_hat = np.where(k > 0, kx / k, 0.0)
        ky_hat = np.where(k > 0, ky / k, 0.0)
    orient = (U_NV[2] - 1j * (U_NV[0] * kx_hat + U_NV[1] * ky_hat)) ** 2
    sx = layer.fwhm_x / FWHM_PER_SIGMA
    sy = layer.fwhm_y / FWHM_PER_SIGMA
    profile = 2.0 * np.pi * sx * sy * np.exp(-0.5 * ((kx * sx) ** 2 + (ky * sy) ** 2))
    depth = np.exp(-k * z) * -np.expm1(-k * layer.thickness)
    spectrum = 2.0 * np.pi * orient * profile * depth
    return np.fft.fftshift(np.real(np.fft.ifft2(spectrum))) / h ** 2


def back_action_map(layer: NVLayerModel, z_plane: float, extent: float = 25e-6,
                    resolution: int = 64, tol: float = QUAD_TOLERANCE) -> BackActionMap:
    """
    Back-action geometric factor on a resolution×resolution grid over [−extent, extent]².

    Output points sit on nodes of every FFT level, so successive levels compare
    point by point.
    """
    if not z_plane > 0:
        raise ConfigurationError(f"z_plane must be above the surface, got {z_plane}")
    if resolution < 2 or resolution % 2:
        raise ConfigurationError(f"resolution must be an even number >= 2, got {resolution}")
    coords = np.linspace(-extent, extent, resolution)
    spacing = coords[1] - coords[0]
    steps = np.arange(resolution) - (resolution - 1) / 2.0   # half-integers

    previous = None
    level, change = 0, math.inf
    while True:
        level += 1
        h = spacing / 2 ** level
        n = 2 ** int(math.ceil(math.log2(max(_MAP_DOMAIN, 4.0 * extent) / h)))
        if n > _MAP_MAX_N:
            raise QuadratureError(
                f"back-action map at z={z_plane:.3e} m did not converge before the {_MAP_MAX_N}-point grid",
                achieved_tolerance=change,
            )
        plane = _layer_plane(layer, z_plane, h, n)
        idx = n // 2 + np.rint(steps * 2 ** level).astype(int)
        factor = plane[np.ix_(idx, idx)]
        if previous is not None:
            change = float(np.max(np.abs(factor - previous)) / max(np.max(np.abs(factor)), 1e-300))
            logger.debug(f"back-action z={z_plane:.2e} level={level} n={n}: change={change:.2e}")
            if change < tol:
                return BackActionMap(x=coords, y=coords.copy(), z=z_plane, factor=factor, levels=level, change=change)
        previous = factor


def back_action_stats(bmap: BackActionMap, mask: Optional[np.ndarray] = None) -> BackActionStats:
    values = bmap.factor if mask is None else bmap.factor[mask]
    return BackActionStats(
        mean=float(np.mean(values)),
        mean_abs=float(np.mean(np.abs(values))),
        min=float(np.min(values)),
        max=float(np.max(values)),
    )


def back_action_volume_mean(layer: NVLayerModel, radius: float = 25e-6, n_planes: int = 16,
                            resolution: int = 64) -> BackActionStats:
    """Volume-weighted statistics over a hemisphere above the NV layer, one disk per z-plane."""
    nodes, weights = np.polynomial.legendre.leggauss(n_planes)
    zs = 0.5 * radius * (nodes + 1.0)
    wz = 0.5 * radius * weights
    total, total_abs = 0.0, 0.0
    lo, hi = math.inf, -math.inf
    for z, w in zip(zs, wz):
        disk = math.sqrt(radius ** 2 - z ** 2)
        bmap = back_action_map(layer, float(z), extent=radius, resolution=resolution)
        xx, yy = np.meshgrid(bmap.x, bmap.y, indexing="xy")
        mask = xx ** 2 + yy ** 2 <= disk ** 2
        cell = (bmap.x[1] - bmap.x[0]) ** 2
        values = bmap.factor[mask]
        total += w * float(np.sum(values)) * cell
        total_abs += w * float(np.sum(np.abs(values))) * cell
        lo, hi = min(lo, float(values.min())), max(hi, float(values.max()))
    volume = hemisphere_volume(radius)
    return BackActionStats(mean=total / volume, mean_abs=total_abs / volume, min=lo, max=hi)


def duty_cycle_broadening(stats: BackActionStats, duty: float, prefactor: float) -> float:
    """Linewidth contribution (Hz) of the back-action gradient during the sensing fraction."""
    if not 0 <= duty <= 1:
        raise ConfigurationError(f"duty must be in [0, 1], got {duty}")
    return stats.spread * prefactor * duty * CONSTANTS.gamma_p_freq


# ─── Other broadening and scaling calculators ───

def ac_zeeman_broadening(rabi: float, detuning: float) -> float:
    """Proton AC-Zeeman shift Ω²/Δ·(γ_p/γ_NV)² (Hz)."""
    if detuning == 0:
        raise ConfigurationError("ac_zeeman_broadening needs a non-zero detuning")
    return rabi ** 2 / detuning * (CONSTANTS.gamma_p_freq / CONSTANTS.gamma_nv_freq) ** 2


def diffusion_rate(d_coeff: float, volume: float) -> float:
    """(6/π)·D/V^(2/3) (Hz)."""
    if not (d_coeff > 0 and volume > 0):
        raise ConfigurationError("diffusion_rate needs positive inputs")
    return 6.0 / math.pi * d_coeff / volume ** (2.0 / 3.0)


def scaling_projection(b0: float, sensitivity: float, volume: float, averaging: float,
                       temp: float = 300.0, snr: float = 3.0) -> dict:
    """
    Spin-number sensitivity and the concentration detectable at `snr` after `averaging` seconds.

    The signal of neat water at b0 fills a half-space above the sensor; a solute
    at concentration c gives the same field scaled by c / c_water.
    """
    if not (b0 > 0 and sensitivity > 0 and volume > 0 and averaging > 0):
        raise ConfigurationError("scaling_projection needs positive inputs")
    signal = thermal_prefactor(b0, temp, CONSTANTS.rho_water) * HALF_SPACE_G
    noise = sensitivity / math.sqrt(averaging)
    return {
        "signal_tesla": signal,
        "spins_per_rthz": sensitivity / signal * CONSTANTS.rho_water * volume,
        "min_concentration_molar": snr * noise / signal * CONSTANTS.water_proton_molarity,
    }
