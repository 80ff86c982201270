"""`geometry <calc>`: closed-form and quadrature calculators for sensor geometry and broadening."""

import json
import logging

from app import texts
from app.constants import CONSTANTS
from app.errors import ConfigurationError
from app.geometry import (
    DEFAULT_KAPPA,
    SHAPE_KINDS,
    SampleVolumeShape,
    ac_zeeman_broadening,
    back_action_prefactor,
    crossover_depth,
    detection_volume,
    diffusion_rate,
    geometric_factor,
    kappa_from_geometric_factor,
    mean_signal,
    min_thermal_volume,
    scaling_projection,
    statistical_noise_std,
    thermal_prefactor,
)
from app.nv_response import two_pi_field
from app.stabilization import broadening_from_noise

logger = logging.getLogger(__name__)


def _shape(args) -> SampleVolumeShape:
    return SampleVolumeShape.from_ratio(args.kind, args.ratio, args.depth, args.aspect)


# name -> (description, calculator over parsed args)
CALCULATORS = {
    "thermal-prefactor": ("μ0γ²ρB0/(2πkT) in T",
                          lambda a: thermal_prefactor(a.b0, a.temp, a.rho)),
    "geometric-factor": ("dimensionless G of a sample shape",
                         lambda a: geometric_factor(_shape(a))),
    "mean-signal": ("thermal field at the NV in T",
                    lambda a: mean_signal(a.b0, a.temp, a.rho, _shape(a))),
    "noise-std": ("statistical-polarization RMS field in T at --depth",
                  lambda a: statistical_noise_std(a.depth, a.rho)),
    "crossover": ("depth in m where thermal exceeds statistical polarization",
                  lambda a: crossover_depth(a.b0, a.temp, a.rho, margin=a.margin)),
    "min-volume": ("minimum thermal-dominated volume in m³",
                   lambda a: min_thermal_volume(a.b0, a.temp, a.rho)),
    "detection-volume": ("hemisphere detection volume in m³ at --depth",
                         lambda a: detection_volume(a.depth, a.kappa)),
    "kappa": ("V^(1/3)/d where G reaches half its asymptote",
              lambda a: kappa_from_geometric_factor(a.kind)),
    "back-action-prefactor": ("μ0μBρ/(8π) in T",
                              lambda a: back_action_prefactor(a.density)),
    "ac-zeeman": ("proton AC-Zeeman shift in Hz",
                  lambda a: ac_zeeman_broadening(a.rabi, a.detuning)),
    "diffusion": ("diffusion-limited linewidth in Hz",
                  lambda a: diffusion_rate(a.d_coeff, a.volume)),
    "noise-broadening": ("Gaussian FWHM in Hz for a field spread --sigma",
                         lambda a: broadening_from_noise(a.sigma)),
    "two-pi-field": ("resonant amplitude in T for a 2π phase",
                     lambda a: two_pi_field(a.frequency, a.n_pulses)),
    "scaling": ("spin-number and concentration projection",
                lambda a: scaling_projection(a.b0, a.sensitivity, a.volume, a.averaging, a.temp, a.snr)),
}


def register(subparsers):
    parser = subparsers.add_parser("geometry", help="geometry and broadening calculators")
    parser.add_argument("calc", choices=sorted(CALCULATORS), help="calculator name")
    parser.add_argument("--b0", type=float, default=0.0882, help="bias field (T)")
    parser.add_argument("--temp", type=float, default=300.0, help="temperature (K)")
    parser.add_argument("--rho", type=float, default=CONSTANTS.rho_water, help="proton density (m⁻³)")
    parser.add_argument("--kind", choices=SHAPE_KINDS, default="hemisphere")
    parser.add_argument("--ratio", type=float, default=50.0, help="V^(1/3)/d")
    parser.add_argument("--depth", type=float, default=1e-6, help="NV depth (m)")
    parser.add_argument("--aspect", type=float, default=1.0, help="box height/width")
    parser.add_argument("--margin", type=float, default=2.0)
    parser.add_argument("--kappa", type=float, default=DEFAULT_KAPPA)
    parser.add_argument("--density", type=float, default=0.8e23, help="polarized NV density (m⁻³)")
    parser.add_argument("--rabi", type=float, default=16.6e6, help="Rabi frequency (Hz)")
    parser.add_argument("--detuning", type=float, default=400e6, help="proton-NV detuning (Hz)")
    parser.add_argument("--d-coeff", type=float, default=2.3e-9, help="diffusion coefficient (m²/s)")
    parser.add_argument("--volume", type=float, default=(10e-6) ** 3, help="volume (m³)")
    parser.add_argument("--sigma", type=float, default=25e-9, help="field spread (T)")
    parser.add_argument("--frequency", type=float, default=3.742e6, help="signal frequency (Hz)")
    parser.add_argument("--n-pulses", type=int, default=48)
    parser.add_argument("--sensitivity", type=float, default=50e-12, help="T/√Hz")
    parser.add_argument("--averaging", type=float, default=1.0, help="averaging time (s)")
    parser.add_argument("--snr", type=float, default=3.0)
    parser.add_argument("--json", action="store_true", help="print JSON instead of text")
    parser.set_defaults(handler=handle)


async def handle(args) -> int:
    description, calc = CALCULATORS[args.calc]
    try:
        value = calc(args)
    except (ValueError, ZeroDivisionError) as e:
        raise ConfigurationError(f"{args.calc}: {e}") from e
    logger.debug(f"{args.calc} ({description}) = {value}")
    if args.json:
        print(json.dumps({"calc": args.calc, "value": value}, sort_keys=True))
    elif isinstance(value, dict):
        for key, item in value.items():
            print(texts.GEOMETRY_RESULT.format(calc=f"{args.calc}.{key}", value=f"{item:.6g}"), end="")
    else:
        print(texts.GEOMETRY_RESULT.format(calc=args.calc, value=f"{value:.6g}"), end="")
    return 0
