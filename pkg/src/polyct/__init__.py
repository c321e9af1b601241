"""Blind polychromatic X-ray CT reconstruction.

The incident spectrum and the material's energy dependence are folded into a
single mass-attenuation spectrum expanded in geometric B1 splines; density map
and spectrum are estimated jointly by alternating an (accelerated) proximal
gradient step with a box-constrained quasi-Newton step.
"""

from .errors import (
    AmbiguityShiftUnavailable,
    CalibrationFailure,
    CoverageError,
    DegenerateSpectrum,
    InvalidArgument,
    InvalidCurve,
    InvalidGeometry,
    InvalidMeasurement,
    InvalidState,
    PolyCTError,
    ProxDiverged,
    StepSizeUnderflow,
    UndefinedMetric,
)
from .model import ForwardModel, NoiseModel, convexity_bounds, region_check
from .pipeline import (
    SimulationSpec,
    Sinogram,
    baseline,
    benchmark,
    linearize,
    make_phantom,
    rse,
    simulate,
)
from .projector import FanBeamGeometry, build_system_matrix, covering_geometry, fbp
from .prox import Regularizer, prox_tv, prox_wavelet_admm
from .solvers import OuterConfig, ReconResult, npg_bfgs, npg_known_spectrum, npg_quadratic, pg_bfgs
from .spectrum import (
    KnotGrid,
    MassAttenuationCurve,
    MassAttenuationSpectrum,
    EnergySpectrumTable,
    b1_laplace,
    build_knots,
    construct_spectrum,
)

__version__ = "0.1.0"
