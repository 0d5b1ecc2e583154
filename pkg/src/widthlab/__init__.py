"""widthlab: exact width-scaling exponents for abc-parameterized MLPs, and the
instrumented experiments that check them."""

from .constraints import (
    AlignmentAssumption,
    ConstraintReport,
    GradientExponents,
    Regime,
    classify,
    gradient_exponents,
    max_stable_lr,
    readout_input_floor,
    training_stability,
    update_exponents,
)
from .params import (
    LayerRole,
    LayerTriple,
    OptimizerKind,
    Parameterization,
    check_init_stability,
    preset,
    reparameterize,
)
from .scalealg import PowerLawFit, Rat, fit_power_law, rat, rms_norm

__version__ = "0.1.0"
