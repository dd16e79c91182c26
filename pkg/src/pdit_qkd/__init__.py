"""Key distribution from private states with shield teleportation."""

from .channels import (
    SourceSpec,
    NoiseChannel,
    basic_copies_attack,
    depolarize_key,
    ebit_source,
    flip_channels,
    werner_state,
)
from .metrics import (
    GapRecord,
    ed_bound_example,
    key_rate_bound,
    log_negativity,
    partial_transpose,
    security_diagnostic,
)
from .pdit import (
    CcqState,
    PditSpec,
    assemble_pdit,
    basic_pdit,
    ccq_of,
    example_pbit,
    is_ideal_ccq,
    random_pdit_spec,
    untwist_global,
    untwist_local,
)
from .postprocess import ec_pa
from .protocol import (
    ProtocolConfig,
    ProtocolOutcome,
    bit_error_estimate,
    generate_raw_key,
    lo_chau_verify,
    partial_distill,
    phase_error_estimate,
    run,
    run_reference_m1,
    teleport_subsystem,
)
from .qcore import DensityMatrix, SystemLayout, UnitaryOp

__version__ = "0.1.0"
