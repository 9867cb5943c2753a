"""ResNet backbone whose stage-4 bottleneck mixes tokens with a non-causal selective SSM."""

from .analysis import ComplexityQuery, count_macs, erf_map, flops_analytic, flops_empirical, scaling_fit
from .asc import ASC, asc_forward, coordinate_pool
from .backbone import VARIANTS, Backbone, BackboneSpec, build_backbone, count_parameters, get_spec
from .gamba import GambaCell, GambaCellConfig, Rpe2d, build_rpe, from_sequence, gamba_cell_forward, to_sequence
from .numerics import (
    ConfigurationError,
    ContractViolation,
    NumericalDomainError,
    check_gradients,
    derive_seed,
    load_checkpoint,
    save_checkpoint,
)
from .ssm import (
    MambaBlock,
    MambaBlockConfig,
    SelectiveSSM,
    dense_scan_oracle,
    discretize_zoh,
    mamba_block_forward,
    selective_parameters,
    ssm_scan_causal,
    ssm_scan_noncausal,
)
from .transport import TrainConfig, gen_transport_dataset, train

__all__ = [name for name in dir() if not name.startswith("_")]
