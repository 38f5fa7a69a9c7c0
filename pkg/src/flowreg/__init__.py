"""flowreg: diffeomorphic 3D registration with a coordinate-MLP velocity field.

A small coordinate network predicts a time-varying velocity; sample
positions are integrated through the flow, the accumulated displacement
warps the moving image, and the network is optimized against image
similarity plus a velocity regularizer. A coarse-to-fine schedule with a
distillation handoff refines the result at higher field density.
"""

__version__ = "0.1.0"

from .dynamics import FlowConfig, Rollout, VelocitySnapshots, euler_step, intermediate_warp, rollout
from .evalsynth import (
    BumpDeformSpec,
    EvalReport,
    PhantomSpec,
    SynthPair,
    dice,
    endpoint_error,
    fold_fraction,
    jacobian_determinant,
    make_bump_deformation,
    make_phantom,
    synth_pair,
)
from .objective import (
    DistillationObjective,
    LossBreakdown,
    RegistrationObjective,
    distillation_loss,
    finite_diff_gradient,
    loss_gradient,
    mse,
    ncc,
    registration_loss,
    velocity_regularizer,
)
from .registration import (
    OptimConfig,
    OptimState,
    RegistrationConfig,
    StageResult,
    adam_step,
    apply_final,
    coarse_to_fine,
    inr_lddmm,
    optimize_stage,
)
from .velocity_net import MLPParams, NetConfig, ParamGradient, forward, forward_batch, init_params
from .volume import (
    GridSpec,
    LabelMask,
    VectorField3,
    Volume3,
    downsample_volume,
    normalize_coords,
    resample_field,
    sample_field_trilinear,
    sample_trilinear,
    spatial_gradient,
    warp_mask_nearest,
    warp_volume,
)
