"""
SMS slice-diffusion reconstruction package.
"""

from .file_utils import (
    validate_file,
    atomic_write_bytes,
    atomic_write_json,
    canonical_json,
    read_json,
)
from .tensor_core import (
    ComplexTensor4,
    Domain,
    fft2c,
    ifft2c,
    inner,
    read_tensor,
    write_tensor,
)
from .simulation import (
    SamplingPlan,
    SimulationResult,
    caipi_modulate,
    caipi_demodulate,
    make_coils,
    make_mask,
    make_phantom,
    sms_collapse,
    simulate,
    save_plan,
    load_plan,
)
from .calibration import (
    SpiritKernelSet,
    SliceGrappaKernelSet,
    fit_spirit,
    fit_slice_grappa,
    fit_kernels,
    save_kernel_set,
    load_kernel_set,
)
from .linalg import conjugate_gradient, power_iteration
from .operators import (
    SpiritOperator,
    SliceGrappaOperator,
    CompositeH,
    SamplingOperator,
)
from .sgsp import SgspProblem, SgspResult, sgsp_objective, sgsp_reconstruct
from .diffusion import (
    VESchedule,
    SelfConsistencyProjection,
    ReverseSampler,
    perturb,
    project_T,
    reverse_sample,
)
from .score_model import (
    ScoreNet,
    build_dataset,
    dsm_loss,
    make_score_fn,
    train,
    save_checkpoint,
    load_checkpoint,
)
from .metrics import nmse, psnr, compute_metrics, save_slice_pngs

__all__ = [
    "validate_file",
    "atomic_write_bytes",
    "atomic_write_json",
    "canonical_json",
    "read_json",
    "ComplexTensor4",
    "Domain",
    "fft2c",
    "ifft2c",
    "inner",
    "read_tensor",
    "write_tensor",
    "SamplingPlan",
    "SimulationResult",
    "caipi_modulate",
    "caipi_demodulate",
    "make_coils",
    "make_mask",
    "make_phantom",
    "sms_collapse",
    "simulate",
    "save_plan",
    "load_plan",
    "SpiritKernelSet",
    "SliceGrappaKernelSet",
    "fit_spirit",
    "fit_slice_grappa",
    "fit_kernels",
    "save_kernel_set",
    "load_kernel_set",
    "conjugate_gradient",
    "power_iteration",
    "SpiritOperator",
    "SliceGrappaOperator",
    "CompositeH",
    "SamplingOperator",
    "SgspProblem",
    "SgspResult",
    "sgsp_objective",
    "sgsp_reconstruct",
    "VESchedule",
    "SelfConsistencyProjection",
    "ReverseSampler",
    "perturb",
    "project_T",
    "reverse_sample",
    "ScoreNet",
    "build_dataset",
    "dsm_loss",
    "make_score_fn",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "nmse",
    "psnr",
    "compute_metrics",
    "save_slice_pngs",
]
