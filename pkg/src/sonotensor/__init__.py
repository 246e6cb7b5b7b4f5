"""sonotensor: log-Euclidean tensor compounding of multi-view 3D volumes.

Fits one positive-definite 3x3 tensor per voxel to directionally-acquired
scalar volumes by nonlinear least squares in the log domain with an optional
Huber-smoothed total-variation penalty, renders scalar volumes for arbitrary
view directions, and evaluates reconstructions with a leave-one-out PSNR
protocol.
"""

__version__ = "0.1.0"

from .evaluate import LooResult, lambda_sweep, leave_one_out, psnr
from .model import (
    Observation,
    RobustLoss,
    project,
    project_volume,
    residual,
    residual_jacobian,
    robust_loss,
)
from .solver import (
    BaselineResult,
    SolveConfig,
    SolveReport,
    compound_baseline,
    compound_logeuclidean,
    initialize_field,
    lm_minimize,
)
from .symcalc import (
    dexp_najfeld,
    dexp_sym3,
    duplication,
    eig_sym3,
    exp_sym3,
    loewner_exp,
    sym_from_vech,
    unvec,
    vec,
    vech,
)
from .synth import PhantomSpec, make_phantom, render_views, spanning_directions
from .tvreg import TVConfig, huber_tv_1d, tv_energy, tv_residuals
from .volume import (
    GridSpec,
    RigidTransform,
    ScalarVolume,
    TensorVolume,
    ViewGeometry,
    compose_chain,
    load_views,
    read_tensor,
    read_volume,
    resample,
    select_reference,
    write_tensor,
    write_volume,
)

__all__ = [
    "BaselineResult", "GridSpec", "LooResult", "Observation", "PhantomSpec",
    "RigidTransform", "RobustLoss", "ScalarVolume", "SolveConfig", "SolveReport",
    "TVConfig", "TensorVolume", "ViewGeometry",
    "compose_chain", "compound_baseline", "compound_logeuclidean",
    "dexp_najfeld", "dexp_sym3", "duplication", "eig_sym3", "exp_sym3",
    "huber_tv_1d", "initialize_field", "lambda_sweep", "leave_one_out",
    "lm_minimize", "load_views", "loewner_exp", "make_phantom", "project",
    "project_volume", "psnr", "read_tensor", "read_volume", "render_views",
    "resample", "residual", "residual_jacobian", "robust_loss",
    "select_reference", "spanning_directions", "sym_from_vech", "tv_energy",
    "tv_residuals", "unvec", "vec", "vech", "write_tensor", "write_volume",
]
