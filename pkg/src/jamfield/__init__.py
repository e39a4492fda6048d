"""Joint jammer localization and RSS field reconstruction.

A physical path-loss expert and a convolutional expert over the building
grid are fused by log-linear pooling; MAP estimation with a Gauss-Newton
Laplace approximation yields posterior uncertainty over both the jammer
position and the reconstructed field.
"""

from .cnn import CnnArchitecture, build_input, cnn_forward
from .evaluation import RunResult, loc_error, rmpv, run_mc
from .gradients import NegLogPosterior, grad_scalar, mean_jacobian_row
from .grid import (
    Dataset,
    FieldRaster,
    GridSpec,
    Measurement,
    make_grid,
    outdoor_mask,
    raster_at,
    read_dataset,
    read_raster,
    write_dataset,
    write_raster,
)
from .inference import (
    FitConfig,
    LaplacePosterior,
    fit_map,
    fit_pipeline,
    gauss_newton_hessian,
    laplace_posterior,
    log_evidence,
    marginal_theta,
    predict,
    predict_field,
    select_lambda,
)
from .params import ParamLayout, ParamVector
from .pathloss import PathLossParams, pl_mean
from .pooling import (
    ModelContext,
    PoolingConfig,
    PriorConfig,
    build_context,
    neg_log_posterior,
    pooled_mean,
    weighted_centroid,
)
from .scene import SceneConfig, gen_buildings, gen_true_field, sample_dataset

__version__ = "0.1.0"

__all__ = [
    "CnnArchitecture",
    "Dataset",
    "FieldRaster",
    "FitConfig",
    "GridSpec",
    "LaplacePosterior",
    "Measurement",
    "ModelContext",
    "NegLogPosterior",
    "ParamLayout",
    "ParamVector",
    "PathLossParams",
    "PoolingConfig",
    "PriorConfig",
    "RunResult",
    "SceneConfig",
    "build_context",
    "build_input",
    "cnn_forward",
    "fit_map",
    "fit_pipeline",
    "gauss_newton_hessian",
    "gen_buildings",
    "gen_true_field",
    "grad_scalar",
    "laplace_posterior",
    "loc_error",
    "log_evidence",
    "make_grid",
    "marginal_theta",
    "mean_jacobian_row",
    "neg_log_posterior",
    "outdoor_mask",
    "pl_mean",
    "pooled_mean",
    "predict",
    "predict_field",
    "raster_at",
    "read_dataset",
    "read_raster",
    "rmpv",
    "run_mc",
    "sample_dataset",
    "select_lambda",
    "weighted_centroid",
    "write_dataset",
    "write_raster",
]
