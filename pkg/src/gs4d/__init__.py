"""4D Gaussian splatting at desk scale: higher-order motion, differentiable
rendering, language-aligned semantics, causal streaming, metrics."""

from .errors import DataError, NumericalError
from .scene import (CameraModel, FrameObservation, GaussianPrimitive, GaussianSet,
                    MotionCoefficients, RawGaussianParams, Ray, activate,
                    pixel_ray, plucker_encode)
from .motion import (displacement, displacement_jacobian, flow_field,
                     motion_coefficient, split_static_dynamic, warp_gaussians)
from .renderer import (RenderGradients, RenderOptions, RenderOutput,
                       project_gaussian, render, render_backward)
from .losses import (LossWeights, loss_cls, loss_depth, loss_reg, loss_rgb,
                     loss_sem, loss_sky, loss_total)
from .semantics import FeatureDecoder, TextEmbeddingBank, classify, query
from .optim import Adam, FitConfig, FitReport, fit_motion, fit_semantics
from .streaming import (ComposedScene, StreamState, compose_offline,
                        ingest_frame, windowed_causal_attention)
from .metrics import (FlowEvalResult, SegEvalResult, depth_rmse, eval_flow,
                      eval_seg, psnr, ssim)

__version__ = "0.1.0"
