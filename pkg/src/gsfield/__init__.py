"""Semantic Gaussian-field engine.

Stores 3D Gaussians carrying dual low-dimensional semantic features,
differentiably renders RGB and K-channel feature maps on the CPU, distills
per-Gaussian semantics plus MLP decompression codecs from 2D supervision,
and answers open-vocabulary queries through regularized relevancy scoring
with dual-branch selection.
"""

from .core import (Camera, FeatureImage, GaussianField, SemanticGaussian,
                   build_covariance, center, eval_sh)
from .errors import (DivergenceError, FormatError, GsfieldError,
                     InvalidPrimitiveError, PlacementError, ShapeError,
                     UsageError)
from .raster import (RenderOptions, RenderOutput, Splat2D, loss_mask_from_alpha,
                     project_gaussian, render)
from .grad import FeatureGrad, GradCheckReport, grad_check, render_backward
from .codec import MlpCodec, codec_backward, decode
from .distill import (FitConfig, FitResult, SupervisionView, cosine_loss,
                      fit_semantics, total_semantic_loss)
from .query import (EmbeddingDictionary, QueryResult, pca_visualize, query_view,
                    relevancy_score, select_branch_strategy)
from .evaluation import (EvalRecord, PipelineConfig, evaluate_scene, iou,
                         localization_accuracy, psnr, run_pipeline,
                         strategy_report, sweep)
from .synthlab import (SceneSpec, context_supervision, corrupt_supervision,
                       make_embeddings, make_scene, region_supervision)

__version__ = "0.1.0"
