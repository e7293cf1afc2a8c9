"""facefit: differentiable single-image face inverse rendering.

Recovers a re-renderable detailed albedo map and a per-texel
spherical-harmonics illumination map from one image by direct
gradient-based optimization over a linear morphable face model, verified
against synthetic ground truth.
"""

from .tensor import (Tensor, astensor, backward, bilinear_sample, elementwise,
                     finite_diff_check, flip_horizontal, linear_map, masked_mean,
                     reduce, shift)
from .morphable import (FaceParams, MorphableModel, bake_prior_albedo_map,
                        decode_albedo, decode_shape, export_obj, load_model,
                        save_model, synth_model)
from .shading import expand_coarse_light, sh_basis9, shade_maps, shade_point
from .render import (Camera, RenderOutput, compose_face_mask, pad_noise, project,
                     rasterize, render, unwrap_texture, vertex_normals)
from .losses import (LossReport, LossWeights, StubEmbedder, image_gradient,
                     l_cross_percp, l_grad, l_img, l_l1, l_reg_illu, l_smooth,
                     l_symm, total_loss)
from .fitting import (Adam, AdamState, FitConfig, FitResult, adam_update, coarse_fit,
                      detail_fit, fit, relight, save_fit_result)
from .metrics import MetricReport, l1_metric, metric_report, psnr, ssim
from .synthetic import SceneBundle, make_scene, write_bundle

__version__ = "0.1.0"
