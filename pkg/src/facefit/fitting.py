"""Analysis-by-synthesis recovery of face parameters, albedo and illumination.

Two stages:

* ``coarse_fit`` descends on model coefficients and pose with Adam against
  a masked image loss, an optional landmark reprojection loss and a small
  Tikhonov prior, producing the prior albedo map and a single global SH
  illumination vector.
* ``detail_fit`` freezes geometry and optimizes a free per-texel albedo map
  and a per-texel SH illumination map under the full regularized loss
  stack.  Two render paths run per step: the detailed-light render drives
  the image loss, while a render under the frozen coarse light drives the
  gradient loss so high-frequency detail lands in the albedo.

Both stages are deterministic for a fixed config and seed.
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import imgio, losses, shading, tensor as tt
from .losses import LossReport, LossWeights, StubEmbedder
from .morphable import FaceParams, MorphableModel, bake_prior_albedo_map, decode_shape
from .render import (Camera, RasterBuffers, compose_face_mask, pad_noise, project,
                     rasterize, rasterize_mesh, render, shade_buffers, unwrap_texture,
                     uv_surface_geometry, vertex_normals)
from .tensor import Tensor

DESHADE_MIN = 0.05  # shading floor below which de-shading falls back to the prior
NEGATIVE_SHADING_FLAG = 0.01  # diagnostics warn threshold


@dataclass
class FitConfig:
    uv_size: int = 256
    steps_coarse: int = 400
    steps_detail: int = 300
    lr_coarse: float = 1e-4
    lr_detail: float = 1e-2
    lr_decay: float = 0.98
    weights: LossWeights = field(default_factory=LossWeights)
    l1_anneal_fraction: float = 1.0  # fraction of detail steps after which lambda_ar3 -> 0
    coeff_prior_weight: float = 1e-3
    seed: int = 0

    def __post_init__(self):
        if self.uv_size < 8:
            raise ValueError("uv_size must be >= 8")
        if self.steps_coarse < 0 or self.steps_detail < 0:
            raise ValueError("step counts must be >= 0")
        if self.lr_coarse <= 0 or self.lr_detail <= 0 or self.lr_decay <= 0:
            raise ValueError("learning rates must be positive")


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter tensor."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_param(cls, param: Tensor) -> "AdamState":
        return cls(m=np.zeros_like(param.data), v=np.zeros_like(param.data))


def adam_update(state: AdamState, param: Tensor, grad: np.ndarray, lr: float) -> None:
    """One bias-corrected Adam step, applied to ``param.data`` in place."""
    if grad.shape != param.data.shape:
        raise ValueError("gradient shape does not match parameter")
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient at adam step {state.t + 1}")
    state.t += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grad * grad
    m_hat = state.m / (1.0 - state.beta1 ** state.t)
    v_hat = state.v / (1.0 - state.beta2 ** state.t)
    param.data = param.data - lr * m_hat / (np.sqrt(v_hat) + state.eps)


class Adam:
    """Adam over a list of leaf tensors; ``lr`` may be adjusted between steps."""

    def __init__(self, params: list[Tensor], lr: float):
        self.params = params
        self.lr = lr
        self.states = [AdamState.for_param(p) for p in params]

    def step(self) -> None:
        for p, s in zip(self.params, self.states):
            if p.grad is None:
                continue
            adam_update(s, p, p.grad, self.lr)

    def zero_grad(self) -> None:
        tt.zero_grad(self.params)


@dataclass
class FitResult:
    params: FaceParams
    a_prior: np.ndarray  # (3, H, W)
    a_detail: np.ndarray  # (3, H, W)
    l_detail: np.ndarray  # (27, H, W)
    texture: np.ndarray  # (3, H, W), noise-padded unwrap
    m_uv: np.ndarray  # (1, H, W)
    visibility: np.ndarray  # (1, H, W)
    history: list[LossReport]
    diagnostics: dict[str, float]


def default_translation(model: MorphableModel, cam: Camera,
                        fill_fraction: float = 0.75) -> np.ndarray:
    """Place the head on the optical axis so it fills the given frame fraction."""
    z = cam.focal * model.radius() / (0.5 * fill_fraction * min(cam.height, cam.width))
    return np.array([0.0, 0.0, z])


# -- coarse stage ------------------------------------------------------------------


def coarse_fit(image: np.ndarray, landmarks, model: MorphableModel, cam: Camera,
               config: FitConfig, m_parsing: np.ndarray | None = None,
               init: FaceParams | None = None):
    """Estimate the 257-dim parameter split from one image.

    ``landmarks`` is None or an (L, 3) array of rows (vertex_id, pixel_x,
    pixel_y); the reprojection loss uses coordinates normalized by the
    image size.  Returns (params, prior albedo map, uv mask, coarse light).
    """
    image = np.asarray(image, dtype=np.float64)
    if image.shape != (3, cam.height, cam.width):
        raise ValueError("image resolution does not match the camera")
    if init is None:
        init = FaceParams.zeros(translation=default_translation(model, cam))

    leaves = {
        "theta_id": Tensor(init.theta_id.copy(), requires_grad=True),
        "theta_exp": Tensor(init.theta_exp.copy(), requires_grad=True),
        "theta_alb": Tensor(init.theta_alb.copy(), requires_grad=True),
        "theta_light": Tensor(init.theta_light.copy(), requires_grad=True),
        "pose": Tensor(init.pose.copy(), requires_grad=True),
    }
    opt = Adam(list(leaves.values()), lr=config.lr_coarse)
    epoch_len = max(1, config.steps_coarse // 10)
    image_t = Tensor(image)
    scale = float(max(cam.height, cam.width))

    if landmarks is not None:
        landmarks = np.asarray(landmarks, dtype=np.float64)
        lm_ids = landmarks[:, 0].astype(np.intp)
        lm_target = landmarks[:, 1:3] / scale

    uvs = config.uv_size
    for step in range(config.steps_coarse):
        positions = decode_shape(model, leaves["theta_id"], leaves["theta_exp"])
        pixels, depths, valid = project(positions, leaves["pose"], cam)
        normals = vertex_normals(positions.data, model.triangles)
        buffers = rasterize(pixels.data, depths.data, valid, model.triangles,
                            model.uv_coords, normals, cam)
        if step >= max(1, config.steps_coarse // 10) and buffers.rows.size == 0:
            raise RuntimeError("face out of frame: no pixels covered")

        albedo_map, m_uv = bake_prior_albedo_map(model, leaves["theta_alb"], uvs, uvs)
        rendered = shade_buffers(buffers, albedo_map, leaves["theta_light"], cam)
        m_face = buffers.m_proj if m_parsing is None else compose_face_mask(m_parsing, buffers.m_proj)
        loss = losses.l_img(rendered, image_t, m_face)

        if landmarks is not None:
            lm_pix = tt.div(pixels[lm_ids], Tensor(scale))
            lm_loss = tt.mean(tt.pow2(tt.sub(lm_pix, Tensor(lm_target))))
            loss = tt.add(loss, lm_loss)

        # Same mean convention as the loss stack, so the weight is
        # independent of the coefficient count.
        prior = None
        for name in ("theta_id", "theta_exp", "theta_alb", "theta_light"):
            term = tt.mean(tt.pow2(leaves[name]))
            prior = term if prior is None else tt.add(prior, term)
        loss = tt.add(loss, tt.mul(Tensor(config.coeff_prior_weight), prior))

        if not np.isfinite(loss.data):
            raise RuntimeError(f"coarse fit diverged at step {step}")
        opt.zero_grad()
        tt.backward(loss)
        opt.step()
        if (step + 1) % epoch_len == 0:
            opt.lr *= config.lr_decay

    params = FaceParams(leaves["theta_id"].data.copy(), leaves["theta_exp"].data.copy(),
                        leaves["theta_alb"].data.copy(), leaves["theta_light"].data.copy(),
                        leaves["pose"].data.copy())
    a_prior_t, m_uv = bake_prior_albedo_map(model, params.theta_alb, uvs, uvs)
    return params, a_prior_t.data, m_uv, params.theta_light.copy()


# -- detail stage ------------------------------------------------------------------


def _uv_normal_map(model: MorphableModel, params: FaceParams, size: int) -> np.ndarray:
    from .morphable import uv_table

    positions = decode_shape(model, params.theta_id, params.theta_exp).data
    table = uv_table(model, size, size)
    _, normals = uv_surface_geometry(model, positions, size, size)
    out = np.zeros((3, size, size))
    out[:, table.rows, table.cols] = normals.T
    return out


def _irradiance_map(light_map: np.ndarray, normal_map: np.ndarray) -> np.ndarray:
    """Per-texel, per-channel SH irradiance (3, H, W) for a (27, H, W) map."""
    phi = shading.sh_basis_stack(normal_map)  # (9, H, W)
    per_channel = light_map.reshape(3, shading.N_SH, *light_map.shape[1:])
    return (per_channel * phi[None]).sum(axis=1)


def initialize_detail_maps(image: np.ndarray, params: FaceParams, model: MorphableModel,
                           cam: Camera, config: FitConfig,
                           buffers: RasterBuffers | None = None):
    """Warm-start maps for the detail stage.

    The unwrapped texture is de-shaded by the coarse illumination where the
    shading is trustworthy; elsewhere (including invisible texels) the prior
    albedo fills in.  The stored texture artifact is the noise-padded unwrap.
    Returns (a_init, l_init, a_prior, m_uv, texture_padded, visibility, normal_map).
    """
    size = config.uv_size
    if buffers is None:
        buffers = rasterize_mesh(model, params, cam)
    a_prior_t, m_uv = bake_prior_albedo_map(model, params.theta_alb, size, size)
    a_prior = a_prior_t.data
    texture, visibility = unwrap_texture(image, model, params, cam, size, size,
                                         buffers=buffers)
    texture_padded = pad_noise(texture, visibility, m_uv, config.seed)

    normal_map = _uv_normal_map(model, params, size)
    shade = _irradiance_map(np.broadcast_to(params.theta_light[:, None, None],
                                            (27, size, size)), normal_map)
    usable = (visibility > 0.5) & (shade > DESHADE_MIN)
    a_init = np.where(usable, np.divide(texture, shade, out=np.zeros_like(texture),
                                        where=shade > DESHADE_MIN), a_prior)
    a_init = a_init * m_uv
    l_init = np.broadcast_to(params.theta_light[:, None, None], (27, size, size)).copy()
    return a_init, l_init, a_prior, m_uv, texture_padded, visibility, normal_map


def detail_fit(image: np.ndarray, params: FaceParams, model: MorphableModel,
               cam: Camera, config: FitConfig, embedder=None,
               m_parsing: np.ndarray | None = None,
               cross_light: np.ndarray | None = None,
               init_albedo: np.ndarray | None = None,
               init_light: np.ndarray | None = None) -> FitResult:
    """Optimize the detailed albedo and illumination maps for one image.

    ``cross_light`` is another identity's fitted (27, H, W) light map; when
    given, the cross-perceptual term renders this albedo under that light
    and compares embeddings against the input.  Without it the term is
    inactive (a pair cannot be fabricated from one image).
    """
    image = np.asarray(image, dtype=np.float64)
    size = config.uv_size
    buffers = rasterize_mesh(model, params, cam)
    a_init, l_init, a_prior, m_uv, texture_padded, visibility, normal_map = \
        initialize_detail_maps(image, params, model, cam, config, buffers=buffers)
    if init_albedo is not None:
        a_init = np.asarray(init_albedo, dtype=np.float64).copy()
    if init_light is not None:
        l_init = np.asarray(init_light, dtype=np.float64).copy()

    if embedder is None:
        embedder = StubEmbedder()
    m_face = buffers.m_proj if m_parsing is None else compose_face_mask(m_parsing, buffers.m_proj)
    if float(m_face.sum()) == 0.0:
        raise RuntimeError("mask collapse: no pixels to fit")

    a_detail = Tensor(a_init.copy(), requires_grad=True)
    l_detail = Tensor(l_init.copy(), requires_grad=True)
    opt = Adam([a_detail, l_detail], lr=config.lr_detail)
    epoch_len = max(1, config.steps_detail // 10)

    image_t = Tensor(image)
    l_coarse_map = Tensor(np.broadcast_to(params.theta_light[:, None, None],
                                          (27, size, size)).copy())
    l_coarse_vec = Tensor(params.theta_light.copy())
    a_prior_t = Tensor(a_prior)
    anneal_at = int(np.ceil(config.l1_anneal_fraction * config.steps_detail))

    history: list[LossReport] = []
    for step in range(config.steps_detail):
        i_detail = shade_buffers(buffers, a_detail, l_detail, cam)
        i_coarse_light = shade_buffers(buffers, a_detail, l_coarse_vec, cam)

        terms = {
            "reg_illu": losses.l_reg_illu(l_detail, l_coarse_map, m_uv),
            "symm": losses.l_symm(a_detail, m_uv),
            "smooth": losses.l_smooth(a_detail, a_prior_t, m_uv),
            "l1": losses.l_l1(a_detail, a_prior_t, m_uv),
            "grad": losses.l_grad(i_coarse_light, image_t, m_face),
            "img": losses.l_img(i_detail, image_t, m_face),
        }
        if cross_light is not None:
            i_cross = shade_buffers(buffers, a_detail, Tensor(cross_light), cam)
            terms["cross_percp"] = losses.l_cross_percp(i_cross, image_t, embedder)

        weights = config.weights
        if step >= anneal_at:
            weights = LossWeights(**{**_weights_dict(weights), "lambda_ar3": 0.0})
        total, report = losses.total_loss(terms, weights)
        if not np.isfinite(total.data):
            raise RuntimeError(f"detail fit diverged at step {step}")
        opt.zero_grad()
        tt.backward(total)
        opt.step()
        if (step + 1) % epoch_len == 0:
            opt.lr *= config.lr_decay
        history.append(report)

    diagnostics = _detail_diagnostics(l_detail.data, normal_map, m_uv, visibility)
    return FitResult(params=params.copy(), a_prior=a_prior, a_detail=a_detail.data.copy(),
                     l_detail=l_detail.data.copy(), texture=texture_padded, m_uv=m_uv,
                     visibility=visibility, history=history, diagnostics=diagnostics)


def _weights_dict(w: LossWeights) -> dict[str, float]:
    return {name: getattr(w, name) for name in (
        "lambda_id1", "lambda_id2", "lambda_ar1", "lambda_ar2",
        "lambda_ar3", "lambda_ar4", "lambda_dp1", "lambda_dp2")}


def _detail_diagnostics(l_detail: np.ndarray, normal_map: np.ndarray,
                        m_uv: np.ndarray, visibility: np.ndarray) -> dict[str, float]:
    irr = _irradiance_map(l_detail, normal_map)
    masked = m_uv[0] > 0.5
    total = max(int(masked.sum()), 1)
    negative = int(((irr.min(axis=0) < 0.0) & masked).sum())
    neg_frac = negative / total
    if neg_frac > NEGATIVE_SHADING_FLAG:
        warnings.warn(f"negative shading on {neg_frac:.1%} of masked texels")
    vis_frac = float(visibility.sum() / max(m_uv.sum(), 1.0))
    return {"negative_shading_fraction": float(neg_frac),
            "visibility_fraction": vis_frac}


def fit(image: np.ndarray, model: MorphableModel, cam: Camera, config: FitConfig,
        landmarks=None, m_parsing: np.ndarray | None = None, embedder=None,
        cross_light: np.ndarray | None = None,
        init: FaceParams | None = None) -> FitResult:
    """coarse_fit followed by detail_fit; the standard single-image pipeline."""
    params, _, _, _ = coarse_fit(image, landmarks, model, cam, config,
                                 m_parsing=m_parsing, init=init)
    return detail_fit(image, params, model, cam, config, embedder=embedder,
                      m_parsing=m_parsing, cross_light=cross_light)


def relight(model: MorphableModel, result: FitResult, new_light,
            cam: Camera, pose: np.ndarray | None = None):
    """Render the fitted albedo under new lighting (27-vector or 27xHxW map)."""
    params = result.params.copy()
    if pose is not None:
        params.pose = np.asarray(pose, dtype=np.float64)
    light = np.asarray(new_light, dtype=np.float64)
    if light.ndim == 3 and light.shape[1:] != result.a_detail.shape[1:]:
        raise ValueError("light map resolution does not match the fitted albedo")
    return render(model, params, cam, Tensor(result.a_detail), Tensor(light))


# -- persistence -------------------------------------------------------------------


def save_fit_result(result: FitResult, out_dir, model: MorphableModel | None = None,
                    cam: Camera | None = None, image: np.ndarray | None = None) -> None:
    """Write the result directory: parameters, maps, history, preview.

    The preview panel (input | detailed-light render | coarse-light render |
    albedo) requires ``model``, ``cam`` and ``image``; it is skipped when
    they are not provided.
    """
    os.makedirs(out_dir, exist_ok=True)
    save_params(result.params, os.path.join(out_dir, "params.txt"))
    imgio.save_pfm(os.path.join(out_dir, "albedo.pfm"), result.a_detail)
    imgio.save_pfm(os.path.join(out_dir, "prior.pfm"), result.a_prior)
    imgio.save_light_map(os.path.join(out_dir, "light.shm1"), result.l_detail)
    imgio.save_pfm(os.path.join(out_dir, "texture.pfm"), result.texture)
    imgio.save_pfm(os.path.join(out_dir, "mask.pfm"), result.m_uv)
    imgio.save_pfm(os.path.join(out_dir, "visibility.pfm"), result.visibility)
    with open(os.path.join(out_dir, "history.csv"), "w") as f:
        f.write("step," + LossReport.csv_header() + "\n")
        for i, rep in enumerate(result.history):
            f.write(f"{i}," + rep.csv_row() + "\n")
    with open(os.path.join(out_dir, "diagnostics.txt"), "w") as f:
        for k, v in sorted(result.diagnostics.items()):
            f.write(f"{k} = {repr(v)}\n")
    if model is not None and cam is not None and image is not None:
        preview = _preview_panel(result, model, cam, np.asarray(image, dtype=np.float64))
        imgio.save_png(os.path.join(out_dir, "preview.png"), preview)


def save_params(params: FaceParams, path) -> None:
    """key=value dump of the full 257-dim split plus pose; repr round-trips."""
    with open(path, "w") as f:
        for name, vec in (("theta_id", params.theta_id), ("theta_exp", params.theta_exp),
                          ("theta_alb", params.theta_alb),
                          ("theta_light", params.theta_light), ("pose", params.pose)):
            f.write(f"{name} = {' '.join(repr(float(v)) for v in vec)}\n")


def load_params(path) -> FaceParams:
    values: dict[str, np.ndarray] = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition("=")
            values[key.strip()] = np.array([float(v) for v in rest.split()])
    return FaceParams(values["theta_id"], values["theta_exp"], values["theta_alb"],
                      values["theta_light"], values["pose"])


def _preview_panel(result: FitResult, model: MorphableModel, cam: Camera,
                   image: np.ndarray) -> np.ndarray:
    buffers = rasterize_mesh(model, result.params, cam)
    with_detail = shade_buffers(buffers, Tensor(result.a_detail),
                                Tensor(result.l_detail), cam).data
    with_coarse = shade_buffers(buffers, Tensor(result.a_detail),
                                Tensor(result.params.theta_light), cam).data
    albedo_panel = _resize_nearest(result.a_detail, cam.height, cam.width)
    panels = [image, with_detail, with_coarse, albedo_panel]
    return np.clip(np.concatenate(panels, axis=2), 0.0, 1.0)


def _resize_nearest(image: np.ndarray, height: int, width: int) -> np.ndarray:
    src_h, src_w = image.shape[1], image.shape[2]
    rows = np.minimum((np.arange(height) * src_h) // height, src_h - 1)
    cols = np.minimum((np.arange(width) * src_w) // width, src_w - 1)
    return image[:, rows[:, None], cols[None, :]]
