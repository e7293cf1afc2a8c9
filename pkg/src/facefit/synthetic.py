"""Deterministic synthetic scenes with known albedo and illumination.

A scene bundles a synthetic head model, ground-truth parameters, a detailed
ground-truth albedo map (prior albedo plus a mostly-symmetric texel-space
detail pattern), a non-constant ground-truth SH illumination vector, and
the rendered 8-bit input image.  Everything derives from one seed, so a
bundle can be regenerated bit-identically.
"""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass

import numpy as np

from . import imgio, shading
from .fitting import save_params
from .morphable import (FaceParams, MorphableModel, bake_prior_albedo_map, decode_shape,
                        save_model, synth_model, uv_table)
from .render import Camera, project, render
from .tensor import Tensor

# Anchor uv positions whose nearest vertices become synthetic landmarks.
_LANDMARK_ANCHORS = (
    (0.50, 0.32), (0.32, 0.48), (0.68, 0.48), (0.50, 0.66),
    (0.42, 0.42), (0.58, 0.42), (0.40, 0.58), (0.60, 0.58),
)


@dataclass
class SceneBundle:
    model: MorphableModel
    params: FaceParams  # ground truth, theta_light holds the true SH vector
    albedo_gt: np.ndarray  # (3, H, W), only meaningful on m_uv
    light_gt: np.ndarray  # (27,)
    image: np.ndarray  # (3, Hi, Wi), exactly the decoded PNG values
    landmarks: np.ndarray  # (L, 3) rows of (vertex_id, x, y)
    m_uv: np.ndarray  # (1, H, W)
    cam: Camera
    uv_size: int
    seed: int


def _directional_light(rng: np.random.Generator, one_sided: bool) -> np.ndarray:
    """Random non-constant SH vector, channel-major (3, 9) -> (27,)."""
    l = np.zeros((3, 9))
    l[:, 0] = 2.6 * (1.0 + 0.08 * rng.uniform(-1.0, 1.0, 3))
    if one_sided:
        # Dominant +x component: lights the head strongly from one side.
        direction = np.array([1.0, 0.25, 0.55])
    else:
        direction = rng.uniform(-1.0, 1.0, 3)
        direction[2] = abs(direction[2]) + 0.5  # keep the front lit
    direction = direction / np.linalg.norm(direction)
    strength = 1.1 if one_sided else 0.9
    tint = 1.0 + 0.1 * rng.uniform(-1.0, 1.0, 3)
    # Basis order at band 1 is (y, z, x).
    # Bands 0..1 only: band-2 components are nearly unobservable from the
    # front-facing normal cone, so ground truth there would be unrecoverable.
    l[:, 1] = strength * direction[1] * tint
    l[:, 2] = strength * direction[2] * tint
    l[:, 3] = strength * direction[0] * tint
    return l.reshape(-1)


def _bound_light(light: np.ndarray, normals: np.ndarray) -> np.ndarray:
    """Scale the non-constant part until shading stays positive, then
    normalize the whole vector so peak irradiance is ~1."""
    phi = shading.sh_basis_stack(normals.T)  # (9, K)
    l = light.reshape(3, 9).copy()
    for _ in range(30):
        irr = l @ phi
        if irr.min() >= 0.18:
            break
        l[:, 1:] *= 0.85
    irr = l @ phi
    l *= 1.0 / irr.max()
    return l.reshape(-1)


def _detail_pattern(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smooth mostly-symmetric texel-space detail field, rms-normalized."""
    jj, ii = np.meshgrid(np.arange(size), np.arange(size))
    uu = (jj + 0.5) / size
    vv = (ii + 0.5) / size
    p = np.zeros((size, size))
    for _ in range(6):
        fu = rng.integers(1, 6)
        fv = rng.integers(1, 6)
        ph = rng.uniform(0.0, 2.0 * np.pi)
        p += rng.uniform(-1.0, 1.0) * np.cos(2.0 * np.pi * (fu * uu + fv * vv) + ph)
    for _ in range(3):
        cu, cv = rng.uniform(0.2, 0.8, 2)
        sg = rng.uniform(0.04, 0.09)
        p += rng.uniform(-1.5, 1.5) * np.exp(-((uu - cu) ** 2 + (vv - cv) ** 2) / (2 * sg * sg))
    sym = 0.5 * (p + p[:, ::-1])
    asym = 0.5 * (p - p[:, ::-1])
    d = sym + 0.3 * asym
    rms = np.sqrt((d ** 2).mean())
    return d * (0.05 / max(rms, 1e-12)) if rms > 0 else d


def make_scene(seed: int, uv_size: int = 256, image_size: int = 224,
               focal: float = 1015.0, n_vertices: int = 800,
               one_sided_light: bool = False) -> SceneBundle:
    """Build the full synthetic ground-truth scene for one seed."""
    model = synth_model(seed, n_vertices)
    rng = np.random.default_rng(seed + 1)
    cam = Camera.default(image_size, focal)

    theta_id = np.clip(rng.normal(0.0, 0.35, model.basis_id.shape[1]), -1.0, 1.0)
    theta_exp = np.clip(rng.normal(0.0, 0.3, model.basis_exp.shape[1]), -1.0, 1.0)
    theta_alb = np.clip(rng.normal(0.0, 0.5, model.basis_alb.shape[1]), -1.5, 1.5)
    rot = rng.uniform(-0.05, 0.05, 3)
    z = focal * model.radius() / (0.5 * 0.7 * image_size)
    pose = np.concatenate([rot, [0.0, 0.0, z]])

    params = FaceParams(theta_id, theta_exp, theta_alb, np.zeros(27), pose)
    positions = decode_shape(model, theta_id, theta_exp).data
    from .render import vertex_normals

    normals = vertex_normals(positions, model.triangles)
    light = _directional_light(rng, one_sided_light)
    light = _bound_light(light, normals)
    params.theta_light = light

    prior_t, m_uv = bake_prior_albedo_map(model, theta_alb, uv_size, uv_size)
    detail = _detail_pattern(rng, uv_size)
    albedo_gt = np.clip(prior_t.data + detail[None] * m_uv, 0.02, 0.98)
    # Round-trip through float32 so the PFM on disk is the exact render input.
    albedo_gt = albedo_gt.astype(np.float32).astype(np.float64)

    out = render(model, params, cam, Tensor(albedo_gt), Tensor(light))
    image_u8 = np.clip(np.rint(np.clip(out.image.data, 0.0, 1.0) * 255.0), 0, 255)
    image = image_u8 / 255.0

    lm_ids = _landmark_vertices(model)
    pix, _, _ = project(positions, pose, cam)
    landmarks = np.column_stack([lm_ids.astype(np.float64), pix.data[lm_ids]])

    return SceneBundle(model=model, params=params, albedo_gt=albedo_gt, light_gt=light,
                       image=image, landmarks=landmarks, m_uv=m_uv, cam=cam,
                       uv_size=uv_size, seed=seed)


def _landmark_vertices(model: MorphableModel) -> np.ndarray:
    ids = []
    for (au, av) in _LANDMARK_ANCHORS:
        d = ((model.uv_coords[:, 0] - au) ** 2 + (model.uv_coords[:, 1] - av) ** 2)
        ids.append(int(np.argmin(d)))
    return np.unique(np.array(ids, dtype=np.intp))


def expand_light(light: np.ndarray, size: int) -> np.ndarray:
    return np.broadcast_to(np.asarray(light, dtype=np.float64)[:, None, None],
                           (27, size, size)).copy()


def write_bundle(bundle: SceneBundle, out_dir) -> list[str]:
    """Write the scene files plus a SHA-256 manifest; returns the file names."""
    os.makedirs(out_dir, exist_ok=True)
    save_model(bundle.model, os.path.join(out_dir, "model.fmm1"))
    save_params(bundle.params, os.path.join(out_dir, "params.txt"))
    imgio.save_pfm(os.path.join(out_dir, "albedo_gt.pfm"), bundle.albedo_gt)
    imgio.save_light_map(os.path.join(out_dir, "light_gt.shm1"),
                         expand_light(bundle.light_gt, bundle.uv_size))
    imgio.save_pfm(os.path.join(out_dir, "uv_mask.pfm"), bundle.m_uv)
    imgio.save_png(os.path.join(out_dir, "input.png"), bundle.image)
    with open(os.path.join(out_dir, "landmarks.txt"), "w") as f:
        for vid, x, y in bundle.landmarks:
            f.write(f"{int(vid)} {repr(x)} {repr(y)}\n")
    with open(os.path.join(out_dir, "scene.cfg"), "w") as f:
        f.write("# synthetic scene settings\n")
        f.write(f"seed = {bundle.seed}\n")
        f.write(f"uv_size = {bundle.uv_size}\n")
        f.write(f"image_size = {bundle.cam.height}\n")
        f.write(f"focal = {repr(bundle.cam.focal)}\n")
    names = sorted(n for n in os.listdir(out_dir) if n != "manifest.txt")
    with open(os.path.join(out_dir, "manifest.txt"), "w") as f:
        for name in names:
            digest = sha256_file(os.path.join(out_dir, name))
            f.write(f"{digest}  {name}\n")
    return names + ["manifest.txt"]


def load_landmarks(path) -> np.ndarray:
    rows = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vid, x, y = line.split()
            rows.append([float(vid), float(x), float(y)])
    return np.asarray(rows)


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()
