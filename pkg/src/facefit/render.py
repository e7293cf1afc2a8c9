"""Camera projection, z-buffered rasterization, UV unwrapping and masks.

Conventions, fixed across the package:

* Pixel (row i, col j) has its center at continuous coordinates (x=j, y=i);
  the image y axis grows downward.
* A pinhole camera projects camera-space (X, Y, Z) to
  u = cx + f*X/Z, v = cy - f*Y/Z, with Z > 0 in front of the camera.
* UV texel (i, j) of an HxW map corresponds to uv ((j+0.5)/W, (i+0.5)/H);
  uv point (u, v) lands at map pixel (u*W - 0.5, v*H - 0.5).

Rasterization is hard: coverage and interpolation weights are fixed during
the backward pass, so gradients flow into the sampled maps and never into
geometry.  Depth is perspective-correct, ties resolve to the lower triangle
index, and coverage is decided at exact pixel centers.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from . import shading, tensor as tt
from .morphable import FaceParams, MorphableModel, decode_shape, uv_table
from .tensor import Tensor

DEPTH_EPS = 1e-6
# Relative slack for the unwrap self-occlusion test against the z-buffer.
VISIBILITY_BIAS = 1e-3


@dataclass
class Camera:
    """Pinhole intrinsics; principal point must lie inside the image."""

    focal: float
    cx: float
    cy: float
    height: int
    width: int

    def __post_init__(self):
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @classmethod
    def default(cls, size: int = 224, focal: float = 1015.0) -> "Camera":
        return cls(focal=focal, cx=(size - 1) / 2.0, cy=(size - 1) / 2.0,
                   height=size, width=size)


@dataclass
class RasterBuffers:
    m_proj: np.ndarray  # (1, H, W) in {0, 1}
    uv: np.ndarray  # (2, H, W)
    normal: np.ndarray  # (3, H, W), unit length where covered
    depth: np.ndarray  # (H, W), +inf where empty
    tri_index: np.ndarray  # (H, W) int32, -1 where empty
    rows: np.ndarray  # (K,) covered pixel rows
    cols: np.ndarray  # (K,) covered pixel cols


@dataclass
class RenderOutput:
    image: Tensor  # (3, H, W)
    m_proj: np.ndarray
    normal: np.ndarray
    uv: np.ndarray
    depth: np.ndarray


# -- geometry ------------------------------------------------------------------


def vertex_normals(positions, triangles: np.ndarray) -> np.ndarray:
    """Area-weighted average of incident face normals, normalized per vertex."""
    pos = tt._as_array(positions)
    tris = np.asarray(triangles, dtype=np.intp)
    a, b, c = pos[tris[:, 0]], pos[tris[:, 1]], pos[tris[:, 2]]
    face = np.cross(b - a, c - a)  # length = 2 * area
    normals = np.zeros_like(pos)
    for k in range(3):
        np.add.at(normals, tris[:, k], face)
    norms = np.linalg.norm(normals, axis=1)
    zero = norms < 1e-12
    if np.any(zero):
        warnings.warn(f"{int(zero.sum())} vertices have no usable normal")
    norms[zero] = 1.0
    return normals / norms[:, None]


def rotate_axis_angle(positions, rot) -> Tensor:
    """Rodrigues rotation of (N, 3) points by an axis-angle 3-vector.

    Differentiable in both arguments; smooth at the zero rotation.
    """
    p = tt.astensor(positions)
    r = tt.astensor(rot)
    theta_sq = tt.sum_(tt.pow2(r))
    theta = tt.sqrt(tt.add(theta_sq, Tensor(1e-24)))
    sin_t = tt.sin(theta)
    cos_t = tt.cos(theta)
    a = tt.div(sin_t, theta)
    b = tt.div(tt.sub(Tensor(1.0), cos_t), tt.add(theta_sq, Tensor(1e-24)))

    def cross_rv(v: Tensor) -> Tensor:
        r0, r1, r2 = r[0], r[1], r[2]
        vx, vy, vz = v[:, 0], v[:, 1], v[:, 2]
        cx = tt.sub(tt.mul(r1, vz), tt.mul(r2, vy))
        cy = tt.sub(tt.mul(r2, vx), tt.mul(r0, vz))
        cz = tt.sub(tt.mul(r0, vy), tt.mul(r1, vx))
        return tt.stack([cx, cy, cz], axis=1)

    c1 = cross_rv(p)
    c2 = cross_rv(c1)
    return tt.add(p, tt.add(tt.mul(a, c1), tt.mul(b, c2)))


def project(positions, pose, cam: Camera):
    """Rigid transform + pinhole projection.

    Returns (pixels (N, 2) tensor, depths (N,) tensor, valid (N,) bool array).
    Vertices with camera depth <= 1e-6 are flagged invalid and must be
    excluded from rasterization; their projected values are placeholders.
    """
    pose_t = tt.astensor(pose)
    cam_pts = tt.add(rotate_axis_angle(positions, pose_t[:3]),
                     tt.reshape(pose_t[3:], (1, 3)))
    z = cam_pts[:, 2]
    valid = z.data > DEPTH_EPS
    # Clamp invalid depths to 1 so the graph stays finite; the mask gates use.
    z_safe = tt.add(tt.mul(z, Tensor(valid.astype(np.float64))),
                    Tensor(1.0 - valid.astype(np.float64)))
    u = tt.add(tt.mul(tt.div(cam_pts[:, 0], z_safe), Tensor(cam.focal)), Tensor(cam.cx))
    v = tt.sub(Tensor(cam.cy), tt.mul(tt.div(cam_pts[:, 1], z_safe), Tensor(cam.focal)))
    return tt.stack([u, v], axis=1), z, valid


# -- rasterization ---------------------------------------------------------------


def rasterize(pixels: np.ndarray, depths: np.ndarray, valid: np.ndarray,
              triangles: np.ndarray, uv_coords: np.ndarray, normals: np.ndarray,
              cam: Camera) -> RasterBuffers:
    """Z-buffered scan of screen triangles at pixel centers.

    Attributes (uv, normal, depth) are perspective-correct; at equal depth
    the lower triangle index wins.
    """
    h, w = cam.height, cam.width
    zbuf = np.full((h, w), np.inf)
    tri_index = np.full((h, w), -1, dtype=np.int32)
    uv_buf = np.zeros((2, h, w))
    n_buf = np.zeros((3, h, w))

    tris = np.asarray(triangles, dtype=np.intp)
    xs = pixels[tris, 0]  # (T, 3)
    ys = pixels[tris, 1]
    zs = depths[tris]
    tri_ok = valid[tris].all(axis=1)
    area2_all = ((xs[:, 1] - xs[:, 0]) * (ys[:, 2] - ys[:, 0]) -
                 (ys[:, 1] - ys[:, 0]) * (xs[:, 2] - xs[:, 0]))
    ja = np.maximum(np.ceil(xs.min(axis=1)).astype(np.int64), 0)
    jb = np.minimum(np.floor(xs.max(axis=1)).astype(np.int64), w - 1)
    ia = np.maximum(np.ceil(ys.min(axis=1)).astype(np.int64), 0)
    ib = np.minimum(np.floor(ys.max(axis=1)).astype(np.int64), h - 1)
    cand = np.nonzero(tri_ok & (area2_all != 0.0) & (ja <= jb) & (ia <= ib))[0]
    if cand.size == 0:
        rows, cols = np.nonzero(tri_index >= 0)
        return RasterBuffers(m_proj=np.zeros((1, h, w)), uv=uv_buf, normal=n_buf,
                             depth=zbuf, tri_index=tri_index, rows=rows, cols=cols)

    # One flat fragment table over all candidate bounding boxes, then a single
    # lexicographic resolve: per pixel keep min depth, ties to the lowest
    # triangle index -- exactly the sequential strict-less z-buffer semantics.
    bw = jb[cand] - ja[cand] + 1
    bh = ib[cand] - ia[cand] + 1
    sizes = bw * bh
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    total = int(sizes.sum())
    frag_of = np.repeat(np.arange(cand.size), sizes)
    local = np.arange(total) - starts[frag_of]
    bw_f = bw[frag_of]
    lrow, lcol = np.divmod(local, bw_f)
    px = (ja[cand][frag_of] + lcol).astype(np.float64)
    py = (ia[cand][frag_of] + lrow).astype(np.float64)
    ft = cand[frag_of]

    x0, x1, x2 = xs[ft, 0], xs[ft, 1], xs[ft, 2]
    y0, y1, y2 = ys[ft, 0], ys[ft, 1], ys[ft, 2]
    area2 = area2_all[ft]
    l0 = ((x1 - px) * (y2 - py) - (y1 - py) * (x2 - px)) / area2
    l1 = ((x2 - px) * (y0 - py) - (y2 - py) * (x0 - px)) / area2
    l2 = 1.0 - l0 - l1
    inside = (l0 >= 0.0) & (l1 >= 0.0) & (l2 >= 0.0)
    if not inside.any():
        rows, cols = np.nonzero(tri_index >= 0)
        return RasterBuffers(m_proj=np.zeros((1, h, w)), uv=uv_buf, normal=n_buf,
                             depth=zbuf, tri_index=tri_index, rows=rows, cols=cols)
    ft, px, py = ft[inside], px[inside], py[inside]
    l0, l1, l2 = l0[inside], l1[inside], l2[inside]
    z0, z1, z2 = zs[ft, 0], zs[ft, 1], zs[ft, 2]
    inv_z = l0 / z0 + l1 / z1 + l2 / z2
    depth = 1.0 / inv_z

    pix_lin = py.astype(np.int64) * w + px.astype(np.int64)
    order = np.lexsort((ft, depth, pix_lin))
    pix_sorted = pix_lin[order]
    first = np.ones(order.size, dtype=bool)
    first[1:] = pix_sorted[1:] != pix_sorted[:-1]
    win = order[first]

    rows_w = pix_lin[win] // w
    cols_w = pix_lin[win] % w
    zbuf[rows_w, cols_w] = depth[win]
    tri_index[rows_w, cols_w] = ft[win].astype(np.int32)
    w0 = (l0[win] / z0[win]) * depth[win]
    w1 = (l1[win] / z1[win]) * depth[win]
    w2 = 1.0 - w0 - w1
    i0, i1, i2 = tris[ft[win], 0], tris[ft[win], 1], tris[ft[win], 2]
    for buf, attr in ((uv_buf, uv_coords), (n_buf, normals)):
        interp = w0 * attr[i0].T + w1 * attr[i1].T + w2 * attr[i2].T
        buf[:, rows_w, cols_w] = interp

    covered = tri_index >= 0
    norms = np.linalg.norm(n_buf, axis=0)
    np.divide(n_buf, norms[None], out=n_buf, where=norms[None] > 1e-12)
    rows, cols = np.nonzero(covered)
    return RasterBuffers(
        m_proj=covered.astype(np.float64)[None],
        uv=uv_buf,
        normal=n_buf,
        depth=zbuf,
        tri_index=tri_index,
        rows=rows,
        cols=cols,
    )


def rasterize_mesh(model: MorphableModel, params: FaceParams, cam: Camera) -> RasterBuffers:
    """Project the decoded mesh and rasterize it; geometry is not differentiated."""
    positions = decode_shape(model, params.theta_id, params.theta_exp).data
    pixels, depths, valid = project(positions, params.pose, cam)
    normals = vertex_normals(positions, model.triangles)
    return rasterize(pixels.data, depths.data, valid, model.triangles,
                     model.uv_coords, normals, cam)


# -- shading to image space -------------------------------------------------------


def uv_to_map_pixels(uv_points: np.ndarray, height: int, width: int) -> np.ndarray:
    """Continuous uv -> continuous map pixel coordinates (x, y)."""
    out = np.empty_like(uv_points)
    out[:, 0] = uv_points[:, 0] * width - 0.5
    out[:, 1] = uv_points[:, 1] * height - 0.5
    return out


def shade_buffers(buffers: RasterBuffers, albedo_map, light, cam: Camera) -> Tensor:
    """Sample maps at the covered pixels and shade; returns the (3, H, W) image.

    ``light`` is either a 27-coefficient vector (coarse) or a 27xHxW light
    map (detailed); both may require grad.
    """
    rows, cols = buffers.rows, buffers.cols
    albedo_t = tt.astensor(albedo_map)
    if rows.size == 0:
        return Tensor(np.zeros((3, cam.height, cam.width)))
    map_h, map_w = albedo_t.shape[1], albedo_t.shape[2]
    uv_pts = buffers.uv[:, rows, cols].T  # (K, 2)
    coords = uv_to_map_pixels(uv_pts, map_h, map_w)
    albedo_samples = tt.bilinear_sample(albedo_t, coords)  # (3, K)
    phi = shading.sh_basis_stack(buffers.normal[:, rows, cols])  # (9, K)
    light_t = tt.astensor(light)
    if light_t.shape == (shading.N_LIGHT_COEFFS,):
        shaded = shading.shade_with_coeffs(phi, albedo_samples, light_t)
    else:
        light_samples = tt.bilinear_sample(light_t, coords)  # (27, K)
        shaded = shading.shade_with_map_samples(phi, albedo_samples, light_samples)
    return tt.scatter_image(shaded, rows, cols, cam.height, cam.width)


def render(model: MorphableModel, params: FaceParams, cam: Camera,
           albedo_map, light, buffers: RasterBuffers | None = None) -> RenderOutput:
    """Full forward render: rasterize (or reuse buffers), sample maps, shade."""
    if buffers is None:
        buffers = rasterize_mesh(model, params, cam)
    image = shade_buffers(buffers, albedo_map, light, cam)
    return RenderOutput(image=image, m_proj=buffers.m_proj, normal=buffers.normal,
                        uv=buffers.uv, depth=buffers.depth)


# -- texture unwrapping -----------------------------------------------------------


def uv_surface_geometry(model: MorphableModel, positions: np.ndarray,
                        height: int, width: int):
    """Per covered texel: surface position and unit normal ((K,3) each)."""
    table = uv_table(model, height, width)
    normals = vertex_normals(positions, model.triangles)
    pts = np.zeros((table.rows.size, 3))
    nrm = np.zeros((table.rows.size, 3))
    for m in range(3):
        pts += table.weights[:, m:m + 1] * positions[table.vertex_ids[:, m]]
        nrm += table.weights[:, m:m + 1] * normals[table.vertex_ids[:, m]]
    norms = np.linalg.norm(nrm, axis=1, keepdims=True)
    norms[norms < 1e-12] = 1.0
    return pts, nrm / norms


def _bilinear_np(image: np.ndarray, coords: np.ndarray) -> np.ndarray:
    return tt.bilinear_sample(Tensor(image), coords).data


def unwrap_texture(image: np.ndarray, model: MorphableModel, params: FaceParams,
                   cam: Camera, height: int, width: int,
                   buffers: RasterBuffers | None = None):
    """Pull the input image back onto the UV grid.

    Returns (texture 3xHxW, visibility 1xHxW).  A texel is visible iff its
    surface point projects inside the frame, in front of the camera, and
    passes the z-buffer test against the rasterized mesh (self-occlusion).
    Invisible texels stay zero.
    """
    positions = decode_shape(model, params.theta_id, params.theta_exp).data
    if buffers is None:
        pixels, depths, valid = project(positions, params.pose, cam)
        normals = vertex_normals(positions, model.triangles)
        buffers = rasterize(pixels.data, depths.data, valid, model.triangles,
                            model.uv_coords, normals, cam)
    table = uv_table(model, height, width)
    texture = np.zeros((3, height, width))
    visibility = np.zeros((1, height, width))
    if table.rows.size == 0:
        return texture, visibility

    pts, _ = uv_surface_geometry(model, positions, height, width)
    pix, depth_t, valid_t = project(pts, params.pose, cam)
    px, py, pz = pix.data[:, 0], pix.data[:, 1], depth_t.data

    in_frame = ((px >= 0.0) & (px <= cam.width - 1.0) &
                (py >= 0.0) & (py <= cam.height - 1.0) & valid_t)
    # Max of the 4 neighboring z-buffer samples: +inf background near the
    # silhouette keeps edge texels visible; interior occluders reject.
    x0 = np.clip(np.floor(px).astype(np.intp), 0, cam.width - 1)
    y0 = np.clip(np.floor(py).astype(np.intp), 0, cam.height - 1)
    x1 = np.minimum(x0 + 1, cam.width - 1)
    y1 = np.minimum(y0 + 1, cam.height - 1)
    zb = buffers.depth
    neighbor_max = np.maximum.reduce([zb[y0, x0], zb[y0, x1], zb[y1, x0], zb[y1, x1]])
    vis = in_frame & (pz <= neighbor_max * (1.0 + VISIBILITY_BIAS))

    samples = _bilinear_np(np.asarray(image, dtype=np.float64),
                           np.stack([px[vis], py[vis]], axis=1))
    texture[:, table.rows[vis], table.cols[vis]] = samples
    visibility[0, table.rows[vis], table.cols[vis]] = 1.0
    return texture, visibility


def pad_noise(texture: np.ndarray, visibility: np.ndarray, m_uv: np.ndarray,
              seed: int) -> np.ndarray:
    """Fill texels covered by the atlas but unseen by the camera with noise.

    Gaussian, mean 0.5, sigma 0.15, clamped to [0, 1]; deterministic per seed.
    """
    out = np.array(texture, dtype=np.float64, copy=True)
    hole = (m_uv[0] > 0.5) & (visibility[0] < 0.5)
    k = int(hole.sum())
    if k:
        rng = np.random.default_rng(seed)
        noise = np.clip(rng.normal(0.5, 0.15, size=(out.shape[0], k)), 0.0, 1.0)
        out[:, hole] = noise
    return out


def compose_face_mask(m_parsing: np.ndarray, m_proj: np.ndarray) -> np.ndarray:
    """Final image-space loss mask: parsing mask times projected face mask."""
    m_parsing = np.asarray(m_parsing, dtype=np.float64)
    m_proj = np.asarray(m_proj, dtype=np.float64)
    if m_parsing.shape != m_proj.shape:
        raise ValueError(f"mask shape mismatch: {m_parsing.shape} vs {m_proj.shape}")
    return m_parsing * m_proj
