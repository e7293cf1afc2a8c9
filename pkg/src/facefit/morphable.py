"""Linear morphable face model: storage, decoding, UV baking, synthesis.

A model is a mean shape and mean albedo plus linear identity, expression
and albedo bases over a fixed triangulation with a UV atlas.  A face
instance is described by a 257-dim coefficient split: 80 identity, 64
expression, 80 albedo, 27 illumination, 6 pose.

The bundled synthesizer builds a bilaterally symmetric half-ellipsoid
"head" whose UV atlas maps mirrored surface points to mirrored texels
(u -> 1-u), which the albedo symmetry loss relies on.  Real model files
are loaded through the FMM1 format documented in ``save_model``.
"""

from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import tensor as tt
from .tensor import Tensor

DIM_ID = 80
DIM_EXP = 64
DIM_ALB = 80
DIM_LIGHT = 27
DIM_POSE = 6
DIM_TOTAL = DIM_ID + DIM_EXP + DIM_ALB + DIM_LIGHT + DIM_POSE  # 257

_MAGIC = b"FMM1"

# UV triangles thinner than this (in uv^2 units) are skipped when baking.
DEGENERATE_UV_AREA = 1e-12


class ModelFormatError(ValueError):
    """Malformed model file; ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class MorphableModel:
    """Immutable linear face model. Arrays are float64 except integer triangles."""

    mean_shape: np.ndarray  # (N, 3)
    mean_albedo: np.ndarray  # (N, 3), reflectance in [0, 1]
    basis_id: np.ndarray  # (3N, k_id)
    basis_exp: np.ndarray  # (3N, k_exp)
    basis_alb: np.ndarray  # (3N, k_alb)
    uv_coords: np.ndarray  # (N, 2) in the unit square
    triangles: np.ndarray  # (T, 3) uint32
    _uv_tables: dict = field(default_factory=dict, repr=False, compare=False)

    @property
    def n_vertices(self) -> int:
        return self.mean_shape.shape[0]

    @property
    def n_triangles(self) -> int:
        return self.triangles.shape[0]

    def validate(self) -> None:
        n = self.n_vertices
        bad = np.nonzero(self.triangles >= n)
        if bad[0].size:
            t = int(bad[0][0])
            raise ValueError(f"triangle {t} references vertex {int(self.triangles[bad][0])} "
                             f"but the model has only {n} vertices")
        if self.mean_albedo.min() < 0.0 or self.mean_albedo.max() > 1.0:
            raise ValueError("mean albedo outside [0, 1]")
        if self.uv_coords.min() < 0.0 or self.uv_coords.max() > 1.0:
            raise ValueError("uv coordinates outside the unit square")

    def radius(self) -> float:
        centered = self.mean_shape - self.mean_shape.mean(axis=0)
        return float(np.linalg.norm(centered, axis=1).max())


@dataclass
class FaceParams:
    """The 257-dim coefficient split plus 6-dof pose (axis-angle + translation)."""

    theta_id: np.ndarray
    theta_exp: np.ndarray
    theta_alb: np.ndarray
    theta_light: np.ndarray
    pose: np.ndarray

    @classmethod
    def zeros(cls, translation=(0.0, 0.0, 10.0)) -> "FaceParams":
        pose = np.zeros(DIM_POSE)
        pose[3:] = translation
        return cls(np.zeros(DIM_ID), np.zeros(DIM_EXP), np.zeros(DIM_ALB),
                   np.zeros(DIM_LIGHT), pose)

    def __post_init__(self):
        self.theta_id = np.asarray(self.theta_id, dtype=np.float64)
        self.theta_exp = np.asarray(self.theta_exp, dtype=np.float64)
        self.theta_alb = np.asarray(self.theta_alb, dtype=np.float64)
        self.theta_light = np.asarray(self.theta_light, dtype=np.float64)
        self.pose = np.asarray(self.pose, dtype=np.float64)
        total = (self.theta_id.size + self.theta_exp.size + self.theta_alb.size +
                 self.theta_light.size + self.pose.size)
        if total != DIM_TOTAL:
            raise ValueError(f"parameter split has {total} dims, expected {DIM_TOTAL}")

    def copy(self) -> "FaceParams":
        return FaceParams(self.theta_id.copy(), self.theta_exp.copy(),
                          self.theta_alb.copy(), self.theta_light.copy(), self.pose.copy())


# -- decoding ------------------------------------------------------------------


def decode_shape(model: MorphableModel, theta_id, theta_exp) -> Tensor:
    """S = mean + F_id @ theta_id + F_exp @ theta_exp, as an (N, 3) tensor."""
    tid = tt.astensor(theta_id)
    texp = tt.astensor(theta_exp)
    if tid.shape != (model.basis_id.shape[1],) or texp.shape != (model.basis_exp.shape[1],):
        raise ValueError("coefficient length does not match basis width")
    flat = tt.linear_map(model.basis_id, tid, model.mean_shape.reshape(-1))
    flat = tt.add(flat, tt.matmul(Tensor(model.basis_exp), texp))
    return tt.reshape(flat, (model.n_vertices, 3))


def decode_albedo(model: MorphableModel, theta_alb) -> Tensor:
    """A = mean + F_alb @ theta_alb, unclamped (clamp only at export)."""
    ta = tt.astensor(theta_alb)
    if ta.shape != (model.basis_alb.shape[1],):
        raise ValueError("coefficient length does not match basis width")
    flat = tt.linear_map(model.basis_alb, ta, model.mean_albedo.reshape(-1))
    return tt.reshape(flat, (model.n_vertices, 3))


# -- UV atlas rasterization ----------------------------------------------------


@dataclass
class UvTable:
    """Per-texel correspondence of a UV grid with the mesh surface."""

    mask: np.ndarray  # (H, W) float 0/1
    tri_index: np.ndarray  # (H, W) int32, -1 where uncovered
    vertex_ids: np.ndarray  # (K, 3) for the K covered texels (row-major order)
    weights: np.ndarray  # (K, 3) barycentric weights
    rows: np.ndarray  # (K,)
    cols: np.ndarray  # (K,)


def uv_table(model: MorphableModel, height: int, width: int) -> UvTable:
    """Rasterize the UV triangulation onto an HxW texel grid (cached per model).

    Texel (i, j) maps to uv ((j+0.5)/W, (i+0.5)/H).  Overlaps resolve to the
    lowest triangle index; degenerate UV triangles are skipped with a warning.
    """
    key = (height, width)
    cached = model._uv_tables.get(key)
    if cached is not None:
        return cached

    tri_index = np.full((height, width), -1, dtype=np.int32)
    weights = np.zeros((height, width, 3))
    uv = model.uv_coords
    # Texel-center coordinates in uv units.
    us = (np.arange(width) + 0.5) / width
    vs = (np.arange(height) + 0.5) / height

    for t, (i0, i1, i2) in enumerate(model.triangles):
        p0, p1, p2 = uv[i0], uv[i1], uv[i2]
        area = (p1[0] - p0[0]) * (p2[1] - p0[1]) - (p1[1] - p0[1]) * (p2[0] - p0[0])
        if abs(area) < DEGENERATE_UV_AREA:
            warnings.warn(f"skipping degenerate uv triangle {t}")
            continue
        umin, umax = min(p0[0], p1[0], p2[0]), max(p0[0], p1[0], p2[0])
        vmin, vmax = min(p0[1], p1[1], p2[1]), max(p0[1], p1[1], p2[1])
        ja = np.searchsorted(us, umin)
        jb = np.searchsorted(us, umax, side="right")
        ia = np.searchsorted(vs, vmin)
        ib = np.searchsorted(vs, vmax, side="right")
        if ja >= jb or ia >= ib:
            continue
        uu, vv = np.meshgrid(us[ja:jb], vs[ia:ib])
        w0 = ((p1[0] - uu) * (p2[1] - vv) - (p1[1] - vv) * (p2[0] - uu)) / area
        w1 = ((p2[0] - uu) * (p0[1] - vv) - (p2[1] - vv) * (p0[0] - uu)) / area
        w2 = 1.0 - w0 - w1
        inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
        block = tri_index[ia:ib, ja:jb]
        write = inside & (block < 0)
        block[write] = t
        for wi, warr in enumerate((w0, w1, w2)):
            plane = weights[ia:ib, ja:jb, wi]
            plane[write] = warr[write]

    mask = (tri_index >= 0).astype(np.float64)
    rows, cols = np.nonzero(tri_index >= 0)
    covered_tris = tri_index[rows, cols]
    table = UvTable(
        mask=mask,
        tri_index=tri_index,
        vertex_ids=model.triangles[covered_tris].astype(np.intp),
        weights=weights[rows, cols],
        rows=rows,
        cols=cols,
    )
    model._uv_tables[key] = table
    return table


def bake_vertex_map(model: MorphableModel, per_vertex, height: int, width: int) -> Tensor:
    """Interpolate per-vertex values (N, C) into UV space as a CxHxW tensor.

    Linear in the vertex values, hence exactly differentiable through the
    fixed barycentric weights.
    """
    table = uv_table(model, height, width)
    vt = tt.astensor(per_vertex)
    c = vt.shape[1]
    acc = None
    for m in range(3):
        gathered = tt.take(vt, table.vertex_ids[:, m])  # (K, C)
        term = tt.mul(gathered, Tensor(table.weights[:, m:m + 1]))
        acc = term if acc is None else tt.add(acc, term)
    values = tt.transpose(acc)  # (C, K)
    return tt.scatter_image(values, table.rows, table.cols, height, width)


def bake_prior_albedo_map(model: MorphableModel, theta_alb, height: int, width: int):
    """Decode albedo coefficients and splat them over the UV atlas.

    Returns (albedo map 3xHxW tensor, coverage mask 1xHxW array).
    """
    if height < 8 or width < 8:
        raise ValueError("uv maps must be at least 8x8")
    albedo = decode_albedo(model, theta_alb)
    amap = bake_vertex_map(model, albedo, height, width)
    mask = uv_table(model, height, width).mask[None]
    return amap, mask


# -- synthetic model -----------------------------------------------------------


def _even_field(rng: np.random.Generator, ug: np.ndarray, vg: np.ndarray) -> np.ndarray:
    """Smooth random field symmetric under ug -> 1-ug."""
    out = np.zeros_like(ug)
    for _ in range(3):
        m = rng.integers(0, 3)
        q = rng.integers(0, 4)
        amp = rng.uniform(-1.0, 1.0)
        ph = rng.uniform(0.0, 2.0 * np.pi)
        out += amp * np.cos(np.pi * m * (2.0 * ug - 1.0)) * np.cos(np.pi * q * vg + ph)
    return out


def _odd_field(rng: np.random.Generator, ug: np.ndarray, vg: np.ndarray) -> np.ndarray:
    """Smooth random field antisymmetric under ug -> 1-ug."""
    out = np.zeros_like(ug)
    for _ in range(3):
        m = rng.integers(1, 3)
        q = rng.integers(0, 4)
        amp = rng.uniform(-1.0, 1.0)
        ph = rng.uniform(0.0, 2.0 * np.pi)
        out += amp * np.sin(np.pi * m * (2.0 * ug - 1.0)) * np.cos(np.pi * q * vg + ph)
    return out


def _scale_rows(basis: np.ndarray, max_row_l1: float) -> np.ndarray:
    row_l1 = np.abs(basis).sum(axis=1).max()
    if row_l1 > 0:
        basis = basis * (max_row_l1 / row_l1)
    return basis


def synth_model(seed: int, n_target: int = 800) -> MorphableModel:
    """Deterministic bilaterally symmetric half-ellipsoid head model.

    The UV atlas is mirror symmetric (texel u maps to the surface point
    mirrored at 1-u) and basis fields are built symmetric so that any
    coefficient vector decodes to a left-right symmetric albedo.  Albedo
    bases are scaled so |theta|_inf <= 3 keeps reflectance inside [0, 1].
    """
    if n_target < 50:
        raise ValueError("n_target must be >= 50")
    rng = np.random.default_rng(seed)

    # Grid resolution: C+1 columns (C even, center column on the symmetry plane).
    c_cols = 2 * max(3, int(round(np.sqrt(n_target) * 0.6)))
    r_rows = max(3, int(np.ceil(n_target / (c_cols + 1))) - 1)
    jj, ii = np.meshgrid(np.arange(c_cols + 1), np.arange(r_rows + 1))
    ug = jj / c_cols  # 0 (left) .. 1 (right)
    vg = ii / r_rows  # 0 (top) .. 1 (bottom)

    phi = 1.25 * (2.0 * ug - 1.0)
    theta = 0.35 + (np.pi - 0.7) * vg
    ax, ay, az = 0.85, 1.1, 0.95
    x = ax * np.sin(theta) * np.sin(phi)
    y = ay * np.cos(theta)
    z = az * np.sin(theta) * np.cos(phi)
    mean_shape = np.stack([x, y, z], axis=-1).reshape(-1, 3)

    margin = 0.06
    uv = np.stack([margin + (1.0 - 2.0 * margin) * ug,
                   margin + (1.0 - 2.0 * margin) * vg], axis=-1).reshape(-1, 2)

    def vid(i: int, j: int) -> int:
        return i * (c_cols + 1) + j

    triangles = []
    for i in range(r_rows):
        for j in range(c_cols):
            v00, v01 = vid(i, j), vid(i, j + 1)
            v10, v11 = vid(i + 1, j), vid(i + 1, j + 1)
            # Mirror the quad diagonal across the center line so barycentric
            # interpolation of symmetric vertex data is exactly symmetric.
            if j + 0.5 < c_cols / 2:
                quads = [(v00, v10, v11), (v00, v11, v01)]
            else:
                quads = [(v01, v00, v10), (v01, v10, v11)]
            triangles.extend(quads)
    triangles = np.asarray(triangles, dtype=np.uint32)

    # Orient every triangle outward (normal pointing away from the origin).
    verts = mean_shape
    a, b, c3 = verts[triangles[:, 0]], verts[triangles[:, 1]], verts[triangles[:, 2]]
    face_n = np.cross(b - a, c3 - a)
    centroid = (a + b + c3) / 3.0
    flip = (face_n * centroid).sum(axis=1) < 0.0
    triangles[flip] = triangles[flip][:, [0, 2, 1]]

    ug_flat = ug.reshape(-1)
    vg_flat = vg.reshape(-1)

    base_rgb = np.array([0.62, 0.49, 0.41])
    mean_albedo = np.empty((mean_shape.shape[0], 3))
    for ch in range(3):
        mean_albedo[:, ch] = base_rgb[ch] + 0.08 * _even_field(rng, ug_flat, vg_flat)
    mean_albedo = np.clip(mean_albedo, 0.16, 0.84)

    n = mean_shape.shape[0]

    def build_shape_basis(k: int) -> np.ndarray:
        cols = np.zeros((3 * n, k))
        for kk in range(k):
            dx = _odd_field(rng, ug_flat, vg_flat)
            dy = _even_field(rng, ug_flat, vg_flat)
            dz = _even_field(rng, ug_flat, vg_flat)
            cols[:, kk] = np.stack([dx, dy, dz], axis=-1).reshape(-1)
        return _scale_rows(cols, 0.03)

    def build_albedo_basis(k: int) -> np.ndarray:
        cols = np.zeros((3 * n, k))
        for kk in range(k):
            fields = [_even_field(rng, ug_flat, vg_flat) for _ in range(3)]
            cols[:, kk] = np.stack(fields, axis=-1).reshape(-1)
        # |theta|_inf <= 3 stays within the 0.16..0.84 headroom of the mean.
        return _scale_rows(cols, 0.05)

    model = MorphableModel(
        mean_shape=mean_shape,
        mean_albedo=mean_albedo,
        basis_id=build_shape_basis(DIM_ID),
        basis_exp=build_shape_basis(DIM_EXP),
        basis_alb=build_albedo_basis(DIM_ALB),
        uv_coords=uv,
        triangles=triangles,
    )
    model.validate()
    return model


# -- FMM1 serialization ----------------------------------------------------------


def save_model(model: MorphableModel, path) -> None:
    """Write the FMM1 binary format.

    Layout (little-endian): magic ``FMM1``; u32 N, T, k_id, k_exp, k_alb;
    f64 mean_shape(3N), mean_albedo(3N), basis_id (3N*k_id, column-major by
    coefficient), basis_exp, basis_alb, uv(2N); u32 triangles(3T).
    """
    n, t = model.n_vertices, model.n_triangles
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<5I", n, t, model.basis_id.shape[1],
                            model.basis_exp.shape[1], model.basis_alb.shape[1]))
        f.write(model.mean_shape.astype("<f8").tobytes())
        f.write(model.mean_albedo.astype("<f8").tobytes())
        for basis in (model.basis_id, model.basis_exp, model.basis_alb):
            f.write(basis.astype("<f8").ravel(order="F").tobytes())
        f.write(model.uv_coords.astype("<f8").tobytes())
        f.write(model.triangles.astype("<u4").tobytes())


def load_model(path) -> MorphableModel:
    """Read an FMM1 file; raises :class:`ModelFormatError` with a byte offset."""
    with open(path, "rb") as f:
        blob = f.read()
    offset = 0

    def read_exact(nbytes: int, what: str) -> bytes:
        nonlocal offset
        if offset + nbytes > len(blob):
            raise ModelFormatError(f"truncated file while reading {what}", offset)
        chunk = blob[offset:offset + nbytes]
        offset += nbytes
        return chunk

    if blob[:4] != _MAGIC:
        raise ModelFormatError("bad magic, expected FMM1", 0)
    offset = 4
    n, t, k_id, k_exp, k_alb = struct.unpack("<5I", read_exact(20, "header"))

    def read_f64(count: int, what: str) -> np.ndarray:
        return np.frombuffer(read_exact(8 * count, what), dtype="<f8").astype(np.float64)

    mean_shape = read_f64(3 * n, "mean shape").reshape(n, 3)
    mean_albedo = read_f64(3 * n, "mean albedo").reshape(n, 3)
    basis_id = read_f64(3 * n * k_id, "identity basis").reshape(3 * n, k_id, order="F")
    basis_exp = read_f64(3 * n * k_exp, "expression basis").reshape(3 * n, k_exp, order="F")
    basis_alb = read_f64(3 * n * k_alb, "albedo basis").reshape(3 * n, k_alb, order="F")
    uv = read_f64(2 * n, "uv coordinates").reshape(n, 2)
    tri_offset = offset
    triangles = np.frombuffer(read_exact(4 * 3 * t, "triangles"), dtype="<u4")
    triangles = triangles.astype(np.uint32).reshape(t, 3)
    if offset != len(blob):
        raise ModelFormatError("trailing bytes after triangle list", offset)

    model = MorphableModel(mean_shape=np.ascontiguousarray(mean_shape),
                           mean_albedo=np.ascontiguousarray(mean_albedo),
                           basis_id=np.ascontiguousarray(basis_id),
                           basis_exp=np.ascontiguousarray(basis_exp),
                           basis_alb=np.ascontiguousarray(basis_alb),
                           uv_coords=np.ascontiguousarray(uv),
                           triangles=triangles)
    bad = np.nonzero(triangles >= n)
    if bad[0].size:
        tri = int(bad[0][0])
        raise ModelFormatError(
            f"triangle {tri} references vertex {int(triangles[bad][0])} out of range (N={n})",
            tri_offset + 12 * tri)
    model.validate()
    return model


def export_obj(path, positions: np.ndarray, uv_coords: np.ndarray, triangles: np.ndarray) -> None:
    """ASCII OBJ export with v, vt and f v/vt records (1-based indices)."""
    with open(path, "w") as f:
        for p in positions:
            f.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        for u in uv_coords:
            f.write(f"vt {u[0]:.9g} {u[1]:.9g}\n")
        for tri in triangles:
            i, j, k = (int(v) + 1 for v in tri)
            f.write(f"f {i}/{i} {j}/{j} {k}/{k}\n")
