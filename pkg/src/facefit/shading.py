"""Spherical-harmonics illumination and Lambertian shading.

Lighting is a 27-vector: 9 real SH coefficients per RGB channel, stored
channel-major (red 0..8, green 9..17, blue 18..26).  The per-texel
generalization is a 27xHxW "light map" holding an independent coefficient
vector per texel; a single coefficient vector expanded over the grid is
the exact coarse special case.

The basis functions are the raw real spherical harmonics up to band 2 in
the order Y00, Y1-1, Y10, Y11, Y2-2, Y2-1, Y20, Y21, Y22.  No clamped
cosine kernel is folded in; any such scaling is absorbed into the
optimized coefficients.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tt
from .tensor import Tensor

# Real SH normalization constants (band 0..2).
SH_C0 = 0.28209479177387814  # 1 / (2 sqrt(pi))
SH_C1 = 0.4886025119029199  # sqrt(3 / (4 pi))
SH_C2_XY = 1.0925484305920792  # sqrt(15 / (4 pi))
SH_C2_Z2 = 0.31539156525252005  # (1/4) sqrt(5 / pi)
SH_C2_X2Y2 = 0.5462742152960396  # (1/4) sqrt(15 / pi)

N_SH = 9
N_LIGHT_COEFFS = 27


def sh_basis9(n) -> np.ndarray:
    """Evaluate the 9 band-<=2 real SH basis functions at a unit vector."""
    n = np.asarray(n, dtype=np.float64)
    if n.shape != (3,):
        raise ValueError("expected a single 3-vector")
    norm = float(np.linalg.norm(n))
    if abs(norm - 1.0) > 1e-6:
        raise ValueError(f"normal not unit length (|n|={norm})")
    x, y, z = n
    return np.array([
        SH_C0,
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2_XY * x * y,
        SH_C2_XY * y * z,
        SH_C2_Z2 * (3.0 * z * z - 1.0),
        SH_C2_XY * x * z,
        SH_C2_X2Y2 * (x * x - y * y),
    ])


def sh_basis_stack(normals: np.ndarray) -> np.ndarray:
    """Vectorized basis: normals with a leading component axis (3, ...) -> (9, ...).

    No unit-length check; callers mask out texels with invalid normals.
    """
    x, y, z = normals[0], normals[1], normals[2]
    return np.stack([
        np.broadcast_to(SH_C0, x.shape).copy(),
        SH_C1 * y,
        SH_C1 * z,
        SH_C1 * x,
        SH_C2_XY * x * y,
        SH_C2_XY * y * z,
        SH_C2_Z2 * (3.0 * z * z - 1.0),
        SH_C2_XY * x * z,
        SH_C2_X2Y2 * (x * x - y * y),
    ])


def shade_point(n, albedo, light) -> Tensor:
    """Lambertian reflection of a surface point: a_c * sum_b L[c,b] Phi_b(n).

    Differentiable in ``albedo`` (rgb) and ``light`` (27 coefficients); the
    normal is a constant.
    """
    phi = sh_basis9(n)
    light_t = tt.astensor(light)
    if light_t.shape != (N_LIGHT_COEFFS,):
        raise ValueError("light must have 27 coefficients")
    irradiance = tt.matmul(tt.reshape(light_t, (3, N_SH)), Tensor(phi))
    return tt.mul(tt.astensor(albedo), irradiance)


def expand_coarse_light(light, height: int, width: int) -> Tensor:
    """Tile one 27-coefficient vector over every texel of a HxW grid."""
    light_t = tt.astensor(light)
    if light_t.shape != (N_LIGHT_COEFFS,):
        raise ValueError("light must have 27 coefficients")
    return tt.broadcast_to(tt.reshape(light_t, (N_LIGHT_COEFFS, 1, 1)),
                           (N_LIGHT_COEFFS, height, width))


def shade_maps(normal_map, albedo_map, light_map, mask) -> Tensor:
    """Shade every texel with its own SH coefficient vector.

    normal_map: 3xHxW constant buffer, unit length wherever mask=1.
    albedo_map: 3xHxW tensor.  light_map: 27xHxW tensor.  mask: 1xHxW.
    Texels outside the mask come out exactly zero.
    """
    normals = tt._as_array(normal_map)
    mask_arr = tt._as_array(mask)
    albedo_t = tt.astensor(albedo_map)
    light_t = tt.astensor(light_map)
    c, h, w = albedo_t.shape
    if c != 3 or light_t.shape != (N_LIGHT_COEFFS, h, w) or normals.shape != (3, h, w):
        raise ValueError("shape mismatch between shading inputs")
    phi = sh_basis_stack(normals)  # (9, H, W)
    per_channel = tt.reshape(light_t, (3, N_SH, h, w))
    irradiance = tt.sum_(tt.mul(per_channel, Tensor(phi[None])), axis=1)  # (3, H, W)
    return tt.mul(tt.mul(albedo_t, irradiance), Tensor(np.broadcast_to(mask_arr, (1, h, w)).copy()))


def shade_with_coeffs(phi: np.ndarray, albedo, light) -> Tensor:
    """Shade K samples with one global 27-vector: phi is a constant (9, K) basis block."""
    light_t = tt.astensor(light)
    irradiance = tt.matmul(tt.reshape(light_t, (3, N_SH)), Tensor(phi))  # (3, K)
    return tt.mul(tt.astensor(albedo), irradiance)


def shade_with_map_samples(phi: np.ndarray, albedo, light_samples) -> Tensor:
    """Shade K samples that each carry their own coefficients.

    phi: constant (9, K); albedo: (3, K) tensor; light_samples: (27, K) tensor.
    """
    light_t = tt.astensor(light_samples)
    k = phi.shape[1]
    per_channel = tt.reshape(light_t, (3, N_SH, k))
    irradiance = tt.sum_(tt.mul(per_channel, Tensor(phi[None])), axis=1)  # (3, K)
    return tt.mul(tt.astensor(albedo), irradiance)
