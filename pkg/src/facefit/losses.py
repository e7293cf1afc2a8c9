"""Differentiable loss terms for albedo/illumination disentanglement.

All map-space and image-space penalties reduce by *masked mean* rather than
raw sums, which keeps the published combination weights meaningful across
map resolutions.  Every loss is zero on its exact-match input, non-negative,
and blind to values outside its mask.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as tt
from .tensor import Tensor

SMOOTH_ALPHA = 80.0  # edge-stopping falloff for the weighted smoothness term


@dataclass
class LossWeights:
    """Combination coefficients; the adversarial term's weight is kept for
    shape compatibility but its term is pinned to zero (no discriminator)."""

    lambda_id1: float = 1.0
    lambda_id2: float = 0.5
    lambda_ar1: float = 5.0
    lambda_ar2: float = 5.0
    lambda_ar3: float = 1.0
    lambda_ar4: float = 0.001
    lambda_dp1: float = 1.0
    lambda_dp2: float = 5.0

    def __post_init__(self):
        for f in fields(self):
            v = float(getattr(self, f.name))
            if not np.isfinite(v) or v < 0:
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")
            setattr(self, f.name, v)


@dataclass
class LossReport:
    """Scalar value of every term plus the weighted group/total recombination."""

    reg_illu: float = 0.0
    cross_percp: float = 0.0
    symm: float = 0.0
    smooth: float = 0.0
    l1: float = 0.0
    gan_g: float = 0.0
    grad: float = 0.0
    img: float = 0.0
    id: float = 0.0
    ar: float = 0.0
    dp: float = 0.0
    total: float = 0.0

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @staticmethod
    def csv_header() -> str:
        return ",".join(f.name for f in fields(LossReport))

    def csv_row(self) -> str:
        return ",".join(repr(getattr(self, f.name)) for f in fields(LossReport))


class StubEmbedder:
    """Deterministic, differentiable stand-in for a face recognition embedder.

    Grayscale, average-pool to a 16x16 grid, remove the mean, L2-normalize.
    Sensitive to illumination only through low spatial frequencies; good
    enough to exercise the cross-identity wiring, not a recognition model.
    """

    grid = 16

    def __call__(self, image) -> Tensor:
        img = tt.astensor(image)
        c, h, w = img.shape
        if h < self.grid or w < self.grid:
            raise ValueError(f"image must be at least {self.grid}x{self.grid}")
        gray = tt.div(tt.sum_(img, axis=0), Tensor(float(c)))
        pooled = tt.matmul(tt.matmul(Tensor(self._pool_matrix_rows(h)), gray),
                           Tensor(self._pool_matrix_cols(w)))
        flat = tt.reshape(pooled, (self.grid * self.grid,))
        centered = tt.sub(flat, tt.mean(flat))
        norm_sq = tt.sum_(tt.pow2(centered))
        if float(norm_sq.data) < 1e-24:
            raise ValueError("zero-norm embedding")
        return tt.div(centered, tt.sqrt(norm_sq))

    def _pool_matrix_rows(self, h: int) -> np.ndarray:
        return _adaptive_pool_matrix(self.grid, h)

    def _pool_matrix_cols(self, w: int) -> np.ndarray:
        return _adaptive_pool_matrix(self.grid, w).T


def _adaptive_pool_matrix(grid: int, size: int) -> np.ndarray:
    mat = np.zeros((grid, size))
    for i in range(grid):
        lo = (i * size) // grid
        hi = ((i + 1) * size) // grid
        mat[i, lo:hi] = 1.0 / (hi - lo)
    return mat


# -- individual terms ------------------------------------------------------------


def image_gradient(image) -> tuple[Tensor, Tensor]:
    """Forward differences along x and y; the trailing column/row is zero."""
    img = tt.astensor(image)
    h, w = img.shape[-2], img.shape[-1]
    if h < 2 or w < 2:
        raise ValueError("image must be at least 2x2")
    col_mask = np.ones((1, 1, w))
    col_mask[..., -1] = 0.0
    row_mask = np.ones((1, h, 1))
    row_mask[:, -1] = 0.0
    gx = tt.mul(tt.sub(tt.shift(img, -1, 0), img), Tensor(col_mask))
    gy = tt.mul(tt.sub(tt.shift(img, 0, -1), img), Tensor(row_mask))
    return gx, gy


def l_reg_illu(light_detail, light_coarse, m_uv) -> Tensor:
    """Masked mean squared distance between detailed and coarse light maps."""
    return tt.masked_mean(tt.pow2(tt.sub(light_detail, light_coarse)), m_uv)


def l_cross_percp(image_r, image_gt, embedder) -> Tensor:
    """1 - cosine similarity between embeddings of the two images; in [0, 2]."""
    e_r = embedder(tt.astensor(image_r))
    e_gt = embedder(tt.astensor(image_gt))
    return tt.sub(Tensor(1.0), tt.sum_(tt.mul(e_r, e_gt)))


def l_symm(albedo_detail, m_uv) -> Tensor:
    """Penalty for left-right asymmetry, on texels masked in both orientations."""
    a = tt.astensor(albedo_detail)
    m = tt._as_array(m_uv)
    eff_mask = m * m[..., ::-1]
    return tt.masked_mean(tt.pow2(tt.sub(a, tt.flip_horizontal(a))), eff_mask)


def l_smooth(albedo_detail, albedo_prior, m_uv, alpha: float = SMOOTH_ALPHA) -> Tensor:
    """Edge-aware smoothness: mean over ordered 4-neighbor pairs of
    exp(-alpha * |prior_i - prior_j|^2) * |detail_i - detail_j|^2.

    The weights come from the prior map and carry no gradient.
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    a = tt.astensor(albedo_detail)
    prior = tt._as_array(albedo_prior)
    m = tt._as_array(m_uv)[0] if tt._as_array(m_uv).ndim == 3 else tt._as_array(m_uv)

    numerator = None
    pair_count = 0.0
    for dx, dy in ((1, 0), (-1, 0), (0, 1), (0, -1)):
        pair_mask = m * tt._shift_array(m, dx, dy)
        prior_diff_sq = ((prior - tt._shift_array(prior, dx, dy)) ** 2).sum(axis=0)
        omega = np.exp(-alpha * prior_diff_sq) * pair_mask
        detail_diff_sq = tt.sum_(tt.pow2(tt.sub(a, tt.shift(a, dx, dy))), axis=0)
        term = tt.sum_(tt.mul(detail_diff_sq, Tensor(omega)))
        numerator = term if numerator is None else tt.add(numerator, term)
        pair_count += float(pair_mask.sum())
    if pair_count == 0.0:
        warnings.warn("smoothness loss over an empty pair set; returning 0",
                      tt.EmptyMaskWarning)
    return tt.div(numerator, Tensor(max(pair_count, tt.MASKED_MEAN_EPS)))


def l_l1(albedo_detail, albedo_prior, m_uv) -> Tensor:
    """Masked mean absolute deviation of the detailed map from the prior."""
    return tt.masked_mean(tt.abs_(tt.sub(albedo_detail, albedo_prior)), m_uv)


def l_grad(image_r, image_gt, m_face) -> Tensor:
    """Masked mean squared difference of both directional image gradients."""
    gx_r, gy_r = image_gradient(image_r)
    gx_t, gy_t = image_gradient(tt.astensor(image_gt))
    diff = tt.concat([tt.sub(gx_r, gx_t), tt.sub(gy_r, gy_t)], axis=0)
    return tt.masked_mean(tt.pow2(diff), m_face)


def l_img(image_r, image_gt, m_face) -> Tensor:
    """Masked mean squared pixel difference."""
    return tt.masked_mean(tt.pow2(tt.sub(image_r, image_gt)), m_face)


# -- combination -------------------------------------------------------------------

TERM_NAMES = ("reg_illu", "cross_percp", "symm", "smooth", "l1", "gan_g", "grad", "img")


def total_loss(terms: dict, weights: LossWeights) -> tuple[Tensor, LossReport]:
    """Weighted recombination into illumination-disentanglement (id), albedo-
    regularization (ar) and detail-preservation (dp) groups plus the total.

    ``terms`` maps term names to scalar tensors (or floats); missing terms
    count as zero.  The adversarial generator term is accepted but is always
    zero in this toolkit.  Raises on NaN, naming the term.
    """
    vals: dict[str, Tensor] = {}
    for name in TERM_NAMES:
        t = terms.get(name, 0.0)
        t = t if isinstance(t, Tensor) else Tensor(float(t))
        if not np.isfinite(t.data):
            raise ValueError(f"loss term {name!r} is not finite")
        vals[name] = t
    unknown = set(terms) - set(TERM_NAMES)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")

    w = weights
    group_id = tt.add(tt.mul(Tensor(w.lambda_id1), vals["reg_illu"]),
                      tt.mul(Tensor(w.lambda_id2), vals["cross_percp"]))
    group_ar = tt.add(tt.add(tt.mul(Tensor(w.lambda_ar1), vals["symm"]),
                             tt.mul(Tensor(w.lambda_ar2), vals["smooth"])),
                      tt.add(tt.mul(Tensor(w.lambda_ar3), vals["l1"]),
                             tt.mul(Tensor(w.lambda_ar4), vals["gan_g"])))
    group_dp = tt.add(tt.mul(Tensor(w.lambda_dp1), vals["grad"]),
                      tt.mul(Tensor(w.lambda_dp2), vals["img"]))
    total = tt.add(tt.add(group_id, group_ar), group_dp)

    report = LossReport(
        reg_illu=float(vals["reg_illu"].data),
        cross_percp=float(vals["cross_percp"].data),
        symm=float(vals["symm"].data),
        smooth=float(vals["smooth"].data),
        l1=float(vals["l1"].data),
        gan_g=float(vals["gan_g"].data),
        grad=float(vals["grad"].data),
        img=float(vals["img"].data),
        id=float(group_id.data),
        ar=float(group_ar.data),
        dp=float(group_dp.data),
        total=float(total.data),
    )
    return total, report
