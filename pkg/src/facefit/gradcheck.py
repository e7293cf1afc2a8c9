"""Finite-difference verification suite for every differentiable operation.

Each check builds a scalar function of one tensor argument, weights the op
output by a fixed random field (so permutation and scatter mistakes cannot
hide inside a plain sum), and compares the tape gradient against central
differences.  The suite is what ``facefit gradcheck`` and the acceptance
tests run.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import losses, shading, tensor as tt
from .tensor import Tensor, finite_diff_check

DEFAULT_STEP = 1e-6
DEFAULT_TOL = 1e-4


def _weighted_sum(op: Callable[[Tensor], Tensor], w: np.ndarray) -> Callable[[Tensor], Tensor]:
    return lambda x: tt.sum_(tt.mul(op(x), Tensor(w)))


def _check(op, x: np.ndarray, out_shape, rng) -> float:
    w = rng.normal(size=out_shape)
    return finite_diff_check(_weighted_sum(op, w), x, DEFAULT_STEP)


def _binary_cases(rng) -> list[tuple[str, float]]:
    a = rng.normal(size=(4, 4))
    b = rng.normal(size=(4, 4)) + np.where(rng.normal(size=(4, 4)) >= 0, 2.0, -2.0)
    s = float(rng.normal()) or 1.0
    out = []
    for kind in ("add", "sub", "mul", "div"):
        out.append((f"elementwise_{kind}",
                    _check(lambda x, k=kind: tt.elementwise(k, x, Tensor(b)), a, a.shape, rng)))
        out.append((f"elementwise_{kind}_scalar",
                    _check(lambda x, k=kind: tt.elementwise(k, x, Tensor(s)), a, a.shape, rng)))
    return out


def _unary_cases(rng) -> list[tuple[str, float]]:
    out = []
    base = rng.normal(size=(4, 4))
    # Keep abs/max0/sqrt/div inputs away from their kinks and domain edges;
    # central differences straddle them otherwise.
    away = base + np.where(base >= 0, 0.5, -0.5)
    positive = np.abs(base) + 0.5
    cases = {
        "pow2": base,
        "abs": away,
        "exp": base,
        "sqrt": positive,
        "neg": base,
        "max0": away,
        "sin": base,
        "cos": base,
    }
    for kind, x in cases.items():
        out.append((f"elementwise_{kind}",
                    _check(lambda t, k=kind: tt.elementwise(k, t), x, x.shape, rng)))
    return out


def _structural_cases(rng) -> list[tuple[str, float]]:
    out = []
    x = rng.normal(size=(3, 5, 5))
    out.append(("flip_horizontal", _check(tt.flip_horizontal, x, x.shape, rng)))

    y = rng.normal(size=(6, 6))
    dx, dy = rng.integers(-1, 2), rng.integers(-1, 2)
    out.append((f"shift", _check(lambda t: tt.shift(t, int(dx), int(dy)), y, y.shape, rng)))

    m = rng.normal(size=(3, 5, 5))
    coords = np.column_stack([rng.uniform(-0.5, 4.5, 7), rng.uniform(-0.5, 4.5, 7)])
    out.append(("bilinear_sample",
                _check(lambda t: tt.bilinear_sample(t, coords), m, (3, 7), rng)))

    basis = rng.normal(size=(30, 5))
    offset = rng.normal(size=30)
    coeff = rng.normal(size=5)
    out.append(("linear_map_coeff",
                _check(lambda t: tt.linear_map(basis, t, offset), coeff, (30,), rng)))
    out.append(("linear_map_offset",
                _check(lambda t: tt.linear_map(basis, coeff, t), offset, (30,), rng)))

    a2 = rng.normal(size=(4, 3))
    b2 = rng.normal(size=(3, 5))
    out.append(("matmul", _check(lambda t: tt.matmul(t, Tensor(b2)), a2, (4, 5), rng)))

    idx = rng.integers(0, 6, size=8)
    v = rng.normal(size=(6, 3))
    out.append(("take", _check(lambda t: tt.take(t, idx), v, (8, 3), rng)))

    out.append(("transpose", _check(lambda t: tt.transpose(t), a2, (3, 4), rng)))
    out.append(("reshape", _check(lambda t: tt.reshape(t, (12,)), a2, (12,), rng)))
    out.append(("broadcast_to",
                _check(lambda t: tt.broadcast_to(t, (4, 3, 2)), rng.normal(size=(3, 1)),
                       (4, 3, 2), rng)))
    out.append(("concat",
                _check(lambda t: tt.concat([t, Tensor(rng.normal(size=(2, 3)))], axis=0),
                       rng.normal(size=(2, 3)), (4, 3), rng)))

    vals = rng.normal(size=(3, 4))
    rows = np.array([0, 2, 1, 3])
    cols = np.array([1, 0, 3, 2])
    out.append(("scatter_image",
                _check(lambda t: tt.scatter_image(t, rows, cols, 4, 4), vals, (3, 4, 4), rng)))
    return out


def _reduce_cases(rng) -> list[tuple[str, float]]:
    out = []
    x = rng.normal(size=(8, 8))
    w = float(rng.normal())
    out.append(("reduce_sum",
                finite_diff_check(lambda t: tt.mul(tt.reduce("sum", t), Tensor(w)), x)))
    out.append(("reduce_mean",
                finite_diff_check(lambda t: tt.mul(tt.reduce("mean", t), Tensor(w)), x)))
    mask = (rng.uniform(size=(8, 8)) > 0.4).astype(np.float64)
    out.append(("reduce_masked_mean",
                finite_diff_check(lambda t: tt.mul(tt.reduce("masked_mean", t, mask), Tensor(w)), x)))
    return out


def _loss_cases(rng) -> list[tuple[str, float]]:
    out = []
    m_uv = (rng.uniform(size=(1, 8, 8)) > 0.3).astype(np.float64)
    prior = rng.uniform(0.2, 0.8, size=(3, 8, 8))
    other = rng.uniform(0.2, 0.8, size=(3, 8, 8))
    detail = rng.uniform(0.2, 0.8, size=(3, 8, 8))

    lmap = rng.normal(size=(27, 8, 8))
    lref = rng.normal(size=(27, 8, 8))
    out.append(("l_reg_illu",
                finite_diff_check(lambda t: losses.l_reg_illu(t, Tensor(lref), m_uv), lmap)))
    out.append(("l_symm", finite_diff_check(lambda t: losses.l_symm(t, m_uv), detail)))
    out.append(("l_smooth",
                finite_diff_check(lambda t: losses.l_smooth(t, prior, m_uv), detail)))
    out.append(("l_l1",
                finite_diff_check(lambda t: losses.l_l1(t, Tensor(prior), m_uv),
                                  detail + np.where(detail >= prior, 0.05, -0.05))))
    m_face = (rng.uniform(size=(1, 8, 8)) > 0.3).astype(np.float64)
    out.append(("l_grad",
                finite_diff_check(lambda t: losses.l_grad(t, Tensor(other), m_face), detail)))
    out.append(("l_img",
                finite_diff_check(lambda t: losses.l_img(t, Tensor(other), m_face), detail)))
    out.append(("image_gradient",
                finite_diff_check(
                    lambda t: tt.sum_(tt.add(tt.pow2(losses.image_gradient(t)[0]),
                                             tt.pow2(losses.image_gradient(t)[1]))),
                    detail)))

    img16 = rng.uniform(0.1, 0.9, size=(3, 16, 16))
    ref16 = rng.uniform(0.1, 0.9, size=(3, 16, 16))
    emb = losses.StubEmbedder()
    out.append(("l_cross_percp",
                finite_diff_check(lambda t: losses.l_cross_percp(t, Tensor(ref16), emb), img16)))
    return out


def _shading_cases(rng) -> list[tuple[str, float]]:
    out = []
    n = rng.normal(size=(3, 4, 4))
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    mask = np.ones((1, 4, 4))
    albedo = rng.uniform(0.1, 0.9, size=(3, 4, 4))
    light = rng.normal(size=(27, 4, 4))

    out.append(("shade_maps_albedo",
                _check(lambda t: shading.shade_maps(n, t, Tensor(light), mask),
                       albedo, (3, 4, 4), rng)))
    out.append(("shade_maps_light",
                _check(lambda t: shading.shade_maps(n, Tensor(albedo), t, mask),
                       light, (3, 4, 4), rng)))
    lvec = rng.normal(size=27)
    out.append(("expand_coarse_light",
                _check(lambda t: shading.expand_coarse_light(t, 4, 4), lvec, (27, 4, 4), rng)))
    nrm = rng.normal(size=3)
    nrm /= np.linalg.norm(nrm)
    rgb = rng.uniform(0.1, 0.9, size=3)
    out.append(("shade_point_light",
                _check(lambda t: shading.shade_point(nrm, Tensor(rgb), t), lvec, (3,), rng)))
    out.append(("shade_point_albedo",
                _check(lambda t: shading.shade_point(nrm, t, Tensor(lvec)), rgb, (3,), rng)))
    return out


def _composite_cases(rng) -> list[tuple[str, float]]:
    """The full weighted loss stack on tiny maps, differentiated end to end."""
    n = rng.normal(size=(3, 6, 6))
    n /= np.linalg.norm(n, axis=0, keepdims=True)
    mask = (rng.uniform(size=(1, 6, 6)) > 0.2).astype(np.float64)
    prior = rng.uniform(0.2, 0.8, size=(3, 6, 6))
    image = rng.uniform(0.1, 0.9, size=(3, 6, 6))
    lref = rng.normal(size=(27, 6, 6))
    weights = losses.LossWeights()

    def assemble(albedo_t: Tensor, light_t: Tensor) -> Tensor:
        rendered = shading.shade_maps(n, albedo_t, light_t, mask)
        terms = {
            "reg_illu": losses.l_reg_illu(light_t, Tensor(lref), mask),
            "symm": losses.l_symm(albedo_t, mask),
            "smooth": losses.l_smooth(albedo_t, prior, mask),
            "l1": losses.l_l1(albedo_t, Tensor(prior), mask),
            "grad": losses.l_grad(rendered, Tensor(image), mask),
            "img": losses.l_img(rendered, Tensor(image), mask),
        }
        total, _ = losses.total_loss(terms, weights)
        return total

    albedo0 = rng.uniform(0.2, 0.8, size=(3, 6, 6))
    light0 = rng.normal(size=(27, 6, 6))
    return [
        ("total_loss_wrt_albedo",
         finite_diff_check(lambda t: assemble(t, Tensor(light0)), albedo0)),
        ("total_loss_wrt_light",
         finite_diff_check(lambda t: assemble(Tensor(albedo0), t), light0)),
    ]


def run_suite(seeds: int = 10, tol: float = DEFAULT_TOL):
    """Run every registered check across ``seeds`` seeds.

    Returns (results, ok) where results maps check name -> worst error.
    """
    worst: dict[str, float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(1000 + seed)
        cases = (_binary_cases(rng) + _unary_cases(rng) + _structural_cases(rng) +
                 _reduce_cases(rng) + _loss_cases(rng) + _shading_cases(rng) +
                 _composite_cases(rng))
        for name, err in cases:
            worst[name] = max(worst.get(name, 0.0), err)
    ok = all(v < tol for v in worst.values())
    return worst, ok
