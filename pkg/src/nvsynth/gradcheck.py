"""Central finite-difference verification of analytic gradients.

Every check projects the op output onto a fixed random direction to get a
scalar, compares ``backward`` against central differences with step 1e-4,
and reports the worst relative error. Used by the test suite and the
``grad-check`` CLI subcommand.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tape, Tensor, backward

FD_STEP = 1e-4


def numeric_gradient(f: Callable[[], float], x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``x``.

    ``f`` must read the *current* contents of ``x``; entries are perturbed
    in place and restored.
    """
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gf[i] = (hi - lo) / (2.0 * step)
    return g


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    denom = max(1.0, float(np.max(np.abs(numeric)))) if numeric.size else 1.0
    return float(np.max(np.abs(analytic - numeric))) / denom


def check_op(
    op: Callable[..., Tensor],
    inputs: Sequence[np.ndarray],
    rng: np.random.Generator,
    tol: float = 1e-4,
    step: float = FD_STEP,
) -> float:
    """Gradient-check ``op`` w.r.t. each input array; returns worst error.

    Raises AssertionError naming the failing argument when the relative
    error exceeds ``tol``.
    """
    tensors = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in inputs]
    out_shape = op(*tensors).shape
    proj = rng.standard_normal(out_shape)

    def scalar() -> float:
        return float(np.sum(op(*tensors).data * proj))

    with Tape() as tape:
        loss = T.tsum(T.mul(op(*tensors), Tensor(proj)))
    backward(loss, tape)

    worst = 0.0
    for arg, t in enumerate(tensors):
        numeric = numeric_gradient(scalar, t.data, step=step)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"gradient check failed for {getattr(op, '__name__', op)} "
                f"argument {arg}: relative error {err:.3e} > {tol:.1e}"
            )
    return worst


def primitive_suite(seed: int = 0, tol: float = 1e-4) -> dict[str, float]:
    """Run the finite-difference suite over every differentiable primitive.

    Inputs are drawn away from kinks (relu/abs at zero, clamp boundary) so
    central differences are valid. Returns {name: worst relative error}.
    """
    rng = np.random.default_rng(seed)

    def away_from_zero(shape, margin=0.05):
        x = rng.standard_normal(shape)
        return x + np.sign(x) * margin

    results: dict[str, float] = {}

    def run(name, op, inputs):
        results[name] = check_op(op, inputs, rng, tol=tol)

    a = rng.standard_normal((2, 3))
    b = rng.standard_normal((2, 3))
    run("add", T.add, [a, b])
    run("add_broadcast", T.add, [rng.standard_normal((2, 3, 4)), rng.standard_normal((1, 3, 1))])
    run("sub", T.sub, [a, b])
    run("mul", T.mul, [a, b])
    run("div", T.div, [a, away_from_zero((2, 3), margin=0.5)])
    run("neg", T.neg, [a])
    run("exp", T.exp, [rng.uniform(-1.5, 1.5, (3, 4))])
    run("log", T.log, [rng.uniform(0.5, 3.0, (3, 4))])
    run("abs", T.absolute, [away_from_zero((3, 4))])
    run("clamp_min", lambda x: T.clamp_min(x, 0.0), [away_from_zero((3, 4))])
    run("relu", T.relu, [away_from_zero((3, 4))])
    run("leaky_relu", lambda x: T.leaky_relu(x, 0.2), [away_from_zero((3, 4))])
    run("elu", T.elu, [away_from_zero((3, 4))])
    run("sigmoid", T.sigmoid, [rng.standard_normal((3, 4))])
    run("tanh", T.tanh, [rng.standard_normal((3, 4))])
    run("sum", T.tsum, [rng.standard_normal((2, 3, 4))])
    run("sum_axis", lambda x: T.tsum(x, axis=(0, 2)), [rng.standard_normal((2, 3, 4))])
    run("mean", T.tmean, [rng.standard_normal((2, 3, 4))])
    run("reshape", lambda x: T.reshape(x, (6, 4)), [rng.standard_normal((2, 3, 4))])
    run("slice", lambda x: T.slice_(x, (slice(None), slice(1, 3))), [rng.standard_normal((2, 4))])
    run(
        "concat_channels",
        T.concat_channels,
        [rng.standard_normal((1, 2, 3, 3)), rng.standard_normal((1, 3, 3, 3))],
    )
    run("matmul", T.matmul, [rng.standard_normal((3, 4)), rng.standard_normal((4, 2))])
    run(
        "matmul_batched",
        T.matmul,
        [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 2))],
    )
    run(
        "linear",
        T.linear,
        [rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5)],
    )
    run(
        "conv2d_s1",
        lambda x, w, b: T.conv2d(x, w, b, stride=1, padding=1),
        [rng.standard_normal((2, 3, 5, 5)), rng.standard_normal((4, 3, 3, 3)), rng.standard_normal(4)],
    )
    run(
        "conv2d_s2",
        lambda x, w, b: T.conv2d(x, w, b, stride=2, padding=1),
        [rng.standard_normal((1, 2, 6, 6)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)],
    )
    run(
        "resize_up",
        lambda x: T.resize_bilinear(x, 7, 6, align_corners=False),
        [rng.standard_normal((1, 2, 4, 4))],
    )
    run(
        "resize_up_ac",
        lambda x: T.resize_bilinear(x, 7, 7, align_corners=True),
        [rng.standard_normal((1, 2, 4, 4))],
    )
    run(
        "resize_down",
        lambda x: T.resize_bilinear(x, 3, 3, align_corners=False),
        [rng.standard_normal((1, 2, 6, 6))],
    )
    return results


def sampling_suite(seed: int = 0, tol: float = 1e-4) -> dict[str, float]:
    """Finite-difference checks for the geometric primitives."""
    from . import geometry as G
    from .geometry import Intrinsics, LatentPointSet
    from .warp import bilinear_sample, warp_feature

    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    src = rng.standard_normal((1, 2, 6, 6))
    coords = rng.uniform(1.2, 4.8, (1, 2, 3, 3))
    coords = np.where(np.abs(coords - np.round(coords)) < 0.05, coords + 0.1, coords)
    results["bilinear_sample"] = check_op(bilinear_sample, [src, coords], rng, tol=tol)

    k = Intrinsics(8.0, 8.0, 4.0, 4.0, 8, 8)
    rel = G.relative_transform(G.pose_from_orbit(20.0, 10.0, 4.0), G.pose_from_orbit(0.0, 0.0, 4.0))
    results["correspondence_field"] = check_op(
        lambda d: G.correspondence_field(d, k, rel).coords,
        [rng.uniform(2.0, 5.0, (1, 1, 8, 8))],
        rng,
        tol=tol,
    )
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    rt = G.RigidTransform(q, rng.standard_normal(3))
    results["transform_latent"] = check_op(
        lambda p: G.transform_latent(LatentPointSet(p), rt).points,
        [rng.standard_normal((2, 4, 3))],
        rng,
        tol=tol,
    )
    feat = Tensor(rng.standard_normal((1, 2, 8, 8)))
    results["warp_feature_depth"] = check_op(
        lambda d: warp_feature(feat, d, k, rel).features,
        [rng.uniform(2.5, 4.5, (1, 1, 8, 8))],
        rng,
        tol=1e-3,  # sampling-cell crossings make the map piecewise smooth
    )
    return results


def tiny_model_check(seed: int = 0, tol: float = 1e-3, step: float = 1e-5) -> float:
    """End-to-end check: every parameter gradient of the 8x8 model vs FD.

    The loss projects all multi-scale predictions and the depth map onto
    fixed random directions so every head contributes. Bilinear sampling is
    only piecewise smooth; elements that disagree at the base step are
    re-checked with a 10x smaller step before being called failures.
    """
    from . import geometry as G
    from .geometry import Intrinsics
    from .model import Model, tiny_config

    cfg = tiny_config()
    model = Model(cfg, seed=seed)
    rng = np.random.default_rng(seed + 17)
    img = Tensor(rng.uniform(0.05, 0.95, (1, 3, *cfg.image_size)))
    h, w = cfg.image_size
    k = Intrinsics(float(w), float(w), w / 2.0, h / 2.0, w, h)
    t_s_to_t = G.relative_transform(G.pose_from_orbit(0.0, 0.0, 4.0),
                                    G.pose_from_orbit(20.0, 10.0, 4.0))

    with Tape() as tape:
        preds, depth, _ = model.forward_full(img, t_s_to_t, k)
        projs = [rng.standard_normal(p.shape) for p in preds]
        proj_d = rng.standard_normal(depth.shape)
        loss = T.tsum(T.mul(depth, Tensor(proj_d)))
        for p, pr in zip(preds, projs):
            loss = T.add(loss, T.tsum(T.mul(p, Tensor(pr))))
    backward(loss, tape)

    def scalar() -> float:
        preds2, depth2, _ = model.forward_full(img, t_s_to_t, k)
        total = float(np.sum(depth2.data * proj_d))
        for p, pr in zip(preds2, projs):
            total += float(np.sum(p.data * pr))
        return total

    worst = 0.0
    for name, p in model.params.items():
        analytic = p.grad if p.grad is not None else np.zeros_like(p.data)
        numeric = numeric_gradient(scalar, p.data, step=step)
        denom = max(1.0, float(np.max(np.abs(numeric))))
        bad = np.abs(analytic - numeric) / denom > tol
        if bad.any():
            refined = numeric.copy()
            flat_bad = np.nonzero(bad.reshape(-1))[0]
            data_flat = p.data.reshape(-1)
            ref_flat = refined.reshape(-1)
            for i in flat_bad:
                orig = data_flat[i]
                data_flat[i] = orig + step / 10
                hi = scalar()
                data_flat[i] = orig - step / 10
                lo = scalar()
                data_flat[i] = orig
                ref_flat[i] = (hi - lo) / (2 * step / 10)
            numeric = refined
        err = relative_error(analytic, numeric)
        worst = max(worst, err)
        if err > tol:
            raise AssertionError(
                f"end-to-end gradient check failed for parameter {name}: "
                f"relative error {err:.3e} > {tol:.1e}"
            )
    return worst


def full_suite(seed: int = 0) -> dict[str, float]:
    """Everything the grad-check CLI runs: primitives, sampling, tiny model."""
    results = primitive_suite(seed=seed)
    results.update(sampling_suite(seed=seed))
    results["tiny_model_end_to_end"] = tiny_model_check(seed=seed)
    return results
