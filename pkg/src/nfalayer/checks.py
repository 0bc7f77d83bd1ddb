"""Finite-difference gradient suite shared by the ``check`` command and the tests."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import numerics as nx
from .backbone import NetworkSpec, UNet, freeze_statistics
from .nfa import (
    DENSE,
    ELLIPTICAL,
    FORMS,
    SPHERICAL,
    ActivationConfig,
    BasicNFABlock,
    NaiveModel,
    SpatialNFABlock,
    eca_scale_weights,
    fuse_scales,
    sigm_alpha,
    significance,
)
from .numerics.gradcheck import gradcheck
from .numerics.layers import WindowAttention
from .numerics.tensor import Tensor
from .training import gradient_regularizer, soft_iou_loss

PRIMITIVE_TOL = 1e-4
COMPOSITE_TOL = 1e-3
# composites contain ReLU and max kinks; a narrower stencil keeps probes on one linear piece
COMPOSITE_STEP = 1e-6


@dataclass
class GradCheckResult:
    name: str
    error: float
    tol: float

    @property
    def passed(self) -> bool:
        return self.error < self.tol


def _leaf(rng, shape, low=None, high=None, distinct=False) -> Tensor:
    if distinct:
        data = rng.permutation(np.prod(shape)).reshape(shape) * 0.1 + rng.uniform(0, 0.01, size=shape)
    elif low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.standard_normal(shape)
    return Tensor(data, requires_grad=True)


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return nx.tsum(out * w)


def _primitive_cases(rng) -> dict:
    """name -> (loss builder, leaves). Inputs avoid kinks (ties, zeros) of piecewise ops."""
    cases = {}

    def add(name, fn, leaves):
        out_shape = fn().shape
        w = rng.standard_normal(out_shape)
        cases[name] = (lambda: _weighted(fn(), w), leaves)

    a, b = _leaf(rng, (2, 3, 4)), _leaf(rng, (3, 1))
    add("add_broadcast", lambda: a + b, [a, b])
    add("sub_broadcast", lambda: a - b, [a, b])
    add("mul_broadcast", lambda: a * b, [a, b])
    pos = _leaf(rng, (3, 1), 0.5, 2.0)
    add("div_broadcast", lambda: a / pos, [a, pos])
    add("square", lambda: nx.square(a), [a])
    add("exp", lambda: nx.exp(a), [a])
    p2 = _leaf(rng, (2, 3, 4), 0.2, 3.0)
    add("log", lambda: nx.log(p2), [p2])
    away = Tensor(rng.choice([-1, 1], size=(2, 3, 4)) * rng.uniform(0.1, 1.0, size=(2, 3, 4)), requires_grad=True)
    add("absolute", lambda: nx.absolute(away), [away])
    add("relu", lambda: nx.relu(away), [away])
    add("sigmoid", lambda: nx.sigmoid(a), [a])
    add("tanh", lambda: nx.tanh(a), [a])
    add("sum_axis", lambda: nx.tsum(a, axis=1, keepdims=True), [a])
    add("mean_axis", lambda: nx.mean(a, axis=(0, 2)), [a])
    add("reshape_transpose", lambda: nx.transpose(nx.reshape(a, (6, 4)), (1, 0)), [a])
    add("getitem", lambda: a[:, 1:, ::2], [a])
    c = _leaf(rng, (2, 2, 4))
    add("concat", lambda: nx.concat([a, c], axis=1), [a, c])
    d = _leaf(rng, (2, 3, 4))
    add("stack", lambda: nx.stack([a, d], axis=1), [a, d])
    dist = _leaf(rng, (2, 3, 4), distinct=True)
    add("reduce_max", lambda: nx.reduce_extreme(dist, axis=1, mode="max"), [dist])
    add("reduce_min", lambda: nx.reduce_extreme(dist, axis=2, mode="min", keepdims=True), [dist])
    mask = rng.random((2, 3, 4)) > 0.3
    mask[:, 0, :] = True
    add("softmax_masked", lambda: nx.softmax(a, axis=1, mask=mask), [a])
    img = _leaf(rng, (2, 3, 6, 8), distinct=True)
    add("maxpool2x2", lambda: nx.maxpool2x2(img), [img])
    add("global_avg_pool", lambda: nx.global_avg_pool(img), [img])
    add("bilinear_upsample_x2", lambda: nx.bilinear_upsample(img, 2), [img])
    add("bilinear_upsample_x4", lambda: nx.bilinear_upsample(img, 4), [img])
    wk = _leaf(rng, (4, 3, 3, 3))
    bias = _leaf(rng, (4,))
    add("conv2d_3x3", lambda: nx.conv2d(img, wk, bias), [img, wk, bias])
    add("conv2d_stride2", lambda: nx.conv2d(img, wk, None, stride=2), [img, wk])
    w1 = _leaf(rng, (5, 3, 1, 1))
    add("conv2d_1x1", lambda: nx.conv2d(img, w1), [img, w1])
    seq, k1 = _leaf(rng, (2, 5)), _leaf(rng, (3,))
    add("conv1d", lambda: nx.conv1d(seq, k1), [seq, k1])
    gamma, beta = _leaf(rng, (3,), 0.5, 1.5), _leaf(rng, (3,))
    add("batch_norm_train", lambda: nx.batch_norm(img, gamma, beta, nx.BatchNormState(3), "train"), [img, gamma, beta])
    add("window_unfold", lambda: nx.window_unfold(img, 3), [img])
    scores = _leaf(rng, (2, 1, 6, 8), 0.05, 0.95)
    target = (rng.random((2, 1, 6, 8)) > 0.7).astype(float)
    cases["soft_iou_loss"] = (lambda: soft_iou_loss(scores, target), [scores])
    cases["gradient_regularizer"] = (lambda: gradient_regularizer(scores), [scores])
    sig = _leaf(rng, (2, 1, 6, 8), -5.0, 3000.0)
    add("sigm_alpha", lambda: sigm_alpha(sig, ActivationConfig(5e-4, 48)), [sig])
    return cases


def _significance_cases(rng) -> dict:
    cases = {}
    k = 3
    for form in FORMS:
        if form == DENSE:
            m = rng.standard_normal((k, k))
            cov = m @ m.T + k * np.eye(k)
        else:
            cov = rng.uniform(0.5, 2.0, size=k) if form == ELLIPTICAL else np.full(k, 1.3)
        model = NaiveModel.from_covariance(form, cov, center=rng.standard_normal(k), n_test=100)
        feats = Tensor(rng.standard_normal((2, k, 4, 5)) * 3.0, requires_grad=True)
        w = rng.standard_normal((2, 1, 4, 5))
        cases[f"significance_{form}"] = (lambda f=feats, m=model, w=w: _weighted(significance(f, m).values, w), [feats])
    # points whose u sits within the finite-difference stencil of the branch point u = 40
    model = NaiveModel.from_covariance(SPHERICAL, np.ones(2), n_test=10)
    radii = np.sqrt(2.0 * np.array([40.0 - 4e-4, 40.0 + 4e-4, 39.99, 40.01, 39.0, 41.0, 60.0, 120.0]))
    angles = rng.uniform(0, 2 * np.pi, size=radii.size)
    data = np.stack([radii * np.cos(angles), radii * np.sin(angles)])[None, :, None, :]
    feats = Tensor(data, requires_grad=True)
    wb = rng.standard_normal((1, 1, 1, radii.size))
    cases["significance_branch_u40"] = (lambda: _weighted(significance(feats, model).values, wb), [feats])
    return cases


def _composite_cases(rng) -> dict:
    cases = {}
    x = Tensor(rng.standard_normal((2, 4, 8, 8)), requires_grad=True)
    att = WindowAttention("att", 4, rng, window=3, heads=2)
    att.offset_bias.data[...] = rng.standard_normal(att.offset_bias.shape)
    wa = rng.standard_normal((2, 4, 8, 8))
    cases["window_attention"] = (lambda: _weighted(att(x), wa), [x] + list(att.parameters()))
    for cls in (BasicNFABlock, SpatialNFABlock):
        block = cls(cls.__name__, 4, 2, ELLIPTICAL, rng) if cls is BasicNFABlock else cls(cls.__name__, 4, 2, ELLIPTICAL, rng, window=3)
        block(x, True)
        block.frozen_model = block.last_model
        wb = rng.standard_normal((2, 1, 8, 8)) / 50.0
        cases[f"{cls.__name__}"] = (lambda b=block, w=wb: _weighted(b(x, True).values, w), [x] + list(block.parameters()))
    maps_in = [Tensor(rng.uniform(-3, 30, size=(2, 1, 4, 4)), requires_grad=True) for _ in range(3)]
    kernel = Tensor(rng.standard_normal(3) * 0.5, requires_grad=True)
    wf = rng.standard_normal((2, 1, 4, 4)) * 1e-3  # small loss keeps roundoff below the 1e-8 floor

    def fused():
        from .nfa import SignificanceMap

        maps = [SignificanceMap(t, i, 16) for i, t in enumerate(maps_in)]
        return _weighted(fuse_scales(maps, eca_scale_weights(maps, kernel), "max").values, wf)

    cases["eca_fuse_max"] = (fused, maps_in + [kernel])
    return cases


def full_model_case(head: str = "nfa", seed: int = 0, **overrides) -> tuple[Callable[[], Tensor], list]:
    """Soft-IoU loss of the whole network on a 1x1x16x16 input, with frozen statistics."""
    rng = np.random.default_rng(seed)
    spec = NetworkSpec(head=head, **overrides)
    model = UNet(spec, seed)
    image = rng.uniform(0, 1, size=(1, 1, 16, 16))
    image[0, 0, 5, 7] += 2.0
    target = np.zeros((1, 1, 16, 16))
    target[0, 0, 5, 7] = 1.0
    model(image, train=True)
    if head == "nfa":
        freeze_statistics(model)

    def loss():
        return soft_iou_loss(model(image, train=True).scores, target)

    return loss, list(model.parameters())


def gradient_suite(seed: int = 0, probes: int = 12) -> list:
    """Run every check; primitives must reach 1e-4, composites 1e-3."""
    rng = np.random.default_rng(seed)
    results = []
    for name, (fn, leaves) in {**_primitive_cases(rng), **_significance_cases(rng)}.items():
        results.append(GradCheckResult(name, gradcheck(fn, leaves, probes=probes, seed=seed), PRIMITIVE_TOL))
    for name, (fn, leaves) in _composite_cases(rng).items():
        # the fusion case has no ReLU; its max ties are separated by far more than 1e-4
        step = 1e-4 if name == "eca_fuse_max" else COMPOSITE_STEP
        results.append(GradCheckResult(name, gradcheck(fn, leaves, probes=probes, step=step, seed=seed), COMPOSITE_TOL))
    for head, extra in (("nfa", {}), ("nfa", {"use_spatial_block": True, "sigma_form": DENSE}), ("plain", {})):
        fn, params = full_model_case(head, seed, **extra)
        label = f"full_model_{head}" + ("_spatial_dense" if extra else "")
        results.append(GradCheckResult(label, gradcheck(fn, params, probes=3, step=COMPOSITE_STEP, seed=seed), COMPOSITE_TOL))
    return results
