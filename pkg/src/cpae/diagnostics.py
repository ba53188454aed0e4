"""Finite-difference gradient checks over every differentiable building block."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import adaptive_chamfer, chamfer, emd, emd_approx, sample_sphere
from .losses import LossWeights, loss_mse_pointwise, loss_rec
from .tensor import MLP, BatchNorm, Tensor, concat_latent, gradcheck, linear, maxpool_points, relu, tanh

__all__ = ["GradResult", "LAYER_TOLERANCE", "KERNEL_TOLERANCE", "gradcheck_suite"]

LAYER_TOLERANCE = 1e-4
KERNEL_TOLERANCE = 1e-3


@dataclass
class GradResult:
    name: str
    kind: str  # "layer" or "kernel"
    error: float
    tolerance: float

    @property
    def ok(self) -> bool:
        return self.error < self.tolerance


def _away_from_zero(rng, shape, margin=0.1):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * margin


def _bn_case(rng, training: bool):
    bn = BatchNorm(4, dtype=np.float64)
    if not training:
        bn.eval()
        bn.running_mean = rng.standard_normal(4)
        bn.running_var = rng.uniform(0.5, 2.0, 4)
    w = rng.standard_normal((9, 4))

    def f(x, g, b):
        bn.gamma, bn.beta = g, b
        return (bn(x) * w).sum()

    return f, [rng.standard_normal((9, 4)), rng.uniform(0.5, 2.0, 4), rng.standard_normal(4)]


def _mlp_case(rng):
    mlp = MLP(5, [(6, "relu", True), (6, "relu", True), (3, "tanh", False)], rng, dtype=np.float64)
    names = list(mlp.named_parameters())

    def f(x, *params):
        for name, p in zip(names, params):
            owner, attr = mlp._resolve(name)
            setattr(owner, attr, p)
        return (mlp(x) ** 2).sum()

    return f, [rng.standard_normal((2, 7, 5))] + [mlp.named_parameters()[n].data for n in names]


def gradcheck_suite(seed: int = 0) -> list[GradResult]:
    """Run float64 central-difference checks; inputs are drawn away from kinks and ties."""
    rng = np.random.default_rng(seed)
    out: list[GradResult] = []

    def layer(name, fn, inputs):
        out.append(GradResult(name, "layer", gradcheck(fn, inputs), LAYER_TOLERANCE))

    def kernel(name, fn, inputs):
        out.append(GradResult(name, "kernel", gradcheck(fn, inputs), KERNEL_TOLERANCE))

    w_out = rng.standard_normal((6, 3))
    layer("linear", lambda x, w, b: (linear(x, w, b) * w_out).sum(),
          [rng.standard_normal((6, 4)), rng.standard_normal((4, 3)), rng.standard_normal(3)])
    layer("relu", lambda x: (relu(x) ** 2).sum(), [_away_from_zero(rng, (5, 4))])
    layer("tanh", lambda x: (tanh(x) * w_out[:5, :1]).sum(), [rng.standard_normal((5, 4))])
    layer("batchnorm_train", *_bn_case(rng, True))
    layer("batchnorm_eval", *_bn_case(rng, False))
    distinct = rng.permutation(60).reshape(3, 5, 4) / 10.0
    layer("maxpool", lambda x: (maxpool_points(x) ** 2).sum(), [distinct])
    w_cat = rng.standard_normal((2, 4, 8))
    layer("concat_latent", lambda p, z: (concat_latent(p, z) * w_cat).sum(),
          [rng.standard_normal((2, 4, 3)), rng.standard_normal((2, 5))])
    layer("mlp_relu_batchnorm_tanh", *_mlp_case(rng))
    layer("mse_pointwise", loss_mse_pointwise, [rng.standard_normal((2, 6, 3)), rng.standard_normal((2, 6, 3))])

    kernel("chamfer", chamfer, [rng.standard_normal((2, 8, 3)), rng.standard_normal((2, 6, 3))])
    sphere = sample_sphere(24)
    for alpha in (0.0, 0.5, 1.0):
        kernel(f"adaptive_chamfer_alpha_{alpha}", lambda u, a=alpha: adaptive_chamfer(u, sphere, a),
               [rng.standard_normal((2, 7, 3))])
    kernel("emd_exact", lambda a, b: emd(a, b, "exact"), [rng.standard_normal((2, 7, 3)), rng.standard_normal((2, 7, 3))])
    kernel("emd_auction", emd_approx, [rng.standard_normal((7, 3)), rng.standard_normal((7, 3))])
    w = LossWeights(mu1=1.0, mu2=1.0, mu3=1.0)
    target = Tensor(rng.standard_normal((2, 6, 3)))
    kernel("reconstruction_loss", lambda s: loss_rec(target, s, w)[0], [rng.standard_normal((2, 6, 3))])
    return out
