"""Forward interval bound propagation for box-perturbed inputs."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ContractError, DimensionError, NumericError
from .model import Affine, Conv2D, Flatten, Network, ReLU


@dataclass
class IntervalBounds:
    """Input box plus (lower, upper) tensors for every layer's output.

    ``layer_bounds[i]`` bounds the output of ``net.layers[i]``; the bounds
    feeding a ReLU at index i are therefore ``layer_bounds[i - 1]``.  When a
    specification was merged, the last entry bounds the margin vector.
    """

    input_lo: Tensor
    input_hi: Tensor
    layer_bounds: list[tuple[Tensor, Tensor]]


def input_box(x: Tensor, eps: float, clip=None) -> tuple[Tensor, Tensor]:
    """The elementwise box [x - eps, x + eps], optionally clipped."""
    if eps < 0:
        raise ContractError(f"eps must be >= 0, got {eps}")
    lo = x.data - eps
    hi = x.data + eps
    if clip is not None:
        lo = np.clip(lo, clip[0], clip[1])
        hi = np.clip(hi, clip[0], clip[1])
    return Tensor(lo), Tensor(hi)


def affine_interval(weight: Tensor, bias: Tensor, h_lo: Tensor, h_hi: Tensor):
    """Interval image of W h + b over h in [h_lo, h_hi] (batched rows)."""
    if (h_lo.data > h_hi.data).any():
        raise ContractError("affine_interval: lower bound exceeds upper bound")
    mu = (h_lo + h_hi) * 0.5
    r = (h_hi - h_lo) * 0.5
    wt = ad.transpose(weight)
    mid = ad.add_bias(ad.matmul(mu, wt), bias)
    rad = ad.matmul(r, ad.transpose(ad.abs_(weight)))
    return mid - rad, mid + rad


def conv_interval(layer: Conv2D, h_lo: Tensor, h_hi: Tensor):
    """Interval image of a valid strided convolution over a box."""
    if (h_lo.data > h_hi.data).any():
        raise ContractError("conv_interval: lower bound exceeds upper bound")
    mu = (h_lo + h_hi) * 0.5
    r = (h_hi - h_lo) * 0.5
    mid = ad.add_bias(ad.conv2d(mu, layer.kernel, layer.stride), layer.bias, axis=1)
    rad = ad.conv2d(r, ad.abs_(layer.kernel), layer.stride)
    return mid - rad, mid + rad


def _bmatvec(m: Tensor, v: Tensor) -> Tensor:
    # [B, r, n] x [B, n] -> [B, r]
    out = ad.matmul(m, ad.reshape(v, (v.shape[0], v.shape[1], 1)))
    return ad.reshape(out, (out.shape[0], out.shape[1]))


def merged_affine_interval(weight: Tensor, bias: Tensor, c: np.ndarray,
                           h_lo: Tensor, h_hi: Tensor):
    """Interval image of C (W h + b) with a per-example spec matrix C."""
    ct = Tensor(np.asarray(c, dtype=weight.data.dtype))
    wm = ad.matmul(ct, weight)                       # [B, n_L, n]
    bm = ad.reshape(ad.matmul(ct, ad.reshape(bias, (bias.shape[0], 1))), (c.shape[0], c.shape[1]))
    mu = (h_lo + h_hi) * 0.5
    r = (h_hi - h_lo) * 0.5
    mid = _bmatvec(wm, mu) + bm
    rad = _bmatvec(ad.abs_(wm), r)
    return mid - rad, mid + rad


def ibp_forward_box(net: Network, x_lo: Tensor, x_hi: Tensor, c: np.ndarray | None):
    """Propagate a box through the network; merge spec C into the last layer.

    Returns (final lower bound, IntervalBounds).  With ``c`` given the final
    bound is the margin lower bound for each example's label.
    """
    if x_lo.shape != x_hi.shape or tuple(x_lo.shape[1:]) != net.input_shape:
        raise DimensionError(
            f"box {x_lo.shape} does not match network input {net.input_shape}"
        )
    lo, hi = x_lo, x_hi
    bounds: list[tuple[Tensor, Tensor]] = []
    last = len(net.layers) - 1
    for i, layer in enumerate(net.layers):
        try:
            if isinstance(layer, Affine):
                if i == last and c is not None:
                    lo, hi = merged_affine_interval(layer.weight, layer.bias, c, lo, hi)
                else:
                    lo, hi = affine_interval(layer.weight, layer.bias, lo, hi)
            elif isinstance(layer, Conv2D):
                lo, hi = conv_interval(layer, lo, hi)
            elif isinstance(layer, ReLU):
                lo, hi = ad.relu(lo), ad.relu(hi)
            elif isinstance(layer, Flatten):
                flat = (lo.shape[0], int(np.prod(lo.shape[1:])))
                lo, hi = ad.reshape(lo, flat), ad.reshape(hi, flat)
            else:
                raise ContractError(f"unknown layer {type(layer).__name__}")
        except NumericError as e:
            raise NumericError(f"layer {i} ({type(layer).__name__}): {e}") from None
        bounds.append((lo, hi))
    return lo, IntervalBounds(x_lo, x_hi, bounds)


def ibp_forward(net: Network, x: Tensor, eps: float, c: np.ndarray | None, clip=None):
    """IBP margin lower bound for inputs x under an l-inf ball of radius eps."""
    x_lo, x_hi = input_box(x, eps, clip)
    return ibp_forward_box(net, x_lo, x_hi, c)


def ibp_verified(m_lo, y: int) -> bool:
    """True iff every off-label margin lower bound is strictly positive."""
    m = m_lo.data if isinstance(m_lo, Tensor) else np.asarray(m_lo)
    mask = np.ones(m.shape[-1], dtype=bool)
    mask[y] = False
    return bool((m[..., mask] > 0).all())


def verified_mask(m_lo, labels) -> np.ndarray:
    """Per-example verification flags for batched margin bounds [B, n_L]."""
    m = m_lo.data if isinstance(m_lo, Tensor) else np.asarray(m_lo)
    labels = np.asarray(labels, dtype=np.int64)
    check = m > 0
    check[np.arange(m.shape[0]), labels] = True
    return check.all(axis=1)
