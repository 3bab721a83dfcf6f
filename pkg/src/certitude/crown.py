"""Backward linear bound propagation: CROWN-IBP and full recursive CROWN.

The backward pass pushes a per-example coefficient matrix A from the merged
specification layer down to the input, replacing each ReLU by one of its two
relaxation lines according to the sign of the coefficient, and each affine or
convolution layer by its (transposed) linear map.  Concretizing the final
affine function over the input box yields the margin lower bound.

Gradient semantics: neuron stability, the adaptive lower-slope choice, and
the coefficient sign tests are baked in as constants; the relaxation line
parameters, weights, biases and bounds all carry gradients.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import CapacityError, ContractError, DimensionError
from .ibp import IntervalBounds, input_box
from .model import Affine, Conv2D, Flatten, Network, ReLU

# Intercept padding, in units of the interval width: keeps the rounded upper
# line above relu at both interval ends when evaluated in f64.
_INTERCEPT_PAD = 2.0 ** -48

CROWN_FULL_MAX_UNITS = 4096


@dataclass
class ReluRelaxation:
    """Per-neuron linear relaxation lines valid on [z_lo, z_hi].

    lower_slope * z <= relu(z) <= upper_slope * z + upper_intercept.
    lower_slope is 0/1 (stable sides and the adaptive choice); it carries no
    gradient.  upper_slope and upper_intercept are differentiable in the
    bounds that produced them.
    """

    lower_slope: Tensor
    upper_slope: Tensor
    upper_intercept: Tensor


def relu_relaxation(z_lo: Tensor, z_hi: Tensor) -> ReluRelaxation:
    """Relaxation lines from pre-activation bounds.

    Stable-active (z_lo >= 0) and stable-inactive (z_hi <= 0) neurons get the
    exact identity/zero lines.  Unstable neurons get the chord as upper line
    and the adaptive 0/1 lower slope (1 iff z_hi > |z_lo|).
    """
    lo, hi = z_lo.data, z_hi.data
    if (lo > hi).any():
        raise ContractError("relu_relaxation: z_lo exceeds z_hi")
    dtype = lo.dtype
    active = lo >= 0
    unstable = ~active & (hi > 0)
    act = Tensor(active.astype(dtype))
    unst = Tensor(unstable.astype(dtype))

    # where not unstable the denominator is replaced by 1 and masked out later
    width = z_hi - z_lo
    safe_width = width * unst + Tensor(1.0 - unstable.astype(dtype))
    chord = ad.div(z_hi, safe_width)
    upper_slope = act + unst * chord
    # intercept as chord * (-z_lo): the float product cancels chord * z_lo
    # exactly at the left breakpoint, so the padded line never dips below relu
    intercept = chord * ad.neg(z_lo) + width * _INTERCEPT_PAD
    upper_intercept = unst * intercept

    adaptive = (hi > -lo).astype(dtype)
    lower_slope = Tensor(active.astype(dtype) + unstable.astype(dtype) * adaptive)
    return ReluRelaxation(lower_slope, upper_slope, upper_intercept)


def _flat2(t: Tensor) -> Tensor:
    return ad.reshape(t, (t.shape[0], int(np.prod(t.shape[1:]))))


def backward_merge_relu(a: Tensor, relax: ReluRelaxation, side: str = "lower"):
    """Merge a relaxed ReLU into coefficients A [B, rows, n].

    For a lower bound, positive coefficients take the lower line and the rest
    take the upper line (mirrored for an upper bound).  Returns the merged
    coefficients and the bias contribution from the picked-up intercepts.
    """
    b, rows, n = a.shape
    rl = _flat2(relax.lower_slope)
    ru = _flat2(relax.upper_slope)
    rc = _flat2(relax.upper_intercept)
    if rl.shape[1] != n:
        raise DimensionError(f"A columns {n} != relaxation width {rl.shape[1]}")
    pos = (a.data > 0).astype(a.data.dtype)
    if side == "lower":
        w_lower, w_upper = Tensor(pos), Tensor(1.0 - pos)
    elif side == "upper":
        w_lower, w_upper = Tensor(1.0 - pos), Tensor(pos)
    else:
        raise ContractError(f"side must be lower/upper, got {side!r}")

    def up(t):
        return ad.expand(ad.reshape(t, (b, 1, n)), (b, rows, n))

    diag = w_lower * up(rl) + w_upper * up(ru)
    merged = a * diag
    bias_delta = _bmatvec(w_upper * a, rc)
    return merged, bias_delta


def _bmatvec(m: Tensor, v: Tensor) -> Tensor:
    out = ad.matmul(m, ad.reshape(v, (v.shape[0], v.shape[1], 1)))
    return ad.reshape(out, (out.shape[0], out.shape[1]))


def backward_merge_affine(a: Tensor, layer: Affine):
    """A' = A W plus the bias contribution A b."""
    b, rows, n = a.shape
    if n != layer.weight.shape[0]:
        raise DimensionError(f"A columns {n} != affine outputs {layer.weight.shape[0]}")
    flat = ad.reshape(a, (b * rows, n))
    merged = ad.reshape(ad.matmul(flat, layer.weight), (b, rows, layer.weight.shape[1]))
    bias_inc = ad.reshape(
        ad.matmul(flat, ad.reshape(layer.bias, (n, 1))), (b, rows)
    )
    return merged, bias_inc


def backward_merge_conv(a: Tensor, layer: Conv2D, out_geom, in_geom):
    """Propagate A through a convolution with the transposed operator."""
    b, rows, n = a.shape
    f, hout, wout = out_geom
    c, hin, win = in_geom
    if n != f * hout * wout:
        raise DimensionError(f"A columns {n} != conv output size {f * hout * wout}")
    a4 = ad.reshape(a, (b * rows, f, hout, wout))
    merged = ad.conv2d_transpose(a4, layer.kernel, layer.stride, (hin, win))
    merged = ad.reshape(merged, (b, rows, c * hin * win))
    per_filter = ad.sum_(ad.reshape(a4, (b * rows, f, hout * wout)), axis=2)
    bias_inc = ad.reshape(
        ad.matmul(per_filter, ad.reshape(layer.bias, (f, 1))), (b, rows)
    )
    return merged, bias_inc


def concretize(a0: Tensor, bias_acc: Tensor, x_lo: Tensor, x_hi: Tensor,
               side: str = "lower") -> Tensor:
    """Extreme value of A0 x + bias over the box, per row."""
    if (x_lo.data > x_hi.data).any():
        raise ContractError("concretize: x_lo exceeds x_hi")
    lo = _flat2(x_lo) if x_lo.ndim > 2 else x_lo
    hi = _flat2(x_hi) if x_hi.ndim > 2 else x_hi
    mid = (lo + hi) * 0.5
    rad = (hi - lo) * 0.5
    center = _bmatvec(a0, mid) + bias_acc
    dev = _bmatvec(ad.abs_(a0), rad)
    if side == "lower":
        return center - dev
    if side == "upper":
        return center + dev
    raise ContractError(f"side must be lower/upper, got {side!r}")


def _backward_pass(net: Network, start_idx: int, a: Tensor, bias: Tensor,
                   relaxations: dict[int, ReluRelaxation], side: str):
    """Walk layers[start_idx .. 0] backwards, merging each into (A, bias)."""
    for i in range(start_idx, -1, -1):
        layer = net.layers[i]
        if isinstance(layer, ReLU):
            if i not in relaxations:
                raise ContractError(f"missing relaxation for ReLU at layer {i}")
            a, delta = backward_merge_relu(a, relaxations[i], side)
            bias = bias + delta
        elif isinstance(layer, Affine):
            a, inc = backward_merge_affine(a, layer)
            bias = bias + inc
        elif isinstance(layer, Conv2D):
            a, inc = backward_merge_conv(a, layer, net.shapes[i + 1], net.shapes[i])
            bias = bias + inc
        elif isinstance(layer, Flatten):
            pass  # row-major flattening is a no-op on already-flat coefficients
        else:
            raise ContractError(f"unknown layer {type(layer).__name__}")
    return a, bias


def _merged_spec_init(net: Network, c: np.ndarray):
    last = net.layers[-1]
    if not isinstance(last, Affine):
        raise ContractError("final layer must be affine")
    ct = Tensor(np.asarray(c, dtype=last.weight.data.dtype))
    a = ad.matmul(ct, last.weight)
    bias = ad.reshape(
        ad.matmul(ct, ad.reshape(last.bias, (last.bias.shape[0], 1))),
        (ct.shape[0], ct.shape[1]),
    )
    return a, bias


def _relaxations_from_ibp(net: Network, bounds: IntervalBounds):
    relax = {}
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ReLU):
            z_lo, z_hi = bounds.layer_bounds[i - 1]
            relax[i] = relu_relaxation(z_lo, z_hi)
    return relax


def crown_ibp_bound(net: Network, x: Tensor | None, eps: float, c: np.ndarray,
                    ibp_bounds: IntervalBounds, clip=None) -> Tensor:
    """Margin lower bound: IBP intermediate bounds, one backward pass from C.

    ``ibp_bounds`` must come from ibp_forward on the same box; pass x=None
    when the caller already holds bounds for an explicitly constructed box.
    """
    if len(ibp_bounds.layer_bounds) != len(net.layers):
        raise ContractError(
            f"interval bounds cover {len(ibp_bounds.layer_bounds)} layers, "
            f"network has {len(net.layers)}"
        )
    if x is not None:
        want_lo, want_hi = input_box(x, eps, clip)
        if (np.abs(want_lo.data - ibp_bounds.input_lo.data).max() > 1e-12
                or np.abs(want_hi.data - ibp_bounds.input_hi.data).max() > 1e-12):
            raise ContractError(
                "interval bounds were produced for a different (x, eps) box"
            )
    relax = _relaxations_from_ibp(net, ibp_bounds)
    a, bias = _merged_spec_init(net, c)
    a, bias = _backward_pass(net, len(net.layers) - 2, a, bias, relax, "lower")
    return concretize(a, bias, ibp_bounds.input_lo, ibp_bounds.input_hi, "lower")


def _identity_init(width: int, batch: int, dtype) -> tuple[Tensor, Tensor]:
    eye = np.broadcast_to(np.eye(width, dtype=dtype), (batch, width, width))
    return Tensor(np.ascontiguousarray(eye)), Tensor(np.zeros((batch, width), dtype=dtype))


def crown_full_bound(net: Network, x: Tensor, eps: float, c: np.ndarray,
                     clip=None) -> Tensor:
    """Full recursive CROWN: every intermediate bound from backward passes.

    Verification-scale only; guarded by the total hidden unit count.
    """
    x_lo, x_hi = input_box(x, eps, clip)
    return crown_full_bound_box(net, x_lo, x_hi, c)


def crown_full_bound_box(net: Network, x_lo: Tensor, x_hi: Tensor,
                         c: np.ndarray) -> Tensor:
    """crown_full_bound on an explicit input box."""
    if net.hidden_units() > CROWN_FULL_MAX_UNITS:
        raise CapacityError(
            f"crown_full_bound: {net.hidden_units()} hidden units exceeds "
            f"{CROWN_FULL_MAX_UNITS}"
        )
    batch = x_lo.shape[0]
    dtype = x_lo.data.dtype
    relax: dict[int, ReluRelaxation] = {}
    for i, layer in enumerate(net.layers):
        if not isinstance(layer, ReLU):
            continue
        # bound the ReLU's input: backward pass starting at the feeding layer
        j = i - 1
        width = int(np.prod(net.shapes[j + 1]))
        a, bias = _identity_init(width, batch, dtype)
        sides = {}
        for side in ("lower", "upper"):
            aa, bb = _backward_pass(net, j, a, bias, relax, side)
            sides[side] = concretize(aa, bb, x_lo, x_hi, side)
        relax[i] = relu_relaxation(sides["lower"], sides["upper"])
    a, bias = _merged_spec_init(net, c)
    a, bias = _backward_pass(net, len(net.layers) - 2, a, bias, relax, "lower")
    return concretize(a, bias, x_lo, x_hi, "lower")


def mixed_margin(m_ibp: Tensor, m_crown_ibp: Tensor, beta: float) -> Tensor:
    """Convex combination beta * IBP + (1 - beta) * CROWN-IBP; beta in [0, 1]."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must be in [0, 1], got {beta}")
    if beta == 1.0:
        return m_ibp
    if beta == 0.0:
        return m_crown_ibp
    return m_ibp * beta + m_crown_ibp * (1.0 - beta)
