"""Brute-force oracles for validating bound engines on tiny instances."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .errors import CapacityError, ContractError
from .ibp import ibp_forward
from .model import Affine, Conv2D, Flatten, Network, ReLU, forward

CORNER_DIM_LIMIT = 12


@dataclass
class OracleReport:
    """Empirical minimum of the margin vector over the input box."""

    empirical_min_margin: np.ndarray       # [n_L]
    argmin_points: np.ndarray              # [n_L, d] flattened input coordinates
    resolution: float                      # grid step (0 for exact oracles)
    exact: bool


def _as_single(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return arr


def margins_on_points(net: Network, points: np.ndarray, c: np.ndarray,
                      chunk: int = 16384) -> np.ndarray:
    """C f(x') for a stack of flattened inputs [N, d] -> [N, n_L]."""
    n = points.shape[0]
    out = np.empty((n, net.num_classes), dtype=points.dtype)
    for start in range(0, n, chunk):
        block = points[start : start + chunk].reshape(-1, *net.input_shape)
        logits = forward(net, Tensor(block)).data
        out[start : start + chunk] = logits @ c.T
    return out


def conv_as_dense(kernel: np.ndarray, stride: int, in_shape) -> np.ndarray:
    """Materialize a valid strided convolution as a dense matrix."""
    f, cin, kh, kw = kernel.shape
    c, h, w = in_shape
    hout = (h - kh) // stride + 1
    wout = (w - kw) // stride + 1
    mat = np.zeros((f * hout * wout, c * h * w), dtype=kernel.dtype)
    for fi in range(f):
        for p in range(hout):
            for q in range(wout):
                row = (fi * hout + p) * wout + q
                for ci in range(c):
                    for i in range(kh):
                        for j in range(kw):
                            col = (ci * h + p * stride + i) * w + q * stride + j
                            mat[row, col] = kernel[fi, ci, i, j]
    return mat


def net_as_affine_all_active(net: Network):
    """Compose the network into (M, c) treating every ReLU as identity."""
    d = int(np.prod(net.input_shape))
    m = np.eye(d)
    c = np.zeros(d)
    shape = net.input_shape
    for layer in net.layers:
        if isinstance(layer, Affine):
            w = layer.weight.data
            m = w @ m
            c = w @ c + layer.bias.data
            shape = (w.shape[0],)
        elif isinstance(layer, Conv2D):
            w = conv_as_dense(layer.kernel.data, layer.stride, shape)
            shape = layer.out_shape(shape)
            bias = np.repeat(layer.bias.data, shape[1] * shape[2])
            m = w @ m
            c = w @ c + bias
        elif isinstance(layer, (ReLU, Flatten)):
            if isinstance(layer, Flatten):
                shape = (int(np.prod(shape)),)
        else:
            raise ContractError(f"unknown layer {type(layer).__name__}")
    return m, c


def _box(net: Network, x: np.ndarray, eps: float, clip):
    lo = x.reshape(-1) - eps
    hi = x.reshape(-1) + eps
    if clip is not None:
        lo = np.clip(lo, clip[0], clip[1])
        hi = np.clip(hi, clip[0], clip[1])
    return lo, hi


def grid_min_margin(net: Network, x, eps: float, c: np.ndarray,
                    points_per_dim: int = 401, clip=None) -> OracleReport:
    """Margin minima over a dense grid on the box; input dimension <= 3."""
    x = _as_single(x)
    d = int(np.prod(net.input_shape))
    if d > 3:
        raise CapacityError(f"grid oracle supports input dim <= 3, got {d}")
    if points_per_dim < 2:
        raise ContractError("points_per_dim must be >= 2")
    lo, hi = _box(net, x, eps, clip)
    axes = [np.linspace(lo[i], hi[i], points_per_dim) for i in range(d)]
    best = np.full(net.num_classes, np.inf)
    best_pt = np.zeros((net.num_classes, d))
    step = float(np.max((hi - lo) / (points_per_dim - 1)))
    # evaluate slice by slice along the first axis to bound memory
    rest = np.stack(
        [g.reshape(-1) for g in np.meshgrid(*axes[1:], indexing="ij")], axis=-1
    ) if d > 1 else np.zeros((1, 0))
    for v in axes[0]:
        pts = np.concatenate(
            [np.full((rest.shape[0], 1), v), rest], axis=1
        )
        m = margins_on_points(net, pts, c)
        idx = m.argmin(axis=0)
        vals = m[idx, np.arange(net.num_classes)]
        better = vals < best
        best = np.where(better, vals, best)
        best_pt[better] = pts[idx[better]]
    return OracleReport(best, best_pt, step, exact=False)


def vertex_min_margin_linear(net: Network, x, eps: float, c: np.ndarray,
                             clip=None) -> OracleReport:
    """Exact box minimum of the margins for a provably all-active network."""
    x = _as_single(x)
    xb = x[None] if x.shape == net.input_shape else x
    if xb.shape[0] != 1:
        raise ContractError("vertex oracle takes a single example")
    _, bounds = ibp_forward(net, Tensor(xb), eps, None, clip)
    for i, layer in enumerate(net.layers):
        if isinstance(layer, ReLU):
            z_lo = bounds.layer_bounds[i - 1][0].data
            if (z_lo <= 0).any():
                raise ContractError(
                    f"layer {i}: network is not provably all-active on this box"
                )
    m, b = net_as_affine_all_active(net)
    mm = c @ m
    bb = c @ b
    lo, hi = _box(net, x, eps, clip)
    mins = np.where(mm > 0, mm * lo, mm * hi).sum(axis=1) + bb
    argmin = np.where(mm > 0, lo, hi)
    return OracleReport(mins, argmin, 0.0, exact=True)


def box_corners(lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    d = lo.size
    if d > CORNER_DIM_LIMIT:
        raise CapacityError(f"corner enumeration supports dim <= {CORNER_DIM_LIMIT}")
    bits = (np.arange(2 ** d)[:, None] >> np.arange(d)) & 1
    return np.where(bits.astype(bool), hi, lo)


def sample_soundness(net: Network, x, eps: float, c: np.ndarray, m_lo,
                     n_samples: int, seed: int, clip=None,
                     slack: float = 1e-9) -> int:
    """Count margin entries of sampled box points that undercut the bound.

    Draws uniform points in the box (plus every corner when the dimension
    allows) and returns how many entries of C f(x') fall below m_lo - slack.
    Zero is the contract for any sound bound.
    """
    x = _as_single(x)
    m_lo = m_lo.data if isinstance(m_lo, Tensor) else np.asarray(m_lo)
    m_lo = m_lo.reshape(-1)
    lo, hi = _box(net, x, eps, clip)
    rng = np.random.default_rng(seed)
    pts = rng.uniform(lo, hi, size=(n_samples, lo.size))
    if lo.size <= CORNER_DIM_LIMIT:
        pts = np.concatenate([pts, box_corners(lo, hi), x.reshape(1, -1)], axis=0)
    margins = margins_on_points(net, pts, c)
    return int((margins < m_lo[None, :] - slack).sum())
