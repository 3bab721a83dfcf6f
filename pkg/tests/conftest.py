"""Shared builders and oracles for the test suite."""

import numpy as np
import pytest

from certitude import autodiff as ad
from certitude.model import Affine, Conv2D, Flatten, Network, ReLU

MNIST_DIR = "data/mnist"


def mnist_available() -> bool:
    import os

    return all(
        os.path.exists(os.path.join(MNIST_DIR, f"{p}-{k}.gz"))
        or os.path.exists(os.path.join(MNIST_DIR, f"{p}-{k}"))
        for p in ("train", "t10k")
        for k in ("images-idx3-ubyte", "labels-idx1-ubyte")
    )


needs_mnist = pytest.mark.skipif(
    not mnist_available(), reason="MNIST IDX files not present under data/mnist "
    "(run scripts/fetch_mnist.py)"
)


def make_mlp(dims, seed, weight_scale=1.0, bias_shift=0.0):
    """Random fully connected ReLU net with the given layer sizes."""
    rng = np.random.default_rng(seed)
    layers = []
    for i in range(len(dims) - 1):
        w = rng.normal(0.0, weight_scale / np.sqrt(dims[i]), size=(dims[i + 1], dims[i]))
        b = rng.normal(0.0, 0.3, size=dims[i + 1]) + bias_shift
        layers.append(Affine(ad.Tensor(w, requires_grad=True),
                             ad.Tensor(b, requires_grad=True)))
        if i < len(dims) - 2:
            layers.append(ReLU())
    return Network(layers, (dims[0],), dims[-1])


def make_conv_net(seed, in_shape=(1, 6, 6), n_classes=3):
    """Tiny conv-conv-fc network used by the fuzz corpora."""
    rng = np.random.default_rng(seed)

    def t(shape, scale):
        return ad.Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    c, h, w = in_shape
    layers = [
        Conv2D(t((2, c, 3, 3), 0.4), t((2,), 0.3), stride=1),
        ReLU(),
        Conv2D(t((2, 2, 2, 2), 0.5), t((2,), 0.3), stride=2),
        ReLU(),
        Flatten(),
        Affine(t((n_classes, 2 * 2 * 2), 0.5), t((n_classes,), 0.3)),
    ]
    return Network(layers, in_shape, n_classes)


def random_fuzz_net(seed):
    """Random network per the soundness-fuzz recipe; every 10th is the conv preset."""
    if seed % 10 == 9:
        return make_conv_net(seed)
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(2, 5))          # hidden layers
    in_dim = int(rng.integers(2, 7))
    n_classes = int(rng.integers(2, 6))
    widths = [int(rng.integers(4, 33)) for _ in range(depth)]
    dims = [in_dim] + widths + [n_classes]
    return make_mlp(dims, seed + 1_000_000, weight_scale=1.2)


def fuzz_input(net, seed):
    rng = np.random.default_rng(seed)
    return rng.uniform(0.0, 1.0, size=net.input_shape)


def numeric_grad(f, tensors, h=1e-5):
    """Central finite differences of scalar f() w.r.t. each tensor's data."""
    grads = []
    for t in tensors:
        g = np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gf[i] = (fp - fm) / (2.0 * h)
        grads.append(g)
    return grads


def grad_errors(analytic, numeric, abs_floor=1e-6):
    """(worst relative error on large entries, worst absolute on small ones)."""
    worst_rel = 0.0
    worst_abs = 0.0
    for ga, gn in zip(analytic, numeric):
        scale = np.maximum(np.abs(ga), np.abs(gn))
        large = scale >= abs_floor
        diff = np.abs(ga - gn)
        if large.any():
            worst_rel = max(worst_rel, float((diff[large] / scale[large]).max()))
        if (~large).any():
            worst_abs = max(worst_abs, float(diff[~large].max()))
    return worst_rel, worst_abs


def im2col_conv(x, k, stride):
    """Reference convolution: explicit patch matrix then one matmul."""
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    hout = (h - kh) // stride + 1
    wout = (w - kw) // stride + 1
    cols = np.empty((n, hout * wout, c * kh * kw), dtype=x.dtype)
    for p in range(hout):
        for q in range(wout):
            patch = x[:, :, p * stride : p * stride + kh, q * stride : q * stride + kw]
            cols[:, p * wout + q, :] = patch.reshape(n, -1)
    out = cols @ k.reshape(f, -1).T
    return out.transpose(0, 2, 1).reshape(n, f, hout, wout)
