"""Certified training: robust losses, schedules, optimizer, loop, evaluation.

Three variants share one loop.  The margin lower bound fed to the robust
cross-entropy is beta * IBP + (1 - beta) * CROWN-IBP; beta is the IBP weight
and ramps 0 -> 1 per batch alongside epsilon, so training starts on the tight
backward bound and ends on pure IBP.  Pure-IBP pins beta to 1; Natural-IBP
pins beta to 1 and mixes in plain cross-entropy weighted by kappa (ramped
1 -> kappa_final).
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .crown import crown_ibp_bound, crown_full_bound_box, mixed_margin
from .data import Dataset, augment_flip_crop, batches
from .errors import CertitudeError, ContractError, NumericError
from .ibp import ibp_forward_box, input_box, verified_mask
from .model import Network, forward, save_model, load_model, spec_matrices

METHODS = ("pure-ibp", "natural-ibp", "crown-ibp")
EVAL_METHODS = ("ibp", "crown-ibp", "crown-full")


class TrainingDiverged(CertitudeError):
    """Raised when a non-finite loss aborts training.

    Carries the epoch/batch where the abort happened and the metrics gathered
    so far; the network is restored to the last checkpoint before raising.
    """

    def __init__(self, message, epoch, batch, metrics):
        super().__init__(message)
        self.epoch = epoch
        self.batch = batch
        self.metrics = metrics


@dataclass
class Schedule:
    """Per-batch linear ramps for eps/beta/kappa plus stepped lr decay."""

    eps_max: float
    warmup_epochs: int
    ramp_epochs: int
    batches_per_epoch: int
    base_lr: float
    kappa_final: float = 0.5
    lr_decay_interval: int = 10

    def _frac(self, t: int) -> float:
        warm = self.warmup_epochs * self.batches_per_epoch
        ramp = self.ramp_epochs * self.batches_per_epoch
        if ramp == 0:
            return 1.0 if t >= warm else 0.0
        return min(max((t - warm) / ramp, 0.0), 1.0)

    def eps(self, t: int) -> float:
        return self.eps_max * self._frac(t)

    def beta(self, t: int) -> float:
        """Weight of the IBP term: 0 at ramp start, 1 at ramp end and after."""
        return self._frac(t)

    def kappa(self, t: int) -> float:
        return 1.0 - (1.0 - self.kappa_final) * self._frac(t)

    def lr(self, epoch: int) -> float:
        ramp_end = self.warmup_epochs + self.ramp_epochs
        if epoch < ramp_end:
            return self.base_lr
        decays = (epoch - ramp_end) // self.lr_decay_interval
        return self.base_lr * 0.5 ** decays


@dataclass
class TrainPlan:
    method: str
    eps_max: float
    epochs: int
    ramp_epochs: int
    warmup_epochs: int = 1
    kappa_final: float = 0.5
    lr: float = 5e-4
    lr_decay_interval: int = 10
    batch_size: int = 256
    l1: float = 0.0
    seed: int = 0
    clip_input_box: bool = False
    augment: bool = False

    def __post_init__(self):
        if self.method not in METHODS:
            raise ContractError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.kappa_final <= 1.0:
            raise ContractError(f"kappa_final must be in [0, 1], got {self.kappa_final}")
        if self.eps_max < 0 or self.l1 < 0 or self.batch_size < 1:
            raise ContractError("eps_max and l1 must be >= 0; batch_size >= 1")


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    eps: float
    beta: float
    kappa: float
    train_loss: float
    natural_ce: float
    test_standard_error: float
    test_verified_error: float
    seconds: float


METRICS_HEADER = ("epoch,lr,eps,beta,kappa,train_loss,natural_ce,"
                  "test_standard_error,test_verified_error")


def metrics_to_csv(metrics, path: str) -> None:
    # wall time stays out of the CSV so reruns with one seed are byte-identical
    lines = [METRICS_HEADER]
    for m in metrics:
        lines.append(
            f"{m.epoch},{m.lr:.10g},{m.eps:.10g},{m.beta:.10g},{m.kappa:.10g},"
            f"{m.train_loss:.10g},{m.natural_ce:.10g},"
            f"{m.test_standard_error:.10g},{m.test_verified_error:.10g}"
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


class Adam:
    """Adam with bias correction; hyperparameters per the usual defaults."""

    def __init__(self, params, lr=5e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float | None = None):
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        # python-scalar scale so f32 parameters stay f32
        scale = lr * math.sqrt(1.0 - b2 ** self.t) / (1.0 - b1 ** self.t)
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            if g is None:
                continue
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data = p.data - scale * m / (np.sqrt(v) + self.eps)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def robust_ce_loss(m_lo: Tensor, labels) -> Tensor:
    """Cross-entropy of the negated margin bounds: upper-bounds worst-case CE."""
    return ad.softmax_cross_entropy(ad.neg(m_lo), labels)


def _margin_bounds(net: Network, x_lo: Tensor, x_hi: Tensor, labels, beta: float):
    c = spec_matrices(labels, net.num_classes)
    m_ibp, bounds = ibp_forward_box(net, x_lo, x_hi, c)
    if beta >= 1.0:
        return m_ibp
    m_crown = crown_ibp_bound(net, None, 0.0, c, bounds)
    return mixed_margin(m_ibp, m_crown, beta)


def crown_ibp_loss(net: Network, x: Tensor, labels, eps: float, beta: float,
                   clip=None) -> Tensor:
    """Robust CE on the beta-mixed margin bound; no natural CE term."""
    if not 0.0 <= beta <= 1.0:
        raise ContractError(f"beta must be in [0, 1], got {beta}")
    x_lo, x_hi = input_box(x, eps, clip)
    return robust_ce_loss(_margin_bounds(net, x_lo, x_hi, labels, beta), labels)


def natural_ibp_loss(net: Network, x: Tensor, labels, eps: float, kappa: float,
                     clip=None) -> Tensor:
    """kappa * CE(f(x), y) + (1 - kappa) * robust CE on the IBP bound."""
    if not 0.0 <= kappa <= 1.0:
        raise ContractError(f"kappa must be in [0, 1], got {kappa}")
    if kappa == 0.0:
        x_lo, x_hi = input_box(x, eps, clip)
        return robust_ce_loss(_margin_bounds(net, x_lo, x_hi, labels, 1.0), labels)
    natural = ad.softmax_cross_entropy(forward(net, x), labels)
    if kappa == 1.0:
        return natural
    x_lo, x_hi = input_box(x, eps, clip)
    robust = robust_ce_loss(_margin_bounds(net, x_lo, x_hi, labels, 1.0), labels)
    return natural * kappa + robust * (1.0 - kappa)


def l1_penalty(net: Network, lam: float) -> Tensor:
    """lam * sum of |w| over affine/conv weights (biases excluded)."""
    if lam < 0:
        raise ContractError(f"l1 weight must be >= 0, got {lam}")
    total = Tensor(0.0)
    for layer in net.layers:
        weights = layer.params()[:1]  # weight/kernel comes first, bias second
        for w in weights:
            total = total + ad.sum_(ad.abs_(w))
    return total * lam


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

def _normalized_box(ds: Dataset, images: np.ndarray, eps: float, clip, dtype):
    """Box around raw images mapped into network input space."""
    lo = images - eps
    hi = images + eps
    if clip is not None:
        lo = np.clip(lo, clip[0], clip[1])
        hi = np.clip(hi, clip[0], clip[1])
    return (Tensor(ds.normalize(lo).astype(dtype)),
            Tensor(ds.normalize(hi).astype(dtype)))


@dataclass
class EvalResult:
    standard_error: float
    verified_error: float
    n: int
    labels: np.ndarray = field(repr=False, default=None)
    predicted: np.ndarray = field(repr=False, default=None)
    min_margin: np.ndarray = field(repr=False, default=None)
    correct: np.ndarray = field(repr=False, default=None)
    verified: np.ndarray = field(repr=False, default=None)


def evaluate(net: Network, ds: Dataset, eps: float, method: str = "ibp",
             clip=None, batch_size: int = 512, limit: int | None = None) -> EvalResult:
    """Standard error at eps=0 and verified error under the chosen bound."""
    if method not in EVAL_METHODS:
        raise ContractError(f"method must be one of {EVAL_METHODS}, got {method!r}")
    if method == "crown-full":
        batch_size = min(batch_size, 128)  # identity-initialized A matrices are wide
    dtype = net.params()[0].data.dtype if net.params() else np.float64
    n = len(ds) if limit is None else min(limit, len(ds))
    labels_all, pred_all, margin_all, correct_all, verified_all = [], [], [], [], []
    for start in range(0, n, batch_size):
        images = ds.images[start : start + batch_size]
        labels = ds.labels[start : start + batch_size]
        x = Tensor(ds.normalize(images).astype(dtype))
        c = spec_matrices(labels, net.num_classes)
        logits = forward(net, x).data
        margins0 = np.einsum("bij,bj->bi", c, logits)
        correct = verified_mask(margins0, labels)
        x_lo, x_hi = _normalized_box(ds, images, eps, clip, dtype)
        if method == "ibp":
            m_lo, _ = ibp_forward_box(net, x_lo, x_hi, c)
        elif method == "crown-ibp":
            _, bounds = ibp_forward_box(net, x_lo, x_hi, c)
            m_lo = crown_ibp_bound(net, None, 0.0, c, bounds)
        else:
            m_lo = crown_full_bound_box(net, x_lo, x_hi, c)
        m = m_lo.data
        verified = verified_mask(m, labels)
        off = m.copy()
        off[np.arange(len(labels)), labels] = np.inf
        labels_all.append(labels)
        pred_all.append(logits.argmax(axis=1))
        margin_all.append(off.min(axis=1))
        correct_all.append(correct)
        verified_all.append(verified)
    labels_all = np.concatenate(labels_all)
    correct_all = np.concatenate(correct_all)
    verified_all = np.concatenate(verified_all)
    return EvalResult(
        standard_error=float(1.0 - correct_all.mean()),
        verified_error=float(1.0 - verified_all.mean()),
        n=n,
        labels=labels_all,
        predicted=np.concatenate(pred_all),
        min_margin=np.concatenate(margin_all),
        correct=correct_all,
        verified=verified_all,
    )


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

def train(net: Network, train_ds: Dataset, plan: TrainPlan,
          test_ds: Dataset | None = None, out_dir: str | None = None,
          eval_limit: int | None = None, log=None):
    """Run the certified-training loop; returns (net, per-epoch metrics).

    Deterministic for a fixed plan: shuffling uses plan.seed, steps run on a
    single thread.  A non-finite loss restores the latest checkpoint (when
    out_dir is set) and raises TrainingDiverged.
    """
    if len(train_ds) == 0:
        raise ContractError("training dataset is empty")
    dtype = net.params()[0].data.dtype
    bpe = (len(train_ds) + plan.batch_size - 1) // plan.batch_size
    sched = Schedule(plan.eps_max, plan.warmup_epochs, plan.ramp_epochs, bpe,
                     plan.lr, plan.kappa_final, plan.lr_decay_interval)
    opt = Adam(net.params(), lr=plan.lr)
    clip = (0.0, 1.0) if plan.clip_input_box else None
    metrics: list[EpochMetrics] = []
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    checkpoint = os.path.join(out_dir, "checkpoint.certnet") if out_dir else None
    aug_rng = np.random.default_rng([plan.seed, 31337]) if plan.augment else None
    t_global = 0
    for epoch in range(plan.epochs):
        t0 = time.perf_counter()
        lr = sched.lr(epoch)
        loss_sum = 0.0
        nat_sum = 0.0
        n_batches = 0
        warming = epoch < plan.warmup_epochs
        for images, labels in batches(train_ds, plan.batch_size, plan.seed, epoch):
            if aug_rng is not None:
                images = augment_flip_crop(images, aug_rng)
            eps_t = sched.eps(t_global)
            beta_t = sched.beta(t_global) if plan.method == "crown-ibp" else 1.0
            kappa_t = sched.kappa(t_global) if plan.method == "natural-ibp" else 0.0
            x = Tensor(train_ds.normalize(images).astype(dtype))
            try:
                with ad.tape():
                    if warming:
                        loss = ad.softmax_cross_entropy(forward(net, x), labels)
                    elif plan.method == "natural-ibp":
                        x_lo, x_hi = _normalized_box(train_ds, images, eps_t, clip, dtype)
                        rob = robust_ce_loss(
                            _margin_bounds(net, x_lo, x_hi, labels, 1.0), labels)
                        if kappa_t > 0:
                            nat = ad.softmax_cross_entropy(forward(net, x), labels)
                            loss = nat * kappa_t + rob * (1.0 - kappa_t)
                        else:
                            loss = rob
                    else:
                        x_lo, x_hi = _normalized_box(train_ds, images, eps_t, clip, dtype)
                        m = _margin_bounds(net, x_lo, x_hi, labels, beta_t)
                        loss = robust_ce_loss(m, labels)
                    if plan.l1 > 0:
                        loss = loss + l1_penalty(net, plan.l1)
                nat_ce = ad.softmax_cross_entropy(forward(net, x), labels).item()
                opt.zero_grad()
                ad.backward(loss)
                opt.step(lr)
            except NumericError as e:
                if checkpoint and os.path.exists(checkpoint):
                    restored = load_model(checkpoint)
                    for p, q in zip(net.params(), restored.params()):
                        p.data = q.data.astype(dtype)
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch}, batch {n_batches}: {e}",
                    epoch, n_batches, metrics,
                ) from None
            loss_sum += loss.item()
            nat_sum += nat_ce
            n_batches += 1
            t_global += 1
        if test_ds is not None:
            res = evaluate(net, test_ds, sched.eps(t_global - 1), "ibp", clip,
                           limit=eval_limit)
            std_err, ver_err = res.standard_error, res.verified_error
        else:
            std_err = ver_err = float("nan")
        m = EpochMetrics(
            epoch=epoch, lr=lr, eps=sched.eps(t_global - 1),
            beta=sched.beta(t_global - 1) if plan.method == "crown-ibp" else 1.0,
            kappa=sched.kappa(t_global - 1) if plan.method == "natural-ibp" else 0.0,
            train_loss=loss_sum / n_batches, natural_ce=nat_sum / n_batches,
            test_standard_error=std_err, test_verified_error=ver_err,
            seconds=time.perf_counter() - t0,
        )
        metrics.append(m)
        if checkpoint:
            save_model(net, checkpoint)
        if log:
            log(f"epoch {epoch:3d}  lr {m.lr:.2e}  eps {m.eps:.4f}  "
                f"loss {m.train_loss:.4f}  std {std_err:.4f}  ver {ver_err:.4f}  "
                f"({m.seconds:.1f}s)")
    return net, metrics
