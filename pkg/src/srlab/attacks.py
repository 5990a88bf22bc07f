"""White-box attacks: FGSM, PGD, margin-loss PGD, and dense-field variants.

All attacks maximize a loss function of the input under an l-inf budget:
after every step the iterate is projected back onto the epsilon-ball around
the clean input and clipped to the valid range [0, 1]. `sign(0) = 0`, so
coordinates with a vanishing gradient are never perturbed.

A loss function maps an input tensor to per-example loss values; attacks
ascend the batch mean, whose gradient sign per example equals the
per-example sign, so batched crafting matches independent per-example
crafting exactly. `make_adaptive` composes a logits loss with the defended
forward pass so that gradients flow through every ensemble branch.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .defense import sr_forward
from .seeding import mix_seed
from .tensor import Tensor

__all__ = [
    "AttackConfig",
    "AdversarialExample",
    "fgsm",
    "pgd",
    "cw_margin",
    "dense_pgd",
    "make_adaptive",
    "worst_case_ensemble",
    "classification_loss",
    "margin_loss_each",
    "epe_loss",
    "mae_field_loss",
]

ATTACK_KINDS = ("fgsm", "pgd", "cw_margin", "dense_pgd")


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule for one attack.

    alpha defaults to 2.5 * epsilon / steps when unset. `adaptive` marks
    that crafting should see the evaluated defense (the harness composes
    the loss accordingly). `kappa` is the margin-attack confidence floor.
    """

    kind: str = "pgd"
    epsilon: float = 8.0 / 255.0
    steps: int = 1
    alpha: float | None = None
    random_start: bool = False
    adaptive: bool = False
    seed: int = 0
    kappa: float = 0.0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; expected one of {ATTACK_KINDS}")
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.kind == "fgsm" and self.steps != 1:
            raise ValueError("fgsm implies steps == 1")

    @property
    def step_size(self):
        return self.alpha if self.alpha is not None else 2.5 * self.epsilon / self.steps


@dataclass
class AdversarialExample:
    """Crafted batch plus provenance: the clean input, the realized l-inf
    radius, and the per-step per-example loss values of the ascent."""

    x_adv: np.ndarray
    x_clean: np.ndarray
    achieved_linf: float
    loss_trace: np.ndarray
    step_seconds: float = 0.0


def _as_array(x):
    return np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)


def _input_grad(loss_fn, xa):
    xt = Tensor(xa, requires_grad=True)
    per = loss_fn(xt)
    scalar = T.tmean(per) if per.data.size > 1 else per
    grad = T.backward(scalar)[xt].data
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError("attack loss produced a non-finite gradient")
    return np.atleast_1d(per.data).ravel().copy(), grad


def _random_start(x0, cfg, sample_offset):
    # Per-example seeded uniform start inside the ball, independent of
    # batch layout: example n of a chunk starting at `sample_offset` draws
    # from the stream mix_seed(cfg.seed, sample_offset + n).
    delta = np.zeros_like(x0)
    for n in range(x0.shape[0]):
        rng = np.random.default_rng(mix_seed(cfg.seed, sample_offset + n))
        delta[n] = rng.uniform(-cfg.epsilon, cfg.epsilon, size=x0.shape[1:])
    return np.clip(x0 + delta, 0.0, 1.0)


def fgsm(loss_fn, x, cfg):
    """Single sign-gradient step: clip(x + epsilon * sign(grad), 0, 1)."""
    if cfg.steps != 1:
        raise ValueError("fgsm requires cfg.steps == 1")
    x0 = _as_array(x)
    t0 = time.perf_counter()
    per, grad = _input_grad(loss_fn, x0)
    xa = np.clip(x0 + cfg.epsilon * np.sign(grad), 0.0, 1.0)
    dt = time.perf_counter() - t0
    return AdversarialExample(
        x_adv=xa,
        x_clean=x0.copy(),
        achieved_linf=float(np.max(np.abs(xa - x0))) if xa.size else 0.0,
        loss_trace=per[None, :],
        step_seconds=dt,
    )


def pgd(loss_fn, x, cfg, sample_offset=0):
    """Iterative sign ascent with projection after every step.

    With steps=1, alpha=epsilon and no random start this reproduces fgsm
    bit for bit. The optional random start draws per-example uniform noise
    inside the ball, seeded from cfg.seed; `sample_offset` shifts the
    per-example seed stream so chunked crafting matches one-shot crafting.
    """
    x0 = _as_array(x)
    xa = _random_start(x0, cfg, sample_offset) if (cfg.random_start and cfg.epsilon > 0) else x0.copy()
    alpha = cfg.step_size
    trace = []
    t0 = time.perf_counter()
    for _ in range(cfg.steps):
        per, grad = _input_grad(loss_fn, xa)
        trace.append(per)
        xa = xa + alpha * np.sign(grad)
        xa = np.clip(xa, x0 - cfg.epsilon, x0 + cfg.epsilon)
        xa = np.clip(xa, 0.0, 1.0)
    dt = (time.perf_counter() - t0) / max(1, cfg.steps)
    return AdversarialExample(
        x_adv=xa,
        x_clean=x0.copy(),
        achieved_linf=float(np.max(np.abs(xa - x0))) if xa.size else 0.0,
        loss_trace=np.stack(trace),
        step_seconds=dt,
    )


def margin_loss_each(logits, labels, kappa=0.0):
    """Ascent form of the margin objective, per example.

    The classic margin max(z_y - max_{c != y} z_c, -kappa) is what the
    attacker minimizes; this returns its negation so the shared ascent loop
    applies unchanged. loss_trace values are therefore negated margins.
    """
    labels = np.asarray(labels, dtype=np.int64)
    B, C = logits.data.shape
    zy = T.take_per_row(logits, labels)
    mask = np.zeros((B, C))
    mask[np.arange(B), labels] = -1e30
    zo = T.amax(logits + Tensor(mask), axis=1)
    return -T.maximum_scalar(zy - zo, -kappa)


def cw_margin(logits_fn, x, labels, cfg):
    """Margin-loss attack under the same l-inf projection schedule as pgd."""
    return pgd(lambda t: margin_loss_each(logits_fn(t), labels, cfg.kappa), x, cfg)


def epe_loss(pred, target, valid_mask=None):
    """Mean end-point error: Euclidean distance between corresponding field
    vectors, averaged over (valid) pixels. `pred` is [ch,H,W] or [B,ch,H,W]
    with the channel axis holding the vector components."""
    t = Tensor(np.asarray(target, dtype=np.float64).reshape(pred.data.shape))
    d = pred - t
    axis = 0 if pred.data.ndim == 3 else 1
    dist = T.tsqrt(T.tsum(d * d, axis=axis))
    return _masked_mean(dist, valid_mask)


def mae_field_loss(pred, target, valid_mask=None):
    """Mean absolute error between predicted and reference fields."""
    t = Tensor(np.asarray(target, dtype=np.float64).reshape(pred.data.shape))
    return _masked_mean(T.tabs(pred - t), valid_mask)


def _masked_mean(err, valid_mask):
    if valid_mask is None:
        return T.tmean(err)
    m = np.broadcast_to(np.asarray(valid_mask, dtype=np.float64), err.data.shape)
    count = float(m.sum())
    if count == 0:
        raise ValueError("valid mask is empty")
    return T.tsum(err * Tensor(m.copy())) * (1.0 / count)


def dense_pgd(field_fn, x, target_field, cfg, objective="epe", valid_mask=None):
    """Attack a dense prediction by ascending a field error.

    `field_fn` maps the perturbed input tensor to the predicted field; when
    several images are perturbed jointly (e.g. a stereo pair) stack them
    along the leading axis of `x`. `target_field` is frozen for the whole
    attack: ground truth when available, otherwise the clean prediction.
    """
    if objective == "epe":
        loss = lambda t: epe_loss(field_fn(t), target_field, valid_mask)
    elif objective == "mae":
        loss = lambda t: mae_field_loss(field_fn(t), target_field, valid_mask)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if cfg.kind == "fgsm":
        return fgsm(loss, x, cfg)
    return pgd(loss, x, cfg)


def classification_loss(model, labels, defense_cfg=None):
    """Per-example cross-entropy of the (possibly defended) forward pass."""
    labels = np.asarray(labels, dtype=np.int64)
    return lambda x: T.cross_entropy_each(sr_forward(model, x, defense_cfg), labels)


def make_adaptive(logits_loss, model, defense_cfg):
    """Compose a logits-level loss with the defended forward pass, so any
    attack optimizes through the full ensemble. With the singleton shift
    set this is identical to attacking the plain model."""
    return lambda x: logits_loss(sr_forward(model, x, defense_cfg))


def worst_case_ensemble(correct_flags):
    """Accuracy counting a sample only if it stays correct under every
    attack. `correct_flags` is [n_samples, n_attacks]; ragged input is an
    error."""
    rows = list(correct_flags)
    if not rows:
        raise ValueError("empty flag matrix")
    widths = {len(np.atleast_1d(r)) for r in rows}
    if len(widths) != 1:
        raise ValueError(f"ragged flag matrix: row widths {sorted(widths)}")
    flags = np.asarray(rows, dtype=bool)
    if flags.ndim != 2:
        raise ValueError(f"flag matrix must be 2-D, got shape {flags.shape}")
    return float(flags.all(axis=1).mean())
