"""Test-time defense: latent ensembling over purposeful perturbations.

The core idea: encode several slightly transformed copies of the input,
undo each transform on its feature map, and average the realigned maps
before running the rest of the network. Because the feature grid is
coarser than the input lattice, sub-stride shifts change how the input is
sampled without moving the feature grid, so the adversarial perturbation
splinters differently per branch and averages out — while the realignment
keeps the ensemble anchored to the original image, unlike plain smoothing.

Three baselines ship for comparison: latent smoothing (same averaging
without realignment), input smoothing (average the shifted images, then
encode once), and output ensembling (average logits of shifted copies).

Every mode is an ordinary composition of differentiable ops, so attacks
can differentiate end to end through the full ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .actions import (
    GroupAction,
    ShiftSet,
    build_shift_set,
    inverse_rotate_features,
    inverse_shift_features,
    rotate_image,
    translate_image,
)

__all__ = [
    "DefenseConfig",
    "sr_forward",
    "ensemble_features",
    "feature_distance",
    "build_shift_set",
    "MODES",
]

MODES = ("none", "sr", "latent_smooth", "input_smooth", "output_ensemble")


@dataclass(frozen=True)
class DefenseConfig:
    """How (and whether) to wrap a model's forward pass.

    mode "none" ignores every other field. For translations, `shift_set`
    lists the perturbations; for rotations, `angles` lists degrees and the
    prior is uniform over them. `tap` names the layer boundary where branch
    features are averaged. The singleton shift set {(0,0)} reduces every
    mode to a plain forward pass, bit for bit.
    """

    mode: str = "none"
    shift_set: ShiftSet | None = None
    tap: str | None = None
    action_kind: str = "translate"
    pad_policy: str = "zeros"
    angles: tuple = field(default_factory=tuple)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown defense mode {self.mode!r}; expected one of {MODES}")
        if self.mode != "none":
            if self.action_kind == "translate" and self.shift_set is None:
                raise ValueError(f"mode {self.mode!r} with translations requires a shift_set")
            if self.action_kind == "rotate" and not self.angles:
                raise ValueError(f"mode {self.mode!r} with rotations requires angles")

    def actions(self):
        """The ordered perturbations and their prior weights."""
        if self.action_kind == "translate":
            return (
                tuple(GroupAction("translate", s, self.pad_policy) for s in self.shift_set.shifts),
                tuple(self.shift_set.weights),
            )
        if self.action_kind == "rotate":
            n = len(self.angles)
            return (
                tuple(GroupAction("rotate", float(a), self.pad_policy) for a in self.angles),
                tuple([1.0 / n] * n),
            )
        raise ValueError(f"unknown action_kind {self.action_kind!r}")


def _is_identity(action):
    return (action.kind == "translate" and tuple(action.parameter) == (0, 0)) or (
        action.kind == "rotate" and float(action.parameter) == 0.0
    )


def ensemble_features(encode, x, cfg, stride, realign=True):
    """Average branch features over cfg's perturbations.

    `encode` maps an input tensor to a feature map computed at `stride`
    times coarser resolution. Branches are accumulated in the fixed
    enumeration order of the perturbation set, so the result is a
    deterministic convex combination. With realign=False this is the
    latent-smoothing baseline."""
    actions, weights = cfg.actions()
    acc = None
    for action, w in zip(actions, weights):
        f = encode(action.apply(x))
        if realign:
            f = action.invert_features(f, stride)
        term = f * w
        acc = term if acc is None else acc + term
    return acc


def sr_forward(model, x, cfg):
    """Forward pass under a defense configuration; returns logits.

    mode "sr": encode each perturbed copy to the tap, undo the perturbation
    on the feature map, average with the prior weights, and continue the
    network from the tap. "latent_smooth" skips the realignment;
    "input_smooth" averages the perturbed images before a single plain
    forward; "output_ensemble" averages the logits of perturbed copies.
    The whole computation is differentiable with respect to `x`.
    """
    if cfg is None or cfg.mode == "none":
        return model.forward(x)

    if cfg.mode in ("sr", "latent_smooth"):
        tap = model.tap(cfg.tap)
        fbar = ensemble_features(
            lambda xi: model.forward_to_tap(xi, tap),
            x,
            cfg,
            tap.cumulative_stride,
            realign=(cfg.mode == "sr"),
        )
        return model.forward_from_tap(fbar, tap)

    actions, weights = cfg.actions()
    if cfg.mode == "input_smooth":
        acc = None
        for action, w in zip(actions, weights):
            term = action.apply(x) * w
            acc = term if acc is None else acc + term
        return model.forward(acc)

    if cfg.mode == "output_ensemble":
        acc = None
        for action, w in zip(actions, weights):
            term = model.forward(action.apply(x)) * w
            acc = term if acc is None else acc + term
        return acc

    raise ValueError(f"unknown defense mode {cfg.mode!r}")


def feature_distance(a, b, metric="l2"):
    """Distance between two equally-shaped feature tensors (plain float).

    "l2" is the Euclidean norm of the difference over all elements; zero
    iff the tensors are equal. "cosine" is 1 - cosine similarity of the
    flattened tensors (0 when both are zero vectors)."""
    from .tensor import Tensor

    da = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    db = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if da.shape != db.shape:
        raise ValueError(f"feature shape mismatch: {da.shape} vs {db.shape}")
    if metric == "l2":
        return float(np.sqrt(np.sum((da - db) ** 2)))
    if metric == "cosine":
        na = float(np.sqrt(np.sum(da * da)))
        nb = float(np.sqrt(np.sum(db * db)))
        if na == 0.0 and nb == 0.0:
            return 0.0
        if na == 0.0 or nb == 0.0:
            return 1.0
        return 1.0 - float(np.sum(da * db)) / (na * nb)
    raise ValueError(f"unknown metric {metric!r}")
