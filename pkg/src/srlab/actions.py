"""Purposeful input perturbations and their inverses on feature maps.

Integer-pixel translations are the workhorse: they avoid interpolation
artifacts and, with circular padding, form an exact group. Small rotations
are provided as an alternative action; they use bilinear interpolation on
images but nearest-cell sampling on feature maps to avoid smearing.

A shift `(i, j)` moves image content down by `i` rows and right by `j`
columns. The matching feature-map realignment divides the shift by the
encoder's cumulative stride and rounds to the nearest cell (ties follow
round-half-to-even, so `round(1/4) = 0` and `round(3/2) = 2`); shifts
smaller than half the stride therefore leave the feature grid untouched,
which is exactly the regime where latent ensembling differs from a plain
forward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor

__all__ = [
    "ShiftSet",
    "GroupAction",
    "build_shift_set",
    "translate_image",
    "inverse_shift_features",
    "rotate_image",
    "inverse_rotate_features",
]

PAD_POLICIES = ("zeros", "circular")


@dataclass(frozen=True)
class ShiftSet:
    """The full grid of integer shifts [-d_y, d_y] x [-d_x, d_x].

    `shifts` is enumerated row-major over (i, j) — i (rows) outer, j
    (columns) inner, both ascending — so a shift index in a report always
    names the same perturbation. Weights default to uniform 1/N.
    """

    d_x: int
    d_y: int
    shifts: tuple = field(default_factory=tuple)
    weights: tuple = field(default_factory=tuple)

    def __len__(self):
        return len(self.shifts)


def build_shift_set(d_x, d_y):
    """Uniform-weight shift grid of (2*d_x+1)*(2*d_y+1) translations."""
    if d_x < 0 or d_y < 0:
        raise ValueError("shift extents must be non-negative")
    shifts = tuple((i, j) for i in range(-d_y, d_y + 1) for j in range(-d_x, d_x + 1))
    n = len(shifts)
    return ShiftSet(d_x=int(d_x), d_y=int(d_y), shifts=shifts, weights=tuple([1.0 / n] * n))


def _shift_array(a, i, j, pad_policy):
    if pad_policy == "circular":
        return np.roll(a, (i, j), axis=(-2, -1))
    out = np.zeros_like(a)
    H, W = a.shape[-2:]
    if abs(i) >= H or abs(j) >= W:
        return out
    ys_dst = slice(max(i, 0), H + min(i, 0))
    ys_src = slice(max(-i, 0), H + min(-i, 0))
    xs_dst = slice(max(j, 0), W + min(j, 0))
    xs_src = slice(max(-j, 0), W + min(-j, 0))
    out[..., ys_dst, xs_dst] = a[..., ys_src, xs_src]
    return out


def translate_image(x, shift, pad_policy="zeros"):
    """Shift a [...,H,W] tensor by (i, j) = (rows down, columns right).

    Vacated cells are filled with zeros or wrap around (circular). The
    operation is linear, so its gradient is the opposite shift under the
    same padding policy. Shift (0, 0) returns the input unchanged.
    """
    i, j = int(shift[0]), int(shift[1])
    if pad_policy not in PAD_POLICIES:
        raise ValueError(f"unknown pad_policy {pad_policy!r}")
    H, W = x.data.shape[-2:]
    if abs(i) > H or abs(j) > W:
        raise ValueError(f"shift ({i},{j}) exceeds image size {H}x{W}")
    if i == 0 and j == 0:
        return x

    def bw(g):
        return (_shift_array(g, -i, -j, pad_policy),)

    return Tensor._make(_shift_array(x.data, i, j, pad_policy), (x,), bw, "translate")


def _round_cells(v, stride, rounding):
    if rounding == "nearest":
        return int(np.rint(v / stride))
    if rounding == "floor":
        return math.floor(v / stride)
    raise ValueError(f"unknown rounding {rounding!r}")


def inverse_shift_features(f, shift, stride, rounding="nearest", pad_policy="zeros"):
    """Undo an input-lattice shift on a feature map computed at `stride`.

    The feature map moves by (-round(i/stride), -round(j/stride)) cells;
    rounded shifts larger than the map saturate to the map size rather than
    erroring. With shift (0, 0) the map is returned unchanged.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    i, j = int(shift[0]), int(shift[1])
    h, w = f.data.shape[-2:]
    di = -_round_cells(i, stride, rounding)
    dj = -_round_cells(j, stride, rounding)
    di = max(-h, min(h, di))
    dj = max(-w, min(w, dj))
    if di == 0 and dj == 0:
        return f
    return translate_image(f, (di, dj), pad_policy)


def _rotation_maps(H, W, angle_deg):
    # Inverse map: for each output pixel, the source coordinate that lands
    # on it after rotating the image by +angle about the center.
    theta = math.radians(angle_deg)
    c, s = math.cos(theta), math.sin(theta)
    cy, cx = (H - 1) / 2.0, (W - 1) / 2.0
    yy, xx = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64), indexing="ij")
    dy, dx = yy - cy, xx - cx
    src_y = c * dy + s * dx + cy
    src_x = -s * dy + c * dx + cx
    return src_y, src_x


def _gather2d(a, iy, ix, wt):
    lead = a.shape[:-2]
    flat = a.reshape(-1, *a.shape[-2:])
    vals = flat[:, iy, ix] * wt
    return vals.reshape(*lead, *iy.shape)


def _resample(x, taps, op_name):
    # taps: list of (iy, ix, weight) index maps; out = sum_k w_k * x[..., iy, ix].
    out = None
    for iy, ix, wt in taps:
        term = _gather2d(x.data, iy, ix, wt)
        out = term if out is None else out + term

    def bw(g):
        gx = np.zeros_like(x.data)
        n = int(np.prod(x.data.shape[:-2], dtype=np.int64)) if x.data.ndim > 2 else 1
        gxf = gx.reshape(n, *x.data.shape[-2:])
        gf = g.reshape(n, *g.shape[-2:])
        lead = np.arange(n)[:, None, None]
        for iy, ix, wt in taps:
            np.add.at(gxf, (lead, iy[None], ix[None]), gf * wt)
        return (gx,)

    return Tensor._make(out, (x,), bw, op_name)


def _rotation_taps(H, W, angle_deg, interpolation):
    src_y, src_x = _rotation_maps(H, W, angle_deg)
    taps = []
    if interpolation == "nearest":
        iy = np.rint(src_y).astype(np.int64)
        ix = np.rint(src_x).astype(np.int64)
        inside = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
        taps.append((np.clip(iy, 0, H - 1), np.clip(ix, 0, W - 1), inside.astype(np.float64)))
    elif interpolation == "bilinear":
        y0 = np.floor(src_y).astype(np.int64)
        x0 = np.floor(src_x).astype(np.int64)
        fy = src_y - y0
        fx = src_x - x0
        for oy, ox, w in (
            (0, 0, (1 - fy) * (1 - fx)),
            (0, 1, (1 - fy) * fx),
            (1, 0, fy * (1 - fx)),
            (1, 1, fy * fx),
        ):
            iy, ix = y0 + oy, x0 + ox
            inside = (iy >= 0) & (iy < H) & (ix >= 0) & (ix < W)
            taps.append((np.clip(iy, 0, H - 1), np.clip(ix, 0, W - 1), w * inside))
    else:
        raise ValueError(f"unknown interpolation {interpolation!r}")
    return taps


def rotate_image(x, angle_deg, interpolation="bilinear"):
    """Rotate a [...,H,W] tensor by `angle_deg` about the image center.

    Out-of-bounds samples are zero. Bilinear interpolation keeps the map
    differentiable; nearest makes lattice-preserving angles (multiples of
    90 degrees on square images) exactly invertible.
    """
    angle_deg = float(angle_deg)
    if angle_deg == 0.0:
        return x
    H, W = x.data.shape[-2:]
    taps = _rotation_taps(H, W, angle_deg, interpolation)
    return _resample(x, taps, "rotate")


def inverse_rotate_features(f, angle_deg):
    """Undo an input rotation on a feature map: rotate by -angle about the
    feature-map center, with nearest-cell sampling to avoid smearing."""
    return rotate_image(f, -float(angle_deg), interpolation="nearest")


@dataclass(frozen=True)
class GroupAction:
    """One purposeful perturbation: an integer translation or a rotation."""

    kind: str = "translate"
    parameter: tuple | float = (0, 0)
    pad_policy: str = "zeros"

    def apply(self, x):
        if self.kind == "translate":
            return translate_image(x, self.parameter, self.pad_policy)
        if self.kind == "rotate":
            return rotate_image(x, self.parameter, interpolation="bilinear")
        raise ValueError(f"unknown action kind {self.kind!r}")

    def invert_features(self, f, stride):
        if self.kind == "translate":
            return inverse_shift_features(f, self.parameter, stride, pad_policy=self.pad_policy)
        if self.kind == "rotate":
            return inverse_rotate_features(f, self.parameter)
        raise ValueError(f"unknown action kind {self.kind!r}")
