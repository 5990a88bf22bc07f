"""Desk-scale stereo track: random-dot stereograms with exact ground truth,
a differentiable cost-volume matcher, and the standard disparity metrics.

The stereogram generator warps a random texture by a piecewise-constant
integer disparity field, so ground truth is exact by construction and
occlusions are known. The matcher computes per-pixel feature distances at
every candidate disparity and reads the disparity out with a soft-argmin,
which keeps the whole map differentiable so dense attacks can ascend its
error. Latent ensembling plugs in at the feature-extraction stage, before
the cost volume is built.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .actions import translate_image
from .defense import ensemble_features
from .tensor import Tensor

__all__ = [
    "BlockStructure",
    "StereoPair",
    "DisparityMap",
    "StereoEncoder",
    "gen_random_dot_stereogram",
    "patch_encoder",
    "conv_encoder",
    "stereo_predict",
    "stereo_match",
    "block_match_oracle",
    "stereo_metrics",
]


@dataclass(frozen=True)
class BlockStructure:
    """Layout of the piecewise-constant disparity field: `n_blocks`
    rectangles at distinct depths over a zero-disparity background.
    Depths are drawn from multiples of `disparity_step` (use the encoder
    stride here to keep every depth representable by a strided matcher)."""

    n_blocks: int = 4
    min_size: int = 10
    max_size: int = 24
    disparity_step: int = 1


@dataclass
class StereoPair:
    left: np.ndarray  # [1,C,H,W], values in [0,1]
    right: np.ndarray
    gt_disparity: np.ndarray  # [H,W] int
    d_max: int
    valid_mask: np.ndarray  # [H,W] bool; False where occluded or out of view


@dataclass
class DisparityMap:
    values: np.ndarray  # [H,W] real pixels
    valid_mask: np.ndarray


def _box3(a):
    p = np.pad(a, 1, mode="edge")
    return (
        p[:-2, :-2] + p[:-2, 1:-1] + p[:-2, 2:] +
        p[1:-1, :-2] + p[1:-1, 1:-1] + p[1:-1, 2:] +
        p[2:, :-2] + p[2:, 1:-1] + p[2:, 2:]
    ) / 9.0


def gen_random_dot_stereogram(
    H, W, d_max, block_structure=None, seed=0, levels=8, contrast=1.0, smoothness=0
):
    """Random-dot pair with exact integer ground truth.

    The left image is quantized uniform noise; the right image is the left
    warped by the disparity field (nearer blocks win collisions), with
    disoccluded pixels filled by fresh noise and excluded from the valid
    mask along with pixels whose correspondence falls outside the image.

    `contrast` < 1 compresses the dot amplitude around 0.5, which controls
    how much margin the matcher has against bounded perturbations.
    `smoothness` counts 3x3 box-blur passes over the raw noise: 0 gives
    spatially white dots, higher values give textures with short-range
    correlation, the regime where shifting by a pixel preserves scene
    content but decorrelates pixel-rate perturbations.
    """
    if d_max < 0:
        raise ValueError("d_max must be >= 0")
    if d_max >= W / 4:
        raise ValueError(f"d_max={d_max} too large for width {W} (need d_max < W/4)")
    if not (0 < contrast <= 1):
        raise ValueError("contrast must be in (0, 1]")
    bs = block_structure or BlockStructure()
    rng = np.random.default_rng(seed)

    def dots():
        u = rng.integers(0, levels, size=(H, W)).astype(np.float64) / (levels - 1)
        for _ in range(smoothness):
            u = _box3(u)
        lo, hi = u.min(), u.max()
        if hi > lo:
            u = (u - lo) / (hi - lo)
        return 0.5 + (u - 0.5) * contrast

    left = dots()
    right = dots()  # pre-fill; disoccluded holes keep this texture

    gt = np.zeros((H, W), dtype=np.int64)
    if d_max > 0:
        depths = np.arange(bs.disparity_step, d_max + 1, bs.disparity_step)
        if depths.size == 0:
            raise ValueError("no representable depth between disparity_step and d_max")
        chosen = rng.permutation(depths)[: bs.n_blocks]
        for k in range(bs.n_blocks):
            bh = int(rng.integers(bs.min_size, bs.max_size + 1))
            bw = int(rng.integers(bs.min_size, bs.max_size + 1))
            bh, bw = min(bh, H - 1), min(bw, W - 1)
            y0 = int(rng.integers(0, H - bh + 1))
            x0 = int(rng.integers(0, W - bw + 1))
            gt[y0 : y0 + bh, x0 : x0 + bw] = int(chosen[k % len(chosen)])

    valid = np.zeros((H, W), dtype=bool)
    xs = np.arange(W)
    for y in range(H):
        xr = xs - gt[y]
        ok = xr >= 0
        src = xs[ok]
        dst = xr[ok]
        # nearer surfaces (larger disparity) occlude: order descending by
        # disparity and keep the first writer of each right-image column
        order = np.argsort(-gt[y][ok], kind="stable")
        src_o, dst_o = src[order], dst[order]
        uniq_dst, first = np.unique(dst_o, return_index=True)
        winners = src_o[first]
        right[y, uniq_dst] = left[y, winners]
        valid[y, winners] = True

    return StereoPair(
        left=left[None, None],
        right=right[None, None],
        gt_disparity=gt,
        d_max=int(d_max),
        valid_mask=valid,
    )


@dataclass
class StereoEncoder:
    """Feature extractor for the matcher: a callable on [B,C,H,W] tensors,
    the cumulative downsampling factor of its output grid, and the padding
    convention its shifts should use."""

    encode: object
    stride: int = 1
    pad_mode: str = "zeros"
    params: dict = field(default_factory=dict)


def patch_encoder(window=3, pool=1, pad_mode="zeros", reduce="subsample"):
    """Identity-style encoder: each feature channel is a raw intensity from
    a window x window neighbourhood. `pool` > 1 coarsens the feature grid
    by that factor, either by plain subsampling (keeps full dot contrast)
    or by average pooling. With pool=1 this makes the matcher an exact
    block-matching machine."""
    if window % 2 == 0:
        raise ValueError("window must be odd")
    if reduce not in ("subsample", "avg"):
        raise ValueError(f"unknown reduce {reduce!r}")
    r = window // 2

    def encode(x):
        chans = []
        for di in range(-r, r + 1):
            for dj in range(-r, r + 1):
                chans.append(translate_image(x, (-di, -dj), pad_mode))
        f = T.concat(chans, axis=1)
        if pool > 1:
            f = T.subsample(f, pool) if reduce == "subsample" else T.avgpool2d(f, pool)
        return f

    return StereoEncoder(encode=encode, stride=pool, pad_mode=pad_mode)


def conv_encoder(
    seed=0,
    in_channels=1,
    channels=(8, 8),
    kernel=3,
    pool=2,
    pool_after=1,
    pad_mode="zeros",
    center=0.5,
):
    """Small fixed random conv stack (He-init, seeded) with average pooling
    after layer `pool_after`; exercises the nonlinear ensembling path at a
    coarse feature grid without requiring training.

    The input is centered at `center` first so relu units switch at texture
    scale rather than being pinned by the image's DC level, and the layers
    after the pooling stage process the subsample-phase-dependent signal —
    the part of the computation that purposeful shifts are able to
    re-randomize."""
    rng = np.random.default_rng(seed)
    params = {}
    cin = in_channels
    for n, ch in enumerate(channels):
        fan_in = cin * kernel * kernel
        params[f"conv{n}.weight"] = Tensor(
            rng.standard_normal((ch, cin, kernel, kernel)) * np.sqrt(2.0 / fan_in)
        )
        params[f"conv{n}.bias"] = Tensor(np.zeros(ch))
        cin = ch

    def encode(x):
        h = x + Tensor(-center) if center else x
        for n in range(len(channels)):
            h = T.conv2d(
                h,
                params[f"conv{n}.weight"],
                params[f"conv{n}.bias"],
                stride=1,
                padding=kernel // 2,
                pad_mode=pad_mode,
            )
            h = T.relu(h)
            if pool > 1 and n + 1 == pool_after:
                h = T.avgpool2d(h, pool)
        if pool > 1 and pool_after > len(channels):
            h = T.avgpool2d(h, pool)
        return h

    return StereoEncoder(encode=encode, stride=pool, pad_mode=pad_mode, params=params)


def _extract_features(img, encoder, defense_cfg):
    if defense_cfg is None or defense_cfg.mode == "none":
        return encoder.encode(img)
    if defense_cfg.mode in ("sr", "latent_smooth"):
        return ensemble_features(
            encoder.encode, img, defense_cfg, encoder.stride, realign=(defense_cfg.mode == "sr")
        )
    if defense_cfg.mode == "input_smooth":
        actions, weights = defense_cfg.actions()
        acc = None
        for action, w in zip(actions, weights):
            term = action.apply(img) * w
            acc = term if acc is None else acc + term
        return encoder.encode(acc)
    raise ValueError(f"defense mode {defense_cfg.mode!r} is not defined for the stereo matcher")


def stereo_predict(left, right, encoder, d_max, defense_cfg=None, temperature=1.0):
    """Differentiable disparity prediction, [B,H,W] in full-pixel units.

    Candidate disparities are the multiples of the encoder stride up to
    d_max. The cost of a candidate is the squared feature distance between
    the left map and the right map shifted by the candidate; a soft-argmin
    over candidates (temperature-scaled softmax of negated costs) yields
    the expected disparity, which is then upsampled back to input
    resolution.
    """
    if temperature <= 0:
        raise ValueError("temperature must be > 0")
    s = encoder.stride
    H, W = left.data.shape[-2:]
    fl = _extract_features(left, encoder, defense_cfg)
    fr = _extract_features(right, encoder, defense_cfg)
    w_feat = fl.data.shape[-1]
    if d_max // s >= w_feat:
        raise ValueError(f"d_max={d_max} spans the whole feature width {w_feat} at stride {s}")

    candidates = list(range(0, d_max + 1, s))
    costs = []
    B = fl.data.shape[0]
    h, w = fl.data.shape[-2:]
    k_inv = 1.0 / fl.data.shape[1]  # mean over channels keeps the cost scale comparable across encoders
    for d in candidates:
        fr_d = translate_image(fr, (0, d // s), encoder.pad_mode)
        diff = fl - fr_d
        costs.append(T.reshape(T.tsum(diff * diff, axis=1) * k_inv, (B, 1, h, w)))
    vol = T.concat(costs, axis=1)
    # ratio-normalize per pixel so the matching margin is scale-free: a
    # perfect correspondence scores ~0 and mismatches ~1 regardless of
    # texture contrast or feature smoothing
    norm = T.reciprocal(T.tmean(vol, axis=1, keepdims=True), eps=1e-12)
    prob = T.softmax(vol * norm * (-1.0 / temperature), axis=1)
    dvals = np.asarray(candidates, dtype=np.float64)[None, :, None, None]
    pred = T.tsum(prob * Tensor(dvals), axis=1, keepdims=True)  # [B,1,h,w]
    if s > 1:
        pred = T.upsample_nearest(pred, s)
    return T.reshape(pred, (B, H, W))


def stereo_match(pair, encoder, defense_cfg=None, temperature=1.0):
    """Run the matcher on a pair; returns a DisparityMap carrying the
    pair's validity mask."""
    pred = stereo_predict(
        Tensor(pair.left), Tensor(pair.right), encoder, pair.d_max, defense_cfg, temperature
    )
    return DisparityMap(values=pred.data[0], valid_mask=pair.valid_mask.copy())


def _box_sum(a, window):
    r = window // 2
    p = np.pad(a, ((r, r), (r, r)))
    windows = np.lib.stride_tricks.sliding_window_view(p, (window, window))
    return windows.sum(axis=(-2, -1))


def block_match_oracle(pair, window=3, d_max=None):
    """Brute-force integer block matching: per-pixel SSD over a window at
    every candidate disparity, hard argmin. Independent of the autodiff
    path; used as the matcher's oracle."""
    d_max = pair.d_max if d_max is None else d_max
    L = pair.left[0, 0]
    R = pair.right[0, 0]
    H, W = L.shape
    costs = np.full((d_max + 1, H, W), np.inf)
    for d in range(d_max + 1):
        Rs = np.zeros_like(R)
        Rs[:, d:] = R[:, : W - d] if d else R
        costs[d] = _box_sum((L - Rs) ** 2, window)
        costs[d, :, :d] = np.inf
    disp = costs.argmin(axis=0).astype(np.float64)
    return DisparityMap(values=disp, valid_mask=pair.valid_mask.copy())


def stereo_metrics(pred, gt):
    """MAE, RMSE and D1 over valid pixels.

    D1 is the percentage of pixels whose absolute disparity error exceeds
    max(3 px, 5% of the ground-truth disparity).
    """
    gt = np.asarray(gt, dtype=np.float64)
    if pred.values.shape != gt.shape:
        raise ValueError(f"shape mismatch: prediction {pred.values.shape} vs ground truth {gt.shape}")
    m = pred.valid_mask
    if not m.any():
        raise ValueError("empty valid mask: no pixels to evaluate")
    e = np.abs(pred.values[m] - gt[m])
    thresh = np.maximum(3.0, 0.05 * gt[m])
    return {
        "mae": float(e.mean()),
        "rmse": float(np.sqrt((e**2).mean())),
        "d1": float((e > thresh).mean() * 100.0),
    }
