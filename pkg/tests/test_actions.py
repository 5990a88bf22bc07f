import numpy as np
import pytest

from srlab import tensor as T
from srlab.actions import (
    GroupAction,
    build_shift_set,
    inverse_rotate_features,
    inverse_shift_features,
    rotate_image,
    translate_image,
)
from srlab.tensor import Tensor, backward, finite_diff_gradient


def test_translate_identity_returns_input():
    x = Tensor(np.random.default_rng(0).random((1, 1, 4, 4)))
    assert translate_image(x, (0, 0)) is x


def test_translate_hand_case():
    x = Tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    out = translate_image(x, (0, 1), "zeros")
    assert np.array_equal(out.data[0, 0], [[0.0, 1.0], [0.0, 3.0]])


def test_translate_directions():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    down = translate_image(x, (1, 0), "zeros").data[0, 0]
    assert np.array_equal(down, [[0.0, 0.0], [1.0, 2.0]])


def test_translate_circular_group_inverse_exact():
    x = np.random.default_rng(1).random((2, 3, 6, 7))
    out = translate_image(translate_image(Tensor(x), (1, 2), "circular"), (-1, -2), "circular")
    assert np.array_equal(out.data, x)


def test_translate_circular_composition_is_summed_offsets():
    x = np.random.default_rng(2).random((1, 1, 8, 8))
    a = translate_image(translate_image(Tensor(x), (2, 3), "circular"), (1, -5), "circular").data
    b = translate_image(Tensor(x), (3, -2), "circular").data
    assert np.array_equal(a, b)


def test_translate_linearity():
    rng = np.random.default_rng(3)
    a, b = rng.random((1, 1, 5, 5)), rng.random((1, 1, 5, 5))
    lhs = translate_image(Tensor(2.0 * a + 3.0 * b), (1, -2)).data
    rhs = 2.0 * translate_image(Tensor(a), (1, -2)).data + 3.0 * translate_image(Tensor(b), (1, -2)).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-12


def test_translate_bounds_error():
    x = Tensor(np.zeros((1, 1, 4, 4)))
    with pytest.raises(ValueError, match="exceeds"):
        translate_image(x, (5, 0))
    translate_image(x, (4, 4))  # boundary allowed


def test_translate_gradient_is_adjoint():
    rng = np.random.default_rng(4)
    for pad in ("zeros", "circular"):
        x = Tensor(rng.random((1, 1, 5, 5)), requires_grad=True)
        mult = Tensor(rng.random((1, 1, 5, 5)))
        f = lambda t: T.tsum(translate_image(t, (2, -1), pad) * mult)
        g = backward(f(x))[x].data
        num = finite_diff_gradient(f, x)
        assert np.max(np.abs(g - num)) < 1e-7


def test_shift_set_structure():
    ss = build_shift_set(1, 1)
    assert len(ss) == 9
    assert ss.shifts == ((-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 0), (0, 1), (1, -1), (1, 0), (1, 1))
    assert len(set(ss.shifts)) == 9
    assert abs(sum(ss.weights) - 1.0) <= 1e-15
    assert all(w == 1.0 / 9 for w in ss.weights)


def test_shift_set_sizes():
    assert build_shift_set(0, 0).shifts == ((0, 0),)
    assert build_shift_set(0, 0).weights == (1.0,)
    assert len(build_shift_set(3, 3)) == 49
    assert abs(sum(build_shift_set(3, 3).weights) - 1.0) <= 1e-15
    # asymmetric extents: d_x horizontal (j), d_y vertical (i)
    ss = build_shift_set(2, 0)
    assert len(ss) == 5 and all(i == 0 for i, _ in ss.shifts)
    with pytest.raises(ValueError):
        build_shift_set(-1, 0)


def test_inverse_shift_identity_for_all_strides():
    f = Tensor(np.random.default_rng(5).random((1, 2, 6, 6)))
    for s in (1, 2, 4):
        assert inverse_shift_features(f, (0, 0), s) is f


def test_inverse_shift_substride_is_noop():
    f = Tensor(np.random.default_rng(6).random((1, 1, 8, 8)))
    # round(1/4) = 0: shifts below half the stride leave the grid untouched
    assert inverse_shift_features(f, (1, 0), 4) is f
    assert inverse_shift_features(f, (0, -1), 4) is f


def test_inverse_shift_nearest_rounding():
    f = np.random.default_rng(7).random((1, 1, 8, 8))
    # round(3/2) = 2 under round-half-to-even -> feature shift (-2, 0)
    out = inverse_shift_features(Tensor(f), (3, 0), 2, pad_policy="circular")
    assert np.array_equal(out.data, np.roll(f, (-2, 0), axis=(2, 3)))
    # round(2/4) = 0 (ties to even)
    assert inverse_shift_features(Tensor(f), (2, 0), 4) .data is f or np.array_equal(
        inverse_shift_features(Tensor(f), (2, 0), 4).data, f
    )


def test_inverse_shift_floor_rounding():
    f = np.random.default_rng(8).random((1, 1, 8, 8))
    out = inverse_shift_features(Tensor(f), (3, 0), 2, rounding="floor", pad_policy="circular")
    assert np.array_equal(out.data, np.roll(f, (-1, 0), axis=(2, 3)))


def test_inverse_shift_roundtrip_alignment_error_within_one_pixel():
    # delta impulse: shift by 3 at stride 2, realign, and check the impulse
    # lands within 1 input pixel of its origin
    H = W = 16
    img = np.zeros((1, 1, H, W))
    img[0, 0, 8, 8] = 1.0
    shifted = translate_image(Tensor(img), (3, 0), "circular")
    feat = T.avgpool2d(shifted, 2)  # stride-2 "encoder"
    realigned = inverse_shift_features(feat, (3, 0), 2, pad_policy="circular")
    cy, cx = np.unravel_index(np.argmax(realigned.data[0, 0]), (8, 8))
    # feature cell (y, x) covers input rows [2y, 2y+1]; origin was row 8
    err_px = min(abs(2 * cy - 8), abs(2 * cy + 1 - 8))
    assert err_px <= 1 and cx == 4


def test_inverse_shift_saturates():
    f = Tensor(np.random.default_rng(9).random((1, 1, 4, 4)))
    out = inverse_shift_features(f, (100, 0), 1, pad_policy="zeros")
    assert np.array_equal(out.data, np.zeros_like(f.data))


def test_rotate_zero_is_identity():
    x = Tensor(np.random.default_rng(10).random((1, 1, 8, 8)))
    assert rotate_image(x, 0.0) is x


def test_rotate_roundtrip_interior():
    yy, xx = np.meshgrid(np.arange(16), np.arange(16), indexing="ij")
    blob = np.exp(-((yy - 7.5) ** 2 + (xx - 7.5) ** 2) / 18.0)[None, None]
    r = rotate_image(rotate_image(Tensor(blob), 7.0), -7.0)
    interior = np.abs(r.data - blob)[0, 0, 2:-2, 2:-2]
    assert interior.max() <= 0.15


def test_rotate_90_nearest_exactly_invertible():
    x = np.random.default_rng(11).random((1, 1, 9, 9))
    r = rotate_image(Tensor(x), 90.0, interpolation="nearest")
    back = rotate_image(r, -90.0, interpolation="nearest")
    assert np.array_equal(back.data, x)


def test_rotate_gradient():
    rng = np.random.default_rng(12)
    x = Tensor(rng.random((1, 1, 8, 8)), requires_grad=True)
    mult = Tensor(rng.random((1, 1, 8, 8)))
    f = lambda t: T.tsum(rotate_image(t, 11.0) * mult)
    g = backward(f(x))[x].data
    assert np.max(np.abs(g - finite_diff_gradient(f, x))) < 1e-7


def test_inverse_rotate_features_is_nearest_inverse():
    f = np.random.default_rng(13).random((1, 2, 9, 9))
    a = inverse_rotate_features(Tensor(f), 90.0)
    b = rotate_image(Tensor(f), -90.0, interpolation="nearest")
    assert np.array_equal(a.data, b.data)


def test_group_action_wrappers():
    x = Tensor(np.random.default_rng(14).random((1, 1, 8, 8)))
    act = GroupAction("translate", (1, 2), "circular")
    y = act.apply(x)
    f = act.invert_features(y, 1)
    assert np.array_equal(f.data, x.data)
    rot = GroupAction("rotate", 6.0)
    assert rot.apply(x).data.shape == x.data.shape
    with pytest.raises(ValueError, match="unknown action"):
        GroupAction("scale", 2.0).apply(x)
