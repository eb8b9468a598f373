import json

import numpy as np
import pytest

from foam import nn
from foam import spectral as S
from foam import tensor as T
from foam.gradcheck import gradcheck
from foam.nn import Conv2dParams, DDConvParams
from foam.spectral import ComplexSpectrum
from foam.tensor import Tensor

from oracles import conv_loops, expand_dd_kernel, instance_norm


def fixed_conv(weight, bias=None, dilation=1):
    return Conv2dParams(Tensor(weight), None if bias is None else Tensor(bias), dilation)


def test_identity_1x1_conv():
    x = np.random.default_rng(0).standard_normal((3, 5, 5))
    p = fixed_conv(np.eye(3)[:, :, None, None], np.zeros(3))
    np.testing.assert_array_equal(nn.conv2d(Tensor(x), p).data, x)


def test_ones_kernel_on_impulse_gives_plateau():
    x = np.zeros((1, 5, 5))
    x[0, 2, 2] = 1.0
    out = nn.conv2d(Tensor(x), fixed_conv(np.ones((1, 1, 3, 3)))).data[0]
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0
    np.testing.assert_array_equal(out, expected)
    corner = np.zeros((1, 5, 5))
    corner[0, 0, 0] = 1.0
    out = nn.conv2d(Tensor(corner), fixed_conv(np.ones((1, 1, 3, 3)))).data[0]
    assert out.sum() == 4.0  # zero padding clips the plateau at the border


@pytest.mark.parametrize("k,d", [(1, 1), (3, 1), (3, 2), (5, 1), (5, 2)])
def test_conv_against_six_loop_oracle(k, d):
    rng = np.random.default_rng(k * 10 + d)
    x = rng.standard_normal((3, 7, 6))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = nn.conv2d(Tensor(x), fixed_conv(w, b, d)).data
    assert out.shape == (4, 7, 6)
    assert np.abs(out - conv_loops(x, w, b, d)).max() < 1e-10


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 3, 6, 6))
    p = nn.make_conv(3, 2, 3, rng, dilation=2)
    batched = nn.conv2d(Tensor(x), p).data
    for i in range(2):
        np.testing.assert_allclose(batched[i], nn.conv2d(Tensor(x[i]), p).data, atol=1e-12)


def test_conv_channel_mismatch():
    p = nn.make_conv(3, 2, 3, 0)
    with pytest.raises(ValueError, match="input channels"):
        nn.conv2d(Tensor(np.zeros((4, 5, 5))), p)
    with pytest.raises(ValueError):
        nn.conv2d(Tensor(np.zeros((5, 5))), p)


def test_dd_identity_and_dilated_taps():
    c = 2
    dw = np.zeros((c, 3, 3))
    dw[:, 1, 1] = 1.0
    ident = DDConvParams(Tensor(dw), fixed_conv(np.eye(c)[:, :, None, None], np.zeros(c)), 2)
    x = np.random.default_rng(3).standard_normal((c, 6, 6))
    np.testing.assert_array_equal(nn.dd_conv(Tensor(x), ident).data, x)

    imp = np.zeros((1, 9, 9))
    imp[0, 4, 4] = 1.0
    p = DDConvParams(Tensor(np.ones((1, 3, 3))), fixed_conv(np.ones((1, 1, 1, 1))), 2)
    out = nn.dd_conv(Tensor(imp), p).data[0]
    ys, xs = np.nonzero(out)
    assert sorted(set(ys - 4)) == [-2, 0, 2] and sorted(set(xs - 4)) == [-2, 0, 2]
    assert np.count_nonzero(out) == 9


def test_dd_conv_equals_expanded_dense_kernel():
    for trial in range(50):
        rng = np.random.default_rng(trial)
        c_in, c_out = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        k = int(rng.choice([3, 5]))
        d = int(rng.choice([1, 2]))
        p = nn.make_dd(c_in, c_out, k, rng, d)
        x = rng.standard_normal((c_in, 7, 7))
        dense = expand_dd_kernel(p.depthwise.data, p.pointwise.weight.data[:, :, 0, 0], d)
        ref = nn.conv2d(Tensor(x), fixed_conv(dense, p.pointwise.bias.data, 1)).data
        assert np.abs(nn.dd_conv(Tensor(x), p).data - ref).max() < 1e-10


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("d", [1, 2])
def test_same_shape_everywhere(k, d):
    x = Tensor(np.random.default_rng(0).standard_normal((2, 3, 8, 12)))
    assert nn.conv2d(x, nn.make_conv(3, 5, k, 0, dilation=d)).shape == (2, 5, 8, 12)
    if k > 1:
        assert nn.dd_conv(x, nn.make_dd(3, 4, k, 0, d)).shape == (2, 4, 8, 12)


def test_even_kernel_rejected():
    with pytest.raises(ValueError):
        nn.conv2d(Tensor(np.zeros((1, 4, 4))), fixed_conv(np.ones((1, 1, 2, 2))))


def test_instance_norm_matches_oracle():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((3, 5, 5)) * 4 + 2
    scale, shift = rng.standard_normal(3), rng.standard_normal(3)
    out = nn.instance_norm(Tensor(x), Tensor(scale), Tensor(shift)).data
    np.testing.assert_allclose(out, instance_norm(x, scale, shift), atol=1e-12)


def test_sigma_block_zero_case_and_bounds():
    zero = nn.make_sigma(3, 0, zero=True)
    spec = ComplexSpectrum(Tensor(np.zeros((3, 4, 4))), Tensor(np.zeros((3, 4, 4))))
    out = nn.sigma_block(spec, zero)
    np.testing.assert_array_equal(out.real.data, 0.5)
    np.testing.assert_array_equal(out.imag.data, 0.5)

    p = nn.make_sigma(3, 1)
    for seed in range(10):
        x = np.random.default_rng(seed).standard_normal((3, 8, 8))
        g = nn.sigma_block(S.fft2(Tensor(x)), p)
        for part in (g.real.data, g.imag.data):
            assert part.min() > 0 and part.max() < 1


def test_sigma_block_shares_weights_between_parts():
    p = nn.make_sigma(2, 5)
    rng = np.random.default_rng(6)
    a, b = rng.standard_normal((2, 4, 4)), rng.standard_normal((2, 4, 4))
    g = nn.sigma_block(ComplexSpectrum(Tensor(a), Tensor(b)), p)
    swapped = nn.sigma_block(ComplexSpectrum(Tensor(b), Tensor(a)), p)
    np.testing.assert_allclose(g.real.data, swapped.imag.data, atol=1e-14)
    np.testing.assert_allclose(nn.sigma_sequence(Tensor(a), p).data, g.real.data, atol=1e-14)


def test_batched_sigma_block_matches_unbatched():
    p = nn.make_sigma(2, 7)
    rng = np.random.default_rng(8)
    re, im = rng.standard_normal((3, 2, 4, 4)), rng.standard_normal((3, 2, 4, 4))
    out = nn.sigma_block(ComplexSpectrum(Tensor(re), Tensor(im)), p)
    for i in range(3):
        one = nn.sigma_block(ComplexSpectrum(Tensor(re[i]), Tensor(im[i])), p)
        np.testing.assert_allclose(out.real.data[i], one.real.data, atol=1e-13)


def test_init_params_range_and_reproducibility():
    a = nn.init_params((8, 4, 3, 3), 3)
    b = nn.init_params((8, 4, 3, 3), 3)
    assert a.data.tobytes() == b.data.tobytes()
    bound = np.sqrt(6 / 36)
    assert np.abs(a.data).max() < bound
    assert np.abs(a.data).max() > 0.5 * bound
    assert np.all(nn.make_conv(4, 8, 3, 0).bias.data == 0)


def test_layer_gradients():
    rng = np.random.default_rng(9)
    x = Tensor(rng.standard_normal((2, 3, 6, 6)), requires_grad=True)
    for p in (nn.make_conv(3, 2, 3, rng, dilation=2), nn.make_conv(3, 2, 1, rng), nn.make_dd(3, 2, 5, rng, 2)):
        fn = (lambda p=p: nn.conv2d(x, p)) if isinstance(p, Conv2dParams) else (lambda p=p: nn.dd_conv(x, p))
        w = Tensor(rng.standard_normal(fn().shape))
        rep = gradcheck(lambda: T.tsum(fn() * w), {"x": x, **dict(nn.named_parameters(p))})
        assert rep.passed, rep
    scale = Tensor(rng.uniform(0.5, 1.5, 3), requires_grad=True)
    shift = Tensor(rng.standard_normal(3), requires_grad=True)
    w = Tensor(rng.standard_normal((2, 3, 6, 6)))
    assert gradcheck(lambda: T.tsum(nn.instance_norm(x, scale, shift) * w), [x, scale, shift]).passed


def test_save_and_load_roundtrip(tmp_path):
    src = {"a": nn.make_dd(3, 2, 3, 0, 2), "b": nn.make_sigma(2, 1)}
    nn.save(src, tmp_path, meta={"note": "x"})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["params"]["a.depthwise"]["dilation"] == 2
    assert manifest["meta"] == {"note": "x"}
    dst = {"a": nn.make_dd(3, 2, 3, 9, 2), "b": nn.make_sigma(2, 9)}
    nn.load_into(dst, tmp_path)
    for (n1, t1), (n2, t2) in zip(nn.named_parameters(src), nn.named_parameters(dst)):
        assert n1 == n2
        np.testing.assert_array_equal(t1.data.astype(np.float32), t2.data)


def test_load_rejects_shape_mismatch(tmp_path):
    nn.save(nn.make_conv(3, 2, 3, 0), tmp_path)
    with pytest.raises(ValueError):
        nn.load_into(nn.make_conv(3, 4, 3, 0), tmp_path)
