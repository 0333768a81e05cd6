import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from atlasgan import tensor as T
from atlasgan.gradcheck import grad_check
from atlasgan.layers import (ConditionEmbedding, Conv, ResBlockSN, SpectralWeight, film_modulate,
                             param, spectral_normalize)
from atlasgan.tensor import ShapeError, Tensor


def _sw(W, seed=0):
    return SpectralWeight(param(W), np.random.default_rng(seed))


def _power_sigma(W, iters, seed=0):
    sw = _sw(W, seed)
    _, _, s = spectral_normalize(sw, iters=iters)
    return sw, s


def test_spectral_diag():
    sw, s = _power_sigma(np.diag([3.0, 1.0]), 50)
    assert 2.99 <= s <= 3.01
    Wn, _, _ = spectral_normalize(sw, update=False)
    _, s_n = _power_sigma(Wn.data, 50)
    assert 0.99 <= s_n <= 1.01
    assert abs(np.linalg.norm(sw._buffers["u"]) - 1) < 1e-6


@pytest.mark.parametrize("c", [2.5, -0.7])
def test_spectral_scaled_identity_one_step(c):
    _, s = _power_sigma(c * np.eye(4), 1)
    assert abs(s - abs(c)) < 1e-5


def test_spectral_zero_matrix_clamped_with_warning():
    sw = _sw(np.zeros((3, 3)))
    with pytest.warns(RuntimeWarning, match="clamped"):
        Wn, _, s = spectral_normalize(sw)
    assert sw.degenerate and s == pytest.approx(1e-12)
    assert np.all(np.isfinite(Wn.data))


SHAPES = [(8, 8), (32, 20), (64, 128), (128, 64), (128, 128)]


COLD_30_SQUARE = pytest.mark.xfail(
    strict=True, reason="cold-start 30-iteration estimate on a square 128x128 Gaussian reads 0.966")


@pytest.mark.parametrize("iters", [30, 100])
@pytest.mark.parametrize("shape", SHAPES)
def test_normalized_matrix_estimate_near_one(shape, iters, request):
    if iters == 30 and shape == (128, 128):
        request.applymarker(COLD_30_SQUARE)
    rng = np.random.default_rng(sum(shape))
    sw, _ = _power_sigma(rng.standard_normal(shape), iters, seed=1)
    Wn, _, _ = spectral_normalize(sw, update=False)
    _, s_n = _power_sigma(Wn.data, iters, seed=2)
    assert 0.98 <= s_n <= 1.02


# 100 iterations stand in for the burn-in a persistent u gets during training;
# from a cold start 30 iterations can be ~2% low on near-degenerate spectra.
@pytest.mark.parametrize("shape", SHAPES)
def test_sigma_estimate_vs_svd(shape):
    rng = np.random.default_rng(sum(shape))
    W = rng.standard_normal(shape)
    _, s = _power_sigma(W, 100, seed=1)
    exact = np.linalg.svd(W.astype(np.float32).astype(np.float64), compute_uv=False)[0]
    assert abs(s - exact) / exact < 0.01


def test_power_iteration_only_updates_in_training_with_grad():
    conv = Conv(2, 3, np.random.default_rng(0), sn=True)
    u0 = conv.sn._buffers["u"].copy()
    with T.no_grad():
        conv(Tensor(np.ones((1, 2, 4, 4))))
    np.testing.assert_array_equal(conv.sn._buffers["u"], u0)
    conv.eval()
    conv(Tensor(np.ones((1, 2, 4, 4))))
    np.testing.assert_array_equal(conv.sn._buffers["u"], u0)
    conv.train()
    conv(Tensor(np.ones((1, 2, 4, 4))))
    assert not np.array_equal(conv.sn._buffers["u"], u0)


def test_film_examples():
    h = Tensor(np.array([[[[1.0]], [[2.0]]]]))
    out = film_modulate(h, Tensor(np.ones((1, 2))), Tensor(np.zeros((1, 2))))
    np.testing.assert_array_equal(out.data, h.data)
    out = film_modulate(Tensor(np.random.default_rng(0).standard_normal((1, 2, 3, 3))),
                        Tensor(np.zeros((1, 2))), Tensor(np.full((1, 2), 5.0)))
    np.testing.assert_array_equal(out.data, 5.0)
    h = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]])[None, :, :, None])  # channels along axis 1
    out = film_modulate(h, Tensor(np.array([[2.0, -1.0]])), Tensor(np.array([[0.0, 1.0]])))
    np.testing.assert_array_equal(out.data[0, :, :, 0], [[2, 4], [-2, -3]])


def test_film_channel_mismatch():
    with pytest.raises(ShapeError):
        film_modulate(Tensor(np.ones((1, 3, 2, 2))), Tensor(np.ones((1, 2))), Tensor(np.ones((1, 2))))


@settings(max_examples=25, deadline=None)
@given(a=st.floats(-4, 4), b=st.floats(-4, 4), seed=st.integers(0, 10 ** 6))
def test_film_affine_property(a, b, seed):
    rng = np.random.default_rng(seed)
    h1, h2 = rng.standard_normal((2, 1, 3, 4, 4))
    g, be = Tensor(rng.standard_normal((1, 3))), Tensor(rng.standard_normal((1, 3)))
    lhs = film_modulate(Tensor(a * h1 + b * h2), g, be).data
    rhs = (a * film_modulate(Tensor(h1), g, be).data + b * film_modulate(Tensor(h2), g, be).data
           - (a + b - 1) * be.data.reshape(1, 3, 1, 1))
    np.testing.assert_allclose(lhs, rhs, atol=1e-4)


def test_condition_embedding_identity_at_init():
    emb = ConditionEmbedding(3, [4, 2, 1], np.random.default_rng(0))
    z = np.random.default_rng(1).random((5, 3))
    assert emb.embed(Tensor(z)).shape == (5, 64)
    for (g, b), c in zip(emb(Tensor(z)), [4, 2, 1]):
        assert g.shape == (5, c)
        np.testing.assert_array_equal(g.data, 1.0)
        np.testing.assert_array_equal(b.data, 0.0)


def test_condition_embedding_distinguishes_projection_rows():
    rng = np.random.default_rng(3)
    emb = ConditionEmbedding(3, [4], rng)
    e1 = rng.standard_normal((1, 64))
    e2 = e1.copy()
    e2[0, 63] += 1.0  # equal first 63 coordinates
    proj = emb.proj[0]
    for differs in (True, False):
        proj.weight.data = rng.standard_normal(proj.weight.shape).astype(np.float32)
        if not differs:
            proj.weight.data[63] = 0.0
        o1, o2 = proj(Tensor(e1)).data, proj(Tensor(e2)).data
        assert (not np.allclose(o1, o2)) == differs


def test_resblock_zero_weights_is_identity():
    blk = ResBlockSN(2, np.random.default_rng(0))
    for conv in (blk.conv1, blk.conv2):
        conv.weight.data[...] = 0.0
        conv.sn._W = conv.weight
    x = np.random.default_rng(1).standard_normal((1, 2, 4, 4)).astype(np.float32)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        np.testing.assert_array_equal(blk(Tensor(x)).data, x)


def test_resblock_delta_kernels_by_hand():
    blk = ResBlockSN(1, np.random.default_rng(0)).eval()
    delta = np.zeros((1, 1, 3, 3), dtype=np.float32)
    delta[0, 0, 1, 1] = 0.5
    for conv in (blk.conv1, blk.conv2):
        conv.weight.data = delta.copy()
        conv.sn._W = conv.weight
        conv.sn._buffers["u"] = np.ones(1, dtype=np.float32)
    x = np.array([[1.0, -2.0, 3.0, -4.0]] * 4, dtype=np.float32)[None, None]
    # sigma of a single-entry 1x9 kernel is 0.5, so each conv is the identity
    lrelu = np.where(x > 0, x, 0.2 * x)
    expected = x + np.where(lrelu > 0, lrelu, 0.2 * lrelu)
    np.testing.assert_allclose(blk(Tensor(x)).data, expected, rtol=1e-6)


def test_resblock_gradcheck_and_channel_check():
    blk = ResBlockSN(2, np.random.default_rng(0)).eval()
    assert grad_check(lambda t: T.sum_(T.square(blk(t))), np.random.default_rng(1).standard_normal((1, 2, 5, 5)),
                      eps=1e-5) < 1e-3
    with pytest.raises(ShapeError):
        blk(Tensor(np.ones((1, 3, 4, 4))))


def test_parameter_listing_has_no_duplicates():
    conv = Conv(2, 2, np.random.default_rng(0), sn=True)
    names = [n for n, _ in conv.named_parameters()]
    assert names == ["weight", "bias"]
    assert [n for n, _ in conv.named_buffers()] == ["sn.u"]
