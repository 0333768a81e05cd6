import numpy as np
import pytest
from scipy import ndimage

from atlasgan import geometry as G
from atlasgan import tensor as T
from atlasgan.gradcheck import grad_check
from atlasgan.tensor import ShapeError, Tensor


def euler_flow(v, steps=256):
    """Forward-Euler integration of dx/dt = v(x) over unit time (scipy sampling)."""
    v = np.asarray(v, dtype=np.float64)
    H, W = v.shape[-2:]
    y, x = np.meshgrid(np.arange(H, dtype=float), np.arange(W, dtype=float), indexing="ij")
    y0, x0 = y.copy(), x.copy()
    for _ in range(steps):
        coords = [np.clip(y, 0, H - 1), np.clip(x, 0, W - 1)]
        vy = ndimage.map_coordinates(v[0], coords, order=1, mode="nearest")
        vx = ndimage.map_coordinates(v[1], coords, order=1, mode="nearest")
        y, x = y + vy / steps, x + vx / steps
    return np.stack([y - y0, x - x0])


def test_zero_velocity_is_identity():
    u = G.integrate_svf(Tensor(np.zeros((1, 2, 8, 8))))
    np.testing.assert_array_equal(u.data, 0.0)


def test_integrate_rejects_bad_input():
    with pytest.raises(ValueError, match="non-finite"):
        G.integrate_svf(Tensor(np.full((1, 2, 4, 4), np.nan)))
    with pytest.raises(ValueError, match="steps"):
        G.integrate_svf(Tensor(np.zeros((1, 2, 4, 4))), steps=0)


# Smoothing width for the Euler comparison is fixed at 5 px; see the notes on
# the sigma dependence of the scaling-and-squaring discretisation error.
@pytest.mark.parametrize("seed", range(4))
def test_scaling_squaring_matches_fine_euler(seed):
    v = G.random_velocity((32, 32), sigma=5.0, max_mag=4.0, rng=np.random.default_rng(seed))
    u = G.integrate_svf(Tensor(v[None]), 5).data[0]
    ref = euler_flow(v)
    err = np.abs(u - ref)[:, 2:-2, 2:-2].max()
    assert err < 0.05


def test_semigroup_property():
    v = G.random_velocity((32, 32), sigma=4.0, max_mag=3.0, rng=np.random.default_rng(7))[None]
    whole = G.integrate_svf(Tensor(v)).data
    half = G.integrate_svf(Tensor(v / 2))
    err = np.abs(whole - G.compose(half, half).data)[..., 2:-2, 2:-2].max()
    assert err < 0.05


def test_compose_identity_and_translations():
    u = Tensor(np.random.default_rng(0).standard_normal((1, 2, 6, 6)))
    zero = Tensor(np.zeros((1, 2, 6, 6)))
    np.testing.assert_allclose(G.compose(u, zero).data, u.data)
    np.testing.assert_allclose(G.compose(zero, u).data, u.data)
    a = np.zeros((1, 2, 10, 10))
    a[:, 0] = 1.0
    b = np.zeros((1, 2, 10, 10))
    b[:, 1] = 2.0
    c = G.compose(Tensor(a), Tensor(b)).data[..., 2:-3, 2:-3]
    np.testing.assert_allclose(c[:, 0], 1.0)
    np.testing.assert_allclose(c[:, 1], 2.0)
    with pytest.raises(ShapeError):
        G.compose(Tensor(a), Tensor(np.zeros((1, 2, 8, 8))))


def test_inverse_consistency_of_svf():
    v = G.random_velocity((64, 64), sigma=4.0, max_mag=4.0, rng=np.random.default_rng(3))[None]
    fwd = G.integrate_svf(Tensor(v))
    inv = G.integrate_svf(Tensor(-v))
    assert np.abs(G.compose(fwd, inv).data)[..., 4:-4, 4:-4].max() < 0.1


def test_warp_zero_and_ramp_shift():
    img = np.random.default_rng(0).standard_normal((1, 3, 5, 6)).astype(np.float32)
    np.testing.assert_array_equal(G.warp(Tensor(img), Tensor(np.zeros((1, 2, 5, 6)))).data, img)
    ramp = np.tile(np.arange(8.0), (8, 1))[None, None]  # I(row, col) = col
    u = np.zeros((1, 2, 8, 8))
    u[:, 1] = 1.0
    out = G.warp(Tensor(ramp), Tensor(u)).data[0, 0]
    np.testing.assert_allclose(out[:, :-1], ramp[0, 0, :, :-1] + 1, atol=1e-6)


def test_warp_gradcheck_away_from_kinks():
    rng = np.random.default_rng(1)
    img = ndimage.gaussian_filter(rng.standard_normal((1, 1, 10, 10)), (0, 0, 1.5, 1.5))
    u = rng.uniform(0.1, 0.9, size=(1, 2, 10, 10)) * rng.choice([-1, 1], size=(1, 2, 10, 10))
    w = Tensor(rng.standard_normal((1, 1, 10, 10)))
    assert grad_check(lambda t: T.sum_(T.mul(G.warp(Tensor(img), t), w)), u, eps=1e-6) < 1e-3


def test_upscale_flow():
    np.testing.assert_array_equal(G.upscale_flow(Tensor(np.zeros((1, 2, 4, 4)))).data, 0.0)
    full = G.upscale_flow(Tensor(np.ones((1, 2, 8, 8))), (16, 16)).data
    assert full.shape == (1, 2, 16, 16)
    np.testing.assert_allclose(full, 2.0)
    with pytest.raises(ValueError, match="half"):
        G.upscale_flow(Tensor(np.ones((1, 2, 16, 16))), (16, 16))


def test_upscaled_gradient_pattern_follows_half_resolution():
    v = G.random_velocity((16, 16), sigma=2.0, max_mag=2.0, rng=np.random.default_rng(4))[None]
    full = G.upscale_flow(Tensor(v)).data
    gh = np.hypot(*np.gradient(v[0, 0]))
    gf = np.hypot(*np.gradient(full[0, 0]))
    gh_up = T.upsample2x(Tensor(gh[None, None])).data[0, 0]
    # full-resolution gradients are half-resolution gradients (per half pixel) interpolated
    assert np.corrcoef(gf[2:-2, 2:-2].ravel(), gh_up[2:-2, 2:-2].ravel())[0, 1] > 0.95


def test_jacobian_of_uniform_scaling():
    g = G.identity_grid(12, 12)
    det = G.jacobian_determinant(0.1 * g)
    np.testing.assert_allclose(det, 1.21, rtol=1e-12)


def test_warp_labels_nearest():
    lab = np.arange(16).reshape(1, 4, 4)
    u = np.zeros((1, 2, 4, 4))
    u[:, 1] = 1.4
    out = G.warp_labels(lab, u)
    np.testing.assert_array_equal(out[0, :, :3], lab[0, :, 1:])
