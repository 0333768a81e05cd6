import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy import ndimage

from atlasgan import geometry as G
from atlasgan import metrics as M
from atlasgan.objectives import DeformationHistory
from atlasgan.tensor import Tensor


# -- EFC ----------------------------------------------------------------------------

def test_efc_constant_and_delta():
    mask = np.ones((16, 16), bool)
    assert M.efc(np.full((16, 16), 3.0), mask) == pytest.approx(1.0, abs=1e-6)
    delta = np.zeros((16, 16))
    delta[4, 5] = 2.0
    assert M.efc(delta, mask) < 1e-3


def test_efc_rejects_empty_or_zero():
    with pytest.raises(ValueError):
        M.efc(np.ones((4, 4)), np.zeros((4, 4), bool))
    with pytest.raises(ValueError):
        M.efc(np.zeros((4, 4)), np.ones((4, 4), bool))


def test_efc_blur_increases_on_sharp_images():
    rng = np.random.default_rng(0)
    mask = np.zeros((32, 32), bool)
    mask[4:28, 4:28] = True
    for _ in range(20):
        img = (rng.random((32, 32)) > 0.7).astype(float) * rng.uniform(0.5, 2.0)
        assert M.efc(ndimage.gaussian_filter(img, 1.0), mask) > M.efc(img, mask)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 20), scale=st.floats(1e-3, 1e3))
def test_efc_scale_invariant(seed, scale):
    img = np.random.default_rng(seed).random((10, 10)) + 0.01
    mask = np.ones((10, 10), bool)
    assert M.efc(img * scale, mask) == pytest.approx(M.efc(img, mask), rel=1e-9)


# -- Dice ---------------------------------------------------------------------------

def test_dice_examples():
    a = np.zeros((4, 4), int)
    b = np.zeros((4, 4), int)
    a[0, :4] = 1
    b[0, 1:4] = 1
    b[1, 0:2] = 1
    per, mean = M.dice(a, b)
    assert per[1] == pytest.approx(2 * 3 / 9) and mean == pytest.approx(0.6667, abs=1e-4)
    assert M.dice(a, a)[0] == {1: 1.0}
    c = np.zeros((4, 4), int)
    c[3, 3] = 1
    assert M.dice(a, c)[1] == 0.0


def test_dice_skips_absent_labels_and_checks_vocabulary():
    a = np.array([[0, 1], [2, 2]])
    per, _ = M.dice(a, a, labels=(0, 1, 2, 3))
    assert set(per) == {1, 2}
    with pytest.raises(ValueError, match="vocabulary"):
        M.dice(a, a, labels=(0, 1))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 20))
def test_dice_symmetric_and_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, 3, (2, 6, 6))
    assert M.dice(a, b)[0] == M.dice(b, a)[0]
    perm = rng.permutation(36)
    pa, pb = a.reshape(-1)[perm].reshape(6, 6), b.reshape(-1)[perm].reshape(6, 6)
    assert M.dice(pa, pb)[0] == M.dice(a, b)[0]


# -- Jacobian and norms ---------------------------------------------------------------

def test_jacobian_examples():
    assert M.jacobian_stats(np.zeros((2, 10, 10))) == (1.0, 0.0)
    mj, ff = M.jacobian_stats(0.1 * G.identity_grid(10, 10))
    assert mj == pytest.approx(1.21) and ff == 0.0


def test_jacobian_product_rule_on_composition():
    v = G.random_velocity((48, 48), sigma=6.0, max_mag=0.5, rng=np.random.default_rng(1))[None]
    u = G.integrate_svf(Tensor(v)).data
    uu = G.compose(Tensor(u), Tensor(u)).data
    inner = (slice(4, -4), slice(4, -4))
    dj = G.jacobian_determinant(u[0])[inner]
    djj = G.jacobian_determinant(uu[0])[inner]
    assert np.max(np.abs(djj / dj ** 2 - 1)) < 0.05


def test_random_svf_fields_are_near_identity_volume():
    for seed in range(5):
        v = G.random_velocity((32, 32), sigma=4.0, max_mag=3.0, rng=np.random.default_rng(seed))[None]
        mj, ff = M.jacobian_stats(G.integrate_svf(Tensor(v)).data[0])
        assert abs(mj - 1) < 0.1 and ff < 0.005


def test_deformation_norm_examples():
    assert M.deformation_norm(np.zeros((2, 5, 5))) == 0.0
    u = np.zeros((2, 6, 7))
    u[0], u[1] = 3.0, 4.0
    assert M.deformation_norm(u) == pytest.approx(5 * np.sqrt(42))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2 ** 20))
def test_deformation_norm_triangle_inequality(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 2, 5, 5))
    assert M.deformation_norm(a + b) <= M.deformation_norm(a) + M.deformation_norm(b) + 1e-12


def test_moving_def_norm():
    h = DeformationHistory()
    c = np.ones((1, 2, 4, 5))
    for s in (1, -1, 1, -1):
        h.accumulate(s * c)
    assert M.moving_def_norm(h) == 0.0
    h = DeformationHistory()
    const = np.zeros((1, 2, 4, 5))
    const[:, 0], const[:, 1] = 0.6, 0.8
    for _ in range(3):
        h.accumulate(const)
    assert M.moving_def_norm(h) == pytest.approx(np.sqrt(20))
    with pytest.raises(ValueError):
        M.moving_def_norm(DeformationHistory())


# -- segmentation and trends ------------------------------------------------------------

def test_majority_vote_and_ties():
    maps = np.array([[[1, 2]], [[1, 3]], [[2, 2]]])
    np.testing.assert_array_equal(M.majority_vote(maps), [[1, 2]])
    np.testing.assert_array_equal(M.majority_vote(np.array([[[3]], [[1]]])), [[1]])
    with pytest.raises(ValueError):
        M.majority_vote(np.zeros((0, 2, 2)))


class _ZeroNet:
    """Registration stand-in with zero velocity."""

    def velocity(self, t, f):
        return Tensor(np.zeros((t.shape[0], 2, t.shape[2] // 2, t.shape[3] // 2)))

    def inverse_displacement(self, v, full_shape):
        return G.upscale_flow(G.integrate_svf(v), full_shape)


def test_template_segmentation_single_image_zero_deformation():
    lab = np.random.default_rng(2).integers(0, 3, (1, 8, 8))
    seg = M.template_segmentation(np.zeros((8, 8)), np.zeros((1, 8, 8)), lab, _ZeroNet())
    np.testing.assert_array_equal(seg, lab[0])
    with pytest.raises(ValueError):
        M.template_segmentation(np.zeros((8, 8)), np.zeros((0, 8, 8)), lab[:0], _ZeroNet())


def test_volume_trend_rows_and_slope(tmp_path):
    seg = np.zeros((6, 6), int)
    seg[1:3, 1:4] = 1
    rows = M.volume_trend([(a, "A") for a in (1, 2, 3)], [seg] * 3, path=tmp_path / "trend.csv")
    assert rows == [(1, "A", 6, 0), (2, "A", 6, 0), (3, "A", 6, 0)]
    assert (tmp_path / "trend.csv").read_text().splitlines()[0] == "age,cohort,label_1,label_2"
    assert M.fit_slope([0, 1, 2], [1, 3, 5]) == pytest.approx(2.0)


def test_eval_report_csv_header(tmp_path):
    rep = M.EvalReport([M.EvalRow(2.0, "A", 0.9, 0.8, 1.0, 0.0, 3.5)])
    rep.write_csv(tmp_path / "e.csv")
    lines = (tmp_path / "e.csv").read_text().splitlines()
    assert lines[0] == "condition_age,condition_cohort,dice_mean,efc,mean_jac,fold_frac,def_norm"
    assert lines[1] == "2,A,0.9,0.8,1,0,3.5"
