import os
import subprocess
import sys

import numpy as np
import pytest

from atlasgan import _kernels as K


def _case(seed, dtype=np.float64):
    rng = np.random.default_rng(seed)
    img = rng.standard_normal((2, 3, 9, 11)).astype(dtype)
    cy = rng.uniform(-2, 11, (2, 7, 8)).astype(dtype)
    cx = rng.uniform(-2, 13, (2, 7, 8)).astype(dtype)
    g = rng.standard_normal((2, 3, 7, 8)).astype(dtype)
    return g, img, cy, cx


@pytest.mark.skipif(not K.HAVE_NUMBA, reason="numba backend disabled")
@pytest.mark.parametrize("seed", range(5))
def test_numba_matches_numpy(seed):
    g, img, cy, cx = _case(seed)
    np.testing.assert_allclose(K.bilinear_sample(img, cy, cx), K.bilinear_sample_np(img, cy, cx), atol=1e-12)
    for a, b in zip(K.bilinear_sample_backward(g, img, cy, cx), K.bilinear_sample_backward_np(g, img, cy, cx)):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_integer_coordinates_reproduce_pixels():
    _, img, _, _ = _case(0)
    iy, ix = np.meshgrid(np.arange(9.0), np.arange(11.0), indexing="ij")
    cy, cx = np.broadcast_to(iy, (2, 9, 11)), np.broadcast_to(ix, (2, 9, 11))
    np.testing.assert_array_equal(K.bilinear_sample(img, cy, cx), img)
    np.testing.assert_array_equal(K.bilinear_sample_np(img, cy, cx), img)


def test_environment_switch_selects_numpy():
    env = dict(os.environ, ATLASGAN_DISABLE_NUMBA="1")
    out = subprocess.run([sys.executable, "-c", "from atlasgan import _kernels; print(_kernels.backend())"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"
