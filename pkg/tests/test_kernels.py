import os
import subprocess
import sys

import numpy as np
import pytest

from graspvoc import _kernels

needs_numba = pytest.mark.skipif(_kernels.numba_impl is None, reason="numba not installed")


@needs_numba
def test_nearest_backends_bit_identical():
    rng = np.random.default_rng(0)
    for n, m in ((1, 5), (50, 200), (3000, 700)):
        pts = rng.normal(size=(n, 3))
        q = rng.normal(size=(m, 3))
        # plant exact duplicates to exercise the tie rule
        pts[-1] = pts[0]
        a = _kernels.numpy_impl.nearest(q, pts)
        b = _kernels.numba_impl.nearest(q, pts)
        assert np.array_equal(a[0], b[0])
        assert np.array_equal(a[1], b[1])


@needs_numba
@pytest.mark.parametrize("radius", [0, 1, 2, 4])
def test_raster_backends_bit_identical(radius):
    rng = np.random.default_rng(radius)
    w, h = 40, 30
    n = 2000
    cols = rng.integers(0, w, n)
    rows = rng.integers(0, h, n)
    depth = rng.normal(size=n)
    va, pa = _kernels.numpy_impl.raster(cols, rows, depth, w, h, radius, 0.6, 0.0)
    vb, pb = _kernels.numba_impl.raster(cols, rows, depth, w, h, radius, 0.6, 0.0)
    assert np.array_equal(va, vb)
    assert np.array_equal(pa, pb)


def test_disk_offsets():
    assert _kernels._disk_offsets(0).tolist() == [[0, 0]]
    assert len(_kernels._disk_offsets(1)) == 5
    assert len(_kernels._disk_offsets(2)) == 13


def test_raster_single_pixel_front_quantile(backend):
    cols = np.zeros(5, dtype=np.int64)
    rows = np.zeros(5, dtype=np.int64)
    depth = np.array([0.0, 1.0, 2.0, 3.0, 4.0])
    vis, pmin = _kernels.raster(cols, rows, depth, 16, 16, 2, 0.5)
    assert vis.tolist() == [True, True, True, False, False]
    assert pmin[0] == 0.0
    assert np.isinf(pmin[1:]).all()


@pytest.mark.parametrize("flag,expected", [("1", "numpy"), ("true", "numpy"), ("0", None), ("", None)])
def test_environment_flag_selects_backend(flag, expected):
    env = dict(os.environ, GRASPVOC_NO_NUMBA=flag)
    out = subprocess.run(
        [sys.executable, "-c", "from graspvoc import _kernels; print(_kernels.active.name)"],
        env=env, capture_output=True, text=True, check=True,
    ).stdout.strip()
    if expected is None:
        expected = "numba" if _kernels.numba_impl is not None else "numpy"
    assert out == expected
