"""Both kernel back ends agree bit for bit and match independent oracles."""
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy import ndimage

from facadeseg import kernels

BACKENDS = kernels.backends()
needs_both = pytest.mark.skipif(len(BACKENDS) < 2, reason="compiled kernels not built")


def test_default_backend_is_reported():
    assert kernels.BACKEND in BACKENDS


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_im2col_col2im_backends_identical(rng, dtype):
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    xp = rng.standard_normal((2, 3, 9, 12)).astype(dtype)
    a = py.im2col(xp, 3, 5, 7, 8)
    b = cy.im2col(xp, 3, 5, 7, 8)
    assert a.dtype == b.dtype and np.array_equal(a, b)
    cols = rng.standard_normal((2, 3, 3, 5, 7, 8)).astype(dtype)
    assert np.array_equal(py.col2im(cols, 9, 12), cy.col2im(cols, 9, 12))


@needs_both
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_pool_unpool_backends_identical(rng, dtype):
    py, cy = BACKENDS["python"], BACKENDS["cython"]
    x = rng.integers(0, 3, size=(2, 4, 8, 10)).astype(dtype)  # many ties
    pa, ia = py.maxpool2x2(x)
    pb, ib = cy.maxpool2x2(x)
    assert np.array_equal(pa, pb) and np.array_equal(ia, ib)
    assert np.array_equal(py.unpool2x2(pa, ia, 8, 10), cy.unpool2x2(pb, ib, 8, 10))


@needs_both
@given(st.integers(0, 2**31 - 1), st.integers(1, 20), st.integers(1, 20), st.floats(0.1, 0.9))
def test_label_components_backends_identical(seed, h, w, density):
    img = np.random.default_rng(seed).random((h, w)) < density
    la, na = BACKENDS["python"].label_components(img)
    lb, nb = BACKENDS["cython"].label_components(img)
    assert na == nb and np.array_equal(la, lb)


@needs_both
@given(st.integers(0, 2**31 - 1), st.integers(3, 8))
def test_fill_polygon_backends_identical(seed, m):
    r = np.random.default_rng(seed)
    xs, ys = r.uniform(-5, 25, m), r.uniform(-5, 25, m)
    a = BACKENDS["python"].fill_polygon(xs, ys, 20, 20)
    b = BACKENDS["cython"].fill_polygon(xs, ys, 20, 20)
    assert np.array_equal(a, b)


@given(st.integers(0, 2**31 - 1), st.integers(1, 16), st.integers(1, 16))
def test_label_components_matches_scipy(seed, h, w):
    img = np.random.default_rng(seed).random((h, w)) < 0.45
    labels, n = kernels.label_components(img)
    ref, nref = ndimage.label(img, structure=np.ones((3, 3)))
    assert n == nref
    # same partition: a bijection between label ids
    pairs = set(zip(labels[img].tolist(), ref[img].tolist()))
    assert len(pairs) == n
    assert (labels[~img] == 0).all()


def test_label_components_raster_order():
    img = np.array([[0, 0, 1], [1, 0, 0], [1, 0, 1]], dtype=bool)
    labels, n = kernels.label_components(img)
    assert n == 3
    assert labels[0, 2] == 1 and labels[1, 0] == 2 and labels[2, 2] == 3


def _crossing_oracle(xs, ys, px, py):
    inside = False
    m = len(xs)
    for k in range(m):
        x0, y0, x1, y1 = xs[k], ys[k], xs[(k + 1) % m], ys[(k + 1) % m]
        if (y0 <= py) != (y1 <= py):
            xc = x0 + (py - y0) * (x1 - x0) / (y1 - y0)
            if xc > px:
                inside = not inside
    return inside


@given(st.integers(0, 2**31 - 1), st.integers(3, 7))
def test_fill_polygon_matches_crossing_oracle(seed, m):
    r = np.random.default_rng(seed)
    xs, ys = r.uniform(-3, 15, m), r.uniform(-3, 15, m)
    got = kernels.fill_polygon(xs, ys, 12, 12)
    for row in range(12):
        for col in range(12):
            assert got[row, col] == _crossing_oracle(xs, ys, col + 0.5, row + 0.5)


def test_fill_polygon_rectangle():
    got = kernels.fill_polygon([1, 4, 4, 1], [2, 2, 5, 5], 8, 8)
    want = np.zeros((8, 8), dtype=np.uint8)
    want[2:5, 1:4] = 1
    assert np.array_equal(got, want)


def test_pure_python_fallback_selectable():
    import subprocess
    import sys

    code = "import facadeseg.kernels as k; print(k.BACKEND)"
    env = {**__import__("os").environ, "FACADESEG_PURE_PYTHON": "1"}
    out = subprocess.run([sys.executable, "-c", code], env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
