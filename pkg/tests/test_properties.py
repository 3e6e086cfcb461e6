"""Property-based checks of invariants that must hold for any input."""
import numpy as np
from hypothesis import assume, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from dfnlab.linalg import reconstruct, svd
from dfnlab.metrics import cka, gram_linear, hsic, mmd_rbf
from dfnlab.model import mask_support
from dfnlab.synthbench import miou

finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)


def matrices(min_rows=4, max_rows=12, max_cols=6):
    return st.tuples(st.integers(min_rows, max_rows), st.integers(1, max_cols)).flatmap(
        lambda s: arrays(np.float64, s, elements=finite))


def _spread(x):
    xc = x - x.mean(axis=0)
    return np.linalg.norm(xc) > 1e-3 * (1 + np.linalg.norm(x))


@settings(max_examples=60, deadline=None)
@given(matrices(), st.integers(0, 2 ** 31 - 1))
def test_cka_bounded_and_invariant(x, seed):
    assume(_spread(x))
    rng = np.random.default_rng(seed)
    y = x @ rng.standard_normal((x.shape[1], 3)) + rng.standard_normal((x.shape[0], 3))
    v = cka(x, y)
    assert 0.0 <= v <= 1.0
    q, _ = np.linalg.qr(rng.standard_normal((3, 3)))
    assert abs(cka(x, 3.0 * y @ q) - v) < 1e-9


@settings(max_examples=60, deadline=None)
@given(matrices(), matrices())
def test_hsic_symmetric_nonnegative_self(a, b):
    n = min(a.shape[0], b.shape[0])
    k, l = gram_linear(a[:n]), gram_linear(b[:n])
    assert np.isclose(hsic(k, l), hsic(l, k), rtol=1e-12, atol=1e-9)
    assert hsic(k, k) >= -1e-9


@settings(max_examples=60, deadline=None)
@given(matrices(min_rows=1, max_rows=10, max_cols=10))
def test_svd_reconstructs(a):
    f = svd(a)
    scale = max(np.linalg.norm(a), 1.0)
    assert np.linalg.norm(reconstruct(f.U, f.S, f.Vt) - a) <= 1e-10 * scale
    assert np.all(np.diff(f.S) <= 1e-12 * scale)


@settings(max_examples=40, deadline=None)
@given(arrays(np.float64, (2, 8, 8), elements=st.floats(0.01, 5)), arrays(np.bool_, (8, 8)), arrays(np.bool_, (8, 8)))
def test_masking_is_monotone(feats, m1, m2):
    # a superset mask never removes feature energy
    small = m1 & m2
    big = m1 | m2
    e_small = np.abs(mask_support(feats, small.astype(float)).data).sum()
    e_big = np.abs(mask_support(feats, big.astype(float)).data).sum()
    assert e_small <= e_big + 1e-12


@settings(max_examples=60, deadline=None)
@given(arrays(np.bool_, (6, 6)), arrays(np.bool_, (6, 6)))
def test_miou_bounds_and_symmetry(p, t):
    v = miou(p, t)
    assert 0.0 <= v <= 1.0
    assert v == miou(t, p)
    assert miou(p, p) == 1.0


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2 ** 31 - 1))
def test_mmd_null_calibration(seed):
    # two samples from one distribution: the unbiased estimate hovers around zero
    rng = np.random.default_rng(seed)
    x, y = rng.standard_normal((40, 2)), rng.standard_normal((40, 2))
    assert abs(mmd_rbf(x, y)) < 0.1
    assert mmd_rbf(x, y, unbiased=False) >= 0.0
