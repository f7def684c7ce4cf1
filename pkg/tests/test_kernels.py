import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from zplqe import _pykernels, kernels

try:
    from zplqe import _ckernels
except ImportError:  # extension not built
    _ckernels = None

BACKENDS = [pytest.param(_pykernels, id="python")]
if _ckernels is not None:
    BACKENDS.append(pytest.param(_ckernels, id="cython"))


def _reference_mask(times, dead):
    keep = np.ones(len(times), dtype=bool)
    last = None
    for i, t in enumerate(times):
        if last is not None and t - last < dead:
            keep[i] = False
        else:
            last = t
    return keep


def _reference_hist(t1, t2, lo, width, nbins):
    hist = np.zeros(nbins, dtype=np.int64)
    for a in t1:
        for b in t2:
            k = (b - a - lo) // width
            if 0 <= k < nbins:
                hist[k] += 1
    return hist


sorted_times = st.lists(st.integers(0, 10_000), max_size=60, unique=True).map(
    lambda xs: np.array(sorted(xs), dtype=np.int64))


@pytest.mark.parametrize("impl", BACKENDS)
@settings(max_examples=200, deadline=None)
@given(times=sorted_times, dead=st.integers(0, 500))
def test_deadtime_mask_matches_reference(impl, times, dead):
    np.testing.assert_array_equal(impl.deadtime_mask(times, dead), _reference_mask(times, dead))


@pytest.mark.parametrize("impl", BACKENDS)
@settings(max_examples=100, deadline=None)
@given(t1=sorted_times, t2=sorted_times, lo=st.integers(-600, 100), width=st.integers(1, 50),
       nbins=st.integers(1, 30))
def test_cross_correlate_matches_reference(impl, t1, t2, lo, width, nbins):
    np.testing.assert_array_equal(impl.cross_correlate(t1, t2, lo, width, nbins),
                                  _reference_hist(t1, t2, lo, width, nbins))


def test_deadtime_chain_of_close_events():
    t = np.array([0, 10, 20, 30, 60, 65], dtype=np.int64)
    np.testing.assert_array_equal(kernels.deadtime_mask(t, 25), [1, 0, 0, 1, 1, 0])


@pytest.mark.skipif(_ckernels is None, reason="compiled kernels not built")
def test_backends_agree_on_large_input():
    rng = np.random.default_rng(0)
    t1 = np.unique(rng.integers(0, 10**9, 200_000))
    t2 = np.unique(rng.integers(0, 10**9, 200_000))
    np.testing.assert_array_equal(_ckernels.deadtime_mask(t1, 5000), _pykernels.deadtime_mask(t1, 5000))
    np.testing.assert_array_equal(_ckernels.cross_correlate(t1, t2, -50_000, 1000, 101),
                                  _pykernels.cross_correlate(t1, t2, -50_000, 1000, 101))


def test_backend_reported():
    assert kernels.BACKEND in ("cython", "python")
