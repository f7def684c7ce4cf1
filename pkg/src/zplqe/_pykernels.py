"""NumPy implementations of the photon time-tag kernels.

Used when the compiled ``_ckernels`` extension is unavailable or disabled
with ``ZPLQE_PURE_PYTHON=1``. Results are bit-identical to the compiled path.
"""
import numpy as np

# Cap on the number of (i, j) pairs materialised per chunk.
_PAIR_BUDGET = 4_000_000


def deadtime_mask(times, dead):
    """Non-paralyzable dead-time filter over sorted integer timestamps."""
    times = np.ascontiguousarray(times, dtype=np.int64)
    keep = np.ones(times.size, dtype=bool)
    if times.size == 0 or dead <= 0:
        return keep
    # Only events closer than ``dead`` to their predecessor can be dropped;
    # everything else is kept regardless of history.
    candidates = np.flatnonzero(np.diff(times) < dead) + 1
    last = None
    prev_candidate = -2
    for i in candidates:
        if i - 1 != prev_candidate:
            last = times[i - 1]
        if times[i] - last < dead:
            keep[i] = False
        else:
            last = times[i]
        prev_candidate = i
    return keep


def cross_correlate(t1, t2, lo, width, nbins):
    """Histogram of t2[j] - t1[i] over bins [lo + k*width, lo + (k+1)*width)."""
    t1 = np.ascontiguousarray(t1, dtype=np.int64)
    t2 = np.ascontiguousarray(t2, dtype=np.int64)
    hist = np.zeros(nbins, dtype=np.int64)
    if t1.size == 0 or t2.size == 0:
        return hist
    hi = lo + width * nbins
    start = np.searchsorted(t2, t1 + lo, side="left")
    stop = np.searchsorted(t2, t1 + hi, side="left")
    counts = stop - start
    cum = np.cumsum(counts)
    i0 = 0
    while i0 < t1.size:
        base = cum[i0 - 1] if i0 > 0 else 0
        i1 = int(np.searchsorted(cum, base + _PAIR_BUDGET, side="right"))
        i1 = min(max(i1, i0 + 1), t1.size)
        c = counts[i0:i1]
        total = int(c.sum())
        if total:
            owner = np.repeat(np.arange(i0, i1), c)
            offsets = np.arange(total) - np.repeat(np.cumsum(c) - c, c)
            j = start[owner] + offsets
            d = t2[j] - t1[owner]
            hist += np.bincount((d - lo) // width, minlength=nbins)[:nbins]
        i0 = i1
    return hist
