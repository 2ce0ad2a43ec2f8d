"""Bimodal histogram modeling: two-component Gaussian EM on HU histograms,
threshold derivation, and noise-adaptive soft/bone voxel classification."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

SIGMA_FLOOR_HU = 0.5  # lower bound keeps EM finite on degenerate (spike) inputs


class UnimodalHistogramError(ValueError):
    """Histogram shows fewer than two modes; region is degenerate."""


@dataclass(frozen=True)
class Histogram:
    """Counts over 1-HU bins; bin b holds values in [min_hu + b, min_hu + b + 1)."""

    counts: np.ndarray
    min_hu: int

    @property
    def centers(self):
        return self.min_hu + np.arange(len(self.counts), dtype=np.float64) + 0.5

    @property
    def total(self):
        return int(self.counts.sum())


@dataclass(frozen=True)
class GaussianPair:
    """Fitted soft-tissue and bone components plus derived thresholds."""

    mean1: float
    sigma1: float
    weight1: float
    mean2: float
    sigma2: float
    weight2: float

    def __post_init__(self):
        if not (self.mean1 < self.mean2):
            raise ValueError("component means must be ordered mean1 < mean2")
        if self.sigma1 <= 0 or self.sigma2 <= 0 or self.weight1 <= 0 or self.weight2 <= 0:
            raise ValueError("sigmas and weights must be > 0")

    @property
    def noise_sigma(self) -> float:
        # soft-tissue component width doubles as the image noise estimate
        return self.sigma1

    @property
    def low(self) -> float:
        return derive_thresholds(self)[0]

    @property
    def high(self) -> float:
        return derive_thresholds(self)[1]


def build_histogram(volume, region) -> Histogram:
    """1-HU-bin histogram of voxels whose centers lie inside the region."""
    lo_idx, hi_idx = region.index_bounds(volume)
    if (hi_idx <= lo_idx).any():
        raise ValueError("empty region")
    ii, jj, kk = np.meshgrid(*(np.arange(lo_idx[a], hi_idx[a]) for a in range(3)),
                             indexing="ij")
    pts = np.stack([ii, jj, kk], axis=-1).reshape(-1, 3)
    world = np.asarray(volume.origin) + pts * np.asarray(volume.spacing)
    inside = region.contains_points(world)
    if not inside.any():
        raise ValueError("empty region")
    sel = pts[inside]
    vals = volume.values[sel[:, 0], sel[:, 1], sel[:, 2]].astype(np.int64)
    lo, hi = int(vals.min()), int(vals.max())
    counts = np.bincount(vals - lo, minlength=hi - lo + 1)
    return Histogram(counts, lo)


def _smoothed_peaks(counts):
    """Local maxima of the 5-bin box-smoothed histogram, sorted by position."""
    sm = ndimage.uniform_filter1d(counts.astype(np.float64), size=5, mode="nearest")
    n = len(sm)
    idx = []
    i = 0
    while i < n:
        left = sm[i - 1] if i > 0 else -np.inf
        if sm[i] > left:
            # plateau-tolerant: scan forward over equal values; the array
            # ends count as falling edges so boundary modes are kept
            j = i
            while j + 1 < n and sm[j + 1] == sm[i]:
                j += 1
            right = sm[j + 1] if j + 1 < n else -np.inf
            if right < sm[i]:
                idx.append((i + j) // 2)
            i = j + 1
        else:
            i += 1
    return sm, idx


def fit_bimodal(hist: Histogram, tol_per_sample: float = 1e-6,
                max_iter: int = 500) -> GaussianPair:
    """Two-component 1-D Gaussian mixture fitted to binned data by EM.

    Initialized from the lowest and highest significant smoothed peaks (the
    soft-tissue and bone modes). Raises UnimodalHistogramError when the
    smoothed histogram has fewer than two local maxima.
    """
    counts = np.asarray(hist.counts, dtype=np.float64)
    x = hist.centers
    n = counts.sum()
    if n <= 0:
        raise ValueError("empty histogram")
    sm, peaks = _smoothed_peaks(counts)
    # drop insignificant wiggles
    peaks = [p for p in peaks if sm[p] >= 1e-3 * sm.max()]
    if len(peaks) < 2:
        raise UnimodalHistogramError(
            f"histogram is unimodal ({len(peaks)} smoothed peak(s))")
    p1, p2 = peaks[0], peaks[-1]

    mu = np.array([x[p1], x[p2]])
    span = max(x[p2] - x[p1], 4.0 * SIGMA_FLOOR_HU)
    sig = np.array([span / 4.0, span / 4.0])
    w = np.array([0.5, 0.5])

    def loglik():
        pdf = w[:, None] * _normal_pdf(x[None, :], mu[:, None], sig[:, None])
        tot = pdf.sum(axis=0)
        tot = np.maximum(tot, 1e-300)
        return float((counts * np.log(tot)).sum())

    prev = loglik()
    for _ in range(max_iter):
        pdf = w[:, None] * _normal_pdf(x[None, :], mu[:, None], sig[:, None])
        tot = np.maximum(pdf.sum(axis=0), 1e-300)
        resp = pdf / tot  # (2, bins)
        wc = resp * counts
        nk = wc.sum(axis=1)
        nk = np.maximum(nk, 1e-12)
        mu = (wc * x).sum(axis=1) / nk
        var = (wc * (x[None, :] - mu[:, None]) ** 2).sum(axis=1) / nk
        sig = np.sqrt(np.maximum(var, SIGMA_FLOOR_HU ** 2))
        w = nk / n
        cur = loglik()
        if cur < prev - 1e-7 * max(1.0, abs(prev)):
            raise AssertionError("EM log-likelihood decreased")
        if (cur - prev) < tol_per_sample * n:
            prev = cur
            break
        prev = cur

    order = np.argsort(mu)
    mu, sig, w = mu[order], sig[order], w[order]
    if not mu[0] < mu[1]:
        raise UnimodalHistogramError("EM components collapsed onto one mode")
    return GaussianPair(float(mu[0]), float(sig[0]), float(w[0]),
                        float(mu[1]), float(sig[1]), float(w[1]))


def _normal_pdf(x, mu, sigma):
    return np.exp(-0.5 * ((x - mu) / sigma) ** 2) / (np.sqrt(2 * np.pi) * sigma)


def derive_thresholds(pair: GaussianPair) -> tuple[float, float]:
    """(low, high) HU thresholds.

    low = intersection abscissa of the two weighted component densities
    between the means (midpoint fallback when they do not cross there);
    high = mean2 - sigma2, the unambiguous-bone margin.
    """
    high = pair.mean2 - pair.sigma2
    low = _density_intersection(pair)
    if low is None:
        low = 0.5 * (pair.mean1 + pair.mean2)
    # clamp into the contracted bracket mean1 <= low <= high
    low = min(max(low, pair.mean1), max(high, pair.mean1))
    return float(low), float(high)


def _density_intersection(pair):
    """Root of w1*N1(x) = w2*N2(x) in (mean1, mean2), or None."""
    m1, s1, w1 = pair.mean1, pair.sigma1, pair.weight1
    m2, s2, w2 = pair.mean2, pair.sigma2, pair.weight2
    # log w1 - ((x-m1)^2)/(2 s1^2) - log s1 = log w2 - ((x-m2)^2)/(2 s2^2) - log s2
    a = 1.0 / (2 * s2 ** 2) - 1.0 / (2 * s1 ** 2)
    b = m1 / s1 ** 2 - m2 / s2 ** 2
    c = (m2 ** 2 / (2 * s2 ** 2) - m1 ** 2 / (2 * s1 ** 2)
         + np.log(w1 / s1) - np.log(w2 / s2))
    roots = []
    if abs(a) < 1e-300:
        if b != 0:
            roots = [-c / b]
    else:
        disc = b * b - 4 * a * c
        if disc >= 0:
            sq = np.sqrt(disc)
            roots = [(-b - sq) / (2 * a), (-b + sq) / (2 * a)]
    inside = [r for r in roots if m1 < r < m2]
    if not inside:
        return None
    return min(inside, key=lambda r: abs(r - 0.5 * (m1 + m2)))


def transition_margin(pair: GaussianPair) -> float:
    """Noise-adaptive margin added to the low threshold for the 27-neighborhood
    mean test in the transition zone."""
    return max(1.0, pair.noise_sigma / np.sqrt(27.0))


def classify_array(values, pair: GaussianPair) -> np.ndarray:
    """Vectorized soft/bone classification of a 3D HU array.

    Below low -> soft; above high -> bone; in the transition zone a voxel is
    bone iff its 3x3x3 neighborhood mean exceeds low + margin where the margin
    adapts to the estimated noise.
    """
    low, high = derive_thresholds(pair)
    values = np.asarray(values, dtype=np.float64)
    nbr_mean = ndimage.uniform_filter(values, size=3, mode="nearest")
    bone = values > high
    transition = (values >= low) & ~bone
    bone |= transition & (nbr_mean > low + transition_margin(pair))
    return bone


def classify(volume, voxel_index, pair: GaussianPair) -> str:
    """Classify a single voxel; returns 'soft' or 'bone'."""
    low, high = derive_thresholds(pair)
    i, j, k = voxel_index
    val = float(volume.values[i, j, k])
    if val < low:
        return "soft"
    if val > high:
        return "bone"
    nx, ny, nz = volume.dims
    sl = tuple(slice(max(0, c - 1), min(n, c + 2))
               for c, n in zip((i, j, k), (nx, ny, nz)))
    nbr = float(volume.values[sl].mean())
    return "bone" if nbr > low + transition_margin(pair) else "soft"
