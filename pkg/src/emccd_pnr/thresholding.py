"""Bayesian photon-number inference from corrected EMCCD counts.

For a pixel with mean photoelectron number ``mu`` the posterior over the
photoelectron number k given an observed count x is

    P(k | x) = w_k * [noise * amp_k](x) / sum_j w_j * [noise * amp_j](x)

with Poisson prior weights ``w_k`` and ``amp_k`` the k-electron
amplifier pmf.  Count thresholds are the first integer counts where the
posterior for k overtakes the one for k-1; each pixel of a sensor gets its
own threshold set through the per-pixel mean map ``mu_f * intensity``.

The per-k numerators do not depend on ``mu``, so one table serves every
pixel of a threshold map; all convolutions are direct (not FFT) to keep
relative precision in the deep tails where crossings live.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special, stats
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .distributions import (
    DiscretePmf,
    NoiseParams,
    check_intensity_map,
    convolve,
    gamma_count_density,
    noise_pmf,
    poisson_gamma_pmf,
)
from .calibration import estimate_intensity_map

__all__ = [
    "ThresholdSet",
    "ThresholdMap",
    "PosteriorTable",
    "posterior",
    "posterior_table",
    "thresholds",
    "mean_photoelectron",
    "region_mean",
    "build_threshold_map",
    "count_photons",
    "binary_threshold",
    "BayesianPhotonCounter",
    "SigmaThresholdCounter",
]


def _poisson_weights(mu: float, k_max: int) -> np.ndarray:
    return stats.poisson.pmf(np.arange(k_max + 1), mu)


def cutoff_photon_number(mu: float, cutoff: float) -> int:
    """Largest k whose Poisson(mu) probability exceeds ``cutoff`` (0 for mu=0)."""
    if mu <= 0.0:
        return 0
    ks = np.arange(0, max(int(4 * mu + 40), 8))
    above = stats.poisson.pmf(ks, mu) > cutoff
    return int(ks[above].max()) if above.any() else 0


@lru_cache(maxsize=16)
def _numerator_table(params: NoiseParams, k_max: int, hi: int):
    """[noise * amp_k](x) for k = 0..k_max on x = lo..hi.

    The k-electron columns carry the density at integer counts (with the
    exact [0, 0.5) integral in the zero bin, so values never depend on the
    tabulated extent), convolved directly rather than via FFT: the summands
    are non-negative, so the relative error stays at machine precision even
    where the values underflow toward the tails - exactly where threshold
    crossings sit.
    """
    noise = noise_pmf(params)
    n_lo, _ = noise.support
    lo = n_lo
    xs_amp = np.arange(0, hi - n_lo + 1, dtype=np.float64)
    n = hi - lo + 1
    table = np.zeros((k_max + 1, n))
    g = params.register.mean_gain
    for k in range(k_max + 1):
        if k == 0:
            amp = np.zeros(xs_amp.size)
            amp[0] = 1.0
        else:
            amp = gamma_count_density(xs_amp, k, g)
            amp[0] = float(special.gammainc(k, 0.5 / g))
        table[k] = np.convolve(noise.masses, amp)[:n]
    return lo, table


def _bucket(value: int, step: int = 512) -> int:
    return ((value // step) + 1) * step


def _normalization_depth(mu: float, x_hi: int, gain: float) -> int:
    """Prior-posterior support in k: covers Poisson bulk plus the large-count ridge."""
    from .distributions import poisson_k_cutoff

    ridge = math.sqrt(max(x_hi, 1) * max(mu, 0.0) / gain)
    return int(max(poisson_k_cutoff(mu), math.ceil(3.0 * ridge) + 25))


def posterior(x: int, mu: float, noise: NoiseParams) -> np.ndarray:
    """Posterior over the photoelectron number k for a single count ``x``.

    Returns the normalized vector P(k | x) for k = 0..K with K deep enough
    that the neglected mass is < 1e-9.
    """
    if mu < 0.0:
        raise ValueError("mean photoelectron number must be non-negative")
    x = int(round(x))
    if mu == 0.0:
        return np.array([1.0])
    k_hi = _normalization_depth(mu, max(x, 1), noise.register.mean_gain)
    lo, table = _numerator_table(noise, _bucket(k_hi, 16), _bucket(max(x, 1)))
    idx = x - lo
    if idx < 0:
        idx = 0  # counts below the noise support behave like the lowest bin
    joint = _poisson_weights(mu, k_hi) * table[: k_hi + 1, idx]
    total = joint.sum()
    if total <= 0.0:
        # count far outside any modeled support: ridge of the prior wins
        out = np.zeros(k_hi + 1)
        out[-1] = 1.0
        return out
    return joint / total


@dataclass(frozen=True)
class PosteriorTable:
    """P(k | x) rows for a range of counts at fixed per-pixel mean ``mu``.

    Rows are normalized over a deep internal k-range and then truncated to
    ``k_max`` (the largest k whose prior probability exceeds the cutoff) for
    reporting.
    """

    mu: float
    origin: int
    probs: np.ndarray  # (n_counts, k_max + 1)
    k_max: int
    cutoff: float

    def row(self, x: int) -> np.ndarray:
        return self.probs[x - self.origin]


def posterior_table(
    mu: float,
    noise: NoiseParams,
    counts: tuple[int, int],
    cutoff: float = 0.05,
) -> PosteriorTable:
    lo_req, hi_req = counts
    if mu < 0.0:
        raise ValueError("mean photoelectron number must be non-negative")
    if mu == 0.0:
        probs = np.ones((hi_req - lo_req + 1, 1))
        return PosteriorTable(mu, lo_req, probs, 0, cutoff)
    k_hi = _normalization_depth(mu, hi_req, noise.register.mean_gain)
    lo, table = _numerator_table(noise, _bucket(k_hi, 16), _bucket(max(hi_req, 1)))
    idx = np.clip(np.arange(lo_req, hi_req + 1) - lo, 0, table.shape[1] - 1)
    joint = _poisson_weights(mu, k_hi)[:, None] * table[: k_hi + 1, idx]
    totals = joint.sum(axis=0)
    totals[totals <= 0.0] = 1.0
    probs = (joint / totals).T
    k_max = max(cutoff_photon_number(mu, cutoff), 1)
    return PosteriorTable(mu, lo_req, probs[:, : k_max + 1], k_max, cutoff)


@dataclass(frozen=True)
class ThresholdSet:
    """Contiguous count intervals tagged with photoelectron numbers.

    ``intervals`` holds (k, left, right) with the k=0 interval starting at 0
    and each right edge equal to the next left edge.  The top interval's
    right edge is the next posterior crossing; counts at or above it clamp
    to the top k during classification (open-ended up to saturation).
    """

    mu: float
    cutoff: float
    saturation: int
    intervals: tuple[tuple[int, int, int], ...]

    @property
    def k_max(self) -> int:
        return self.intervals[-1][0]

    def boundaries(self) -> np.ndarray:
        """Right edges of all intervals (the integer-scan crossings)."""
        return np.array([iv[2] for iv in self.intervals], dtype=np.float64)

    def assign(self, counts: np.ndarray) -> np.ndarray:
        """Photon number for each count: interval lookup with clamping."""
        edges = self.boundaries()
        k = np.searchsorted(edges, np.asarray(counts), side="right")
        return np.minimum(k, self.k_max).astype(np.int64)


def _scan_crossing(
    weights: np.ndarray,
    table: np.ndarray,
    lo: int,
    k: int,
    start: int,
    saturation: int,
) -> int | None:
    """First integer count >= start where the k-posterior overtakes k-1."""
    hi = lo + table.shape[1] - 1
    i0 = max(start - lo, 0)
    upper = weights[k] * table[k, i0:]
    lower = weights[k - 1] * table[k - 1, i0:]
    hit = (upper >= lower) & (upper > 0.0)
    idx = np.argmax(hit)
    if not hit[idx]:
        return None if hi < saturation else saturation
    return max(start, lo + i0 + int(idx))


def thresholds(
    mu: float,
    noise: NoiseParams,
    cutoff: float = 0.05,
    saturation: int = 65535,
    max_photons: int | None = None,
) -> ThresholdSet:
    """Count thresholds for photon numbers at per-pixel mean ``mu``.

    Intervals cover k = 0 .. K where K is the largest photoelectron number
    whose Poisson prior probability exceeds ``cutoff`` (at least 1 for any
    positive mean, so a 0-vs-1 boundary always exists).
    """
    if mu < 0.0:
        raise ValueError("mean photoelectron number must be non-negative")
    if mu == 0.0:
        return ThresholdSet(mu, cutoff, saturation, ((0, 0, saturation),))
    k_top = max(cutoff_photon_number(mu, cutoff), 1)
    if max_photons is not None:
        k_top = min(k_top, max(int(max_photons), 1))
    gain = noise.register.mean_gain
    # the scan only compares adjacent photon numbers, so the table never
    # needs rows beyond k_top + 1 (normalization cancels in the comparison)
    k_hi = _bucket(k_top + 1, 8)
    # generous first estimate of the scan range; extended on demand
    hi = int((k_top + 1) * (k_top + 2) * gain / mu * 2 + 20 * noise.read_noise) + 50
    bounds: list[int] = []
    prev = 0
    weights = _poisson_weights(mu, k_hi)
    for k in range(1, k_top + 2):
        while True:
            lo, table = _numerator_table(
                noise, k_hi, _bucket(min(hi, saturation))
            )
            found = _scan_crossing(weights, table, lo, k, prev + 1, saturation)
            if found is not None:
                break
            hi *= 2
        bounds.append(min(found, saturation))
        prev = bounds[-1]
        if prev >= saturation:
            bounds.extend([saturation] * (k_top + 1 - k))
            break
    intervals = []
    left = 0
    for k in range(k_top + 1):
        intervals.append((k, left, bounds[k]))
        left = bounds[k]
    return ThresholdSet(mu, cutoff, saturation, tuple(intervals))


# --------------------------------------------------------------------------
# posterior moments (closed forms)


def _moment_numerator_vectors(mu: float, noise: NoiseParams, hi: int):
    """Sum_k k^m w_k amp_k for m = 1, 2 as count vectors on [0, hi].

    Closed forms for x > 0:

        A(x) = exp(-x/G - mu) (mu/G) I0(2 sqrt(x mu / G))
        B(x) = exp(-x/G - mu) (mu/G) (I0 + sqrt(x mu / G) I1)(2 sqrt(x mu/G))

    evaluated with scaled Bessel functions; the zero bin carries the exact
    k-sum of the [0, 0.5) integrals, matching the per-k numerator columns.
    """
    g = noise.register.mean_gain
    xs = np.arange(1, hi + 1, dtype=np.float64)
    z = 2.0 * np.sqrt(xs * mu / g)
    log_pref = -((np.sqrt(xs / g) - math.sqrt(mu)) ** 2)
    i0 = special.ive(0, z)
    i1 = special.ive(1, z)
    a = np.exp(log_pref) * (mu / g) * i0
    b = np.exp(log_pref) * (mu / g) * (i0 + np.sqrt(xs * mu / g) * i1)
    from .distributions import poisson_k_cutoff

    ks = np.arange(1, poisson_k_cutoff(mu) + 1)
    wk = stats.poisson.pmf(ks, mu)
    half = special.gammainc(ks, 0.5 / g)
    a0 = float(np.dot(ks * wk, half))
    b0 = float(np.dot(ks**2 * wk, half))
    return np.concatenate(([a0], a)), np.concatenate(([b0], b))


def mean_photoelectron(
    x, mu: float, noise: NoiseParams
) -> tuple[np.ndarray | float, np.ndarray | float]:
    """Posterior mean photoelectron number and its standard deviation.

    Accepts a scalar count or an array; returns (k_bar, delta_k) of the
    same shape.
    """
    if mu < 0.0:
        raise ValueError("mean photoelectron number must be non-negative")
    xs = np.atleast_1d(np.asarray(x, dtype=np.int64))
    if mu == 0.0:
        zero = np.zeros(xs.shape)
        if np.isscalar(x) or np.ndim(x) == 0:
            return 0.0, 0.0
        return zero, zero.copy()
    x_hi = max(int(xs.max()), 1)
    gain = noise.register.mean_gain
    k_hi = _normalization_depth(mu, x_hi, gain)
    lo, table = _numerator_table(noise, _bucket(k_hi, 16), _bucket(x_hi))
    den_vec = _poisson_weights(mu, k_hi) @ table[: k_hi + 1]
    noise_dist = noise_pmf(noise)
    n = table.shape[1]  # the amp columns in the table span [0, n - 1]
    vec_a, vec_b = _moment_numerator_vectors(mu, noise, n - 1)
    num_a = np.convolve(noise_dist.masses, vec_a)[:n]
    num_b = np.convolve(noise_dist.masses, vec_b)[:n]
    idx = np.clip(xs - lo, 0, n - 1)
    d = np.maximum(den_vec[idx], 1e-300)
    kbar = num_a[idx] / d
    k2bar = num_b[idx] / d
    dk = np.sqrt(np.maximum(k2bar - kbar**2, 0.0))
    if np.isscalar(x) or np.ndim(x) == 0:
        return float(kbar[0]), float(dk[0])
    return kbar, dk


def region_mean(
    tset: ThresholdSet, k: int, mu: float, noise: NoiseParams
) -> float:
    """Unweighted average of the posterior mean over interval k's counts."""
    match = [iv for iv in tset.intervals if iv[0] == k]
    if not match:
        raise KeyError(f"no interval tagged k={k} in this threshold set")
    _, left, right = match[0]
    xs = np.arange(left, right)
    kbar, _ = mean_photoelectron(xs, mu, noise)
    return float(np.mean(kbar))


# --------------------------------------------------------------------------
# threshold maps and frame classification


@dataclass
class ThresholdMap:
    """Per-pixel threshold sets over a sensor region.

    Pixels whose quantized mean (1e-4 relative) coincides share one set.
    """

    mu_f: float
    cutoff: float
    saturation: int
    noise: NoiseParams
    group_index: np.ndarray  # (h, w) int32 indices into `sets`
    sets: list[ThresholdSet]

    @property
    def shape(self) -> tuple[int, int]:
        return self.group_index.shape

    def pixel_set(self, row: int, col: int) -> ThresholdSet:
        return self.sets[self.group_index[row, col]]

    def _bounds_matrix(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-group padded boundary rows and per-group photon caps."""
        n_bounds = max(len(s.intervals) for s in self.sets)
        mat = np.full((len(self.sets), n_bounds), np.inf)
        caps = np.empty(len(self.sets), dtype=np.int64)
        for i, s in enumerate(self.sets):
            edges = s.boundaries()
            mat[i, : edges.size] = edges
            caps[i] = s.k_max
        return mat, caps


ZERO_MEAN_KEY = np.iinfo(np.int64).min


def quantize_mean(mu: np.ndarray, rel: float = 1e-4) -> np.ndarray:
    """Integer keys grouping means equal to within ``rel`` (log-space bins).

    Zero means get the sentinel ``ZERO_MEAN_KEY`` (log keys of small positive
    means are themselves negative, so -1 would collide).
    """
    mu = np.asarray(mu, dtype=np.float64)
    keys = np.full(mu.shape, ZERO_MEAN_KEY, dtype=np.int64)
    pos = mu > 0.0
    keys[pos] = np.round(np.log(mu[pos]) / rel).astype(np.int64)
    return keys


def build_threshold_map(
    intensity: np.ndarray,
    mu_f: float,
    noise: NoiseParams,
    cutoff: float = 0.05,
    saturation: int = 65535,
    max_photons: int | None = None,
) -> ThresholdMap:
    """Threshold sets for every pixel of ``mu_f * intensity``."""
    intensity = check_intensity_map(intensity)
    if mu_f < 0.0:
        raise ValueError("mean photons per frame must be non-negative")
    mu_map = mu_f * intensity
    keys = quantize_mean(mu_map)
    unique_keys, inverse = np.unique(keys, return_inverse=True)
    sets = []
    for i, key in enumerate(unique_keys):
        members = mu_map.ravel()[inverse.ravel() == i]
        mu_rep = float(members.mean()) if key != ZERO_MEAN_KEY else 0.0
        sets.append(
            thresholds(mu_rep, noise, cutoff, saturation, max_photons=max_photons)
        )
    return ThresholdMap(
        mu_f=mu_f,
        cutoff=cutoff,
        saturation=saturation,
        noise=noise,
        group_index=inverse.reshape(intensity.shape).astype(np.int32),
        sets=sets,
    )


def count_photons(frame_values: np.ndarray, tmap: ThresholdMap) -> np.ndarray:
    """Photon-number frame(s) from corrected counts via the threshold map.

    Counts below zero map to 0; counts above a pixel's top boundary clamp to
    its largest tagged photon number.  Accepts a single frame or a stack.
    """
    values = np.asarray(frame_values)
    stacked = values.ndim == 3
    frames = values if stacked else values[None]
    if frames.shape[1:] != tmap.shape:
        raise ValueError(
            f"frame shape {frames.shape[1:]} does not match map {tmap.shape}"
        )
    mat, caps = tmap._bounds_matrix()
    flat_groups = tmap.group_index.ravel()
    bounds = mat[flat_groups]  # (n_pixels, n_bounds)
    pix_caps = caps[flat_groups]
    out = np.empty(frames.shape, dtype=np.int64)
    n_pixels = bounds.shape[0]
    chunk = max(1, int(2e7) // (n_pixels * bounds.shape[1]))
    for start in range(0, frames.shape[0], chunk):
        block = frames[start : start + chunk].reshape(-1, n_pixels)
        k = (block[:, :, None] >= bounds[None, :, :]).sum(axis=2)
        out[start : start + chunk] = np.minimum(k, pix_caps[None, :]).reshape(
            -1, *tmap.shape
        )
    return out if stacked else out[0]


def binary_threshold(
    frame_values: np.ndarray,
    noise: NoiseParams,
    n_sigmas: float = 3.0,
    per_pixel: bool = False,
) -> np.ndarray:
    """Conventional binary detection: 1 where count > mean + n * read noise.

    The mean is the global mean of the supplied data (all frames pooled when
    given a stack); ``per_pixel=True`` uses each pixel's own temporal mean
    instead (stack input required).
    """
    values = np.asarray(frame_values, dtype=np.float64)
    if per_pixel:
        if values.ndim != 3:
            raise ValueError("per-pixel baseline requires a frame stack")
        baseline = values.mean(axis=0, keepdims=True)
    else:
        baseline = values.mean()
    return (values > baseline + n_sigmas * noise.read_noise).astype(np.uint8)


# --------------------------------------------------------------------------
# estimator layer


class BayesianPhotonCounter(BaseEstimator):
    """Per-pixel photon-number classifier for corrected frames.

    fit(X) estimates the illumination profile from the corrected stack X
    (unless an explicit map is supplied) and builds the threshold map for
    ``mean_photons_per_frame``; predict(X) converts counts to photon numbers.
    """

    def __init__(
        self,
        noise: NoiseParams | None = None,
        mean_photons_per_frame: float | None = None,
        intensity_map: np.ndarray | None = None,
        cutoff: float = 0.05,
        saturation: int = 65535,
        max_photons: int | None = None,
    ):
        self.noise = noise
        self.mean_photons_per_frame = mean_photons_per_frame
        self.intensity_map = intensity_map
        self.cutoff = cutoff
        self.saturation = saturation
        self.max_photons = max_photons

    def fit(self, X, y=None):
        if self.noise is None or self.mean_photons_per_frame is None:
            raise ValueError(
                "BayesianPhotonCounter needs noise params and the mean photon rate"
            )
        if self.intensity_map is not None:
            intensity = check_intensity_map(self.intensity_map)
        else:
            intensity = estimate_intensity_map(X)
        self.threshold_map_ = build_threshold_map(
            intensity,
            self.mean_photons_per_frame,
            self.noise,
            cutoff=self.cutoff,
            saturation=self.saturation,
            max_photons=self.max_photons,
        )
        return self

    def predict(self, X) -> np.ndarray:
        if not hasattr(self, "threshold_map_"):
            raise NotFittedError("BayesianPhotonCounter must be fitted first")
        values = X.values if hasattr(X, "values") else np.asarray(X)
        return count_photons(values, self.threshold_map_)


class SigmaThresholdCounter(BaseEstimator):
    """Binary thresholding at mean + n sigma (the conventional baseline)."""

    def __init__(self, noise: NoiseParams | None = None, n_sigmas: float = 3.0,
                 per_pixel: bool = False):
        self.noise = noise
        self.n_sigmas = n_sigmas
        self.per_pixel = per_pixel

    def fit(self, X=None, y=None):
        if self.noise is None:
            raise ValueError("SigmaThresholdCounter needs noise params")
        return self

    def predict(self, X) -> np.ndarray:
        if self.noise is None:
            raise ValueError("SigmaThresholdCounter needs noise params")
        values = X.values if hasattr(X, "values") else np.asarray(X)
        return binary_threshold(values, self.noise, self.n_sigmas, self.per_pixel)
