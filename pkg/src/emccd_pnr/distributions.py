"""Analytic count statistics of an electron-multiplying CCD.

The count model: photoelectrons released on a pixel are multiplied by a
stochastic gain register, spurious electrons (clock-induced charge and
in-register births) are amplified alongside them, and Gaussian read noise
is added at the output.  Every distribution here is discretized on a
unit-width integer count grid, where the mass of bin ``x`` represents the
probability of an output count rounding to ``x``.

Density-level closed forms (the Bessel form of the Poisson-Gamma mixture)
are exposed separately from the discretized pmfs so they can be validated
against truncated-sum evaluation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import special, stats

__all__ = [
    "GainRegister",
    "NoiseParams",
    "DiscretePmf",
    "convolve",
    "amplifier_pmf",
    "gamma_count_density",
    "poisson_gamma_density",
    "poisson_gamma_pmf",
    "noise_pmf",
    "noise_support",
    "pgn_pmf",
    "pgn_support",
    "poisson_k_cutoff",
    "check_intensity_map",
]

# Poisson tails are truncated once the neglected mass drops below this.
POISSON_TAIL = 1e-12
# Continuous tails of gain distributions are truncated at this mass.
TAIL_MASS = 1e-13

Support = tuple[int, int]


@dataclass(frozen=True)
class GainRegister:
    """Electron-multiplying register: ``n_stages`` stages, each duplicating
    every incoming electron independently with ``duplication_prob``.

    The mean gain of the full register is ``(1 + duplication_prob) ** n_stages``.
    """

    duplication_prob: float
    n_stages: int

    def __post_init__(self) -> None:
        if not 0.0 < self.duplication_prob < 1.0:
            raise ValueError(
                f"duplication_prob must be in (0, 1), got {self.duplication_prob}"
            )
        if self.n_stages < 1:
            raise ValueError(f"n_stages must be >= 1, got {self.n_stages}")

    @property
    def mean_gain(self) -> float:
        return (1.0 + self.duplication_prob) ** self.n_stages

    @classmethod
    def from_mean_gain(cls, mean_gain: float, n_stages: int) -> "GainRegister":
        """Register whose mean gain equals ``mean_gain`` exactly.

        Cameras specify gain as a single dial value; this converts it to the
        per-stage duplication probability ``mean_gain**(1/n_stages) - 1``.
        """
        if mean_gain <= 1.0:
            raise ValueError(f"mean_gain must exceed 1, got {mean_gain}")
        return cls(mean_gain ** (1.0 / n_stages) - 1.0, n_stages)

    def stage_gains(self) -> np.ndarray:
        """Mean gain seen by an electron born right after stage m, m = 1..n_stages.

        The electron undergoes the remaining ``n_stages - m`` duplications.
        """
        exponents = self.n_stages - np.arange(1, self.n_stages + 1)
        return (1.0 + self.duplication_prob) ** exponents


@dataclass(frozen=True)
class NoiseParams:
    """Dark-noise model of the camera.

    read_noise
        Standard deviation of the Gaussian output-amplifier noise (counts).
    cic_prob
        Probability per pixel per frame of one clock-induced-charge electron
        entering the register at stage 1 (full gain).
    serial_prob
        Probability per stage of one spurious electron born inside the
        register (partial gain, depending on the birth stage).
    register
        The gain register the spurious electrons share with the signal.
    """

    read_noise: float
    cic_prob: float
    serial_prob: float
    register: GainRegister

    def __post_init__(self) -> None:
        if not self.read_noise > 0.0:
            raise ValueError(f"read_noise must be positive, got {self.read_noise}")
        if not 0.0 <= self.cic_prob < 1.0:
            raise ValueError(f"cic_prob must be in [0, 1), got {self.cic_prob}")
        if self.serial_prob < 0.0 or self.register.n_stages * self.serial_prob >= 1.0:
            raise ValueError(
                "serial_prob must satisfy 0 <= n_stages * serial_prob < 1"
            )

    def mean(self) -> float:
        """First moment of the dark-noise count distribution."""
        g = self.register.mean_gain
        return self.cic_prob * g + self.serial_prob * self.register.stage_gains().sum()


class DiscretePmf:
    """Probability masses on consecutive unit-width integer count bins.

    ``masses[i]`` is the probability of the count ``origin + i``.  Instances
    are immutable; all operations return new objects.
    """

    __slots__ = ("origin", "masses")

    def __init__(self, origin: int, masses: np.ndarray):
        masses = np.asarray(masses, dtype=np.float64)
        if masses.ndim != 1 or masses.size == 0:
            raise ValueError("masses must be a non-empty 1-D array")
        if masses.min() < -1e-12:
            raise ValueError("masses must be non-negative")
        masses = np.clip(masses, 0.0, None)
        masses.flags.writeable = False
        object.__setattr__(self, "origin", int(origin))
        object.__setattr__(self, "masses", masses)

    def __setattr__(self, name, value):  # pragma: no cover - immutability guard
        raise AttributeError("DiscretePmf is immutable")

    def __len__(self) -> int:
        return self.masses.size

    @property
    def support(self) -> Support:
        return (self.origin, self.origin + self.masses.size - 1)

    def counts(self) -> np.ndarray:
        return np.arange(self.origin, self.origin + self.masses.size)

    def total(self) -> float:
        return float(self.masses.sum())

    def mean(self) -> float:
        return float(np.dot(self.counts(), self.masses) / self.masses.sum())

    def variance(self) -> float:
        xs = self.counts()
        m = self.mean()
        return float(np.dot((xs - m) ** 2, self.masses) / self.masses.sum())

    def at(self, x) -> np.ndarray | float:
        """Mass at integer count(s) ``x`` (zero outside the stored support)."""
        x = np.asarray(x)
        idx = x - self.origin
        valid = (idx >= 0) & (idx < self.masses.size)
        out = np.where(valid, self.masses[np.clip(idx, 0, self.masses.size - 1)], 0.0)
        return float(out) if out.ndim == 0 else out

    def project(self, support: Support) -> "DiscretePmf":
        """Restrict/pad to ``support``; mass outside is dropped."""
        lo, hi = support
        if lo > hi:
            raise ValueError("empty support")
        out = np.zeros(hi - lo + 1)
        src_lo = max(lo, self.origin)
        src_hi = min(hi, self.origin + self.masses.size - 1)
        if src_lo <= src_hi:
            out[src_lo - lo : src_hi - lo + 1] = self.masses[
                src_lo - self.origin : src_hi - self.origin + 1
            ]
        return DiscretePmf(lo, out)

    def normalized(self) -> "DiscretePmf":
        return DiscretePmf(self.origin, self.masses / self.masses.sum())

    def trimmed(self, eps: float = TAIL_MASS) -> "DiscretePmf":
        """Drop leading/trailing bins carrying cumulative mass below ``eps``."""
        csum = np.cumsum(self.masses)
        lo = int(np.searchsorted(csum, eps))
        hi = int(np.searchsorted(csum, csum[-1] - eps, side="right"))
        lo = min(lo, self.masses.size - 1)
        hi = max(hi + 1, lo + 1)
        return DiscretePmf(self.origin + lo, self.masses[lo:hi])

    def total_variation(self, other: "DiscretePmf") -> float:
        lo = min(self.origin, other.origin)
        hi = max(self.support[1], other.support[1])
        a = self.project((lo, hi)).masses
        b = other.project((lo, hi)).masses
        return 0.5 * float(np.abs(a - b).sum())


def convolve(a: DiscretePmf, b: DiscretePmf) -> DiscretePmf:
    """Exact discrete convolution of two unit-grid pmfs."""
    return DiscretePmf(a.origin + b.origin, np.convolve(a.masses, b.masses))


def delta_pmf(x: int = 0) -> DiscretePmf:
    return DiscretePmf(x, np.ones(1))


def poisson_k_cutoff(mu: float, tail: float = POISSON_TAIL) -> int:
    """Smallest ``K`` such that the Poisson(mu) mass above ``K`` is < ``tail``."""
    if mu <= 0.0:
        return 0
    return int(stats.poisson.isf(tail, mu)) + 1


def gamma_count_density(x: np.ndarray, k: int, mean_gain: float) -> np.ndarray:
    """Output-count density for exactly ``k`` input electrons (``k >= 1``).

    Gamma with shape ``k`` and scale ``mean_gain``; evaluated in the log
    domain so large ``k`` and large ``x`` do not overflow.
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    pos = x > 0
    xp = x[pos]
    log_d = (
        (k - 1) * np.log(xp)
        - xp / mean_gain
        - k * math.log(mean_gain)
        - special.gammaln(k)
    )
    out[pos] = np.exp(log_d)
    return out


def amplifier_pmf(k: int, register: GainRegister, support: Support) -> DiscretePmf:
    """Count distribution after amplifying exactly ``k`` electrons.

    ``k = 0`` is a unit mass in the zero bin.  For ``k >= 1`` every bin mass
    is the exact integral of the Gamma density over [x - 0.5, x + 0.5) (with
    the zero bin covering [0, 0.5)), so the pmf over a full support totals
    one minus the truncated upper tail.
    """
    if k < 0:
        raise ValueError(f"electron number must be non-negative, got {k}")
    lo, hi = support
    if lo > hi:
        raise ValueError("empty support")
    if k == 0:
        if not lo <= 0 <= hi:
            raise ValueError("support must cover 0 for the empty-input case")
        masses = np.zeros(hi - lo + 1)
        masses[-lo] = 1.0
        return DiscretePmf(lo, masses)
    if lo < 0:
        raise ValueError("support must start at 0 or above for k >= 1")
    g = register.mean_gain
    edges = np.concatenate(
        ([max(lo - 0.5, 0.0)], np.arange(max(lo, 0) + 0.5, hi + 0.6))
    )
    cdf = special.gammainc(k, edges / g)
    return DiscretePmf(lo, np.diff(cdf))


def poisson_gamma_density(x, mu: float, register: GainRegister) -> np.ndarray:
    """Closed-form count density (x > 0) for Poisson-distributed electrons.

    For a Poisson mean ``mu`` the amplified-count density is

        exp(-x/G - mu) * sqrt(mu / (G x)) * I1(2 sqrt(x mu / G))

    with ``G`` the mean gain.  Evaluated with the exponentially scaled Bessel
    function, so the exponent collapses to ``-(sqrt(x/G) - sqrt(mu))**2`` and
    never overflows.  Zero at ``x <= 0`` (the point mass at zero is handled
    by :func:`poisson_gamma_pmf`).
    """
    x = np.asarray(x, dtype=np.float64)
    out = np.zeros_like(x)
    if mu == 0.0:
        return out
    g = register.mean_gain
    pos = x > 0
    xp = x[pos]
    z = 2.0 * np.sqrt(xp * mu / g)
    log_pref = -((np.sqrt(xp / g) - math.sqrt(mu)) ** 2) + 0.5 * (
        math.log(mu) - math.log(g) - np.log(xp)
    )
    out[pos] = np.exp(log_pref) * special.ive(1, z)
    return out


def poisson_electron_weights(
    mu_values: np.ndarray, weights: np.ndarray
) -> np.ndarray:
    """Mixture-averaged Poisson weights W_k = sum_i w_i Poisson(k | mu_i)."""
    mu_values = np.atleast_1d(np.asarray(mu_values, dtype=np.float64))
    weights = np.atleast_1d(np.asarray(weights, dtype=np.float64))
    kmax = poisson_k_cutoff(float(mu_values.max()))
    ks = np.arange(kmax + 1)
    return stats.poisson.pmf(ks[:, None], mu_values[None, :]) @ weights


def gamma_mixture_masses(electron_weights: np.ndarray, mean_gain: float, hi: int):
    """Exact unit-bin masses on [0, hi] of a Poisson-Gamma electron mixture.

    ``electron_weights[k]`` is the probability of k input electrons; the
    output mass at x integrates the k-mixture of Gamma(k, gain) densities
    over [x - 0.5, x + 0.5), via the stable Poisson-series recurrence for the
    integer-shape Gamma upper tail.  The k = 0 point mass lands in bin 0.
    The total equals one minus the mixture tail beyond hi + 0.5 exactly.
    """
    w = np.asarray(electron_weights, dtype=np.float64)
    edges = np.concatenate(([0.0], np.arange(0.5, hi + 0.6))) / mean_gain
    # S(t) = sum_k w_k * Q(k, t), Q the regularized upper incomplete gamma;
    # for integer k, Q(k, t) = e^-t * sum_{j<k} t^j / j! accumulates without
    # cancellation (every term is a Poisson probability)
    term = np.exp(-edges)
    q_k = term.copy()
    acc = np.zeros_like(edges)
    for k in range(1, w.size):
        if k > 1:
            term *= edges / (k - 1)
            q_k = q_k + term
        acc += w[k] * q_k
    masses = acc[:-1] - acc[1:]
    masses[0] += w[0]
    return masses


def poisson_gamma_pmf(mu: float, register: GainRegister, support: Support) -> DiscretePmf:
    """Amplified-count pmf for Poisson(mu)-distributed input electrons.

    The zero bin carries ``exp(-mu)`` plus the [0, 0.5) sliver of the
    continuous part; every other bin is the exact [x - 0.5, x + 0.5)
    integral of the mixture density.
    """
    if mu < 0.0:
        raise ValueError(f"mean electron number must be non-negative, got {mu}")
    lo, hi = support
    if not lo <= 0 <= hi:
        raise ValueError("support must cover 0")
    if mu == 0.0:
        return delta_pmf(0).project(support)
    weights = poisson_electron_weights(np.array([mu]), np.array([1.0]))
    masses = gamma_mixture_masses(weights, register.mean_gain, hi)
    return DiscretePmf(lo, np.concatenate((np.zeros(-lo), masses)))


def _gaussian_pmf(sigma: float) -> DiscretePmf:
    """Read-noise pmf: density at integer midpoints, cut at 8 sigma, renormalized."""
    half = int(math.ceil(8.0 * sigma))
    xs = np.arange(-half, half + 1)
    dens = np.exp(-0.5 * (xs / sigma) ** 2) / (sigma * math.sqrt(2.0 * math.pi))
    return DiscretePmf(-half, dens / dens.sum())


def _exponential_bin_masses(xs: np.ndarray, scale: float) -> np.ndarray:
    """Exact bin integrals of Exp(scale) over [x - 0.5, x + 0.5), x >= 1."""
    upper = np.minimum((xs + 0.5) / scale, 745.0)
    lower = np.minimum((xs - 0.5) / scale, 745.0)
    return np.exp(-lower) - np.exp(-upper)


def _cic_pmf(params: NoiseParams) -> DiscretePmf:
    """Clock-induced charge: no electron with prob 1 - p, else one full-gain electron."""
    p = params.cic_prob
    if p == 0.0:
        return delta_pmf(0)
    g = params.register.mean_gain
    hi = int(math.ceil(g * -math.log(TAIL_MASS)))
    xs = np.arange(1, hi + 1)
    masses = np.concatenate(([0.0], p * _exponential_bin_masses(xs, g)))
    masses[0] = 1.0 - p + p * (1.0 - math.exp(-0.5 / g))
    return DiscretePmf(0, masses).trimmed()


def _serial_pmf(params: NoiseParams) -> DiscretePmf:
    """Spurious in-register electrons, one exponential per birth stage."""
    p = params.serial_prob
    n = params.register.n_stages
    if p == 0.0:
        return delta_pmf(0)
    gains = params.register.stage_gains()
    hi = int(math.ceil(gains.max() * -math.log(TAIL_MASS)))
    xs = np.arange(1, hi + 1)
    upper = np.minimum((xs[:, None] + 0.5) / gains[None, :], 745.0)
    lower = np.minimum((xs[:, None] - 0.5) / gains[None, :], 745.0)
    interior = p * (np.exp(-lower) - np.exp(-upper)).sum(axis=1)
    bin0 = 1.0 - n * p + p * float((1.0 - np.exp(-0.5 / gains)).sum())
    masses = np.concatenate(([bin0], interior))
    return DiscretePmf(0, masses).trimmed()


@lru_cache(maxsize=64)
def _noise_pmf_cached(params: NoiseParams) -> DiscretePmf:
    pmf = convolve(_gaussian_pmf(params.read_noise), _cic_pmf(params))
    return convolve(pmf, _serial_pmf(params)).trimmed()


def noise_pmf(params: NoiseParams, support: Support | None = None) -> DiscretePmf:
    """Dark-noise count pmf: read noise * clock-induced charge * serial births."""
    pmf = _noise_pmf_cached(params)
    return pmf if support is None else pmf.project(support)


def noise_support(params: NoiseParams) -> Support:
    """Support carrying all but ~1e-13 of the dark-noise mass."""
    return _noise_pmf_cached(params).support


def check_intensity_map(intensity: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Validate a normalized per-pixel illumination map."""
    intensity = np.asarray(intensity, dtype=np.float64)
    if intensity.ndim != 2:
        raise ValueError("intensity map must be 2-D")
    if intensity.min() < 0.0:
        raise ValueError("intensity map entries must be non-negative")
    total = float(intensity.sum())
    if abs(total - 1.0) > tol:
        raise ValueError(f"intensity map must sum to 1 (got {total:.8f})")
    return intensity


def _group_pixel_means(mu_pixels: np.ndarray, max_components: int):
    """Collapse per-pixel means into (value, weight) groups.

    Exact when there are at most ``max_components`` distinct values; otherwise
    pixels are bucketed by rank and each bucket is represented by its mean,
    which is first-order exact for the mixture.
    """
    values, counts = np.unique(mu_pixels, return_counts=True)
    if values.size <= max_components:
        return values, counts / mu_pixels.size
    order = np.sort(mu_pixels)
    edges = np.linspace(0, order.size, max_components + 1).astype(int)
    sums = np.add.reduceat(order, edges[:-1])
    sizes = np.diff(edges)
    return sums / sizes, sizes / mu_pixels.size


def pgn_mixture_pmf(
    mu_values: np.ndarray,
    weights: np.ndarray,
    register: GainRegister,
    hi: int,
) -> DiscretePmf:
    """Weighted Poisson-Gamma mixture on [0, hi], before noise convolution.

    Because the Gamma part depends on the electron number only, the pixel
    mixture collapses to a single electron-number weight vector, so the cost
    is independent of how many pixels contribute.
    """
    electron_weights = poisson_electron_weights(mu_values, weights)
    return DiscretePmf(0, gamma_mixture_masses(electron_weights, register.mean_gain, hi))


def pgn_pmf(
    mu_f: float,
    intensity: np.ndarray,
    params: NoiseParams,
    support: Support,
    max_components: int = 2048,
) -> DiscretePmf:
    """Pooled count pmf over all pixels of an illuminated region.

    Pixel ``i`` sees Poisson photoelectrons with mean ``mu_f * intensity[i]``;
    the pooled distribution is the equal-weight mixture of the per-pixel
    Poisson-Gamma pmfs, convolved once with the shared dark-noise pmf.
    """
    if mu_f < 0.0:
        raise ValueError(f"mean photons per frame must be non-negative, got {mu_f}")
    intensity = check_intensity_map(intensity)
    if mu_f == 0.0:
        return noise_pmf(params, support)
    mu_values, weights = _group_pixel_means(
        (mu_f * intensity).ravel(), max_components
    )
    noise = noise_pmf(params)
    lo, hi = support
    mix_hi = max(hi - noise.origin, 1)
    mixture = pgn_mixture_pmf(mu_values, weights, params.register, mix_hi)
    return convolve(noise, mixture).project(support)


def pgn_support(mu_f: float, intensity: np.ndarray, params: NoiseParams) -> Support:
    """Support capturing essentially all mass of :func:`pgn_pmf`."""
    n_lo, n_hi = noise_support(params)
    mu_max = float(mu_f * np.max(intensity))
    if mu_max <= 0.0:
        return (n_lo, n_hi)
    g = params.register.mean_gain
    kmax = max(poisson_k_cutoff(mu_max), 1)
    hi = int(stats.gamma.isf(TAIL_MASS, kmax, scale=g)) + 1
    return (n_lo, n_hi + hi)
