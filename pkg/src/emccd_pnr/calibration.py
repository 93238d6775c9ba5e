"""Calibration of the camera model from frame stacks.

Pipeline order: estimate the per-pixel systematic bias from dark frames,
subtract it everywhere, histogram the corrected counts, fit the dark-noise
parameters, then (with noise fixed) fit the mean photon rate and the
register duplication probability against the pooled illuminated histogram.

Weighted residuals are relative errors, ``(p_emp - p_model) / max(p_emp,
floor)`` with ``floor = 0.5 / total_events``, which puts bins spanning many
orders of magnitude of probability on an equal footing.  Bins with zero
observed events are excluded from the objective.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .distributions import (
    DiscretePmf,
    GainRegister,
    NoiseParams,
    noise_pmf,
    pgn_pmf,
)
from .lm import LMResult, NonConvergenceError, levenberg_marquardt
from .simulator import FrameStack

logger = logging.getLogger(__name__)

__all__ = [
    "CountHistogram",
    "FitResult",
    "compute_correction_image",
    "correct",
    "count_histogram",
    "fit_noise",
    "estimate_intensity_map",
    "fit_photon_model",
    "FrameCorrector",
    "DarkNoiseModel",
    "PhotonRateModel",
]

Region = tuple[int, int, int, int]  # (row0, row1, col0, col1), half-open

MIN_FIT_EVENTS = 100_000


def _stack_values(frames) -> np.ndarray:
    values = frames.values if isinstance(frames, FrameStack) else np.asarray(frames)
    if values.ndim != 3:
        raise ValueError("expected a frame stack shaped (n_frames, height, width)")
    return values


def _crop(values: np.ndarray, region: Region | None) -> np.ndarray:
    if region is None:
        return values
    r0, r1, c0, c1 = region
    if not (0 <= r0 < r1 <= values.shape[1] and 0 <= c0 < c1 <= values.shape[2]):
        raise ValueError(f"region {region} outside frame bounds {values.shape[1:]}")
    return values[:, r0:r1, c0:c1]


# --------------------------------------------------------------------------
# correction image


def compute_correction_image(dark, axis_swap: bool = False) -> np.ndarray:
    """Per-pixel systematic bias from dark frames.

    Per frame, the bias estimate at pixel (j, i) is the column-i average plus
    the row-j average minus the frame mean; the correction image is the frame
    average of that.  The expression is symmetric under exchanging the row and
    column readings, so ``axis_swap`` exists for interface parity only.
    """
    values = _stack_values(dark).astype(np.float64)
    if values.shape[0] < 2:
        raise ValueError("need at least 2 dark frames")
    if axis_swap:
        values = values.transpose(0, 2, 1)
    row_avg = values.mean(axis=2)  # (M, h): average along each row
    col_avg = values.mean(axis=1)  # (M, w): average along each column
    frame_mean = values.mean(axis=(1, 2))
    corr = (
        row_avg[:, :, None] + col_avg[:, None, :] - frame_mean[:, None, None]
    ).mean(axis=0)
    return corr.T if axis_swap else corr


def correct(frames, correction: np.ndarray) -> FrameStack:
    """Subtract the correction image from every frame; output is real-valued."""
    values = _stack_values(frames)
    correction = np.asarray(correction, dtype=np.float64)
    if correction.shape != values.shape[1:]:
        raise ValueError(
            f"correction image {correction.shape} does not match frames "
            f"{values.shape[1:]}"
        )
    corrected = values.astype(np.float32) - correction.astype(np.float32)
    exposure = frames.exposure if isinstance(frames, FrameStack) else 0.0
    meta = dict(frames.meta) if isinstance(frames, FrameStack) else {}
    return FrameStack(corrected, exposure=exposure, tag="corrected", meta=meta)


# --------------------------------------------------------------------------
# histograms


@dataclass(frozen=True)
class CountHistogram:
    """Tallies of nearest-integer counts, over pixels and frames."""

    origin: int
    tallies: np.ndarray  # int64, per integer count starting at origin

    def __post_init__(self) -> None:
        if np.any(self.tallies < 0):
            raise ValueError("tallies must be non-negative")

    @property
    def total(self) -> int:
        return int(self.tallies.sum())

    def counts(self) -> np.ndarray:
        return np.arange(self.origin, self.origin + self.tallies.size)

    def mean(self) -> float:
        return float(np.dot(self.counts(), self.tallies) / self.total)

    def mode(self) -> int:
        return int(self.origin + np.argmax(self.tallies))

    def to_pmf(self) -> DiscretePmf:
        return DiscretePmf(self.origin, self.tallies / self.total)


def count_histogram(frames, region: Region | None = None) -> CountHistogram:
    """Histogram of nearest-integer counts over all pixels and frames."""
    values = _crop(_stack_values(frames), region)
    if values.size == 0:
        raise ValueError("empty region")
    rounded = np.rint(values.reshape(-1)).astype(np.int64)
    lo = int(rounded.min())
    tallies = np.bincount(rounded - lo)
    return CountHistogram(lo, tallies.astype(np.int64))


# --------------------------------------------------------------------------
# fitting


@dataclass
class FitResult:
    """Converged weighted least-squares fit of a count histogram."""

    params: dict[str, float]
    stderr: dict[str, float]
    residuals: np.ndarray  # weighted, one per fitted bin
    bins: np.ndarray  # the fitted integer counts
    converged: bool
    n_iter: int
    objective: float
    objective_path: list[float] = field(default_factory=list)
    model: np.ndarray | None = None  # model probability per fitted bin
    empirical: np.ndarray | None = None

    def noise_params(self, n_stages: int) -> NoiseParams:
        return NoiseParams(
            self.params["read_noise"],
            self.params["cic_prob"],
            self.params["serial_prob"],
            GainRegister(self.params["duplication_prob"], n_stages),
        )


def _logit(p: float) -> float:
    return math.log(p / (1.0 - p))


def _expit(t: np.ndarray | float) -> np.ndarray | float:
    return 1.0 / (1.0 + np.exp(-np.asarray(t)))


def _band_residuals(p_emp, p_model, floor):
    """Relative-error residuals for reporting: the +-0.1 band diagnostic.

    The symmetric denominator bounds the value in [-1, 1] even on one-count
    tail bins; wherever model and data agree to within the band this equals
    dividing by the empirical probability alone.
    """
    return (p_emp - p_model) / np.maximum(np.maximum(p_emp, p_model), floor)


def _pearson_residuals(p_emp, p_model, n_events):
    """Deviations scaled by the multinomial bin noise: the fit objective.

    Each count probability is weighted by its own magnitude (1/p), so bins
    spanning many orders of magnitude contribute on an equal statistical
    footing; the floor keeps empty-model bins from overwhelming the sum.
    """
    var = np.maximum(p_model, 0.5 / n_events) / n_events
    return (p_emp - p_model) / np.sqrt(var)


def _rejected(n: int) -> np.ndarray:
    """Residuals for an out-of-domain trial point: force step rejection."""
    return np.full(n, np.inf)


def _initial_noise_guess(
    hist: CountHistogram, n_stages: int, specified_gain: float | None
) -> NoiseParams:
    """Moment-based deterministic starting point for the noise fit."""
    xs = hist.counts()
    w = hist.tallies / hist.total
    neg = xs < 0
    if w[neg].sum() > 1e-4:
        sigma0 = math.sqrt(float(np.dot(w[neg], xs[neg] ** 2) / w[neg].sum()))
    else:
        sigma0 = max(float(np.sqrt(np.dot(w, (xs - hist.mean()) ** 2))) / 2.0, 1.0)
    if specified_gain is not None:
        gain0 = float(specified_gain)
    else:
        # log-slope of the histogram tail approximates -1/G
        tail = (xs > 5.0 * sigma0) & (w > 0)
        if tail.sum() >= 2:
            slope = np.polyfit(xs[tail], np.log(w[tail]), 1)[0]
            gain0 = float(np.clip(-1.0 / min(slope, -1e-9), 2.0, 1e5))
        else:
            gain0 = 100.0
    p_c0 = gain0 ** (1.0 / n_stages) - 1.0
    # tail mass above 5 sigma, inflated back through the exponential decay
    tail_mass = float(w[xs > 5.0 * sigma0].sum())
    p_cic0 = float(np.clip(tail_mass * math.exp(5.0 * sigma0 / gain0), 1e-4, 0.3))
    return NoiseParams(sigma0, p_cic0, 1e-4, GainRegister(p_c0, n_stages))


def fit_noise(
    hist: CountHistogram,
    n_stages: int,
    initial: NoiseParams | None = None,
    specified_gain: float | None = None,
    max_iter: int = 200,
) -> FitResult:
    """Fit the four dark-noise parameters to a corrected dark histogram.

    Read noise is fitted in log space, the three probabilities in logit
    space, so the parameter domains are enforced without constraints.
    Raises :class:`NonConvergenceError` on a singular Jacobian or when the
    iteration budget runs out.
    """
    if hist.total < MIN_FIT_EVENTS:
        raise ValueError(
            f"histogram has {hist.total} events; need >= {MIN_FIT_EVENTS}"
        )
    if initial is None:
        initial = _initial_noise_guess(hist, n_stages, specified_gain)
    nonzero = hist.tallies > 0
    xs = hist.counts()[nonzero]
    p_emp = hist.tallies[nonzero] / hist.total
    floor = 0.5 / hist.total

    # the serial probability is constrained by n_stages * p < 1, so the logit
    # acts on the per-register total rather than the per-stage value
    ser_total0 = max(initial.serial_prob * n_stages, 1e-6)
    theta0 = np.array(
        [
            math.log(initial.read_noise),
            _logit(initial.cic_prob if initial.cic_prob > 0 else 1e-6),
            _logit(ser_total0),
            _logit(initial.register.duplication_prob),
        ]
    )

    def unpack(theta):
        sigma = math.exp(theta[0])
        dup = float(_expit(theta[3]))
        if not (1e-3 < sigma < 1e4) or (1 + dup) ** n_stages > 1e6 or dup <= 0:
            raise ValueError("trial point outside usable domain")
        return NoiseParams(
            sigma,
            float(np.clip(_expit(theta[1]), 1e-15, 1 - 1e-12)),
            float(np.clip(_expit(theta[2]), 1e-15, 1 - 1e-9)) / n_stages,
            GainRegister(dup, n_stages),
        )

    def residual(theta):
        try:
            params = unpack(theta)
        except ValueError:
            return _rejected(xs.size)
        model = noise_pmf(params).at(xs)
        return _pearson_residuals(p_emp, model, hist.total)

    lm = levenberg_marquardt(residual, theta0, max_iter=max_iter)
    params = unpack(lm.x)
    names = ["read_noise", "cic_prob", "serial_prob", "duplication_prob"]
    values = [
        params.read_noise,
        params.cic_prob,
        params.serial_prob,
        params.register.duplication_prob,
    ]
    # delta method back from the transformed space
    ser_total = params.serial_prob * n_stages
    derivs = [
        params.read_noise,
        params.cic_prob * (1 - params.cic_prob),
        ser_total * (1 - ser_total) / n_stages,
        values[3] * (1 - values[3]),
    ]
    stderr = _delta_stderr(lm, names, derivs)
    logger.info(
        "noise fit converged in %d iterations: %s",
        lm.n_iter,
        {k: f"{v:.5g}" for k, v in zip(names, values)},
    )
    model = noise_pmf(params).at(xs)
    return FitResult(
        params=dict(zip(names, values)),
        stderr=stderr,
        residuals=_band_residuals(p_emp, model, floor),
        bins=xs,
        converged=True,
        n_iter=lm.n_iter,
        objective=lm.objective,
        objective_path=lm.objective_path,
        model=model,
        empirical=p_emp,
    )


def _delta_stderr(lm: LMResult, names, derivs) -> dict[str, float]:
    if lm.covariance is None:
        return {k: float("nan") for k in names}
    se_t = np.sqrt(np.clip(np.diag(lm.covariance), 0.0, None))
    return {k: float(se_t[i] * abs(derivs[i])) for i, k in enumerate(names)}


def estimate_intensity_map(frames, region: Region | None = None) -> np.ndarray:
    """Normalized illumination profile: clamped mean frame scaled to unit sum."""
    values = _crop(_stack_values(frames), region)
    if values.size == 0:
        raise ValueError("empty region")
    mean_frame = np.clip(values.mean(axis=0, dtype=np.float64), 0.0, None)
    total = mean_frame.sum()
    if total <= 0.0:
        raise ValueError("mean frame is all zero; cannot normalize")
    return mean_frame / total


def fit_photon_model(
    hist: CountHistogram,
    intensity: np.ndarray,
    noise: NoiseParams,
    initial_mu_f: float | None = None,
    max_iter: int = 200,
    max_components: int = 1024,
) -> FitResult:
    """Fit mean photons per frame and the duplication probability.

    Read noise, clock-induced charge and serial probabilities stay fixed at
    the dark-fit values; the duplication probability remains free because the
    effective gain drifts with illumination.
    """
    n_pixels = intensity.size
    n_stages = noise.register.n_stages
    if initial_mu_f is None:
        gain = noise.register.mean_gain
        initial_mu_f = max((hist.mean() - noise.mean()) * n_pixels / gain, 1.0)
    nonzero = hist.tallies > 0
    xs = hist.counts()[nonzero]
    p_emp = hist.tallies[nonzero] / hist.total
    floor = 0.5 / hist.total
    support = (int(hist.origin), int(hist.counts()[-1]))

    theta0 = np.array(
        [math.log(initial_mu_f), _logit(noise.register.duplication_prob)]
    )

    def unpack(theta):
        mu_f = math.exp(theta[0])
        dup = float(_expit(theta[1]))
        if (1 + dup) ** n_stages > 1e6 or dup <= 0:
            raise ValueError("trial point outside usable domain")
        params = NoiseParams(
            noise.read_noise,
            noise.cic_prob,
            noise.serial_prob,
            GainRegister(dup, n_stages),
        )
        return mu_f, params

    def residual(theta):
        if abs(theta[0]) > 50.0:
            raise NonConvergenceError("mu_f driven to bound")
        try:
            mu_f, params = unpack(theta)
        except ValueError:
            return _rejected(xs.size)
        model = pgn_pmf(mu_f, intensity, params, support, max_components).at(xs)
        return _pearson_residuals(p_emp, model, hist.total)

    lm = levenberg_marquardt(residual, theta0, max_iter=max_iter)
    mu_f, params = unpack(lm.x)
    names = ["mu_f", "duplication_prob"]
    p_c = params.register.duplication_prob
    stderr = _delta_stderr(lm, names, [mu_f, p_c * (1 - p_c)])
    logger.info(
        "photon fit converged in %d iterations: mu_f=%.6g p_dup=%.5g",
        lm.n_iter,
        mu_f,
        p_c,
    )
    model = pgn_pmf(mu_f, intensity, params, support, max_components).at(xs)
    return FitResult(
        params={"mu_f": mu_f, "duplication_prob": p_c},
        stderr=stderr,
        residuals=_band_residuals(p_emp, model, floor),
        bins=xs,
        converged=True,
        n_iter=lm.n_iter,
        objective=lm.objective,
        objective_path=lm.objective_path,
        model=model,
        empirical=p_emp,
    )


# --------------------------------------------------------------------------
# estimator layer


class FrameCorrector(BaseEstimator, TransformerMixin):
    """Learn the systematic-bias image from dark frames and subtract it.

    fit(X): X is a dark stack shaped (n_frames, height, width).
    transform(X): subtracts the learned correction from every frame.
    """

    def __init__(self, axis_swap: bool = False):
        self.axis_swap = axis_swap

    def fit(self, X, y=None):
        self.correction_ = compute_correction_image(X, axis_swap=self.axis_swap)
        return self

    def transform(self, X):
        if not hasattr(self, "correction_"):
            raise NotFittedError("FrameCorrector must be fitted first")
        corrected = correct(X, self.correction_)
        return corrected if isinstance(X, FrameStack) else corrected.values


class DarkNoiseModel(BaseEstimator):
    """Fit the dark-noise parameters from shutter-closed frames.

    After ``fit`` the estimator exposes ``noise_params_`` plus the individual
    ``read_noise_``, ``cic_prob_``, ``serial_prob_`` and ``duplication_prob_``
    attributes, and the full ``fit_result_``.
    """

    def __init__(
        self,
        n_stages: int = 552,
        specified_gain: float | None = None,
        initial: NoiseParams | None = None,
        region: Region | None = None,
        max_iter: int = 200,
    ):
        self.n_stages = n_stages
        self.specified_gain = specified_gain
        self.initial = initial
        self.region = region
        self.max_iter = max_iter

    def fit(self, X, y=None):
        hist = X if isinstance(X, CountHistogram) else count_histogram(X, self.region)
        result = fit_noise(
            hist,
            self.n_stages,
            initial=self.initial,
            specified_gain=self.specified_gain,
            max_iter=self.max_iter,
        )
        self.fit_result_ = result
        self.noise_params_ = result.noise_params(self.n_stages)
        self.read_noise_ = result.params["read_noise"]
        self.cic_prob_ = result.params["cic_prob"]
        self.serial_prob_ = result.params["serial_prob"]
        self.duplication_prob_ = result.params["duplication_prob"]
        return self


class PhotonRateModel(BaseEstimator):
    """Fit the mean photon rate of an illuminated, corrected stack.

    Requires the dark-noise parameters; estimates the intensity map from the
    stack itself unless one is supplied.
    """

    def __init__(
        self,
        noise: NoiseParams | None = None,
        intensity_map: np.ndarray | None = None,
        region: Region | None = None,
        initial_mu_f: float | None = None,
        max_iter: int = 200,
        max_components: int = 1024,
    ):
        self.noise = noise
        self.intensity_map = intensity_map
        self.region = region
        self.initial_mu_f = initial_mu_f
        self.max_iter = max_iter
        self.max_components = max_components

    def fit(self, X, y=None):
        if self.noise is None:
            raise ValueError("PhotonRateModel requires fitted noise parameters")
        if self.intensity_map is None:
            intensity = estimate_intensity_map(X, self.region)
        else:
            intensity = np.asarray(self.intensity_map)
        hist = count_histogram(X, self.region)
        result = fit_photon_model(
            hist,
            intensity,
            self.noise,
            initial_mu_f=self.initial_mu_f,
            max_iter=self.max_iter,
            max_components=self.max_components,
        )
        self.intensity_map_ = intensity
        self.fit_result_ = result
        self.mu_f_ = result.params["mu_f"]
        self.duplication_prob_ = result.params["duplication_prob"]
        self.noise_params_ = NoiseParams(
            self.noise.read_noise,
            self.noise.cic_prob,
            self.noise.serial_prob,
            GainRegister(self.duplication_prob_, self.noise.register.n_stages),
        )
        return self
