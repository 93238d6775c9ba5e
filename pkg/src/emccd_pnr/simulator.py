"""Stochastic forward model of the EMCCD signal chain and a biphoton source.

The cascade is simulated stage by stage with exact binomial duplication, so
it is an independent oracle for the Gamma output model rather than a
restatement of it.  Frame generation draws every frame from its own RNG
stream spawned from the master seed, so a stack is bit-identical for a given
seed no matter how frames are scheduled.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .distributions import GainRegister, NoiseParams, check_intensity_map

__all__ = [
    "CameraConfig",
    "Frame",
    "FrameStack",
    "SpdcSource",
    "frame_rng",
    "cascade",
    "simulate_dark_frame",
    "simulate_dark_stack",
    "simulate_frames",
    "simulate_spdc_frames",
    "estimate_gain_distribution_moments",
]


@dataclass(frozen=True)
class CameraConfig:
    """Sensor geometry plus the dark-noise model and systematic offsets."""

    width: int
    height: int
    noise: NoiseParams
    bias_rows: np.ndarray | None = None  # additive offset per row (counts)
    bias_cols: np.ndarray | None = None  # additive offset per column (counts)
    saturation: int = 65535

    def __post_init__(self) -> None:
        if self.width < 1 or self.height < 1:
            raise ValueError("sensor dimensions must be at least 1x1")
        if self.bias_rows is not None and len(self.bias_rows) != self.height:
            raise ValueError("bias_rows length must equal height")
        if self.bias_cols is not None and len(self.bias_cols) != self.width:
            raise ValueError("bias_cols length must equal width")

    def bias_image(self) -> np.ndarray:
        bias = np.zeros((self.height, self.width))
        if self.bias_rows is not None:
            bias += np.asarray(self.bias_rows, dtype=np.float64)[:, None]
        if self.bias_cols is not None:
            bias += np.asarray(self.bias_cols, dtype=np.float64)[None, :]
        return bias


@dataclass(frozen=True)
class Frame:
    """One exposure: integer counts as acquired, real-valued once corrected."""

    values: np.ndarray
    exposure: float = 0.0
    tag: str = "simulated"

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]


@dataclass
class FrameStack:
    """A sequence of frames sharing geometry, exposure and provenance."""

    values: np.ndarray  # (n_frames, height, width)
    exposure: float = 0.0
    tag: str = "simulated"
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.values.ndim != 3:
            raise ValueError("stack values must be (n_frames, height, width)")

    @property
    def n_frames(self) -> int:
        return self.values.shape[0]

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]

    def frame(self, j: int) -> Frame:
        return Frame(self.values[j], exposure=self.exposure, tag=self.tag)


@dataclass(frozen=True)
class SpdcSource:
    """Momentum-plane biphoton source.

    Pairs land anti-correlated about ``envelope_center``: the sum of the two
    positions is Gaussian with width ``pair_sum_width`` (narrow), while each
    photon individually follows the wide Gaussian beam envelope.  Background
    singles (uncorrelated, envelope-shaped) can be mixed in.
    """

    pairs_per_frame: float
    pair_sum_width: float
    envelope_center: tuple[float, float]
    envelope_width: float
    background_rate: float = 0.0

    def __post_init__(self) -> None:
        if self.pairs_per_frame < 0.0:
            raise ValueError("pairs_per_frame must be non-negative")
        if self.pair_sum_width < 0.0:
            raise ValueError("pair_sum_width must be non-negative")
        if self.envelope_width <= 0.0:
            raise ValueError("envelope_width must be positive")
        if self.background_rate < 0.0:
            raise ValueError("background_rate must be non-negative")


def frame_rng(seed: int, index: int) -> np.random.Generator:
    """Independent per-frame stream: spawn key ``index`` off the master seed."""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(index,)))


def _cascade_values(values: np.ndarray, register: GainRegister, rng) -> np.ndarray:
    """Amplify an array of electron counts through the full register."""
    out = np.asarray(values, dtype=np.int64).copy()
    p = register.duplication_prob
    for _ in range(register.n_stages):
        out += rng.binomial(out, p)
    return out


def cascade(k: int, register: GainRegister, rng: np.random.Generator) -> int:
    """One stochastic amplification of ``k`` electrons (exact per-stage binomial)."""
    if k < 0:
        raise ValueError("electron number must be non-negative")
    return int(_cascade_values(np.array([k]), register, rng)[0])


def _amplify_pixels(
    idx: np.ndarray,
    vals: np.ndarray,
    n_pixels: int,
    noise: NoiseParams,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Run pixel electron counts through the register, injecting serial births.

    Each stage duplicates every electron independently with the stage
    probability.  That is sampled exactly but cheaply by drawing the total
    number of duplications (binomial over all electrons) and scattering them
    over pixels with a multivariate hypergeometric split, which has the same
    joint law as per-pixel binomials.

    An electron born after stage m is duplicated in the remaining stages only,
    so its mean gain is (1 + p)**(n_stages - m); births at the last stage
    leave the register unamplified.
    """
    reg = noise.register
    p = reg.duplication_prob
    n_stages = reg.n_stages
    idx = np.asarray(idx, dtype=np.int64)
    vals = np.asarray(vals, dtype=np.int64)

    # plan every in-register birth up front: one Bernoulli per (pixel, stage)
    # slot, drawn as a pooled binomial plus a uniform distinct-slot choice
    if noise.serial_prob > 0.0:
        n_births = int(rng.binomial(n_pixels * n_stages, noise.serial_prob))
    else:
        n_births = 0
    if n_births:
        slots = rng.choice(n_pixels * n_stages, size=n_births, replace=False)
        birth_stage = slots // n_pixels
        birth_pixel = slots % n_pixels
        order = np.argsort(birth_stage, kind="stable")
        birth_stage = birth_stage[order]
        birth_pixel = birth_pixel[order]
        stage_starts = np.searchsorted(birth_stage, np.arange(n_stages + 1))
    idx_buf = np.empty(idx.size + n_births, dtype=np.int64)
    val_buf = np.empty(idx.size + n_births, dtype=np.int64)
    idx_buf[: idx.size] = idx
    val_buf[: idx.size] = vals
    active = idx.size
    total = int(vals.sum())

    for stage in range(n_stages):
        if total:
            births = rng.binomial(total, p)
            if births:
                val_buf[:active] += rng.multivariate_hypergeometric(
                    val_buf[:active], births, method="count"
                )
                total += int(births)
        if n_births:
            s0, s1 = stage_starts[stage], stage_starts[stage + 1]
            if s1 > s0:
                idx_buf[active : active + s1 - s0] = birth_pixel[s0:s1]
                val_buf[active : active + s1 - s0] = 1
                active += s1 - s0
                total += s1 - s0
    return idx_buf[:active], val_buf[:active]


def _detect_frame(
    photoelectrons: np.ndarray,
    config: CameraConfig,
    rng: np.random.Generator,
    bias: np.ndarray | None = None,
) -> np.ndarray:
    """Full detector chain for one frame of per-pixel photoelectron counts.

    Order of random draws is fixed (CIC, cascade/serial, read noise) so a
    frame is reproducible from its stream alone.
    """
    n_pixels = config.width * config.height
    flat = np.asarray(photoelectrons, dtype=np.int64).ravel()
    cic = np.flatnonzero(rng.random(n_pixels) < config.noise.cic_prob)
    flat = flat.copy()
    flat[cic] += 1
    idx = np.flatnonzero(flat)
    idx, vals = _amplify_pixels(idx, flat[idx], n_pixels, config.noise, rng)
    electrons = np.zeros(n_pixels, dtype=np.float64)
    np.add.at(electrons, idx, vals)
    counts = electrons + rng.normal(0.0, config.noise.read_noise, n_pixels)
    counts = counts.reshape(config.height, config.width)
    if bias is not None:
        counts = counts + bias
    return np.clip(np.rint(counts), 0, config.saturation).astype(np.uint16)


def simulate_dark_frame(config: CameraConfig, rng: np.random.Generator) -> Frame:
    """One shutter-closed exposure."""
    zeros = np.zeros((config.height, config.width), dtype=np.int64)
    values = _detect_frame(zeros, config, rng, config.bias_image())
    return Frame(values, tag="simulated")


def simulate_dark_stack(
    config: CameraConfig, n_frames: int, seed: int, exposure: float = 0.0
) -> FrameStack:
    """Stack of shutter-closed frames, one RNG stream per frame."""
    out = np.empty((n_frames, config.height, config.width), dtype=np.uint16)
    bias = config.bias_image()
    zeros = np.zeros((config.height, config.width), dtype=np.int64)
    for j in range(n_frames):
        out[j] = _detect_frame(zeros, config, frame_rng(seed, j), bias)
    return FrameStack(out, exposure=exposure, tag="simulated", meta={"seed": seed})


def simulate_frames(
    intensity: np.ndarray,
    mu_f: float,
    config: CameraConfig,
    n_frames: int,
    seed: int,
    exposure: float = 0.0,
    return_photons: bool = False,
):
    """Illuminated stack: Poisson photoelectrons per pixel, full detector chain.

    With ``return_photons`` the per-pixel photoelectron draws come back
    alongside the stack, as ground truth for classification studies.
    """
    intensity = check_intensity_map(intensity)
    if intensity.shape != (config.height, config.width):
        raise ValueError(
            f"intensity map {intensity.shape} does not match sensor "
            f"({config.height}, {config.width})"
        )
    if mu_f < 0.0:
        raise ValueError("mean photons per frame must be non-negative")
    mu_pixels = mu_f * intensity
    out = np.empty((n_frames, config.height, config.width), dtype=np.uint16)
    drawn = np.empty_like(out) if return_photons else None
    bias = config.bias_image()
    for j in range(n_frames):
        rng = frame_rng(seed, j)
        photons = rng.poisson(mu_pixels)
        if drawn is not None:
            drawn[j] = photons
        out[j] = _detect_frame(photons, config, rng, bias)
    stack = FrameStack(
        out,
        exposure=exposure,
        tag="simulated",
        meta={"seed": seed, "mu_f": mu_f},
    )
    return (stack, drawn) if return_photons else stack


def _pixelate(positions: np.ndarray, config: CameraConfig) -> np.ndarray:
    """Continuous (y, x) positions -> per-pixel photon counts; off-sensor dropped."""
    counts = np.zeros((config.height, config.width), dtype=np.int64)
    if positions.size == 0:
        return counts
    pix = np.floor(positions).astype(np.int64)
    keep = (
        (pix[:, 0] >= 0)
        & (pix[:, 0] < config.height)
        & (pix[:, 1] >= 0)
        & (pix[:, 1] < config.width)
    )
    pix = pix[keep]
    np.add.at(counts, (pix[:, 0], pix[:, 1]), 1)
    return counts


def simulate_spdc_frames(
    source: SpdcSource,
    config: CameraConfig,
    n_frames: int,
    seed: int,
    exposure: float = 0.0,
) -> FrameStack:
    """Biphoton stack: anti-correlated pairs about the envelope center.

    Per pair, one photon samples the envelope and its twin sits at the
    mirrored position plus sum-coordinate jitter of width ``pair_sum_width``.
    """
    cy, cx = source.envelope_center
    margin = 3.0 * source.envelope_width
    if (
        cy - margin < 0
        or cy + margin > config.height
        or cx - margin < 0
        or cx + margin > config.width
    ):
        raise ValueError("source envelope extends off-sensor beyond 3 sigma")
    center = np.array([cy, cx])
    out = np.empty((n_frames, config.height, config.width), dtype=np.uint16)
    bias = config.bias_image()
    for j in range(n_frames):
        rng = frame_rng(seed, j)
        n_pairs = rng.poisson(source.pairs_per_frame)
        first = center + rng.normal(0.0, source.envelope_width, (n_pairs, 2))
        pair_sum = 2.0 * center + rng.normal(0.0, source.pair_sum_width, (n_pairs, 2))
        second = pair_sum - first
        n_bg = rng.poisson(source.background_rate)
        singles = center + rng.normal(0.0, source.envelope_width, (n_bg, 2))
        photons = _pixelate(np.concatenate((first, second, singles)), config)
        out[j] = _detect_frame(photons, config, rng, bias)
    return FrameStack(
        out,
        exposure=exposure,
        tag="simulated",
        meta={"seed": seed, "pairs_per_frame": source.pairs_per_frame},
    )


def estimate_gain_distribution_moments(
    k: int, register: GainRegister, n_samples: int, rng: np.random.Generator
) -> tuple[float, float]:
    """Sample mean and variance of the cascade output for ``k`` input electrons."""
    if n_samples < 1:
        raise ValueError("n_samples must be at least 1")
    samples = _cascade_values(np.full(n_samples, k, dtype=np.int64), register, rng)
    return float(samples.mean()), float(samples.var())
