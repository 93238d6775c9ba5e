"""Command-line pipeline: simulate, calibrate, fit, count, correlate, reproduce.

One JSON config file fully determines a run; --set overrides individual
fields by dotted path.  Exit codes: 0 success, 2 config error, 3 numerical
non-convergence, 4 I/O error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io as pio
from .calibration import (
    compute_correction_image,
    correct,
    count_histogram,
    estimate_intensity_map,
    fit_noise,
    fit_photon_model,
)
from .correlation import quantum_correlation, snr, snr_vs_frames
from .distributions import GainRegister, NoiseParams
from .lm import NonConvergenceError
from .simulator import (
    CameraConfig,
    SpdcSource,
    simulate_dark_stack,
    simulate_frames,
    simulate_spdc_frames,
)
from .thresholding import build_threshold_map, count_photons

logger = logging.getLogger("emccd_pnr")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4


class ConfigError(ValueError):
    """A configuration problem, reported with the offending field path."""


class PipelineConfig:
    """Nested-dict config with dotted-path access and field-naming errors."""

    def __init__(self, data: dict):
        self.data = data

    @classmethod
    def load(cls, path, overrides=()) -> "PipelineConfig":
        try:
            with open(path) as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from None
        cfg = cls(data)
        for item in overrides:
            cfg.apply_override(item)
        return cfg

    def apply_override(self, item: str) -> None:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like path.to.field=value")
        dotted, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = self.data
        keys = dotted.split(".")
        for key in keys[:-1]:
            node = node.setdefault(key, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override path {dotted!r} crosses a non-section")
        node[keys[-1]] = value

    def get(self, dotted: str, default=None, required: bool = False):
        node = self.data
        for key in dotted.split("."):
            if not isinstance(node, dict) or key not in node:
                if required:
                    raise ConfigError(f"missing required config field: {dotted}")
                return default
            node = node[key]
        return node

    # typed section builders -------------------------------------------------

    def noise_params(self) -> NoiseParams:
        n_stages = int(self.get("camera.n_stages", 552))
        sec = self.get("noise", required=True)
        if not isinstance(sec, dict):
            raise ConfigError("noise: expected a section with parameter fields")
        try:
            if "duplication_prob" in sec:
                register = GainRegister(float(sec["duplication_prob"]), n_stages)
            elif "mean_gain" in sec:
                register = GainRegister.from_mean_gain(float(sec["mean_gain"]), n_stages)
            elif self.get("camera.specified_gain") is not None:
                register = GainRegister.from_mean_gain(
                    float(self.get("camera.specified_gain")), n_stages
                )
            else:
                raise ConfigError(
                    "noise: need duplication_prob, mean_gain, or camera.specified_gain"
                )
            return NoiseParams(
                float(sec["read_noise"]),
                float(sec["cic_prob"]),
                float(sec["serial_prob"]),
                register,
            )
        except KeyError as exc:
            raise ConfigError(f"noise.{exc.args[0]}: missing") from None
        except ValueError as exc:
            raise ConfigError(f"noise: {exc}") from None

    def camera(self) -> CameraConfig:
        width = int(self.get("camera.width", required=True))
        height = int(self.get("camera.height", required=True))
        bias_rows = self.get("camera.bias.rows")
        bias_cols = self.get("camera.bias.cols")
        if np.isscalar(bias_rows):
            bias_rows = np.full(height, float(bias_rows))
        if np.isscalar(bias_cols):
            bias_cols = np.full(width, float(bias_cols))
        try:
            return CameraConfig(
                width=width,
                height=height,
                noise=self.noise_params(),
                bias_rows=None if bias_rows is None else np.asarray(bias_rows, float),
                bias_cols=None if bias_cols is None else np.asarray(bias_cols, float),
                saturation=int(self.get("camera.saturation", 65535)),
            )
        except ValueError as exc:
            raise ConfigError(f"camera: {exc}") from None

    def intensity_map(self, camera: CameraConfig) -> np.ndarray:
        path = self.get("source.intensity_path")
        if path is not None:
            intensity = pio.read_correction_image(path)
        else:
            spot = self.get("source.gaussian_spot")
            if spot is None:
                raise ConfigError(
                    "source: need intensity_path or gaussian_spot for illumination"
                )
            sigma = float(spot.get("sigma", 10.0))
            cy = float(spot.get("center_row", camera.height / 2))
            cx = float(spot.get("center_col", camera.width / 2))
            yy, xx = np.mgrid[0 : camera.height, 0 : camera.width]
            intensity = np.exp(-(((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sigma**2)))
        total = intensity.sum()
        if total <= 0:
            raise ConfigError("source: intensity map has no mass")
        return intensity / total

    def spdc_source(self) -> SpdcSource:
        sec = self.get("source", required=True)
        try:
            return SpdcSource(
                pairs_per_frame=float(sec["pairs_per_frame"]),
                pair_sum_width=float(sec.get("pair_sum_width", 1.0)),
                envelope_center=tuple(sec["envelope_center"]),
                envelope_width=float(sec["envelope_width"]),
                background_rate=float(sec.get("background_rate", 0.0)),
            )
        except KeyError as exc:
            raise ConfigError(f"source.{exc.args[0]}: missing") from None
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"source: {exc}") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_simulate(args) -> int:
    cfg = PipelineConfig.load(args.config, args.set or ())
    camera = cfg.camera()
    seed = int(args.seed if args.seed is not None else cfg.get("seed", 0))
    n_frames = int(cfg.get("acquisition.n_frames", required=True))
    exposure = float(cfg.get("acquisition.exposure", 0.0))
    kind = cfg.get("source.kind", "dark")
    if kind == "dark":
        stack = simulate_dark_stack(camera, n_frames, seed, exposure)
    elif kind == "intensity":
        intensity = cfg.intensity_map(camera)
        mu_f = float(cfg.get("source.mu_f", required=True))
        stack = simulate_frames(intensity, mu_f, camera, n_frames, seed, exposure)
    elif kind == "spdc":
        stack = simulate_spdc_frames(cfg.spdc_source(), camera, n_frames, seed, exposure)
    else:
        raise ConfigError(f"source.kind: unknown kind {kind!r}")
    stack.meta.update({"seed": seed, "noise": pio.noise_to_json(camera.noise),
                       "source_kind": kind})
    out = _out_dir(args)
    pio.write_stack(out / "stack.ems", stack)
    logger.info("wrote %s (%d frames)", out / "stack.ems", stack.n_frames)
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = PipelineConfig.load(args.config, args.set or ())
    dark = pio.read_stack(args.dark)
    out = _out_dir(args)
    correction = compute_correction_image(dark)
    pio.write_correction_image(out / "correction.json", correction)
    corrected = correct(dark, correction)
    hist = count_histogram(corrected, _region(cfg))
    result = fit_noise(
        hist,
        int(cfg.get("camera.n_stages", 552)),
        specified_gain=cfg.get("camera.specified_gain"),
        max_iter=int(cfg.get("analysis.max_iter", 200)),
    )
    pio.write_fit_result(out / "noise_fit.json", result,
                         extra={"n_stages": int(cfg.get("camera.n_stages", 552))})
    pio.write_fit_csv(out / "noise_fit.csv", result)
    logger.info("noise fit: %s", result.params)
    return EXIT_OK


def cmd_fit_photons(args) -> int:
    cfg = PipelineConfig.load(args.config, args.set or ())
    stack = pio.read_stack(args.stack)
    correction = pio.read_correction_image(args.correction)
    noise = _load_noise(args.noise_fit)
    corrected = correct(stack, correction)
    region = _region(cfg)
    intensity = estimate_intensity_map(corrected, region)
    hist = count_histogram(corrected, region)
    result = fit_photon_model(
        hist,
        intensity,
        noise,
        max_iter=int(cfg.get("analysis.max_iter", 200)),
        max_components=int(cfg.get("analysis.max_components", 1024)),
    )
    out = _out_dir(args)
    pio.write_correction_image(out / "intensity.json", intensity)
    pio.write_fit_result(out / "photon_fit.json", result,
                         extra={"noise": pio.noise_to_json(noise)})
    pio.write_fit_csv(out / "photon_fit.csv", result)
    logger.info("photon fit: %s", result.params)
    return EXIT_OK


def cmd_count(args) -> int:
    cfg = PipelineConfig.load(args.config, args.set or ())
    stack = pio.read_stack(args.stack)
    correction = pio.read_correction_image(args.correction)
    noise = _load_noise(args.noise_fit)
    with open(args.photon_fit) as fh:
        photon_fit = json.load(fh)
    mu_f = float(photon_fit["params"]["mu_f"])
    noise = NoiseParams(
        noise.read_noise,
        noise.cic_prob,
        noise.serial_prob,
        GainRegister(
            float(photon_fit["params"]["duplication_prob"]),
            noise.register.n_stages,
        ),
    )
    intensity = pio.read_correction_image(args.intensity)
    corrected = correct(stack, correction)
    tmap = build_threshold_map(
        intensity / intensity.sum(),
        mu_f,
        noise,
        cutoff=float(cfg.get("analysis.cutoff", 0.05)),
        saturation=int(cfg.get("camera.saturation", 65535)),
        max_photons=cfg.get("analysis.max_photons"),
    )
    photons = count_photons(corrected.values, tmap)
    out = _out_dir(args)
    from .simulator import FrameStack

    pio.write_stack(
        out / "photons.ems",
        FrameStack(
            photons.astype(np.uint16),
            exposure=stack.exposure,
            tag="photon_counted",
            meta={"mu_f": mu_f, "cutoff": tmap.cutoff},
        ),
    )
    pio.write_threshold_map(out / "threshold_map.emt", tmap)
    logger.info("counted photons for %d frames", photons.shape[0])
    return EXIT_OK


def cmd_correlate(args) -> int:
    cfg = PipelineConfig.load(args.config, args.set or ())
    stack = pio.read_stack(args.stack)
    out = _out_dir(args)
    workers = _workers(args)
    frame_counts = cfg.get("analysis.frame_counts") or [stack.n_frames]
    signal_region = cfg.get("analysis.signal_region")
    if signal_region is not None:
        signal_region = tuple(int(v) for v in signal_region)
    if stack.tag == "photon_counted":
        corr = quantum_correlation(stack.values.astype(np.int64), workers=workers)
        pio.write_correlation_map(out / "correlation.emc", corr)
        report = snr(corr, signal_region=signal_region)
        rows = [
            {
                "n_frames": stack.n_frames,
                "method": "counted",
                "snr": report.snr,
                "signal_mean": report.signal_mean,
                "floor_mean": report.floor_mean,
                "floor_std": report.floor_std,
            }
        ]
    else:
        noise = _load_noise(args.noise_fit)
        methods = cfg.get("analysis.methods", ["3sigmaT"])
        tmap = pio.read_threshold_map(args.threshold_map) if args.threshold_map else None
        rows = snr_vs_frames(
            stack.values.astype(np.float64),
            methods,
            frame_counts,
            noise,
            threshold_map=tmap,
            signal_region=signal_region,
            workers=workers,
        )
        best = max(methods, key=lambda m: [r["snr"] for r in rows if r["method"] == m][-1])
        stacks_note = f"methods={methods}, best={best}"
        logger.info("correlate: %s", stacks_note)
    pio.write_snr_table(out / "snr.csv", rows)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    from .reproduce import run_reproduction

    out = _out_dir(args)
    seed = int(args.seed if args.seed is not None else 20240901)
    summary = run_reproduction(out, seed=seed, workers=_workers(args))
    print(json.dumps({k: summary[k]["pass"] for k in sorted(summary)}, indent=2))
    return EXIT_OK


# ---------------------------------------------------------------------------


def _region(cfg: PipelineConfig):
    region = cfg.get("analysis.region")
    return None if region is None else tuple(int(v) for v in region)


def _load_noise(path) -> NoiseParams:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"noise fit file not found: {path}") from None
    params = data["params"]
    return NoiseParams(
        params["read_noise"],
        params["cic_prob"],
        params["serial_prob"],
        GainRegister(params["duplication_prob"], int(data.get("n_stages", 552))),
    )


def _workers(args) -> int | None:
    threads = getattr(args, "threads", 0) or 0
    if threads == 0:
        return os.cpu_count()
    return int(threads)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="emccd-pnr",
        description="Photon-number-resolving EMCCD analysis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_config=True):
        if needs_config:
            p.add_argument("--config", required=True, help="JSON config file")
            p.add_argument(
                "--set",
                action="append",
                metavar="PATH=VALUE",
                help="override a config field by dotted path",
            )
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master RNG seed")
        p.add_argument(
            "--threads", type=int, default=0, help="FFT worker threads (0 = auto)"
        )

    p = sub.add_parser("simulate", help="generate a synthetic frame stack")
    common(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("calibrate", help="correction image + dark-noise fit")
    common(p)
    p.add_argument("--dark", required=True, help="dark frame-stack file")
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("fit-photons", help="fit the mean photon rate")
    common(p)
    p.add_argument("--stack", required=True)
    p.add_argument("--correction", required=True)
    p.add_argument("--noise-fit", required=True)
    p.set_defaults(func=cmd_fit_photons)

    p = sub.add_parser("count", help="convert counts to photon numbers")
    common(p)
    p.add_argument("--stack", required=True)
    p.add_argument("--correction", required=True)
    p.add_argument("--noise-fit", required=True)
    p.add_argument("--photon-fit", required=True)
    p.add_argument("--intensity", required=True)
    p.set_defaults(func=cmd_count)

    p = sub.add_parser("correlate", help="quantum correlation map and SNR study")
    common(p)
    p.add_argument("--stack", required=True, help="photon-counted or corrected stack")
    p.add_argument("--noise-fit", help="needed for thresholding raw stacks")
    p.add_argument("--threshold-map", help="threshold map for kpT methods")
    p.set_defaults(func=cmd_correlate)

    p = sub.add_parser("reproduce", help="desk-scale end-to-end reproduction")
    common(p, needs_config=False)
    p.set_defaults(func=cmd_reproduce)
    return parser


def main(argv=None) -> int:
    level = os.environ.get("EMCCD_PNR_LOG", "warn").lower()
    levels = {"error": logging.ERROR, "warn": logging.WARNING,
              "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(
        level=levels.get(level, logging.WARNING),
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NonConvergenceError as exc:
        print(f"fit failed to converge: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
