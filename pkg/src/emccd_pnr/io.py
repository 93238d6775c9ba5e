"""On-disk formats: frame stacks, threshold maps, fits, and plot CSVs.

Frame stacks are a single JSON header line followed by raw little-endian
pixel data, frame-major and row-major within a frame.  All writers are
deterministic for identical inputs: no timestamps, stable key order.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .calibration import FitResult
from .correlation import CorrelationMap
from .distributions import GainRegister, NoiseParams
from .simulator import FrameStack
from .thresholding import ThresholdMap, ThresholdSet

STACK_MAGIC = "EMCCD-STACK/1"
TMAP_MAGIC = "EMCCD-TMAP/1"
CORR_MAGIC = "EMCCD-CORR/1"

_DTYPES = {"u16": np.dtype("<u2"), "f32": np.dtype("<f4"), "i32": np.dtype("<i4")}

__all__ = [
    "STACK_MAGIC",
    "write_stack",
    "read_stack",
    "write_threshold_map",
    "read_threshold_map",
    "write_correction_image",
    "read_correction_image",
    "write_fit_result",
    "write_fit_csv",
    "write_correlation_map",
    "read_correlation_map",
    "write_snr_table",
]


def _dump_header(header: dict) -> bytes:
    return (json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n").encode()


def _read_header(fh) -> dict:
    return json.loads(fh.readline().decode())


def noise_to_json(params: NoiseParams) -> dict:
    return {
        "read_noise": params.read_noise,
        "cic_prob": params.cic_prob,
        "serial_prob": params.serial_prob,
        "duplication_prob": params.register.duplication_prob,
        "n_stages": params.register.n_stages,
    }


def noise_from_json(obj: dict) -> NoiseParams:
    return NoiseParams(
        obj["read_noise"],
        obj["cic_prob"],
        obj["serial_prob"],
        GainRegister(obj["duplication_prob"], obj["n_stages"]),
    )


def write_stack(path, stack: FrameStack, dtype: str | None = None) -> None:
    """Write a frame stack; u16 for acquired/simulated counts, f32 otherwise."""
    if dtype is None:
        dtype = "u16" if np.issubdtype(stack.values.dtype, np.integer) else "f32"
    if dtype not in _DTYPES:
        raise ValueError(f"unsupported dtype {dtype!r}")
    header = {
        "magic": STACK_MAGIC,
        "version": 1,
        "width": stack.width,
        "height": stack.height,
        "n_frames": stack.n_frames,
        "dtype": dtype,
        "exposure": stack.exposure,
        "tag": stack.tag,
        "meta": _jsonable(stack.meta),
    }
    payload = np.ascontiguousarray(stack.values, dtype=_DTYPES[dtype])
    with open(path, "wb") as fh:
        fh.write(_dump_header(header))
        fh.write(payload.tobytes())


def read_stack(path) -> FrameStack:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        if header.get("magic") != STACK_MAGIC:
            raise ValueError(f"{path}: not a frame-stack file")
        shape = (header["n_frames"], header["height"], header["width"])
        dtype = _DTYPES[header["dtype"]]
        raw = fh.read(int(np.prod(shape)) * dtype.itemsize)
    values = np.frombuffer(raw, dtype=dtype)
    if values.size != np.prod(shape):
        raise ValueError(f"{path}: truncated payload")
    return FrameStack(
        values.reshape(shape).copy(),
        exposure=header["exposure"],
        tag=header["tag"],
        meta=header.get("meta", {}),
    )


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def write_threshold_map(path, tmap: ThresholdMap) -> None:
    """Binary file: JSON header with the threshold sets, then the group index."""
    header = {
        "magic": TMAP_MAGIC,
        "version": 1,
        "height": tmap.shape[0],
        "width": tmap.shape[1],
        "mu_f": tmap.mu_f,
        "cutoff": tmap.cutoff,
        "saturation": tmap.saturation,
        "noise": noise_to_json(tmap.noise),
        "sets": [
            {"mu": s.mu, "intervals": [list(iv) for iv in s.intervals]}
            for s in tmap.sets
        ],
    }
    with open(path, "wb") as fh:
        fh.write(_dump_header(header))
        fh.write(np.ascontiguousarray(tmap.group_index, dtype="<i4").tobytes())


def read_threshold_map(path) -> ThresholdMap:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        if header.get("magic") != TMAP_MAGIC:
            raise ValueError(f"{path}: not a threshold-map file")
        shape = (header["height"], header["width"])
        raw = fh.read(int(np.prod(shape)) * 4)
    noise = noise_from_json(header["noise"])
    sets = [
        ThresholdSet(
            mu=s["mu"],
            cutoff=header["cutoff"],
            saturation=header["saturation"],
            intervals=tuple(tuple(iv) for iv in s["intervals"]),
        )
        for s in header["sets"]
    ]
    return ThresholdMap(
        mu_f=header["mu_f"],
        cutoff=header["cutoff"],
        saturation=header["saturation"],
        noise=noise,
        group_index=np.frombuffer(raw, dtype="<i4").reshape(shape).copy(),
        sets=sets,
    )


def write_correction_image(path, correction: np.ndarray) -> None:
    """JSON descriptor plus raw f32 image under the same stem (.bin)."""
    path = Path(path)
    bin_path = path.with_suffix(".bin")
    corr = np.ascontiguousarray(correction, dtype="<f4")
    with open(path, "w") as fh:
        json.dump(
            {
                "magic": "EMCCD-CORRECTION/1",
                "height": corr.shape[0],
                "width": corr.shape[1],
                "data": bin_path.name,
                "mean": float(correction.mean()),
            },
            fh,
            sort_keys=True,
            indent=2,
        )
        fh.write("\n")
    bin_path.write_bytes(corr.tobytes())


def read_correction_image(path) -> np.ndarray:
    path = Path(path)
    with open(path) as fh:
        header = json.load(fh)
    raw = (path.parent / header["data"]).read_bytes()
    return (
        np.frombuffer(raw, dtype="<f4")
        .reshape(header["height"], header["width"])
        .astype(np.float64)
    )


def write_fit_result(path, result: FitResult, extra: dict | None = None) -> None:
    payload = {
        "params": result.params,
        "stderr": result.stderr,
        "converged": result.converged,
        "n_iter": result.n_iter,
        "objective": result.objective,
        "n_bins": int(result.bins.size),
    }
    if extra:
        payload.update(_jsonable(extra))
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_fit_csv(path, result: FitResult) -> None:
    """Histogram-vs-model table: count, p_emp, p_model, weighted_residual."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["count", "p_emp", "p_model", "weighted_residual"])
        for x, pe, pm, r in zip(
            result.bins, result.empirical, result.model, result.residuals
        ):
            writer.writerow([int(x), f"{pe:.10e}", f"{pm:.10e}", f"{r:.8f}"])


def write_correlation_map(path, corr: CorrelationMap) -> None:
    header = {
        "magic": CORR_MAGIC,
        "version": 1,
        "height": corr.values.shape[0],
        "width": corr.values.shape[1],
        "n_frames": corr.n_frames,
        "method": corr.method,
        "dtype": "f32",
    }
    with open(path, "wb") as fh:
        fh.write(_dump_header(header))
        fh.write(np.ascontiguousarray(corr.values, dtype="<f4").tobytes())


def read_correlation_map(path) -> CorrelationMap:
    with open(path, "rb") as fh:
        header = _read_header(fh)
        if header.get("magic") != CORR_MAGIC:
            raise ValueError(f"{path}: not a correlation-map file")
        raw = fh.read(header["height"] * header["width"] * 4)
    values = (
        np.frombuffer(raw, dtype="<f4")
        .reshape(header["height"], header["width"])
        .astype(np.float64)
    )
    return CorrelationMap(values, header["n_frames"], header["method"])


def write_snr_table(path, rows: list[dict]) -> None:
    """CSV with columns n_frames, method, snr, signal_mean, floor_mean, floor_std."""
    fields = ["n_frames", "method", "snr", "signal_mean", "floor_mean", "floor_std"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
