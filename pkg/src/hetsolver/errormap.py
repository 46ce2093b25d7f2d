"""Space-time error heatmaps written as binary PPM plus a CSV matrix."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import IoError

# Linear ramp endpoints (RGB) for zero and maximum error.
RAMP_LOW = np.array([16, 24, 96], dtype=np.float64)
RAMP_HIGH = np.array([250, 220, 40], dtype=np.float64)


def error_matrix(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-node Euclidean error over channels, shape (T, n)."""
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return np.sqrt(np.sum((pred - truth) ** 2, axis=-1))


def to_rgb(errors: np.ndarray) -> np.ndarray:
    """Map a (T, n) matrix to an (n, T, 3) uint8 image, time along x."""
    finite = errors[np.isfinite(errors)]
    top = float(finite.max()) if finite.size else 0.0
    frac = errors.T / top if top > 0 else np.zeros_like(errors.T)
    # Diverged (non-finite) cells take the top colour.
    frac = np.where(np.isfinite(errors.T), frac, 1.0)
    rgb = RAMP_LOW + frac[..., None] * (RAMP_HIGH - RAMP_LOW)
    return np.rint(rgb).astype(np.uint8)


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    height, width, _ = image.shape
    try:
        with open(path, "wb") as fh:
            fh.write(f"P6\n{width} {height}\n255\n".encode("ascii"))
            fh.write(np.ascontiguousarray(image, dtype=np.uint8).tobytes())
    except OSError as err:
        raise IoError(f"cannot write {path}: {err}") from err


def read_ppm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    magic, dims, maxval, pixels = raw.split(b"\n", 3)
    if magic != b"P6" or maxval != b"255":
        raise IoError(f"{path} is not an 8-bit binary PPM")
    width, height = map(int, dims.split())
    return np.frombuffer(pixels, dtype=np.uint8).reshape(height, width, 3)


def write_matrix_csv(path: str | Path, matrix: np.ndarray) -> None:
    try:
        with open(path, "w", newline="\n") as fh:
            for row in matrix:
                fh.write(",".join(repr(float(x)) for x in row) + "\n")
    except OSError as err:
        raise IoError(f"cannot write {path}: {err}") from err
