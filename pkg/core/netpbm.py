"""Binary PGM (P5) and PPM (P6) image files."""

from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image, UnidentifiedImageError

from .errors import ParseError


PathLike = Union[str, Path]


def to_bytes(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] floats to uint8 via round(255 * value)."""
    clipped = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(clipped * 255.0 + 0.5).astype(np.uint8)


def write_pgm(path: PathLike, gray: np.ndarray) -> None:
    """Write an (H, W) uint8 array as P5, maxval 255."""
    array = np.ascontiguousarray(gray, dtype=np.uint8)
    if array.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {array.shape}")
    Image.fromarray(array).save(Path(path), format="PPM")


def write_ppm(path: PathLike, rgb: np.ndarray) -> None:
    """Write an (H, W, 3) image as P6; float input is taken as [0, 1]."""
    array = np.asarray(rgb)
    if array.dtype != np.uint8:
        array = to_bytes(array)
    if array.ndim != 3 or array.shape[2] != 3:
        raise ValueError(f"PPM needs an (H, W, 3) array, got shape {array.shape}")
    Image.fromarray(np.ascontiguousarray(array)).save(Path(path), format="PPM")


def _read(path: PathLike, mode: str) -> np.ndarray:
    try:
        with Image.open(Path(path)) as image:
            if image.mode != mode:
                raise ParseError(f"{path}: expected {mode} image, found {image.mode}")
            return np.array(image, dtype=np.uint8)
    except (UnidentifiedImageError, OSError) as e:
        raise ParseError(f"{path}: cannot read image ({e})")


def read_pgm(path: PathLike) -> np.ndarray:
    return _read(path, "L")


def read_ppm(path: PathLike) -> np.ndarray:
    """Read a P6 file as float64 (H, W, 3) in [0, 1]."""
    return _read(path, "RGB").astype(np.float64) / 255.0
