"""File formats: binary PGM images with a JSON sidecar, and sinogram CSV."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .geometry import RaySet, Sinogram

SINOGRAM_HEADER = ["angle_index", "bin_index", "n_pixels", "y"]


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_suffix(".json")


def write_pgm(path, image: np.ndarray, meta: dict | None = None) -> None:
    """Write a {-1, +1} image as an 8-bit P5 PGM (0 for -1, 255 for +1).

    When ``meta`` is given it is written next to the image as ``<stem>.json``.
    """
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError("expected a 2-D image")
    h, w = image.shape
    data = np.where(image > 0, 255, 0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
    if meta is not None:
        with open(sidecar_path(path), "w") as f:
            json.dump(meta, f, indent=2, sort_keys=True)
            f.write("\n")


def _pgm_tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    tokens, pos = [], 0
    while len(tokens) < count:
        while buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            pos = buf.index(b"\n", pos) + 1
            continue
        start = pos
        while not buf[pos:pos + 1].isspace():
            pos += 1
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm(path) -> np.ndarray:
    """Read a P5 PGM written by :func:`write_pgm` (or any 8-bit P5) as spins."""
    buf = Path(path).read_bytes()
    (magic, w, h, maxval), offset = _pgm_tokens(buf, 4)
    if magic != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {magic!r})")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise ValueError(f"{path}: 16-bit PGM not supported")
    data = np.frombuffer(buf, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)
    return np.where(data.astype(np.int64) * 2 >= maxval, 1, -1).astype(np.int8)


def read_sidecar(path) -> dict:
    p = sidecar_path(path)
    if not p.exists():
        return {}
    return json.loads(p.read_text())


def write_sinogram(path, sino: Sinogram) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SINOGRAM_HEADER)
        for a, b, n, y in zip(sino.angle_index, sino.bin_index, sino.n_pixels, sino.values):
            w.writerow([int(a), int(b), int(n), repr(float(y))])


def read_sinogram(path, rays: RaySet | None = None) -> Sinogram:
    """Read a sinogram CSV; if ``rays`` is given the rows are checked against it."""
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames != SINOGRAM_HEADER:
            raise ValueError(f"{path}: expected header {','.join(SINOGRAM_HEADER)}")
        rows = list(reader)
    sino = Sinogram(
        values=np.array([float(r["y"]) for r in rows]),
        angle_index=np.array([int(r["angle_index"]) for r in rows], dtype=np.int64),
        bin_index=np.array([int(r["bin_index"]) for r in rows], dtype=np.int64),
        n_pixels=np.array([int(r["n_pixels"]) for r in rows], dtype=np.int64),
    )
    if rays is not None:
        sino.check_geometry(rays)
    return sino
