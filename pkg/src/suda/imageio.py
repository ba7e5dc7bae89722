"""Binary PGM (P5) and PPM (P6) writers and readers, maxval 255."""

import numpy as np

from .errors import DimensionError, FormatError


def to_uint8(values: np.ndarray) -> np.ndarray:
    """Clip to [0, 1] and quantize to 8 bits."""
    return np.clip(np.rint(np.clip(values, 0.0, 1.0) * 255.0), 0, 255).astype(np.uint8)


def write_pgm(path, gray: np.ndarray) -> None:
    gray = np.asarray(gray)
    if gray.ndim != 2:
        raise DimensionError(f"write_pgm: expected H x W, got {gray.shape}")
    if gray.dtype != np.uint8:
        gray = to_uint8(gray)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write a channels-first (3, H, W) image."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[0] != 3:
        raise DimensionError(f"write_ppm: expected 3 x H x W, got {rgb.shape}")
    if rgb.dtype != np.uint8:
        rgb = to_uint8(rgb)
    _, h, w = rgb.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.transpose(rgb, (1, 2, 0)).tobytes())


def _read_netpbm(path, magic):
    with open(path, "rb") as fh:
        blob = fh.read()
    if not blob.startswith(magic):
        raise FormatError(f"expected {magic.decode()} header", offset=0)
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated header", offset=pos)
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace byte after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise FormatError(f"unsupported maxval {maxval}", offset=pos)
    return blob, pos, w, h


def read_pgm(path):
    blob, pos, w, h = _read_netpbm(path, b"P5")
    need = w * h
    if len(blob) - pos < need:
        raise FormatError(f"pixel payload truncated, need {need} bytes", offset=len(blob))
    return np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos).reshape(h, w)


def read_ppm(path):
    blob, pos, w, h = _read_netpbm(path, b"P6")
    need = w * h * 3
    if len(blob) - pos < need:
        raise FormatError(f"pixel payload truncated, need {need} bytes", offset=len(blob))
    flat = np.frombuffer(blob, dtype=np.uint8, count=need, offset=pos)
    return np.transpose(flat.reshape(h, w, 3), (2, 0, 1))
