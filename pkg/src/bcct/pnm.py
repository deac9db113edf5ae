"""Binary PPM (P6) and PGM (P5) readers/writers, 8-bit, maxval 255.

Everything on disk is lossless and codec-free; images round-trip bit-exactly.
Parse errors report the file and the byte offset where decoding failed.
"""

from __future__ import annotations

import numpy as np


class PnmError(ValueError):
    pass


def write_ppm(path, pixels: np.ndarray):
    """pixels: (3,H,W) float in [0,1] (quantized by round) or uint8."""
    if pixels.dtype != np.uint8:
        pixels = np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)
    c, h, w = pixels.shape
    if c != 3:
        raise PnmError(f"write_ppm expects 3 channels, got {c}")
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(pixels.transpose(1, 2, 0).tobytes())


def write_pgm(path, gray: np.ndarray):
    """gray: (H,W) uint8, or float in [0,1] quantized by round."""
    if gray.dtype != np.uint8:
        gray = np.round(np.clip(gray, 0.0, 1.0) * 255.0).astype(np.uint8)
    h, w = gray.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(gray.tobytes())


def _parse_header(buf: bytes, path) -> tuple:
    """Returns (magic, width, height, maxval, data_offset)."""
    pos = 0

    def err(msg, at):
        raise PnmError(f"{path}: {msg} at byte {at}")

    if len(buf) < 2:
        err("file too short for magic", 0)
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        err(f"bad magic {magic!r}, expected P5 or P6", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(buf):
            err("truncated header", pos)
        ch = buf[pos:pos + 1]
        if ch.isspace():
            pos += 1
        elif ch == b"#":
            nl = buf.find(b"\n", pos)
            if nl < 0:
                err("unterminated comment", pos)
            pos = nl + 1
        elif ch.isdigit():
            start = pos
            while pos < len(buf) and buf[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(buf[start:pos]))
        else:
            err(f"unexpected header byte {ch!r}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        err("missing whitespace after maxval", pos)
    pos += 1
    w, h, maxval = fields
    if w < 1 or h < 1:
        err(f"bad dimensions {w}x{h}", 2)
    if maxval != 255:
        err(f"unsupported maxval {maxval}, only 255", 2)
    return magic, w, h, maxval, pos


def read_ppm(path) -> np.ndarray:
    """Returns (3,H,W) float32 in [0,1]."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, w, h, _, off = _parse_header(buf, path)
    if magic != b"P6":
        raise PnmError(f"{path}: expected P6 color image, found {magic.decode()}")
    need = w * h * 3
    if len(buf) - off < need:
        raise PnmError(f"{path}: pixel data truncated at byte {len(buf)} (need {off + need})")
    raw = np.frombuffer(buf, dtype=np.uint8, count=need, offset=off)
    return (raw.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 255.0)


def read_pgm(path) -> np.ndarray:
    """Returns (H,W) uint8."""
    with open(path, "rb") as f:
        buf = f.read()
    magic, w, h, _, off = _parse_header(buf, path)
    if magic != b"P5":
        raise PnmError(f"{path}: expected P5 grayscale image, found {magic.decode()}")
    need = w * h
    if len(buf) - off < need:
        raise PnmError(f"{path}: pixel data truncated at byte {len(buf)} (need {off + need})")
    return np.frombuffer(buf, dtype=np.uint8, count=need, offset=off).reshape(h, w).copy()
