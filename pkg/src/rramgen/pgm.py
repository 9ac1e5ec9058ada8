"""Minimal PGM (portable graymap) reader and writer, P2 and P5."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .errors import ParseError


def _tokens(data: bytes, count, start=0):
    """Read ``count`` whitespace-separated header tokens, skipping ``#`` comments."""
    out, pos = [], start
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= len(data):
            raise ParseError("truncated PGM header")
        if data[pos:pos + 1] == b"#":
            pos = data.find(b"\n", pos)
            pos = len(data) if pos < 0 else pos + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        out.append(data[pos:end])
        pos = end
    return out, pos


def read_pgm(path):
    """Return the image as floats in [0, 1] (divided by the maximum gray value)."""
    data = Path(path).read_bytes()
    (magic, w, h, maxval), pos = _tokens(data, 4)
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise ParseError(f"{path}: bad PGM header") from None
    if not (w > 0 and h > 0 and 0 < maxval < 65536):
        raise ParseError(f"{path}: bad PGM dimensions or maxval")
    if magic == b"P5":
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
        raw = data[pos + 1: pos + 1 + w * h * dtype.itemsize]
        if len(raw) != w * h * dtype.itemsize:
            raise ParseError(f"{path}: truncated pixel data")
        pix = np.frombuffer(raw, dtype=dtype).astype(float)
    elif magic == b"P2":
        try:
            pix = np.array(data[pos:].split(), dtype=float)
        except ValueError:
            raise ParseError(f"{path}: non-numeric pixel data") from None
        if pix.size != w * h:
            raise ParseError(f"{path}: expected {w * h} pixels, found {pix.size}")
    else:
        raise ParseError(f"{path}: not a PGM file (magic {magic!r})")
    return pix.reshape(h, w) / maxval


def write_pgm(path, image, maxval=255, binary=True):
    """Write values in [0, 1] as an 8- or 16-bit PGM."""
    img = np.clip(np.asarray(image, dtype=float), 0.0, 1.0)
    pix = np.rint(img * maxval).astype(int)
    h, w = pix.shape
    header = f"P{5 if binary else 2}\n{w} {h}\n{maxval}\n".encode()
    if binary:
        body = pix.astype(">u2" if maxval > 255 else "u1").tobytes()
    else:
        body = ("\n".join(" ".join(map(str, row)) for row in pix) + "\n").encode()
    Path(path).write_bytes(header + body)
