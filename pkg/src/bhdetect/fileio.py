"""Binary PGM codec and atomic file writes."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode())


def pgm_bytes(image: np.ndarray) -> bytes:
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"PGM needs a 2-D uint8 array, got {img.dtype} {img.shape}")
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode() + img.tobytes()


def write_pgm(path, image: np.ndarray) -> None:
    atomic_write_bytes(path, pgm_bytes(image))


def _header_tokens(data: bytes, path):
    """Yield (token, offset) for the four P5 header fields, skipping comments."""
    pos, n = 0, len(data)
    for _ in range(4):
        while pos < n:
            ch = data[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                while pos < n and data[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
        start = pos
        while pos < n and not data[pos : pos + 1].isspace() and data[pos : pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ParseError(path, start, "unexpected end of PGM header")
        yield data[start:pos], start
    if pos >= n or not data[pos : pos + 1].isspace():
        raise ParseError(path, pos, "missing whitespace after PGM maxval")
    yield None, pos + 1


def parse_pgm(data: bytes, path="<bytes>") -> np.ndarray:
    toks = list(_header_tokens(data, path))
    (magic, _), (w_tok, w_off), (h_tok, h_off), (m_tok, m_off), (_, body) = toks
    if magic != b"P5":
        raise ParseError(path, 0, f"expected binary PGM magic 'P5', got {magic!r}")
    vals = []
    for tok, off, what in ((w_tok, w_off, "width"), (h_tok, h_off, "height"), (m_tok, m_off, "maxval")):
        if not tok.isdigit():
            raise ParseError(path, off, f"{what} is not a decimal integer: {tok!r}")
        vals.append(int(tok))
    w, h, maxval = vals
    if w < 1 or h < 1:
        raise ParseError(path, w_off, f"non-positive image size {w}x{h}")
    if not 1 <= maxval <= 255:
        raise ParseError(path, m_off, f"unsupported maxval {maxval} (8-bit only)")
    need = w * h
    if len(data) - body < need:
        raise ParseError(path, len(data), f"pixel data truncated: need {need} bytes, have {len(data) - body}")
    if len(data) - body > need:
        raise ParseError(path, body + need, "trailing bytes after pixel data")
    return np.frombuffer(data, dtype=np.uint8, count=need, offset=body).reshape(h, w).copy()


def read_pgm(path) -> np.ndarray:
    path = Path(path)
    return parse_pgm(path.read_bytes(), path)
