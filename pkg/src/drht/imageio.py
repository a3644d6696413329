"""PFM (HDR) and binary PPM (LDR) readers and writers.

Images are (height, width, 3) arrays, rows top to bottom. PFM payloads are
32-bit floats stored bottom row first; PPM is P6 with maxval 255.
"""

import numpy as np


class ImageFormatError(ValueError):
    pass


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class NonFiniteImageError(ImageFormatError):
    pass


class UnsupportedFormatError(ImageFormatError):
    pass


def _check_rgb(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    return image


def pfm_header(width, height):
    return f"PF\n{width} {height}\n-1.0\n".encode("ascii")


def write_pfm(path, image):
    image = _check_rgb(image)
    if not np.all(np.isfinite(image)):
        raise NonFiniteImageError(f"{path}: refusing to write non-finite radiance")
    h, w, _ = image.shape
    payload = np.ascontiguousarray(image[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as f:
        f.write(pfm_header(w, h))
        f.write(payload)


def _read_token_lines(f, count):
    lines = []
    for _ in range(count):
        line = f.readline()
        if not line.endswith(b"\n"):
            raise MalformedHeaderError("unterminated header line")
        lines.append(line.decode("ascii", errors="replace").strip())
    return lines


def read_pfm(path):
    with open(path, "rb") as f:
        try:
            tag, dims, scale_line = _read_token_lines(f, 3)
        except MalformedHeaderError as e:
            raise MalformedHeaderError(f"{path}: {e}") from None
        if tag != "PF":
            raise MalformedHeaderError(f"{path}: expected 'PF' colour PFM, got {tag!r}")
        try:
            w, h = (int(v) for v in dims.split())
            scale = float(scale_line)
        except ValueError:
            raise MalformedHeaderError(f"{path}: bad dimensions or scale line") from None
        if w <= 0 or h <= 0 or scale == 0:
            raise MalformedHeaderError(f"{path}: non-positive size or zero scale")
        payload = f.read()
    need = w * h * 3 * 4
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(payload)} bytes, need {need}")
    dtype = "<f4" if scale < 0 else ">f4"
    data = np.frombuffer(payload[:need], dtype=dtype).astype(np.float32).reshape(h, w, 3)
    if not np.all(np.isfinite(data)):
        raise NonFiniteImageError(f"{path}: non-finite values in payload")
    return np.ascontiguousarray(data[::-1])


def quantize(image):
    """round(v * 255) with ties away from zero, for v in [0, 1]."""
    return np.floor(np.clip(np.asarray(image, dtype=np.float64), 0, 1) * 255 + 0.5).astype(np.uint8)


def write_ppm(path, image):
    image = _check_rgb(image)
    h, w, _ = image.shape
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(quantize(image).tobytes())


def _ppm_tokens(data, count):
    tokens, pos = [], 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeaderError("PPM header ended early")
        tokens.append(data[start:pos].decode("ascii", errors="replace"))
    return tokens, pos + 1


def read_ppm(path):
    """Read a P6 file as float32 values v / 255."""
    with open(path, "rb") as f:
        data = f.read()
    try:
        (magic, w, h, maxval), offset = _ppm_tokens(data, 4)
    except MalformedHeaderError as e:
        raise MalformedHeaderError(f"{path}: {e}") from None
    if magic != "P6":
        raise UnsupportedFormatError(f"{path}: only binary P6 is supported, got {magic!r}")
    try:
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError:
        raise MalformedHeaderError(f"{path}: bad PPM header numbers") from None
    if maxval != 255:
        raise UnsupportedFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    need = w * h * 3
    body = data[offset:offset + need]
    if len(body) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(body)} bytes, need {need}")
    return (np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3) / 255.0).astype(np.float32)
