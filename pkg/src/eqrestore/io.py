"""File formats (PNM images, DQT1 tensors, GMM specs) and the seeded RNG.

Images are held internally as ``(C, H, W)`` float64 arrays in ``[-1, 1]``;
8-bit samples map linearly ``0 -> -1`` and ``255 -> +1``.
"""
from __future__ import annotations

import io as _io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import FormatError

RNG_NAME = "numpy.random.PCG64/standard_normal(ziggurat)"

DQT1_MAGIC = b"DQT1"
DQT1_FLOAT64 = 1
_DQT1_HEADER = struct.Struct("<4sBB2s")


# --------------------------------------------------------------------------- RNG

def seeded_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for ``seed`` (any unsigned 64-bit value)."""
    return np.random.Generator(np.random.PCG64(int(seed) & 0xFFFFFFFFFFFFFFFF))


def standard_normal(rng: np.random.Generator, shape) -> np.ndarray:
    return rng.standard_normal(shape)


# --------------------------------------------------------------------------- PNM

def _to_float(samples):
    return samples.astype(np.float64) / 127.5 - 1.0


def to_uint8(img):
    """Map ``[-1, 1]`` floats to 8-bit, rounding half away from zero."""
    v = (np.asarray(img, dtype=np.float64) + 1.0) * 127.5
    v = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def decode_pnm(data: bytes) -> np.ndarray:
    if len(data) < 2:
        raise FormatError("truncated PNM header", 0)
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad PNM magic {magic!r}", 0)
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    while len(fields) < 3:
        if pos >= len(data):
            raise FormatError("truncated PNM header", pos)
        ch = data[pos:pos + 1]
        if ch == b"#":
            end = data.find(b"\n", pos)
            if end < 0:
                raise FormatError("unterminated PNM comment", pos)
            pos = end + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            start = pos
            while pos < len(data) and data[pos:pos + 1].isdigit():
                pos += 1
            fields.append(int(data[start:pos]))
        else:
            raise FormatError(f"unexpected byte {ch!r} in PNM header", pos)
    if pos >= len(data) or not data[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after PNM maxval", pos)
    pos += 1
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"invalid PNM dimensions {width}x{height}", 2)
    if maxval != 255:
        raise FormatError(f"unsupported PNM maxval {maxval}", 2)
    need = width * height * channels
    payload = data[pos:]
    if len(payload) < need:
        raise FormatError(f"truncated PNM payload: need {need} bytes, have {len(payload)}", pos + len(payload))
    if len(payload) > need:
        raise FormatError("trailing bytes after PNM payload", pos + need)
    samples = np.frombuffer(payload, dtype=np.uint8).reshape(height, width, channels)
    return samples.transpose(2, 0, 1).copy()


def encode_pnm(samples: np.ndarray) -> bytes:
    samples = np.asarray(samples, dtype=np.uint8)
    if samples.ndim != 3 or samples.shape[0] not in (1, 3):
        raise FormatError(f"PNM needs shape (1|3, H, W), got {samples.shape}")
    c, h, w = samples.shape
    magic = b"P5" if c == 1 else b"P6"
    return magic + f"\n{w} {h}\n255\n".encode() + samples.transpose(1, 2, 0).tobytes()


def read_pnm(path) -> np.ndarray:
    """Read a binary P5/P6 file as a ``(C, H, W)`` array in ``[-1, 1]``."""
    return _to_float(decode_pnm(Path(path).read_bytes()))


def read_pnm_uint8(path) -> np.ndarray:
    return decode_pnm(Path(path).read_bytes())


def write_pnm(path, img) -> None:
    Path(path).write_bytes(encode_pnm(to_uint8(img)))


def read_mask(path) -> np.ndarray:
    """Binary mask from a PGM: nonzero samples are observed."""
    samples = read_pnm_uint8(path)
    return (samples[0] > 127).astype(np.uint8)


def write_mask(path, mask) -> None:
    mask = np.asarray(mask)
    Path(path).write_bytes(encode_pnm((mask > 0).astype(np.uint8)[None] * 255))


# --------------------------------------------------------------------------- DQT1

def encode_dqt1(tensor) -> bytes:
    arr = np.asarray(tensor, dtype="<f8", order="C")    # keeps 0-d tensors 0-d
    if arr.ndim > 255:
        raise FormatError("too many dimensions for DQT1")
    head = _DQT1_HEADER.pack(DQT1_MAGIC, DQT1_FLOAT64, arr.ndim, b"\0\0")
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + dims + arr.tobytes()


def _read_one(buf: _io.BytesIO, base: int) -> np.ndarray:
    start = buf.tell()
    head = buf.read(_DQT1_HEADER.size)
    if len(head) < _DQT1_HEADER.size:
        raise FormatError("truncated DQT1 header", base + start)
    magic, dtype, ndim, reserved = _DQT1_HEADER.unpack(head)
    if magic != DQT1_MAGIC:
        raise FormatError(f"bad DQT1 magic {magic!r}", base + start)
    if dtype != DQT1_FLOAT64:
        raise FormatError(f"unsupported DQT1 dtype code {dtype}", base + start + 4)
    if reserved != b"\0\0":
        raise FormatError("nonzero DQT1 reserved bytes", base + start + 6)
    raw = buf.read(8 * ndim)
    if len(raw) < 8 * ndim:
        raise FormatError("truncated DQT1 dims", base + start + 8)
    dims = struct.unpack(f"<{ndim}Q", raw)
    count = int(np.prod(dims, dtype=object)) if ndim else 1
    offset = buf.tell()
    available = len(buf.getbuffer()) - offset
    if 8 * count > available:
        raise FormatError(f"truncated DQT1 payload: need {8 * count} bytes, have {available}",
                          base + offset + available)
    payload = buf.read(8 * count)
    return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)


def decode_dqt1_all(data: bytes) -> list:
    """Decode a concatenation of DQT1 records."""
    buf = _io.BytesIO(data)
    out = []
    while buf.tell() < len(data):
        out.append(_read_one(buf, 0))
    return out


def decode_dqt1(data: bytes) -> np.ndarray:
    buf = _io.BytesIO(data)
    arr = _read_one(buf, 0)
    if buf.tell() != len(data):
        raise FormatError("trailing bytes after DQT1 payload", buf.tell())
    return arr


def read_dqt1(path) -> np.ndarray:
    return decode_dqt1(Path(path).read_bytes())


def write_dqt1(path, tensor) -> None:
    Path(path).write_bytes(encode_dqt1(tensor))


def read_dqt1_all(path) -> list:
    return decode_dqt1_all(Path(path).read_bytes())


def write_dqt1_all(path, tensors) -> None:
    Path(path).write_bytes(b"".join(encode_dqt1(t) for t in tensors))


# --------------------------------------------------------------------------- GMM spec

def read_gmm_spec(path):
    from .denoiser import GmmParams

    try:
        doc = json.loads(Path(path).read_text())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"GMM spec is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or not {"weights", "means", "variances"} <= doc.keys():
        raise FormatError("GMM spec needs 'weights', 'means' and 'variances'")
    try:
        return GmmParams(np.asarray(doc["weights"], dtype=np.float64),
                         np.asarray(doc["means"], dtype=np.float64),
                         np.asarray(doc["variances"], dtype=np.float64),
                         shape=tuple(doc["shape"]) if "shape" in doc else None)
    except (TypeError, ValueError) as exc:
        raise FormatError(f"invalid GMM spec: {exc}") from exc


def write_gmm_spec(path, params) -> None:
    doc = {"weights": params.weights.tolist(), "means": params.means.tolist(),
           "variances": params.variances.tolist()}
    if params.shape is not None:
        doc["shape"] = list(params.shape)
    Path(path).write_text(json.dumps(doc))
