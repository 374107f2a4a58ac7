"""
Binary and text formats moved by the CLI.

NVT1: magic b"NVT1", u8 rank, rank x u64 little-endian dimensions, then a
little-endian f32 payload in row-major order. NVI1 is the same layout with an
i64 payload, used for packed token ids. Images also enter as binary PPM (P6).
"""

import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import FormatError, TruncatedPayloadError
from .tensor import Image

NVT1_MAGIC = b"NVT1"
NVI1_MAGIC = b"NVI1"

_PAYLOAD_DTYPES = {
    NVT1_MAGIC: np.dtype("<f4"),
    NVI1_MAGIC: np.dtype("<i8"),
}

PathLike = Union[str, Path]


def _encode_blob(magic: bytes, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    if array.ndim < 1 or array.ndim > 255:
        raise FormatError(f"Cannot encode a rank-{array.ndim} array")
    header = magic + struct.pack("<B", array.ndim) + struct.pack(f"<{array.ndim}Q", *array.shape)
    payload = np.ascontiguousarray(array, dtype=_PAYLOAD_DTYPES[magic]).tobytes(order="C")
    return header + payload


def _decode_blob(magic: bytes, buffer: bytes) -> np.ndarray:
    if len(buffer) < 5 or buffer[:4] != magic:
        raise FormatError(f"Not a {magic.decode()} file (bad magic)")
    rank = buffer[4]
    dims_end = 5 + 8 * rank
    if len(buffer) < dims_end:
        raise TruncatedPayloadError(dims_end, len(buffer))
    shape = struct.unpack(f"<{rank}Q", buffer[5:dims_end])
    dtype = _PAYLOAD_DTYPES[magic]
    expected = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
    actual = len(buffer) - dims_end
    if actual < expected:
        raise TruncatedPayloadError(expected, actual)
    if actual > expected:
        raise FormatError(f"{actual - expected} trailing bytes after {magic.decode()} payload")
    return np.frombuffer(buffer, dtype=dtype, offset=dims_end).reshape(shape)


def encode_nvt1(array: np.ndarray) -> bytes:
    return _encode_blob(NVT1_MAGIC, array)


def decode_nvt1(buffer: bytes) -> np.ndarray:
    """Decode an NVT1 buffer into a float64 array"""
    return _decode_blob(NVT1_MAGIC, buffer).astype(np.float64)


def encode_nvi1(array: np.ndarray) -> bytes:
    return _encode_blob(NVI1_MAGIC, array)


def decode_nvi1(buffer: bytes) -> np.ndarray:
    return _decode_blob(NVI1_MAGIC, buffer).astype(np.int64)


def _read_bytes(path: PathLike) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"Cannot read {path}: {e}") from e


def read_nvt1(path: PathLike) -> np.ndarray:
    return decode_nvt1(_read_bytes(path))


def write_nvt1(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_nvt1(array))


def read_nvi1(path: PathLike) -> np.ndarray:
    return decode_nvi1(_read_bytes(path))


def write_nvi1(path: PathLike, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_nvi1(array))


def _ppm_tokens(buffer: bytes, count: int):
    """Read `count` whitespace-separated header tokens, skipping comments"""
    tokens = []
    position = 2
    while len(tokens) < count:
        if position >= len(buffer):
            raise FormatError("PPM header ended early")
        char = buffer[position:position + 1]
        if char == b"#":
            while position < len(buffer) and buffer[position:position + 1] not in (b"\n", b"\r"):
                position += 1
        elif char.isspace():
            position += 1
        else:
            start = position
            while position < len(buffer) and not buffer[position:position + 1].isspace():
                position += 1
            tokens.append(buffer[start:position])
    # Exactly one whitespace byte separates the header from the raster
    return tokens, position + 1


def decode_ppm(buffer: bytes) -> Image:
    """Decode a binary (P6) PPM into an RGB image scaled to [0, 1]"""
    if buffer[:2] != b"P6":
        raise FormatError("Not a binary PPM (expected P6 magic)")
    tokens, offset = _ppm_tokens(buffer, 3)
    try:
        width, height, maxval = (int(token) for token in tokens)
    except ValueError as e:
        raise FormatError(f"Malformed PPM header: {e}") from e
    if width < 1 or height < 1 or not 1 <= maxval <= 65535:
        raise FormatError(f"Unsupported PPM geometry {width}x{height} maxval {maxval}")

    dtype = np.dtype("u1") if maxval < 256 else np.dtype(">u2")
    expected = width * height * 3 * dtype.itemsize
    actual = len(buffer) - offset
    if actual < expected:
        raise TruncatedPayloadError(expected, actual)
    raster = np.frombuffer(buffer, dtype=dtype, count=width * height * 3, offset=offset)
    if raster.max(initial=0) > maxval:
        raise FormatError("PPM sample exceeds maxval")
    return Image(raster.reshape(height, width, 3).astype(np.float64) / maxval)


def encode_ppm(image: Image) -> bytes:
    """Encode an image as an 8-bit P6 PPM; grey images are replicated to RGB"""
    data = image.data
    if data.shape[2] == 1:
        data = np.repeat(data, 3, axis=2)
    raster = np.rint(data * 255.0).astype(np.uint8)
    header = f"P6\n{image.width} {image.height}\n255\n".encode("ascii")
    return header + raster.tobytes(order="C")


def read_ppm(path: PathLike) -> Image:
    return decode_ppm(_read_bytes(path))


def write_ppm(path: PathLike, image: Image) -> None:
    Path(path).write_bytes(encode_ppm(image))


def read_image(path: PathLike) -> Image:
    """
    Load an image from a P6 PPM or an NVT1 tensor.

    Args:
        path: Input file; NVT1 tensors must be (H, W) or (H, W, C) with C in {1, 3}

    Returns:
        Image: Loaded image
    """
    buffer = _read_bytes(path)
    if buffer[:2] == b"P6":
        return decode_ppm(buffer)
    if buffer[:4] == NVT1_MAGIC:
        array = decode_nvt1(buffer)
        if array.ndim not in (2, 3):
            raise FormatError(f"NVT1 image must have rank 2 or 3, got {array.ndim}")
        try:
            return Image(array)
        except ValueError as e:
            raise FormatError(f"NVT1 payload is not a valid image: {e}") from e
    raise FormatError(f"{path} is neither a P6 PPM nor an NVT1 tensor")
