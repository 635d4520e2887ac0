"""Domain types, bit accounting and the ``.tsk`` container format.

Container layout (all integers big-endian)::

    magic            4 bytes   b"TXSK"
    version          1 byte    1
    mode             1 byte    0 = PIC (text only), 1 = PICS (text + sketch)
    width, height    2 bytes each
    token_coding     1 byte    0 = fixed-width ids, 1 = compressed text
    token_len        4 bytes   followed by token_len payload bytes
    sketch_len       4 bytes   only when mode = PICS, followed by the payload
    crc32            4 bytes   CRC-32 over every preceding byte
"""
from __future__ import annotations

import enum
import math
import struct
import zlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CorruptionError,
    DomainError,
    FormatError,
    RangeError,
    ShapeError,
    TruncationError,
    VersionError,
    ConfigError,
)

MAGIC = b"TXSK"
VERSION = 1
CONTAINER_SUFFIX = ".tsk"
MIN_SIDE = 8

_HEAD = struct.Struct(">4sBBHHB")  # magic, version, mode, width, height, token_coding
_LEN = struct.Struct(">I")
_CRC = struct.Struct(">I")
MIN_CONTAINER_BYTES = _HEAD.size + _LEN.size + _CRC.size


class Mode(enum.IntEnum):
    PIC = 0
    PICS = 1

    @classmethod
    def parse(cls, value: "Mode | str | int") -> "Mode":
        if isinstance(value, Mode):
            return value
        if isinstance(value, str):
            try:
                return cls[value.upper()]
            except KeyError:
                raise ConfigError(f"unknown mode {value!r}; expected 'pic' or 'pics'") from None
        return cls(value)


class TokenCoding(enum.IntEnum):
    FIXED = 0
    TEXT = 1

    @classmethod
    def parse(cls, value: "TokenCoding | str | int") -> "TokenCoding":
        if isinstance(value, TokenCoding):
            return value
        if isinstance(value, str):
            key = value.lower().replace("_", "-")
            if key in ("fixed", "fixed-width"):
                return cls.FIXED
            if key in ("text", "text-lossless"):
                return cls.TEXT
            raise ConfigError(f"unknown token coding {value!r}; expected 'fixed' or 'text'")
        return cls(value)


def _check_unit_interval(data: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(data)):
        raise DomainError(f"{what} contains non-finite values")
    if data.size and (data.min() < 0.0 or data.max() > 1.0):
        raise DomainError(f"{what} values must lie in [0, 1]")


@dataclass(frozen=True, eq=False)
class Image:
    """RGB image, ``data`` is an H x W x 3 float array in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[2] != 3:
            raise ShapeError(f"image must be H x W x 3, got {data.shape}")
        if data.shape[0] < MIN_SIDE or data.shape[1] < MIN_SIDE:
            raise ShapeError(f"image must be at least {MIN_SIDE}x{MIN_SIDE}, got {data.shape[1]}x{data.shape[0]}")
        _check_unit_interval(data, "image")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 3

    def luminance(self) -> np.ndarray:
        return self.data @ np.array([0.299, 0.587, 0.114])


@dataclass(frozen=True, eq=False)
class SketchMap:
    """Single-channel edge map, ``data`` is H x W in [0, 1]."""

    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 2:
            raise ShapeError(f"sketch must be H x W, got {data.shape}")
        _check_unit_interval(data, "sketch")
        object.__setattr__(self, "data", data)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    vocab_size: int

    def __post_init__(self):
        ids = tuple(int(i) for i in self.ids)
        if self.vocab_size < 1:
            raise RangeError("vocab_size must be positive")
        for i in ids:
            if i < 0 or i >= self.vocab_size:
                raise RangeError(f"token id {i} outside [0, {self.vocab_size})")
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return len(self.ids)


@dataclass(frozen=True)
class Container:
    mode: Mode
    width: int
    height: int
    token_coding: TokenCoding
    token_payload: bytes
    sketch_payload: Optional[bytes] = None

    @property
    def num_pixels(self) -> int:
        return self.width * self.height


@dataclass
class RateReport:
    image_id: str
    mode: str
    total_bits: int
    bpp: float
    width: int
    height: int
    token_bits: int = 0
    sketch_bits: int = 0
    metrics: dict[str, float] = field(default_factory=dict)
    prompt: str = ""


def cosine_similarity(u: Sequence[float], v: Sequence[float]) -> float:
    """Return ``u.v / (|u| |v|)`` for two non-zero vectors of equal length."""
    a = np.asarray(u, dtype=np.float64).ravel()
    b = np.asarray(v, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ShapeError(f"dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise DomainError("cosine similarity undefined for a zero vector")
    # clip guards the last ulp; |cos| <= 1 holds mathematically
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def compute_bpp(total_bits: int, width: int, height: int) -> float:
    if width <= 0 or height <= 0:
        raise DomainError(f"zero-area image ({width}x{height})")
    return total_bits / (width * height)


def container_overhead_bytes(mode: Mode | str) -> int:
    """Bytes spent on header, length prefixes and checksum."""
    return MIN_CONTAINER_BYTES + (_LEN.size if Mode.parse(mode) is Mode.PICS else 0)


def write_container(
    mode: Mode | str,
    width: int,
    height: int,
    token_coding: TokenCoding | str | int,
    token_payload: bytes,
    sketch_payload: Optional[bytes] = None,
) -> bytes:
    mode = Mode.parse(mode)
    token_coding = TokenCoding.parse(token_coding)
    if mode is Mode.PICS and sketch_payload is None:
        raise ConfigError("PICS container requires a sketch payload")
    if mode is Mode.PIC and sketch_payload is not None:
        raise ConfigError("PIC container must not carry a sketch payload")
    for name, dim in (("width", width), ("height", height)):
        if not 0 < dim <= 0xFFFF:
            raise RangeError(f"{name} {dim} outside the 16-bit range [1, 65535]")
    parts = [_HEAD.pack(MAGIC, VERSION, mode, width, height, token_coding)]
    parts += [_LEN.pack(len(token_payload)), bytes(token_payload)]
    if mode is Mode.PICS:
        parts += [_LEN.pack(len(sketch_payload)), bytes(sketch_payload)]
    body = b"".join(parts)
    return body + _CRC.pack(zlib.crc32(body))


def _parse_body(buf: bytes) -> Container:
    """Parse everything but the checksum; ``buf`` excludes the CRC field."""
    magic, version, mode, width, height, coding = _HEAD.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}")
    if version != VERSION:
        raise VersionError(f"unsupported container version {version}")
    if mode not in (0, 1):
        raise FormatError(f"unknown mode byte {mode}")
    if coding not in (0, 1):
        raise FormatError(f"unknown token coding byte {coding}")
    pos = _HEAD.size

    def take() -> bytes:
        nonlocal pos
        if pos + _LEN.size > len(buf):
            raise TruncationError("container truncated inside a length prefix")
        (n,) = _LEN.unpack_from(buf, pos)
        pos += _LEN.size
        if pos + n > len(buf):
            raise TruncationError(f"payload declares {n} bytes, {len(buf) - pos} available")
        out = bytes(buf[pos:pos + n])
        pos += n
        return out

    token_payload = take()
    sketch_payload = take() if mode == Mode.PICS else None
    if pos != len(buf):
        raise FormatError(f"{len(buf) - pos} trailing bytes before checksum")
    return Container(Mode(mode), width, height, TokenCoding(coding), token_payload, sketch_payload)


def read_container(data: bytes) -> Container:
    data = bytes(data)
    if len(data) < MIN_CONTAINER_BYTES:
        raise TruncationError(f"{len(data)} bytes is shorter than the {MIN_CONTAINER_BYTES}-byte minimum")
    body, (crc,) = data[:-_CRC.size], _CRC.unpack(data[-_CRC.size:])
    if zlib.crc32(body) != crc:
        # a cut-off file also fails the checksum; report it as truncation when the
        # declared lengths need more bytes than are present
        declared = _declared_size(data)
        if declared is not None and declared > len(data):
            raise TruncationError(f"container declares {declared} bytes, {len(data)} present")
        raise CorruptionError("checksum mismatch")
    return _parse_body(body)


def _declared_size(data: bytes) -> Optional[int]:
    """Total container size implied by the header and length prefixes, if readable."""
    mode = data[5]
    pos = _HEAD.size
    for _ in range(2 if mode == Mode.PICS else 1):
        if pos + _LEN.size > len(data):
            return pos + _LEN.size + _CRC.size
        (n,) = _LEN.unpack_from(data, pos)
        pos += _LEN.size + n
    return pos + _CRC.size


def container_bits(data: bytes) -> int:
    return 8 * len(data)


def rate_report_for(image_id: str, blob: bytes, container: Container, prompt: str = "") -> RateReport:
    total = container_bits(blob)
    return RateReport(
        image_id=image_id,
        mode=container.mode.name,
        total_bits=total,
        bpp=compute_bpp(total, container.width, container.height),
        width=container.width,
        height=container.height,
        token_bits=8 * len(container.token_payload),
        sketch_bits=8 * len(container.sketch_payload or b""),
        prompt=prompt,
    )


def bits_needed(vocab_size: int) -> int:
    """Fixed code width for ids in ``[0, vocab_size)``; zero when only one symbol exists."""
    if vocab_size < 1:
        raise RangeError("vocab_size must be positive")
    return math.ceil(math.log2(vocab_size)) if vocab_size > 1 else 0
