"""Binary arithmetic coder over integer frequency tables.

32-bit low/high registers with carry-less underflow handling.  Symbols are
described by ``(cum_low, cum_high, total)`` with ``total <= 2**30``; the
encoder emits close to ``sum(log2(total / freq))`` bits plus at most two bits
of termination and byte padding.
"""
from __future__ import annotations

from ..errors import DecodeError

STATE_BITS = 32
_FULL = (1 << STATE_BITS) - 1
_HALF = 1 << (STATE_BITS - 1)
_QUARTER = _HALF >> 1
MAX_TOTAL = _QUARTER + 2


class ArithmeticEncoder:
    def __init__(self):
        self.low = 0
        self.high = _FULL
        self.pending = 0
        self._bits: list[int] = []

    def encode(self, cum_low: int, cum_high: int, total: int) -> None:
        span = self.high - self.low + 1
        low = self.low
        self.high = low + cum_high * span // total - 1
        self.low = low + cum_low * span // total
        self._normalize()

    def encode_bit(self, bit: int) -> None:
        self.encode(bit, bit + 1, 2)

    def _normalize(self) -> None:
        low, high, bits = self.low, self.high, self._bits
        while True:
            if high < _HALF:
                bits.append(0)
                if self.pending:
                    bits.extend([1] * self.pending)
                    self.pending = 0
            elif low >= _HALF:
                bits.append(1)
                if self.pending:
                    bits.extend([0] * self.pending)
                    self.pending = 0
                low -= _HALF
                high -= _HALF
            elif low >= _QUARTER and high < _HALF + _QUARTER:
                self.pending += 1
                low -= _QUARTER
                high -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
        self.low, self.high = low, high

    def finish(self) -> bytes:
        # two bits pin a point inside [low, high]; the decoder reads zeros past the end,
        # which also makes the byte padding harmless
        self.pending += 1
        if self.low < _QUARTER:
            self._bits.append(0)
            self._bits.extend([1] * self.pending)
        else:
            self._bits.append(1)
            self._bits.extend([0] * self.pending)
        self.pending = 0
        bits = self._bits
        pad = -len(bits) % 8
        acc = 0
        for b in bits:
            acc = (acc << 1) | b
        acc <<= pad
        return acc.to_bytes((len(bits) + pad) // 8, "big")


class ArithmeticDecoder:
    """Decoder matching :class:`ArithmeticEncoder`.

    Reading is allowed to run past the end of the data (implied zeros) by at
    most one register width; further reads mean the stream does not match.
    """

    def __init__(self, data: bytes):
        self.data = data
        self.nbits = 8 * len(data)
        self._int = int.from_bytes(data, "big") if data else 0
        self.pos = 0
        self.low = 0
        self.high = _FULL
        self.code = 0
        for _ in range(STATE_BITS):
            self.code = (self.code << 1) | self._read_bit()

    def _read_bit(self) -> int:
        pos = self.pos
        self.pos = pos + 1
        if pos < self.nbits:
            return (self._int >> (self.nbits - 1 - pos)) & 1
        if pos >= self.nbits + STATE_BITS:
            raise DecodeError("arithmetic stream exhausted")
        return 0

    def target(self, total: int) -> int:
        span = self.high - self.low + 1
        value = ((self.code - self.low + 1) * total - 1) // span
        if not 0 <= value < total:
            raise DecodeError("arithmetic decoder state out of range")
        return value

    def consume(self, cum_low: int, cum_high: int, total: int) -> None:
        span = self.high - self.low + 1
        low = self.low
        high = low + cum_high * span // total - 1
        low = low + cum_low * span // total
        code = self.code
        while True:
            if high < _HALF:
                pass
            elif low >= _HALF:
                low -= _HALF
                high -= _HALF
                code -= _HALF
            elif low >= _QUARTER and high < _HALF + _QUARTER:
                low -= _QUARTER
                high -= _QUARTER
                code -= _QUARTER
            else:
                break
            low <<= 1
            high = (high << 1) | 1
            code = (code << 1) | self._read_bit()
        self.low, self.high, self.code = low, high, code

    def decode_bit(self) -> int:
        bit = self.target(2)
        self.consume(bit, bit + 1, 2)
        return bit

    def check_end(self) -> None:
        """Reject data that extends beyond what the symbol sequence accounts for."""
        consumed = self.pos - STATE_BITS
        if self.nbits - consumed > 16:
            raise DecodeError(f"{(self.nbits - consumed) // 8} unused trailing bytes in arithmetic stream")
