"""Lossless coding of the prompt tokens (the text bitstream).

Two coding modes exist.  Fixed-width packs each id in ``ceil(log2 V)`` bits,
MSB first, zero-padded to a byte boundary.  Text mode renders the ids to text,
checks that the text parses back to the same ids, and deflates the UTF-8
bytes; if the check fails or the result is too large it falls back to
fixed-width.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass
from typing import Optional

from .core import TokenCoding, TokenSequence, bits_needed
from .errors import DataError, FormatError, RangeError, TruncationError
from .tokenizer import Tokenizer

DEFAULT_MAX_REGRET_BYTES = 16


@dataclass(frozen=True)
class TokenPayload:
    coding: TokenCoding
    data: bytes
    bit_count: int
    fallback: bool = False


def encode_tokens_fixed(tokens: TokenSequence) -> TokenPayload:
    width = bits_needed(tokens.vocab_size)
    acc = 0
    for i in tokens.ids:
        if not 0 <= i < tokens.vocab_size:
            raise RangeError(f"token id {i} outside [0, {tokens.vocab_size})")
        acc = (acc << width) | i
    nbits = width * len(tokens.ids)
    pad = -nbits % 8
    data = (acc << pad).to_bytes((nbits + pad) // 8, "big")
    return TokenPayload(TokenCoding.FIXED, data, nbits)


def decode_tokens_fixed(data: bytes, length: int, vocab_size: int) -> TokenSequence:
    width = bits_needed(vocab_size)
    nbits = width * length
    nbytes = (nbits + 7) // 8
    if len(data) < nbytes:
        raise TruncationError(f"fixed-width payload has {len(data)} bytes, needs {nbytes}")
    if len(data) > nbytes:
        raise FormatError(f"fixed-width payload has {len(data) - nbytes} surplus bytes")
    acc = int.from_bytes(data, "big")
    pad = 8 * nbytes - nbits
    if acc & ((1 << pad) - 1):
        raise FormatError("non-zero padding bits")
    acc >>= pad
    mask = (1 << width) - 1
    ids = [(acc >> (width * (length - 1 - k))) & mask for k in range(length)]
    if any(i >= vocab_size for i in ids):
        raise FormatError("decoded id exceeds the vocabulary")
    return TokenSequence(tuple(ids), vocab_size)


def compress_text(text: str) -> bytes:
    """Raw DEFLATE (no zlib header) of the UTF-8 text."""
    c = zlib.compressobj(9, zlib.DEFLATED, -15)
    return c.compress(text.encode("utf-8")) + c.flush()


def decompress_text(data: bytes) -> str:
    d = zlib.decompressobj(-15)
    try:
        raw = d.decompress(data) + d.flush()
    except zlib.error as exc:
        raise FormatError(f"text payload is not valid DEFLATE: {exc}") from exc
    if not d.eof or d.unused_data:
        raise FormatError("text payload is incomplete or has trailing data")
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FormatError("text payload is not UTF-8") from exc


def encode_text_lossless(
    tokens: TokenSequence,
    tokenizer: Tokenizer,
    max_regret_bytes: Optional[int] = DEFAULT_MAX_REGRET_BYTES,
) -> TokenPayload:
    """Compress the rendered prompt text, falling back to fixed-width ids.

    Fallback happens when the text does not parse back to the same ids, or
    when the compressed text is more than ``max_regret_bytes`` larger than the
    fixed-width payload (``None`` disables the size check).
    """
    fixed = encode_tokens_fixed(tokens)
    try:
        text = tokenizer.decode(tokens.ids)
        same = list(tokenizer.encode(text)) == list(tokens.ids)
    except DataError:
        same = False
    if not same:
        return TokenPayload(fixed.coding, fixed.data, fixed.bit_count, fallback=True)
    data = compress_text(text)
    if max_regret_bytes is not None and len(data) > len(fixed.data) + max_regret_bytes:
        return TokenPayload(fixed.coding, fixed.data, fixed.bit_count, fallback=True)
    return TokenPayload(TokenCoding.TEXT, data, 8 * len(data))


def decode_text_lossless(data: bytes, tokenizer: Tokenizer, length: Optional[int] = None) -> TokenSequence:
    text = decompress_text(data)
    try:
        ids = tokenizer.encode(text)
    except DataError as exc:
        raise FormatError(f"decoded text does not tokenize: {exc}") from exc
    if length is not None and len(ids) != length:
        raise FormatError(f"decoded text has {len(ids)} tokens, expected {length}")
    return TokenSequence(tuple(ids), tokenizer.vocab_size)


def encode_tokens(tokens: TokenSequence, coding: TokenCoding | str, tokenizer: Optional[Tokenizer] = None,
                  max_regret_bytes: Optional[int] = DEFAULT_MAX_REGRET_BYTES) -> TokenPayload:
    coding = TokenCoding.parse(coding)
    if coding is TokenCoding.FIXED:
        return encode_tokens_fixed(tokens)
    if tokenizer is None:
        raise DataError("text coding needs a tokenizer")
    return encode_text_lossless(tokens, tokenizer, max_regret_bytes)


def decode_tokens(data: bytes, coding: TokenCoding | int, length: int, vocab_size: int,
                  tokenizer: Optional[Tokenizer] = None) -> TokenSequence:
    coding = TokenCoding.parse(coding)
    if coding is TokenCoding.FIXED:
        return decode_tokens_fixed(data, length, vocab_size)
    if tokenizer is None:
        raise DataError("text payload needs a tokenizer to decode")
    return decode_text_lossless(data, tokenizer, length)
