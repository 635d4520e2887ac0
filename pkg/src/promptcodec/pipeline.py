"""End-to-end PIC / PICS encoding and decoding around the ``.tsk`` container."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

from .core import (
    Container,
    Image,
    Mode,
    SketchMap,
    TokenCoding,
    TokenSequence,
    read_container,
    write_container,
)
from .decoder import Backend, reconstruct_pic, reconstruct_pics
from .errors import CapabilityError, ConfigError
from .prompt_inversion import Embedder, InversionResult, PiConfig, ToyEmbedder, invert_prompt
from .sketch.edges import EdgeDetector, GradientEdgeDetector, extract_sketch
from .sketch.ntc import NtcModel, decode_sketch, encode_sketch
from .token_codec import DEFAULT_MAX_REGRET_BYTES, decode_tokens, encode_tokens
from .tokenizer import SyllableTokenizer, Tokenizer


@dataclass
class CodecSettings:
    embedder: Embedder
    tokenizer: Optional[Tokenizer] = None
    pi: PiConfig = field(default_factory=PiConfig)
    token_coding: TokenCoding = TokenCoding.FIXED
    sketch_model: Optional[NtcModel] = None
    detector: EdgeDetector = field(default_factory=GradientEdgeDetector)
    max_regret_bytes: Optional[int] = DEFAULT_MAX_REGRET_BYTES

    @classmethod
    def toy(cls, vocab_size: int = 49408, embed_dim: int = 32, seed: int = 0, **kwargs) -> "CodecSettings":
        """Offline settings: seeded toy embedder with a matching syllable tokenizer."""
        return cls(ToyEmbedder(vocab_size, embed_dim, seed=seed), SyllableTokenizer(vocab_size), **kwargs)

    def render(self, tokens: TokenSequence) -> str:
        if self.tokenizer is None:
            return " ".join(f"<{i}>" for i in tokens.ids)
        return self.tokenizer.decode(tokens.ids)


@dataclass
class Compressed:
    blob: bytes
    container: Container
    tokens: TokenSequence
    prompt: str
    sketch: Optional[SketchMap] = None
    inversion: Optional[InversionResult] = None
    fallback: bool = False


@dataclass
class Decompressed:
    image: Image
    container: Container
    tokens: TokenSequence
    prompt: str
    sketch: Optional[SketchMap] = None


def pack(image: Image, mode: Mode | str, settings: CodecSettings, tokens: TokenSequence,
         sketch: Optional[SketchMap] = None) -> Compressed:
    """Build the container for already-inverted tokens (and an extracted sketch for PICS)."""
    mode = Mode.parse(mode)
    payload = encode_tokens(tokens, settings.token_coding, settings.tokenizer, settings.max_regret_bytes)
    sketch_bytes = None
    if mode is Mode.PICS:
        if settings.sketch_model is None:
            raise ConfigError("PICS mode needs a trained sketch model")
        sketch = sketch if sketch is not None else extract_sketch(image, settings.detector)
        sketch_bytes = encode_sketch(sketch, settings.sketch_model)
    blob = write_container(mode, image.width, image.height, payload.coding, payload.data, sketch_bytes)
    return Compressed(blob, read_container(blob), tokens, settings.render(tokens),
                      sketch if mode is Mode.PICS else None, None, payload.fallback)


def compress(image: Image, mode: Mode | str, settings: CodecSettings,
             inversion: Optional[InversionResult] = None) -> Compressed:
    if Mode.parse(mode) is Mode.PICS and settings.sketch_model is None:
        raise ConfigError("PICS mode needs a trained sketch model")
    inversion = inversion or invert_prompt(image, settings.embedder, settings.pi)
    out = pack(image, mode, settings, inversion.tokens)
    out.inversion = inversion
    return out


def decompress(blob: bytes, settings: CodecSettings, backend: Backend, seed: int = 0) -> Decompressed:
    container = read_container(blob)
    tokens = decode_tokens(container.token_payload, container.token_coding, settings.pi.prompt_length,
                           settings.embedder.vocab_size, settings.tokenizer)
    prompt = settings.render(tokens)
    if container.mode is Mode.PIC:
        image = reconstruct_pic(prompt, seed, backend, container.width, container.height)
        return Decompressed(image, container, tokens, prompt)
    if settings.sketch_model is None:
        raise ConfigError("PICS container needs the sketch model used at encode time")
    if not backend.accepts_sketch:
        raise CapabilityError(f"backend {backend.kind!r} cannot decode a PICS container")
    sketch = decode_sketch(container.sketch_payload, settings.sketch_model)
    image = reconstruct_pics(prompt, sketch, seed, backend, container.width, container.height)
    return Decompressed(image, container, tokens, prompt, sketch)
