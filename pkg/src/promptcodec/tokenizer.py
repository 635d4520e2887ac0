"""Tokenizers that render token ids to text and parse text back to ids."""
from __future__ import annotations

import abc
import itertools
from functools import cached_property

from .errors import BackendError, DataError

END = "</w>"


class Tokenizer(abc.ABC):
    vocab_size: int

    @abc.abstractmethod
    def decode(self, ids) -> str:
        """Render ids as human-readable text."""

    @abc.abstractmethod
    def encode(self, text: str) -> list[int]:
        """Parse text into ids; raises :class:`DataError` when it cannot."""


class SyllableTokenizer(Tokenizer):
    """Deterministic BPE-like vocabulary of consonant-vowel syllable pieces.

    Piece ``k`` is a run of one to three syllables, either word-final (suffix
    ``</w>``, rendered followed by a space) or word-internal.  Text is parsed
    word by word with greedy longest match, so rendering two word-internal
    pieces next to each other can merge into a different id sequence, just as
    with a real subword tokenizer.
    """

    CONSONANTS = "bdfghjklmnprstvwz"
    VOWELS = "aeiou"

    def __init__(self, vocab_size: int = 49408):
        if vocab_size < 1:
            raise DataError("vocab_size must be positive")
        self.vocab_size = vocab_size

    @cached_property
    def pieces(self) -> list[str]:
        syllables = [c + v for c in self.CONSONANTS for v in self.VOWELS]
        out: list[str] = []
        for n in itertools.count(1):
            for form in (END, ""):
                for combo in itertools.product(syllables, repeat=n):
                    out.append("".join(combo) + form)
                    if len(out) == self.vocab_size:
                        return out

    @cached_property
    def index(self) -> dict[str, int]:
        return {p: i for i, p in enumerate(self.pieces)}

    def decode(self, ids) -> str:
        pieces = self.pieces
        try:
            text = "".join(pieces[i].replace(END, " ") for i in ids)
        except IndexError:
            raise DataError("token id outside the vocabulary") from None
        return text.strip()

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        index = self.index
        for word in text.split():
            if len(word) % 2:
                raise DataError(f"cannot tokenize {word!r}")
            pos = 0
            while pos < len(word):
                for n in (6, 4, 2):
                    piece = word[pos:pos + n]
                    if len(piece) != n:
                        continue
                    key = piece + END if pos + n == len(word) else piece
                    if key in index:
                        ids.append(index[key])
                        pos += n
                        break
                else:
                    raise DataError(f"cannot tokenize {word!r}")
        return ids


class ClipTokenizer(Tokenizer):
    """Wrapper over the Hugging Face CLIP byte-level BPE tokenizer."""

    def __init__(self, tokenizer):
        self._tok = tokenizer
        self.vocab_size = len(tokenizer)

    @classmethod
    def from_pretrained(cls, name: str = "openai/clip-vit-large-patch14") -> "ClipTokenizer":
        try:
            from transformers import CLIPTokenizer

            return cls(CLIPTokenizer.from_pretrained(name))
        except Exception as exc:  # noqa: BLE001
            raise BackendError(f"could not load tokenizer {name!r}: {exc}") from exc

    def decode(self, ids) -> str:
        return self._tok.decode(list(ids), skip_special_tokens=True, clean_up_tokenization_spaces=False)

    def encode(self, text: str) -> list[int]:
        return self._tok(text, add_special_tokens=False)["input_ids"]
