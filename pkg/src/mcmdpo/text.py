"""Word tokenization and the fixed vocabulary shared by model and metrics."""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from typing import Iterable, Sequence

PAD, BOS, EOS, PERSON, UNK = "<pad>", "<bos>", "<eos>", "[person]", "<unk>"
SPECIALS = (PAD, BOS, EOS, PERSON, UNK)

_TOKEN_RE = re.compile(r"\[person\]|[a-z0-9]+(?:'[a-z]+)?|[^\sa-z0-9]")


def tokenize(text: str) -> list[str]:
    """Lowercase word tokens with punctuation split off.

    >>> tokenize("A red Circle, top-left.")
    ['a', 'red', 'circle', ',', 'top', '-', 'left', '.']
    """
    return _TOKEN_RE.findall(text.lower())


def detokenize(tokens: Iterable[str]) -> str:
    return " ".join(tokens)


class VocabError(ValueError):
    pass


@dataclass
class Vocab:
    """Token <-> id table. Special tokens always occupy ids 0..4."""

    tokens: list[str]
    index: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self) -> None:
        if tuple(self.tokens[: len(SPECIALS)]) != SPECIALS:
            raise VocabError("vocabulary must start with the special tokens")
        if len(set(self.tokens)) != len(self.tokens):
            raise VocabError("duplicate tokens in vocabulary")
        if len(self.tokens) < 8:
            raise VocabError(f"vocab_size must be >= 8, got {len(self.tokens)}")
        self.index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, words: Iterable[str], size: int | None = None) -> "Vocab":
        """Specials first, then the sorted word set, padded to ``size``."""
        body = sorted(set(words) - set(SPECIALS))
        tokens = list(SPECIALS) + body
        if size is not None:
            if len(tokens) > size:
                raise VocabError(f"{len(tokens)} tokens do not fit vocab_size={size}")
            tokens += [f"<unused{i}>" for i in range(size - len(tokens))]
        return cls(tokens)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def bos_id(self) -> int:
        return 1

    @property
    def eos_id(self) -> int:
        return 2

    @property
    def unk_id(self) -> int:
        return 4

    def encode_tokens(self, tokens: Sequence[str], strict: bool = False) -> tuple[int, ...]:
        ids = []
        for t in tokens:
            if t in self.index:
                ids.append(self.index[t])
            elif strict:
                raise VocabError(f"token {t!r} not in vocabulary")
            else:
                ids.append(self.unk_id)
        return tuple(ids)

    def encode(self, text: str, strict: bool = False) -> tuple[int, ...]:
        return self.encode_tokens(tokenize(text), strict=strict)

    def encode_response(self, text: str, strict: bool = False) -> tuple[int, ...]:
        """Encode a response; responses always end with EOS."""
        return self.encode(text, strict=strict) + (self.eos_id,)

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.tokens[i] for i in ids if i not in (self.pad_id, self.bos_id, self.eos_id)]

    def decode_text(self, ids: Iterable[int]) -> str:
        return detokenize(self.decode(ids))

    def missing(self, texts: Iterable[str]) -> set[str]:
        return {t for text in texts for t in tokenize(text) if t not in self.index}
