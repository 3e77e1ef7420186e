"""Word-level vocabulary with BOS/EOS/PAD/UNK specials."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

BOS = "<bos>"
EOS = "<eos>"
PAD = "<pad>"
UNK = "<unk>"
SPECIALS = (BOS, EOS, PAD, UNK)


class UnknownTokenError(ValueError):
    def __init__(self, unit: str):
        super().__init__(f"unit {unit!r} is not in the vocabulary and no UNK fallback is enabled")
        self.unit = unit


@dataclass
class Vocabulary:
    """Whitespace-delimited word vocabulary.

    Punctuation stays attached to its word, so ``detokenize(tokenize(x))``
    equals ``x`` up to whitespace normalization. Character vocabularies split
    every character instead.
    """

    tokens: list[str]
    unit: str = "word"
    unk_fallback: bool = True
    _index: dict[str, int] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.unit not in ("word", "character"):
            raise ValueError(f"unit must be 'word' or 'character', got {self.unit!r}")
        if list(self.tokens[: len(SPECIALS)]) != list(SPECIALS):
            raise ValueError(f"vocabulary must start with the specials {SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("vocabulary tokens must be unique")
        self._index = {t: i for i, t in enumerate(self.tokens)}

    @classmethod
    def build(cls, texts: Iterable[str], extra: Iterable[str] = (), unit: str = "word") -> "Vocabulary":
        seen = dict.fromkeys(SPECIALS)
        for text in list(texts) + list(extra):
            for u in _split(text, unit):
                seen.setdefault(u)
        return cls(tokens=list(seen), unit=unit)

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, unit: str) -> bool:
        return unit in self._index

    @property
    def bos_id(self) -> int:
        return self._index[BOS]

    @property
    def eos_id(self) -> int:
        return self._index[EOS]

    @property
    def pad_id(self) -> int:
        return self._index[PAD]

    @property
    def unk_id(self) -> int:
        return self._index[UNK]

    def id(self, unit: str) -> int:
        try:
            return self._index[unit]
        except KeyError:
            if self.unk_fallback:
                return self.unk_id
            raise UnknownTokenError(unit) from None

    def tokenize(self, text: str) -> list[int]:
        return [self.id(u) for u in _split(text, self.unit)]

    def detokenize(self, ids: Sequence[int], skip_specials: bool = True) -> str:
        special_ids = {self._index[s] for s in SPECIALS} - {self.unk_id}
        units = [self.tokens[i] for i in ids if not (skip_specials and i in special_ids)]
        sep = " " if self.unit == "word" else ""
        return sep.join(units)

    def to_json(self) -> str:
        return json.dumps({"unit": self.unit, "unk_fallback": self.unk_fallback, "tokens": self.tokens})

    @classmethod
    def from_json(cls, text: str) -> "Vocabulary":
        d = json.loads(text)
        return cls(tokens=d["tokens"], unit=d["unit"], unk_fallback=d["unk_fallback"])


def _split(text: str, unit: str) -> list[str]:
    if unit == "word":
        return text.split()
    return list(" ".join(text.split()))
