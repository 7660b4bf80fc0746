"""Character vocabulary with three reserved ids."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .errors import ContractError

BLANK, UNK, SOS_EOS = 0, 1, 2
SPECIALS = ("<blank>", "<unk>", "<sos/eos>")


@dataclass(frozen=True)
class Vocab:
    tokens: tuple
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if tuple(self.tokens[:3]) != SPECIALS:
            raise ContractError(f"first three tokens must be {SPECIALS}")
        if len(set(self.tokens)) != len(self.tokens):
            raise ContractError("duplicate tokens in vocabulary")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def size(self) -> int:
        return len(self.tokens)

    blank = BLANK
    unk = UNK
    sos_eos = SOS_EOS

    @classmethod
    def build_from_corpus(cls, transcripts: Iterable[str]) -> "Vocab":
        transcripts = list(transcripts)
        if not transcripts:
            raise ContractError("cannot build a vocabulary from an empty corpus")
        chars = sorted({c for text in transcripts for c in text})
        return cls(SPECIALS + tuple(chars))

    def encode(self, text: str) -> list:
        return [self.index.get(c, UNK) for c in text]

    def decode(self, ids: Iterable[int]) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise ContractError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            if i in (BLANK, SOS_EOS):
                continue
            out.append(self.tokens[i])
        return "".join(out)

    def save(self, path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "Vocab":
        lines = Path(path).read_text(encoding="utf-8").split("\n")
        if lines and lines[-1] == "":
            lines.pop()
        return cls(tuple(lines))


build_from_corpus = Vocab.build_from_corpus
