"""Lowercase word-level tokenizer with a corpus-built vocabulary."""

from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Iterable, Sequence

from lexalign.errors import InputError

PAD, EOT, UNK = "<pad>", "<eot>", "<unk>"
PAD_ID, EOT_ID, UNK_ID = 0, 1, 2
RESERVED = (PAD, EOT, UNK)

_WORD = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Split on whitespace and punctuation after lowercasing."""
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class TokenSequence:
    ids: tuple[int, ...]
    eot_index: int

    def __post_init__(self):
        if not 0 <= self.eot_index < len(self.ids):
            raise InputError("eot_index must fall inside the sequence")
        if self.ids[self.eot_index] != EOT_ID or self.ids.count(EOT_ID) != 1:
            raise InputError("sequence must contain exactly one EOT token at eot_index")

    @property
    def length(self) -> int:
        return len(self.ids)


class Vocab:
    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(RESERVED)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    @classmethod
    def build(cls, texts: Iterable[str]) -> "Vocab":
        words = sorted({w for t in texts for w in tokenize(t)})
        return cls(words)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self.itos == other.itos

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK_ID)

    def encode(self, text: str, max_len: int | None = None, pad: bool = False) -> TokenSequence:
        """Token ids followed by EOT; optionally right-padded to ``max_len``."""
        ids = [self.id(w) for w in tokenize(text)] + [EOT_ID]
        if max_len is not None and len(ids) > max_len:
            raise InputError(f"text needs {len(ids)} tokens, limit is {max_len}")
        eot = len(ids) - 1
        if pad and max_len is not None:
            ids += [PAD_ID] * (max_len - len(ids))
        return TokenSequence(tuple(ids), eot)

    def encode_batch(self, texts: Sequence[str], max_len: int):
        """Padded (N, max_len) id matrix and (N,) EOT positions as torch tensors."""
        import torch

        seqs = [self.encode(t, max_len, pad=True) for t in texts]
        ids = torch.tensor([s.ids for s in seqs], dtype=torch.long)
        eot = torch.tensor([s.eot_index for s in seqs], dtype=torch.long)
        return ids, eot

    def to_list(self) -> list[str]:
        return list(self.itos)

    @classmethod
    def from_list(cls, itos: Sequence[str]) -> "Vocab":
        if tuple(itos[: len(RESERVED)]) != RESERVED:
            raise InputError("vocabulary must start with the reserved tokens")
        return cls(itos[len(RESERVED):])
