"""Closed symbol vocabulary shared by captions and edit instructions.

Stored as a plain text file, one symbol per line. Index 0 is reserved for
the unknown symbol; lookups never fail.
"""

from __future__ import annotations

UNK = "<unk>"


class Vocabulary:
    def __init__(self, symbols):
        syms = list(symbols)
        if UNK in syms:
            syms.remove(UNK)
        self.symbols = [UNK] + syms
        self._index = {s: i for i, s in enumerate(self.symbols)}
        if len(self._index) != len(self.symbols):
            raise ValueError("duplicate symbols in vocabulary")

    def __len__(self) -> int:
        return len(self.symbols)

    def encode(self, tokens) -> list[int]:
        return [self._index.get(t, 0) for t in tokens]

    def decode(self, ids) -> list[str]:
        return [self.symbols[i] for i in ids]

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as f:
            for s in self.symbols:
                f.write(s + "\n")

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, encoding="utf-8") as f:
            syms = [line.strip() for line in f if line.strip()]
        if not syms or syms[0] != UNK:
            raise ValueError(f"vocabulary file {path} missing reserved {UNK} header")
        return cls(syms[1:])
