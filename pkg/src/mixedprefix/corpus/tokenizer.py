from __future__ import annotations

import json
from collections import Counter
from pathlib import Path
from typing import Any, Dict, Iterable, Optional, Sequence

from mixedprefix.errors import CorpusFormatError
from mixedprefix.utils.files import atomic_write_text
from mixedprefix.utils.logging import get_logger

log = get_logger("mixedprefix.corpus.tokenizer")

PAD, UNK, BOS, EOS = "<pad>", "<unk>", "<bos>", "<eos>"
SPECIALS = (PAD, UNK, BOS, EOS)


class Tokenizer:
    """Word-level vocabulary. Ids 0-3 are <pad>, <unk>, <bos>, <eos>."""

    def __init__(self, itos: Sequence[str]):
        if tuple(itos[: len(SPECIALS)]) != SPECIALS:
            raise CorpusFormatError("tokenizer vocabulary must start with the special tokens", {"head": list(itos[:4])})
        self.itos: list[str] = list(itos)
        self.stoi: Dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        if len(self.stoi) != len(self.itos):
            raise CorpusFormatError("duplicate entries in tokenizer vocabulary")

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    @property
    def pad_id(self) -> int:
        return self.stoi[PAD]

    @property
    def unk_id(self) -> int:
        return self.stoi[UNK]

    @property
    def bos_id(self) -> int:
        return self.stoi[BOS]

    @property
    def eos_id(self) -> int:
        return self.stoi[EOS]

    def add_tokens(self, tokens: Iterable[str]) -> list[int]:
        """Append tokens not yet in the vocabulary; returns the id of every requested token."""
        ids = []
        for tok in tokens:
            if tok not in self.stoi:
                self.stoi[tok] = len(self.itos)
                self.itos.append(tok)
            ids.append(self.stoi[tok])
        return ids

    def encode(self, words: Sequence[str]) -> list[int]:
        unk = self.unk_id
        return [self.stoi.get(w, unk) for w in words]

    def encode_sentence(self, words: Sequence[str]) -> list[int]:
        return [self.bos_id, *self.encode(words), self.eos_id]

    def tokenize(self, text: str) -> list[int]:
        return self.encode(text.split())

    def decode(self, ids: Iterable[int], skip_specials: bool = True) -> list[str]:
        out = []
        for i in ids:
            word = self.itos[int(i)]
            if skip_specials and word in SPECIALS:
                continue
            out.append(word)
        return out

    def detokenize(self, ids: Iterable[int]) -> str:
        return " ".join(self.decode(ids))

    def count_unknown(self, words: Sequence[str]) -> int:
        return sum(1 for w in words if w not in self.stoi)

    def to_json(self) -> str:
        return json.dumps({"itos": self.itos}, ensure_ascii=False, indent=2) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Tokenizer":
        data: Dict[str, Any] = json.loads(text)
        return cls(data["itos"])

    def save(self, path: Path) -> Path:
        return atomic_write_text(Path(path), self.to_json())

    @classmethod
    def load(cls, path: Path) -> "Tokenizer":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def build_vocab(
    sentences: Iterable[Sequence[str]],
    max_size: Optional[int] = None,
    min_count: int = 1,
) -> Tokenizer:
    """
    Frequency-ordered vocabulary (ties broken alphabetically). Words seen
    fewer than `min_count` times, or beyond `max_size` entries including
    specials, map to <unk>.
    """
    counts: Counter[str] = Counter()
    for words in sentences:
        counts.update(words)
    for special in SPECIALS:
        counts.pop(special, None)
    ranked = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    if max_size is not None:
        ranked = ranked[: max(0, max_size - len(SPECIALS))]
    tok = Tokenizer([*SPECIALS, *ranked])
    dropped = len(counts) - len(ranked)
    if dropped:
        log.info("vocabulary: %d words kept, %d mapped to %s", len(ranked), dropped, UNK)
    return tok
