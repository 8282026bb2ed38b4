"""Ordered alphabet mapping characters to output-layer indices (blank = 0)."""

from dataclasses import dataclass
from typing import Iterable, List, Sequence, Tuple

from utils.exceptions import CodecMismatchError

BLANK = 0


@dataclass(frozen=True)
class Codec:
    chars: Tuple[str, ...]

    @classmethod
    def from_chars(cls, chars: Iterable[str]) -> "Codec":
        """Sorted-by-codepoint codec; space is always present."""
        return cls(tuple(sorted(set(chars) | {" "})))

    @property
    def size(self) -> int:
        """Number of output classes including blank."""
        return len(self.chars) + 1

    def index(self, char: str) -> int:
        try:
            return self._lookup()[char]
        except KeyError:
            raise CodecMismatchError(f"character {char!r} not in codec")

    def encode(self, text: str) -> List[int]:
        return [self.index(c) for c in text]

    def decode(self, labels: Sequence[int]) -> str:
        return "".join(self.chars[i - 1] for i in labels if i != BLANK)

    def covers(self, text: str) -> bool:
        lookup = self._lookup()
        return all(c in lookup for c in text)

    def missing(self, texts: Iterable[str]) -> List[str]:
        lookup = self._lookup()
        return sorted({c for t in texts for c in t if c not in lookup})

    def _lookup(self):
        cached = self.__dict__.get("_index")
        if cached is None:
            cached = {c: i + 1 for i, c in enumerate(self.chars)}
            object.__setattr__(self, "_index", cached)
        return cached

    def to_list(self) -> List[str]:
        return list(self.chars)
