"""
Transcription normalization.

An ordered rule pipeline standardizes ground truth and OCR output before
training and comparison:

- CodepointMap: explicit substitutions (ligatures, quotes, macrons, ...)
- PunctuationSpacing: no whitespace before punctuation, one space after
- WhitespaceCollapse: whitespace runs become a single space
- WhitespaceTrim: no whitespace at line start or end
"""

import re
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Tuple

from config import Config
from models.codec import Codec
from utils.exceptions import EmptyInputError, NormalizationError
from utils.logger import Logger

logger = Logger("textnorm")

PUNCTUATION = frozenset(".,;:!?/")
PUA_RANGE = (0xE000, 0xF8FF)

_ESCAPE = re.compile(r"\\(u[0-9a-fA-F]{4}|U[0-9a-fA-F]{8}|t|n|\\)")


def is_pua(char: str) -> bool:
    return PUA_RANGE[0] <= ord(char) <= PUA_RANGE[1]


def _unescape(text: str) -> str:
    def sub(match):
        token = match.group(1)
        if token in ("t", "n"):
            return {"t": "\t", "n": "\n"}[token]
        if token == "\\":
            return "\\"
        return chr(int(token[1:], 16))

    return _ESCAPE.sub(sub, text)


def _escape(text: str) -> str:
    out = []
    for ch in text:
        if ch == "\\":
            out.append("\\\\")
        elif ch == "\t":
            out.append("\\t")
        elif ch == "\n":
            out.append("\\n")
        else:
            out.append(ch)
    return "".join(out)


@dataclass(frozen=True)
class CodepointMap:
    """Many-to-one substitutions, longest source first, one left-to-right pass."""

    mapping: Tuple[Tuple[str, str], ...]
    drop_pua: bool = True
    _table: Dict[str, str] = field(default=None, compare=False, repr=False)
    _max_len: int = field(default=0, compare=False, repr=False)

    def __post_init__(self):
        table = {}
        for source, target in self.mapping:
            if not source:
                raise NormalizationError("empty source in codepoint map")
            if any(is_pua(c) for c in target):
                raise NormalizationError(
                    f"target {target!r} for {source!r} contains a private-use codepoint"
                )
            table[source] = target
        for source, target in table.items():
            for other in table:
                if other in target:
                    raise NormalizationError(
                        f"target {target!r} of {source!r} contains source {other!r}"
                    )
        object.__setattr__(self, "_table", table)
        object.__setattr__(self, "_max_len", max((len(s) for s in table), default=0))

    def apply(self, text: str) -> str:
        if self.drop_pua:
            # Unmapped PUA goes first so its neighbours can still match a source.
            text = "".join(c for c in text if not is_pua(c) or c in self._table)
        out: List[str] = []
        i, n = 0, len(text)
        while i < n:
            for length in range(min(self._max_len, n - i), 0, -1):
                target = self._table.get(text[i : i + length])
                if target is not None:
                    out.append(target)
                    i += length
                    break
            else:
                out.append(text[i])
                i += 1
        return "".join(out)

    def with_entries(self, extra: Iterable[Tuple[str, str]]) -> "CodepointMap":
        merged = dict(self.mapping)
        merged.update(extra)
        return CodepointMap(tuple(merged.items()), self.drop_pua)


@dataclass(frozen=True)
class PunctuationSpacing:
    punctuation: frozenset = PUNCTUATION

    def apply(self, text: str) -> str:
        out: List[str] = []
        n = len(text)
        for i, ch in enumerate(text):
            if ch not in self.punctuation:
                out.append(ch)
                continue
            while out and out[-1].isspace():
                out.pop()
            out.append(ch)
            if i + 1 < n:
                nxt = text[i + 1]
                if not nxt.isspace() and nxt not in self.punctuation:
                    out.append(" ")
        return "".join(out)


@dataclass(frozen=True)
class WhitespaceCollapse:
    def apply(self, text: str) -> str:
        out: List[str] = []
        for ch in text:
            if ch.isspace():
                if out and out[-1] == " ":
                    continue
                out.append(" ")
            else:
                out.append(ch)
        return "".join(out)


@dataclass(frozen=True)
class WhitespaceTrim:
    def apply(self, text: str) -> str:
        return text.strip()


@dataclass(frozen=True)
class NormalizationRuleSet:
    rules: Tuple[object, ...]

    @classmethod
    def default(cls, fold_virgula: bool = False) -> "NormalizationRuleSet":
        return cls.from_table(load_rule_table(Config.DEFAULT_RULES_FILE), fold_virgula)

    @classmethod
    def from_table(
        cls, mapping: Tuple[Tuple[str, str], ...], fold_virgula: bool = False
    ) -> "NormalizationRuleSet":
        codepoints = CodepointMap(mapping)
        if fold_virgula:
            codepoints = codepoints.with_entries([("/", ",")])
        # This order keeps the composite idempotent.
        return cls(
            (codepoints, PunctuationSpacing(), WhitespaceCollapse(), WhitespaceTrim())
        )

    @classmethod
    def from_file(cls, path: Optional[str] = None, fold_virgula: bool = False):
        if path is None:
            return cls.default(fold_virgula)
        return cls.from_table(load_rule_table(path), fold_virgula)


def parse_rule_table(text: str, source_name: str = "<table>") -> Tuple[Tuple[str, str], ...]:
    """Parse `source<TAB>target` lines; `#` starts a comment line."""
    entries = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip() or line.lstrip().startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise NormalizationError(
                f"{source_name}:{lineno}: expected 'source<TAB>target', got {line!r}"
            )
        entries.append((_unescape(parts[0]), _unescape(parts[1])))
    return tuple(entries)


def load_rule_table(path: str) -> Tuple[Tuple[str, str], ...]:
    with open(path, "r", encoding="utf-8") as f:
        return parse_rule_table(f.read(), path)


def dump_rules(path: Optional[str] = None) -> str:
    """Return a rule table as text, the embedded default unless a path is given."""
    with open(path or Config.DEFAULT_RULES_FILE, "r", encoding="utf-8") as f:
        return f.read()


def format_rule_table(mapping: Iterable[Tuple[str, str]]) -> str:
    return "".join(f"{_escape(s)}\t{_escape(t)}\n" for s, t in mapping)


def normalize(text: str, rules: Optional[NormalizationRuleSet] = None) -> str:
    """Apply every rule in declared order, each as one pass over the text."""
    if rules is None:
        rules = default_rules()
    for rule in rules.rules:
        text = rule.apply(text)
    return text


_DEFAULT: Optional[NormalizationRuleSet] = None


def default_rules() -> NormalizationRuleSet:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = NormalizationRuleSet.default()
    return _DEFAULT


def alphabet_of(corpus, rules: Optional[NormalizationRuleSet] = None, selected_only: bool = False) -> Codec:
    """Codec over every character of the corpus transcriptions.

    The transcriptions must already be normalized by ``rules``.
    """
    rules = rules or default_rules()
    texts = [line.transcription for line in corpus.lines(selected_only=selected_only)]
    if not texts:
        raise EmptyInputError("cannot build an alphabet from an empty corpus")
    for text in set(texts):
        if normalize(text, rules) != text:
            raise NormalizationError(f"transcription not normalized: {text!r}")
    codec = Codec.from_chars(c for t in texts for c in t)
    logger.debug(f"alphabet of {len(texts)} lines: {codec.size - 1} characters")
    return codec
