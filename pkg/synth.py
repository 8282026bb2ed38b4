"""
Synthetic text lines from built-in bitmap styles.

This module handles:
- Loading the packaged 5x7 base glyph table
- Deriving the four built-in styles (blocky, serif, condensed, noisy)
- Rendering lines and generating whole synthetic corpora, one work per style
"""

from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, List, Optional, Tuple

import numpy as np
from scipy import ndimage

from config import Config
from corpus import Corpus, LineSample, WorkEntry, largest_remainder
from utils.exceptions import EmptyInputError, UnsupportedCharacterError
from utils.logger import Logger
from utils.seeding import rng_for

logger = Logger("synth")

GLYPH_HEIGHT = 32
BASE_ROWS = 7
ROW_SCALE = 4
MARGIN = 2

DEFAULT_ALPHABET = "abcdefghijklmnopqrstuvwxyz "


@dataclass(frozen=True)
class GlyphStyle:
    style_id: str
    glyphs: Dict[str, np.ndarray] = field(compare=False, repr=False)
    spacing: int
    space_width: int

    def glyph_width(self, char: str) -> int:
        if char == " ":
            return self.space_width
        bitmap = self.glyphs.get(char)
        if bitmap is None:
            raise UnsupportedCharacterError(char, self.style_id)
        return bitmap.shape[1]

    def supports(self, char: str) -> bool:
        return char == " " or char in self.glyphs


@dataclass(frozen=True)
class SynthSpec:
    """What to generate: one work per style, line counts from the weights."""

    styles: Tuple[str, ...] = ("blocky", "serif", "condensed", "noisy")
    total_lines: int = 100
    weights: Optional[Tuple[float, ...]] = None
    alphabet: str = DEFAULT_ALPHABET
    length_range: Tuple[int, int] = (5, 20)
    lines_per_page: int = Config.LINES_PER_SYNTH_PAGE

    def __post_init__(self):
        if not self.styles:
            raise ValueError("at least one style is required")
        weights = self.style_weights()
        if any(w < 0 for w in weights) or not any(w > 0 for w in weights):
            raise ValueError("weights must be >= 0 with at least one positive")
        lo, hi = self.length_range
        if lo < 1 or hi < lo:
            raise ValueError(f"length_range must satisfy 1 <= lo <= hi, got {self.length_range}")
        if not self.alphabet.strip():
            raise ValueError("alphabet needs at least one non-space character")
        if self.total_lines < 0:
            raise ValueError("total_lines must be >= 0")

    def style_weights(self) -> Tuple[float, ...]:
        if self.weights is None:
            return tuple(1.0 for _ in self.styles)
        if len(self.weights) != len(self.styles):
            raise ValueError("one weight per style is required")
        return tuple(float(w) for w in self.weights)

    def line_counts(self) -> Dict[str, int]:
        weights = self.style_weights()
        total_weight = sum(weights)
        quotas = [w * self.total_lines / total_weight for w in weights]
        return dict(zip(self.styles, largest_remainder(quotas, self.total_lines)))


# ----------------------------------------------------------------- glyphs


def parse_glyph_table(text: str) -> Dict[str, np.ndarray]:
    """``[c]`` headers each followed by 7 rows; returns boolean ink masks.

    Lines starting with ``#`` are comments only before the first header;
    after that ``#`` is an ink cell.
    """
    glyphs: Dict[str, np.ndarray] = {}
    current: Optional[str] = None
    rows: List[str] = []

    def flush():
        if current is None:
            return
        if len(rows) != BASE_ROWS or len({len(r) for r in rows}) != 1:
            raise ValueError(f"glyph {current!r}: expected {BASE_ROWS} equal-width rows")
        glyphs[current] = np.array([[c == "#" for c in r] for r in rows], dtype=bool)

    for line in text.splitlines():
        line = line.rstrip()
        if not line or (current is None and line.startswith("#")):
            continue
        if line.startswith("[") and line.endswith("]") and len(line) == 3:
            flush()
            current, rows = line[1], []
        else:
            rows.append(line)
    flush()
    return glyphs


@lru_cache(maxsize=1)
def base_glyphs() -> Dict[str, np.ndarray]:
    with open(Config.GLYPH_TABLE_FILE, "r", encoding="utf-8") as f:
        table = parse_glyph_table(f.read())
    # variable width: drop empty columns on both sides
    trimmed = {}
    for char, mask in table.items():
        cols = np.flatnonzero(mask.any(axis=0))
        trimmed[char] = mask[:, cols[0] : cols[-1] + 1]
    return trimmed


def _scale(mask: np.ndarray, col_scale: int) -> np.ndarray:
    ink = np.kron(mask, np.ones((ROW_SCALE, col_scale), dtype=bool))
    return np.pad(ink, ((MARGIN, MARGIN), (0, 0)))


def _to_raster(ink: np.ndarray, ink_level: float = 0.0) -> np.ndarray:
    return np.where(ink, ink_level, 1.0)


def _blocky(char: str, mask: np.ndarray) -> np.ndarray:
    return _to_raster(_scale(mask, 4))


def _condensed(char: str, mask: np.ndarray) -> np.ndarray:
    return _to_raster(_scale(mask, 2))


def _serif(char: str, mask: np.ndarray) -> np.ndarray:
    """Narrow strokes with one-pixel feet on the top and bottom ink rows."""
    ink = np.pad(_scale(mask, 3), ((0, 0), (1, 1)))
    feet = np.zeros_like(ink)
    for row in (MARGIN, GLYPH_HEIGHT - MARGIN - 1):
        feet[row] = ndimage.binary_dilation(ink[row], structure=np.ones(3, dtype=bool))
    return _to_raster(ink | feet, ink_level=0.1)


def _noisy(char: str, mask: np.ndarray) -> np.ndarray:
    """Blocky strokes with a fixed per-glyph pattern of missing and gray ink."""
    ink = _scale(mask, 4)
    rng = rng_for("glyph-noise", char)
    dropped = rng.random(ink.shape) < 0.12
    levels = rng.uniform(0.0, 0.35, size=ink.shape)
    kept = ink & ~dropped
    if not kept.any():
        kept = ink
    return np.where(kept, levels, 1.0)


_STYLE_BUILDERS = {
    # style_id: (builder, spacing, space width)
    "blocky": (_blocky, 4, 12),
    "serif": (_serif, 3, 10),
    "condensed": (_condensed, 2, 8),
    "noisy": (_noisy, 4, 12),
}

BUILTIN_STYLES = tuple(_STYLE_BUILDERS)


@lru_cache(maxsize=None)
def builtin_style(style_id: str) -> GlyphStyle:
    try:
        builder, spacing, space_width = _STYLE_BUILDERS[style_id]
    except KeyError:
        raise ValueError(f"unknown style {style_id!r}; expected one of {', '.join(BUILTIN_STYLES)}")
    glyphs = {}
    for char, mask in base_glyphs().items():
        bitmap = builder(char, mask)
        bitmap.setflags(write=False)
        glyphs[char] = bitmap
    return GlyphStyle(style_id, glyphs, spacing, space_width)


# -------------------------------------------------------------- rendering


def line_width(text: str, style: GlyphStyle) -> int:
    return sum(style.glyph_width(c) for c in text) + style.spacing * (len(text) - 1)


def render_line(text: str, style: GlyphStyle) -> np.ndarray:
    """Black-on-white raster of height GLYPH_HEIGHT; glyphs pasted left to right."""
    if not text:
        raise EmptyInputError("cannot render an empty line")
    for char in text:
        if not style.supports(char):
            raise UnsupportedCharacterError(char, style.style_id)

    out = np.ones((GLYPH_HEIGHT, line_width(text, style)), dtype=np.float64)
    x = 0
    for char in text:
        width = style.glyph_width(char)
        if char != " ":
            out[:, x : x + width] = style.glyphs[char]
        x += width + style.spacing
    return out


def random_text(rng: np.random.Generator, alphabet: str, length_range: Tuple[int, int]) -> str:
    """Uniform characters; space never leads, trails or repeats."""
    symbols = sorted(set(alphabet))
    letters = [c for c in symbols if c != " "]
    length = int(rng.integers(length_range[0], length_range[1] + 1))
    chars: List[str] = []
    for i in range(length):
        pool = symbols
        if i == 0 or i == length - 1 or chars[-1] == " ":
            pool = letters
        chars.append(pool[int(rng.integers(len(pool)))])
    return "".join(chars)


def generate_corpus(spec: SynthSpec, seed: int) -> Corpus:
    """One work per style; each line's text is drawn from its own (seed, style, index) stream."""
    styles = {s: builtin_style(s) for s in spec.styles}
    for style in styles.values():
        unsupported = [c for c in sorted(set(spec.alphabet)) if not style.supports(c)]
        if unsupported:
            raise UnsupportedCharacterError(unsupported[0], style.style_id)

    works = []
    for style_id, count in spec.line_counts().items():
        style = styles[style_id]
        lines = []
        for index in range(count):
            text = random_text(rng_for("synth", seed, style_id, index), spec.alphabet, spec.length_range)
            lines.append(
                LineSample(
                    image=render_line(text, style),
                    transcription=text,
                    work_id=style_id,
                    page_id=f"p{index // spec.lines_per_page:04d}",
                    line_id=f"l{index % spec.lines_per_page:04d}",
                )
            )
        works.append(WorkEntry(style_id, {"style": style_id, "source": "synthetic"}, lines))
        logger.info(f"style {style_id}: {count} lines")
    return Corpus(works)
