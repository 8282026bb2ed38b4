import numpy as np
import pytest

from models.codec import Codec
from models.network import ArchSpec
from synth import SynthSpec, generate_corpus

SMALL_ALPHABET = "abc "


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_corpus():
    """Twelve blocky lines over a three-letter alphabet."""
    spec = SynthSpec(styles=("blocky",), total_lines=12, alphabet=SMALL_ALPHABET, length_range=(2, 4))
    return generate_corpus(spec, seed=7)


@pytest.fixture
def two_style_corpus():
    spec = SynthSpec(
        styles=("blocky", "condensed"), total_lines=16, alphabet=SMALL_ALPHABET, length_range=(2, 4)
    )
    return generate_corpus(spec, seed=11)


@pytest.fixture
def small_codec():
    return Codec.from_chars("abc")


def tiny_arch(num_classes: int, dropout: float = 0.25) -> ArchSpec:
    return ArchSpec(input_height=16, conv_filters=(2, 4), lstm_hidden=8, dropout=dropout, num_classes=num_classes)


@pytest.fixture
def arch_for():
    return tiny_arch


def write_tsv(path, rows):
    with open(path, "w", encoding="utf-8") as f:
        f.write("line_id\ttext\n")
        for line_id, text in rows:
            f.write(f"{line_id}\t{text}\n")
    return str(path)
