import numpy as np
import pytest

from models.checkpoint import MAGIC, from_bytes, load_checkpoint, save_checkpoint, to_bytes
from models.codec import Codec
from models.network import ArchSpec, init_params
from utils.exceptions import CheckpointFormatError, CodecMismatchError, ShapeMismatchError

CODEC = Codec.from_chars("abc")


@pytest.fixture
def ckpt():
    arch = ArchSpec(input_height=8, conv_filters=(2, 3), lstm_hidden=4, num_classes=CODEC.size)
    value = init_params(arch, 9, CODEC)
    value.train_meta = {"seed": 9, "epochs": 2, "history": [0.5, 0.25]}
    return value


def test_file_round_trip_is_byte_identical(ckpt, tmp_path):
    first = tmp_path / "a.ckpt"
    second = tmp_path / "b.ckpt"
    save_checkpoint(ckpt, str(first))
    loaded = load_checkpoint(str(first))
    save_checkpoint(loaded, str(second))
    assert first.read_bytes() == second.read_bytes()
    assert first.read_bytes().startswith(b"LSHOCR1\n")
    assert loaded.same_weights(ckpt)
    assert loaded.codec == CODEC
    assert loaded.arch == ckpt.arch
    assert loaded.train_meta == ckpt.train_meta


def test_float64_weights_are_stored_as_float32(ckpt):
    blob = to_bytes(ckpt.astype(np.float64))
    assert blob == to_bytes(ckpt)
    assert from_bytes(blob).dtype == np.float32


def test_bad_magic(ckpt):
    with pytest.raises(CheckpointFormatError):
        from_bytes(b"NOTOCR\n" + to_bytes(ckpt)[len(MAGIC):])


def test_truncated(ckpt):
    blob = to_bytes(ckpt)
    with pytest.raises(CheckpointFormatError):
        from_bytes(blob[:-4])
    with pytest.raises(CheckpointFormatError):
        from_bytes(MAGIC + b'{"arch": ')


def test_validate_codec_and_shapes(ckpt):
    ckpt.codec = Codec.from_chars("abcd")
    with pytest.raises(CodecMismatchError):
        ckpt.validate()

    other = init_params(ckpt.arch, 1, CODEC)
    del other.ema_tensors["out.b"]
    with pytest.raises(ShapeMismatchError):
        other.validate()


def test_copy_is_independent(ckpt):
    clone = ckpt.copy()
    clone.tensors["out.b"][...] += 1.0
    clone.train_meta["seed"] = 0
    assert not clone.same_weights(ckpt)
    assert ckpt.train_meta["seed"] == 9


def test_astype_keeps_values(ckpt):
    wide = ckpt.astype(np.float64)
    assert wide.dtype == np.float64
    assert all(np.array_equal(wide.tensors[k], ckpt.tensors[k]) for k in ckpt.tensors)
