import numpy as np
import pytest

from models.checkpoint import save_checkpoint
from models.codec import Codec
from models.model_manager import ModelManager
from models.network import ArchSpec, forward, init_params
from ctc import greedy_decode
from vote import check_ensemble, predict_batch, vote, vote_and_decode
from utils.exceptions import EmptyInputError, VoterMismatchError

CODEC = Codec.from_chars("ab")
ARCH = ArchSpec(input_height=8, conv_filters=(2, 3), lstm_hidden=4, num_classes=CODEC.size)


def random_rows(rng, frames=6, classes=4):
    m = rng.random((frames, classes))
    return m / m.sum(axis=1, keepdims=True)


def test_single_voter_is_identity(rng):
    m = random_rows(rng)
    assert np.array_equal(vote([m]), m)


def test_two_voter_mean():
    voted = vote([np.array([[0.6, 0.4]]), np.array([[0.2, 0.8]])])
    assert np.allclose(voted, [[0.4, 0.6]])


def test_order_does_not_matter(rng):
    matrices = [random_rows(rng) for _ in range(5)]
    reference = vote(matrices)
    for perm in ([4, 3, 2, 1, 0], [2, 0, 4, 1, 3]):
        assert np.array_equal(vote([matrices[i] for i in perm]), reference)
    assert np.allclose(reference.sum(axis=1), 1.0)


def test_identical_voters_vote_exactly(rng):
    m = random_rows(rng)
    assert np.array_equal(vote([m, m.copy(), m.copy()]), m)


def test_mismatch_names_the_voter(rng):
    with pytest.raises(VoterMismatchError) as info:
        vote([random_rows(rng), random_rows(rng), random_rows(rng, frames=5)])
    assert info.value.index == 2
    with pytest.raises(EmptyInputError):
        vote([])


def test_identical_checkpoints_match_single_decode(rng):
    ckpt = init_params(ARCH, 4, CODEC)
    line = rng.random((8, 40))
    single = greedy_decode(forward(ckpt, line[None])[0][0], CODEC)
    voted = vote_and_decode(line, [ckpt.copy() for _ in range(5)], CODEC)
    assert voted == single


def test_predict_batch_is_deterministic(rng):
    voters = [init_params(ARCH, 4, CODEC, voter=i) for i in range(3)]
    lines = [rng.random((8, int(w))) for w in (12, 40, 24, 33)]
    first = predict_batch(voters, lines, CODEC, batch_size=2)
    assert first == predict_batch(voters, lines, CODEC, batch_size=2, threads=2)
    alone = vote_and_decode(lines[1], voters, CODEC)
    assert alone.text == first[1].text
    assert alone.sequence_confidence == pytest.approx(first[1].sequence_confidence, abs=1e-5)


def test_check_ensemble():
    good = init_params(ARCH, 0, CODEC)
    other_codec = Codec.from_chars("xy")
    other = init_params(ArchSpec(input_height=8, conv_filters=(2, 3), lstm_hidden=4, num_classes=other_codec.size), 0, other_codec)
    with pytest.raises(VoterMismatchError) as info:
        check_ensemble([good, good, other])
    assert info.value.index == 2
    wider = init_params(ArchSpec(input_height=8, conv_filters=(2, 3), lstm_hidden=6, num_classes=CODEC.size), 0, CODEC)
    with pytest.raises(VoterMismatchError):
        check_ensemble([good, wider])
    with pytest.raises(EmptyInputError):
        check_ensemble([])


class TestModelManager:
    def test_from_files(self, tmp_path, rng):
        paths = []
        for i in range(2):
            path = str(tmp_path / f"voter{i}.ckpt")
            save_checkpoint(init_params(ARCH, 1, CODEC, voter=i), path)
            paths.append(path)
        manager = ModelManager.from_files(paths)
        assert manager.codec == CODEC
        assert manager.input_height == 8
        results = manager.predict([rng.random((16, 50)), rng.random((8, 20))], variant="raw")
        assert len(results) == 2
        assert all(0.0 <= r.sequence_confidence <= 1.0 for r in results)

    def test_mismatch_reports_source(self, tmp_path):
        other_codec = Codec.from_chars("abc")
        good = str(tmp_path / "good.ckpt")
        bad = str(tmp_path / "bad.ckpt")
        save_checkpoint(init_params(ARCH, 0, CODEC), good)
        save_checkpoint(
            init_params(ArchSpec(input_height=8, conv_filters=(2, 3), lstm_hidden=4, num_classes=other_codec.size), 0, other_codec),
            bad,
        )
        with pytest.raises(VoterMismatchError) as info:
            ModelManager.from_files([good, bad])
        assert info.value.index == 1
        assert "bad.ckpt" in str(info.value)
