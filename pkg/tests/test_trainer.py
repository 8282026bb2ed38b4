import numpy as np
import pytest

from config import TrainConfig
from corpus import Corpus, select_balanced
from models.checkpoint import to_bytes
from models.codec import Codec
from models.network import init_params
from textnorm import alphabet_of
from trainer import (
    VALIDATION_VARIANT,
    EarlyStopping,
    adapt_codec,
    as_groups,
    ensemble_cer,
    finetune,
    train_crossfold,
    train_single,
    train_two_stage,
    variant_image,
)
from utils.exceptions import CodecMismatchError, EmptyInputError, HistOCRError
from vote import predict_batch

from conftest import tiny_arch

FAST = TrainConfig(seed=3, voters=2, max_epochs=1, patience=2, augmentations_per_sample=0, batch_size=4)
FROZEN = FAST.with_overrides(lr=0.0, max_epochs=5)


def decoded(voters, data):
    height = voters[0].arch.input_height
    images = [variant_image(g, VALIDATION_VARIANT, height) for g in as_groups(data)]
    return [(r.text, r.char_confidences) for r in predict_batch(voters, images, voters[0].codec, batch_size=4)]


def ema_moved(ckpt):
    return any(not np.array_equal(ckpt.tensors[k], ckpt.ema_tensors[k]) for k in ckpt.tensors)


def test_early_stopping_counts_non_improvements():
    stopper = EarlyStopping(5)
    decisions = [stopper(0.5) for _ in range(6)]
    assert decisions[0] == (True, False)
    assert [stop for _, stop in decisions] == [False] * 5 + [True]
    assert stopper(0.4) == (True, False)


def test_variant_image_derives_from_raw(small_corpus):
    group = as_groups(small_corpus)[0]
    image = variant_image(group, "bin", 16)
    assert image.shape[0] == 16
    assert image.min() >= 0.0 and image.max() <= 1.0
    assert np.array_equal(variant_image(group, "raw", 16), variant_image(group, "raw", 16))


class TestSingle:
    def test_zero_lr_stops_after_patience(self, small_corpus):
        groups = as_groups(small_corpus)
        codec = alphabet_of(small_corpus)
        arch = tiny_arch(codec.size)
        best, report = train_single(FROZEN, groups[:8], groups[8:], arch=arch, codec=codec)
        assert report.stop_reason == "early_stop"
        assert len(report.history) == FROZEN.patience + 1
        assert len({c for _, c in report.history}) == 1
        assert report.best_index == 0
        assert best.same_weights(init_params(arch, FROZEN.seed, codec))
        assert best.train_meta["seed"] == FROZEN.seed

    def test_input_errors(self, small_corpus):
        groups = as_groups(small_corpus)
        with pytest.raises(EmptyInputError):
            train_single(FAST, [], groups)
        with pytest.raises(HistOCRError):
            train_single(FAST, groups[:6], groups[4:])

    def test_start_codec_must_cover_training_text(self, small_corpus):
        narrow = Codec.from_chars("")
        start = init_params(tiny_arch(narrow.size), 0, narrow)
        groups = as_groups(small_corpus)
        with pytest.raises(CodecMismatchError):
            train_single(FAST, groups[:8], groups[8:], init=start)


class TestCrossfold:
    def test_deterministic_across_threads(self, small_corpus):
        codec = alphabet_of(small_corpus)
        arch = tiny_arch(codec.size)
        config = FAST.with_overrides(augmentations_per_sample=1)
        one = train_crossfold(config, small_corpus, arch=arch, threads=1)
        two = train_crossfold(config, small_corpus, arch=arch, threads=2)
        assert [to_bytes(c) for c, _ in one] == [to_bytes(c) for c, _ in two]
        assert [r.history for _, r in one] == [r.history for _, r in two]
        assert not one[0][0].same_weights(one[1][0])
        assert one[0][0].codec == one[1][0].codec == codec

    def test_too_few_lines(self, small_corpus):
        with pytest.raises(EmptyInputError):
            train_crossfold(FAST.with_overrides(voters=20), small_corpus, arch=tiny_arch(4))


class TestTwoStage:
    def test_frozen_second_stage_keeps_stage_one(self, two_style_corpus):
        corpus = select_balanced(two_style_corpus, cap=8, seed=1)
        arch = tiny_arch(alphabet_of(corpus).size)
        result = train_two_stage(FAST, FROZEN, corpus, arch=arch)
        assert len(result.ensemble) == FAST.voters
        stage1 = [c for c, _ in result.stage1]
        assert all(ema_moved(c) for c in stage1)
        for final, first in zip(result.ensemble, stage1):
            assert final.same_weights(first)
        assert decoded(result.ensemble, corpus) == decoded(stage1, corpus)
        assert all(r.stage == "stage2" for r in result.stage2_reports)

    def test_needs_selected_lines(self, two_style_corpus):
        with pytest.raises(EmptyInputError):
            train_two_stage(FAST, FAST, two_style_corpus, arch=tiny_arch(4))


class TestAdaptCodec:
    def test_same_codec_is_a_copy(self):
        codec = Codec.from_chars("ab")
        start = init_params(tiny_arch(codec.size), 0, codec)
        adapted = adapt_codec(start, codec)
        assert adapted.same_weights(start)
        assert adapted.train_meta["stage"] == "adapted"

    def test_shared_rows_are_kept(self):
        old, new = Codec.from_chars("ab"), Codec.from_chars("abc")
        start = init_params(tiny_arch(old.size), 0, old)
        adapted = adapt_codec(start, new, seed=5)
        assert adapted.codec == new and adapted.arch.num_classes == new.size
        for char in " ab":
            row_old, row_new = old.index(char), new.index(char)
            assert np.array_equal(adapted.tensors["out.w"][row_new], start.tensors["out.w"][row_old])
            assert np.array_equal(adapted.ema_tensors["out.w"][row_new], start.ema_tensors["out.w"][row_old])
        assert np.array_equal(adapted.tensors["out.w"][0], start.tensors["out.w"][0])
        fresh = new.index("c")
        assert np.any(adapted.tensors["out.w"][fresh] != 0)
        assert np.array_equal(adapted.tensors["out.w"][fresh], adapted.ema_tensors["out.w"][fresh])
        assert np.array_equal(adapted.tensors["lstm_fw.w_x"], start.tensors["lstm_fw.w_x"])
        again = adapt_codec(start, new, seed=5)
        assert again.same_weights(adapted)


class TestFinetune:
    def start_for(self, corpus):
        codec = alphabet_of(corpus)
        return init_params(tiny_arch(codec.size), 0, codec)

    def trained_start(self, corpus):
        codec = alphabet_of(corpus)
        groups = as_groups(corpus)
        start, _ = train_single(FAST, groups[:8], groups[8:], arch=tiny_arch(codec.size), codec=codec)
        return start

    def test_zero_lr_matches_start_model(self, small_corpus):
        start = self.trained_start(small_corpus)
        assert ema_moved(start)
        result = finetune(start, FROZEN.with_overrides(max_epochs=1), small_corpus, heldout=small_corpus)
        assert len(result.ensembles) == 1 and len(result.ensembles[0]) == FROZEN.voters
        assert all(voter.same_weights(start) for voter in result.ensembles[0])
        assert decoded(result.ensembles[0], small_corpus) == decoded([start], small_corpus)
        expected = ensemble_cer([start], small_corpus)
        assert result.heldout.overall.cer == expected.overall.cer
        assert result.mean_cer is None
        assert result.to_dict()["heldout"]["cer"] == expected.overall.cer

    def test_folds(self, small_corpus):
        start = self.start_for(small_corpus)
        result = finetune(start, FAST, small_corpus, folds=2)
        assert len(result.ensembles) == 2 and len(result.fold_cers) == 2
        assert result.mean_cer == pytest.approx(np.mean(result.fold_cers))
        assert result.heldout is None


def test_ensemble_cer_by_work(two_style_corpus):
    codec = alphabet_of(two_style_corpus)
    voters = [init_params(tiny_arch(codec.size), 0, codec, voter=i) for i in range(2)]
    evaluation = ensemble_cer(voters, two_style_corpus)
    assert set(evaluation.by_work.groups) == {"blocky", "condensed"}
    assert len(evaluation.voter_cers) == 2
    assert evaluation.to_dict()["macro_cer"] == evaluation.macro_cer
    with pytest.raises(EmptyInputError):
        ensemble_cer(voters, Corpus())
