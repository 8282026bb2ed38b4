"""
Training orchestration.

This module handles:
- Single trainings with periodic validation and early stopping
- Cross-fold training of a voter ensemble
- The two-stage pipeline (all lines, then the balanced selection)
- Finetuning from an existing checkpoint with codec adaptation
- Voted evaluation of an ensemble on un-augmented lines
"""

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import TrainConfig
from corpus import Corpus, LineSample, split_folds
from ctc import ctc_loss_grad, required_frames
from evaluation import CERResult, GroupedCER, cer, cer_by_group, prepare_pairs
from imgproc import AugmentParams, augment, make_variant, normalize_height, pad_batch
from models.checkpoint import Checkpoint
from models.codec import Codec
from models.network import (
    ArchSpec,
    adam_step,
    backward,
    ema_update,
    forward,
    glorot_bound,
    init_params,
    output_frames,
)
from textnorm import alphabet_of
from utils.exceptions import CodecMismatchError, EmptyInputError, HistOCRError
from utils.logger import Logger
from utils.seeding import rng_for, stable_key
from vote import predict_batch

logger = Logger("trainer")

LineGroup = List[LineSample]
Data = Union[Corpus, Sequence[LineGroup]]

VALIDATION_VARIANT = "bin"
# shuffled samples are sorted by width inside pools of this many batches
BUCKET_BATCHES = 4


@dataclass
class TrainReport:
    history: List[Tuple[int, float]] = field(default_factory=list)
    stop_reason: str = ""
    best_cer: Optional[float] = None
    best_index: Optional[int] = None
    wall_time: float = 0.0
    stage: str = "single"
    voter: int = 0
    skipped: List[str] = field(default_factory=list)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "history": [{"samples_seen": s, "val_cer": c} for s, c in self.history],
            "stop_reason": self.stop_reason,
            "best_cer": self.best_cer,
            "best_index": self.best_index,
            "wall_time": self.wall_time,
            "stage": self.stage,
            "voter": self.voter,
            "skipped": list(self.skipped),
        }


class EarlyStopping:
    """Counts consecutive evaluations without a strictly lower CER."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best: Optional[float] = None
        self.counter = 0

    def __call__(self, value: float) -> Tuple[bool, bool]:
        """Returns (improved, should_stop)."""
        if self.best is None or value < self.best:
            self.best = value
            self.counter = 0
            return True, False
        self.counter += 1
        return False, self.counter >= self.patience


@dataclass(frozen=True)
class _Sample:
    key: Tuple[str, ...]
    variant: str
    image: np.ndarray
    label: Tuple[int, ...]


# ------------------------------------------------------------------ data


def as_groups(data: Data) -> List[LineGroup]:
    if isinstance(data, Corpus):
        return list(data.line_groups().values())
    return [list(g) for g in data]


def _group_key(group: LineGroup) -> Tuple[str, str, str]:
    return group[0].key


def _texts(groups: Sequence[LineGroup]) -> List[str]:
    return [g[0].transcription for g in groups]


def variant_image(group: LineGroup, variant: str, height: int) -> np.ndarray:
    """The stored variant of a line, else the variant derived from its raw image."""
    by_variant = {line.variant: line for line in group}
    if variant in by_variant:
        image = by_variant[variant].image
    elif "raw" in by_variant:
        image = make_variant(by_variant["raw"].image, variant)
    else:
        raise HistOCRError(f"line {_group_key(group)}: no {variant!r} or raw image")
    return normalize_height(image, height)


def _prepare_samples(
    groups: Sequence[LineGroup], variants: Sequence[str], arch: ArchSpec, codec: Codec, report: TrainReport
) -> List[_Sample]:
    samples = []
    for group in groups:
        text = group[0].transcription
        missing = codec.missing([text])
        if missing:
            raise CodecMismatchError(f"line {_group_key(group)}: characters {missing} not in codec")
        label = tuple(codec.encode(text))
        for variant in variants:
            image = variant_image(group, variant, arch.input_height)
            frames = output_frames(image.shape[1])
            needed = required_frames(label)
            if not label or frames < needed:
                name = "/".join(_group_key(group)) + f":{variant}"
                logger.warning(f"skipping {name}: {frames} frames for a label needing {needed}")
                report.skipped.append(name)
                continue
            samples.append(_Sample(_group_key(group), variant, image, label))
    return samples


def _epoch_samples(
    originals: Sequence[_Sample], config: TrainConfig, epoch: int, voter: int, params: AugmentParams
) -> List[_Sample]:
    samples = list(originals)
    for sample in originals:
        for copy in range(config.augmentations_per_sample):
            stream = stable_key(*sample.key, sample.variant, copy, epoch)
            image = augment(sample.image, params, config.seed, stream)
            samples.append(_Sample(sample.key, "augmented", image, sample.label))
    order = rng_for("shuffle", config.seed, voter, epoch).permutation(len(samples))
    return [samples[i] for i in order]


def _batches(samples: Sequence[_Sample], batch_size: int) -> List[List[_Sample]]:
    """Width-bucketed batches in a fixed order."""
    pool = batch_size * BUCKET_BATCHES
    batches = []
    for start in range(0, len(samples), pool):
        chunk = sorted(samples[start : start + pool], key=lambda s: s.image.shape[1])
        batches.extend(chunk[i : i + batch_size] for i in range(0, len(chunk), batch_size))
    return batches


def _train_step(ckpt: Checkpoint, batch: Sequence[_Sample], config: TrainConfig, stream) -> float:
    images, widths = pad_batch([s.image for s in batch])
    probs, logits, cache = forward(ckpt, images, widths, training=True, dropout_stream=stream)
    grad = np.zeros(logits.shape, dtype=np.float64)
    total = 0.0
    for i, sample in enumerate(batch):
        loss, g = ctc_loss_grad(probs[i], sample.label)
        total += loss
        grad[i, : g.shape[0]] = g / len(batch)
    grads = backward(cache, grad)
    adam_step(ckpt, grads, config.lr, (config.beta1, config.beta2), config.eps, config.weight_decay)
    # lr=0 is a no-op step; the averaged weights stay put too
    if config.lr > 0:
        ema_update(ckpt, config.ema_decay)
    return total / len(batch)


def _validation_cer(ckpt: Checkpoint, images, texts, batch_size: int) -> float:
    results = predict_batch([ckpt], images, ckpt.codec, batch_size)
    return cer(zip(texts, (r.text for r in results))).cer


# -------------------------------------------------------------- training


def train_single(
    config: TrainConfig,
    train_set: Data,
    val_set: Data,
    init: Optional[Checkpoint] = None,
    arch: Optional[ArchSpec] = None,
    codec: Optional[Codec] = None,
    stage: str = "single",
    voter: int = 0,
) -> Tuple[Checkpoint, TrainReport]:
    """Train until early stopping or max_epochs; returns the best-validation checkpoint."""
    started = time.perf_counter()
    train_groups, val_groups = as_groups(train_set), as_groups(val_set)
    if not train_groups or not val_groups:
        raise EmptyInputError("training and validation sets must be nonempty")
    overlap = {_group_key(g) for g in train_groups} & {_group_key(g) for g in val_groups}
    if overlap:
        raise HistOCRError(f"{len(overlap)} lines are in both training and validation sets")

    if init is not None:
        ckpt = init.copy()
        ckpt.opt_state = None
        missing = ckpt.codec.missing(_texts(train_groups))
        if missing:
            raise CodecMismatchError(f"training characters {missing} not in the start codec")
    else:
        codec = codec or Codec.from_chars(c for t in _texts(train_groups + val_groups) for c in t)
        arch = replace(arch or ArchSpec.preset("desk", codec.size), num_classes=codec.size)
        ckpt = init_params(arch, config.seed, codec, voter=voter)
    arch, codec = ckpt.arch, ckpt.codec

    report = TrainReport(stage=stage, voter=voter)
    originals = _prepare_samples(train_groups, config.variant_list, arch, codec, report)
    if not originals:
        raise EmptyInputError("no trainable samples left after skipping")
    val_images = [variant_image(g, VALIDATION_VARIANT, arch.input_height) for g in val_groups]
    val_texts = _texts(val_groups)

    epoch_size = len(originals) * (1 + config.augmentations_per_sample)
    interval = config.eval_interval(epoch_size)
    stopper = EarlyStopping(config.patience)
    augment_params = AugmentParams()
    best = ckpt.copy()
    samples_seen = 0
    since_eval = 0
    step = 0

    def evaluate() -> bool:
        nonlocal best, since_eval
        value = _validation_cer(ckpt, val_images, val_texts, config.batch_size)
        report.history.append((samples_seen, value))
        improved, stop = stopper(value)
        if improved:
            best = ckpt.copy()
            report.best_cer, report.best_index = value, len(report.history) - 1
        since_eval = 0
        logger.info(
            f"{stage} voter {voter}: {samples_seen} samples, val CER {value:.4f}, "
            f"{stopper.counter}/{config.patience} without improvement"
        )
        return stop

    report.stop_reason = "max_epochs"
    stopped = False
    for epoch in range(config.max_epochs):
        for batch in _batches(_epoch_samples(originals, config, epoch, voter, augment_params), config.batch_size):
            _train_step(ckpt, batch, config, (config.seed, voter, stage, step))
            step += 1
            samples_seen += len(batch)
            since_eval += len(batch)
            if since_eval >= interval and evaluate():
                report.stop_reason = "early_stop"
                stopped = True
                break
        if stopped:
            break
    if not stopped and (since_eval > 0 or not report.history):
        evaluate()

    best.opt_state = None
    best.train_meta = {
        "seed": config.seed,
        "voter": voter,
        "epochs": round(samples_seen / epoch_size, 6),
        "best_cer": report.best_cer,
        "stage": stage,
        "samples_seen": samples_seen,
    }
    report.wall_time = time.perf_counter() - started
    return best, report


def _fold_count(config: TrainConfig) -> int:
    # a single voter still holds out one of five shards for validation
    return config.voters if config.voters >= 2 else 5


def _crossfold(
    config: TrainConfig,
    groups: List[LineGroup],
    init: Optional[Checkpoint],
    arch: Optional[ArchSpec],
    codec: Optional[Codec],
    stage: str,
    threads: int,
):
    if len(groups) < max(config.voters, 2):
        raise EmptyInputError(f"need at least {config.voters} lines for {config.voters} voters")
    if init is None and codec is None:
        codec = Codec.from_chars(c for t in _texts(groups) for c in t)
    folds = split_folds(groups, _fold_count(config), config.seed)[: config.voters]

    def run(voter: int):
        train, val = folds[voter]
        return train_single(config, train, val, init, arch, codec, stage, voter)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        results = list(pool.map(run, range(config.voters)))
    return results, folds


def train_crossfold(
    config: TrainConfig,
    data: Data,
    init: Optional[Checkpoint] = None,
    arch: Optional[ArchSpec] = None,
    codec: Optional[Codec] = None,
    stage: str = "crossfold",
    threads: int = 1,
) -> List[Tuple[Checkpoint, TrainReport]]:
    """One voter per fold; voter i validates on shard i. Voters share codec and arch."""
    results, _ = _crossfold(config, as_groups(data), init, arch, codec, stage, threads)
    return results


@dataclass
class TwoStageResult:
    ensemble: List[Checkpoint]
    stage1: List[Tuple[Checkpoint, TrainReport]]
    stage2_reports: List[TrainReport]


def train_two_stage(
    config_stage1: TrainConfig,
    config_stage2: TrainConfig,
    corpus: Corpus,
    arch: Optional[ArchSpec] = None,
    threads: int = 1,
) -> TwoStageResult:
    """Cross-fold training on all lines, then each voter continues on the selected lines of its own folds."""
    selected = {key for key in corpus.line_groups(selected_only=True)}
    if not selected:
        raise EmptyInputError("no selected lines for the second stage")
    if config_stage2.voters != config_stage1.voters:
        config_stage2 = config_stage2.with_overrides(voters=config_stage1.voters)

    stage1, folds = _crossfold(config_stage1, as_groups(corpus), None, arch, None, "stage1", threads)

    def run(voter: int):
        train, val = folds[voter]
        train2 = [g for g in train if _group_key(g) in selected]
        val2 = [g for g in val if _group_key(g) in selected] or val
        if not train2:
            raise EmptyInputError(f"voter {voter}: no selected lines in its training folds")
        return train_single(config_stage2, train2, val2, stage1[voter][0], stage="stage2", voter=voter)

    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        stage2 = list(pool.map(run, range(len(stage1))))
    return TwoStageResult([c for c, _ in stage2], stage1, [r for _, r in stage2])


# ------------------------------------------------------------- finetuning


def adapt_codec(ckpt: Checkpoint, new_codec: Codec, seed: Optional[int] = None) -> Checkpoint:
    """Remap the output layer to ``new_codec``; shared rows keep their exact bytes."""
    if new_codec == ckpt.codec:
        adapted = ckpt.copy()
        adapted.opt_state = None
        adapted.train_meta["stage"] = "adapted"
        return adapted

    seed = ckpt.train_meta.get("seed", 0) if seed is None else seed
    arch = replace(ckpt.arch, num_classes=new_codec.size)
    shape = (new_codec.size, ckpt.tensors["out.w"].shape[1])
    bound = glorot_bound("out.w", shape)

    def remap(tensors: Dict[str, np.ndarray]) -> Dict[str, np.ndarray]:
        out = {k: v.copy() for k, v in tensors.items() if not k.startswith("out.")}
        weight = np.zeros(shape, dtype=tensors["out.w"].dtype)
        bias = np.zeros(new_codec.size, dtype=tensors["out.b"].dtype)
        weight[0], bias[0] = tensors["out.w"][0], tensors["out.b"][0]
        for new_index, char in enumerate(new_codec.chars, start=1):
            if ckpt.codec.covers(char):
                old_index = ckpt.codec.index(char)
                weight[new_index] = tensors["out.w"][old_index]
                bias[new_index] = tensors["out.b"][old_index]
            else:
                row = rng_for("adapt", seed, char).uniform(-bound, bound, size=shape[1])
                weight[new_index] = row.astype(weight.dtype)
        out["out.w"], out["out.b"] = weight, bias
        return out

    meta = dict(ckpt.train_meta, stage="adapted")
    adapted = Checkpoint(arch, new_codec, remap(ckpt.tensors), remap(ckpt.ema_tensors), meta)
    # new rows start equal in live and shadow weights
    for new_index, char in enumerate(new_codec.chars, start=1):
        if not ckpt.codec.covers(char):
            adapted.ema_tensors["out.w"][new_index] = adapted.tensors["out.w"][new_index]
    adapted.validate()
    return adapted


@dataclass
class EnsembleEvaluation:
    overall: CERResult
    by_work: GroupedCER
    voter_cers: List[float]

    @property
    def macro_cer(self) -> float:
        return self.by_work.macro_cer

    def to_dict(self):
        return {
            "cer": self.overall.cer,
            "total_errors": self.overall.total_errors,
            "total_gt_chars": self.overall.total_gt_chars,
            "macro_cer": self.macro_cer,
            "by_work": {k: v.cer for k, v in self.by_work.groups.items()},
            "voter_cers": self.voter_cers,
        }


def ensemble_cer(
    checkpoints: Sequence[Checkpoint],
    data: Data,
    rules=None,
    batch_size: int = 16,
    threads: int = 1,
    per_voter: bool = True,
) -> EnsembleEvaluation:
    """Voted CER on the un-augmented ``bin`` lines, overall and per work."""
    groups = as_groups(data)
    if not groups:
        raise EmptyInputError("nothing to evaluate")
    codec = checkpoints[0].codec
    images = [variant_image(g, VALIDATION_VARIANT, checkpoints[0].arch.input_height) for g in groups]
    texts = _texts(groups)

    def score(voters) -> List[Tuple[str, str]]:
        results = predict_batch(voters, images, codec, batch_size, threads)
        return prepare_pairs(zip(texts, (r.text for r in results)), rules)

    pairs = score(checkpoints)
    by_work: Dict[str, List[Tuple[str, str]]] = {}
    for group, pair in zip(groups, pairs):
        by_work.setdefault(group[0].work_id, []).append(pair)
    voter_cers = [cer(score([c])).cer for c in checkpoints] if per_voter else []
    return EnsembleEvaluation(cer(pairs), cer_by_group(by_work), voter_cers)


@dataclass
class FinetuneResult:
    ensembles: List[List[Checkpoint]]
    reports: List[List[TrainReport]]
    fold_cers: List[float]
    heldout: Optional[EnsembleEvaluation] = None

    @property
    def mean_cer(self) -> Optional[float]:
        return float(np.mean(self.fold_cers)) if self.fold_cers else None

    def to_dict(self):
        return {
            "fold_cers": self.fold_cers,
            "mean_cer": self.mean_cer,
            "heldout": self.heldout.to_dict() if self.heldout else None,
            "reports": [[r.to_dict() for r in fold] for fold in self.reports],
        }


def finetune(
    start: Checkpoint,
    config: TrainConfig,
    corpus: Corpus,
    folds: int = 1,
    heldout: Optional[Data] = None,
    rules=None,
    threads: int = 1,
) -> FinetuneResult:
    """Adapt the start codec to the corpus, then cross-fold train every voter from it.

    With ``folds >= 2`` the corpus is split into folds (by work when there are
    enough works, otherwise by line); each fold is held out once and the
    reported CER is the mean over folds.
    """
    codec = alphabet_of(corpus)
    adapted = adapt_codec(start, codec)
    result = FinetuneResult([], [], [])

    if folds <= 1:
        trained = train_crossfold(config, corpus, init=adapted, stage="finetune", threads=threads)
        result.ensembles.append([c for c, _ in trained])
        result.reports.append([r for _, r in trained])
    else:
        if len(corpus.works) >= folds:
            units = [[g for g in as_groups(Corpus([w]))] for w in corpus.works]
        else:
            units = [[g] for g in as_groups(corpus)]
        for index, (train_units, test_units) in enumerate(split_folds(units, folds, config.seed)):
            train = [g for unit in train_units for g in unit]
            test = [g for unit in test_units for g in unit]
            trained = train_crossfold(config, train, init=adapted, stage=f"finetune{index}", threads=threads)
            ensemble = [c for c, _ in trained]
            result.ensembles.append(ensemble)
            result.reports.append([r for _, r in trained])
            result.fold_cers.append(ensemble_cer(ensemble, test, rules, per_voter=False).overall.cer)
            logger.info(f"finetune fold {index}: CER {result.fold_cers[-1]:.4f}")

    if heldout is not None:
        result.heldout = ensemble_cer(result.ensembles[0], heldout, rules, threads=threads)
    return result
