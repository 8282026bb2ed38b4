"""
Confidence voting over an ensemble of recognizers.

Voters share architecture, codec and preprocessing, so their posterior
matrices for one line have the same frame count and are averaged
elementwise before decoding.
"""

from concurrent.futures import ThreadPoolExecutor
from typing import List, Sequence

import numpy as np

from ctc import DecodeResult, greedy_decode
from imgproc import pad_batch
from models.checkpoint import Checkpoint
from models.codec import Codec
from models.network import forward
from utils.exceptions import EmptyInputError, VoterMismatchError


def vote(prob_matrices: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of N posterior matrices, independent of voter order."""
    if not prob_matrices:
        raise EmptyInputError("vote needs at least one voter")
    reference = np.asarray(prob_matrices[0]).shape
    for index, matrix in enumerate(prob_matrices):
        if np.asarray(matrix).shape != reference:
            raise VoterMismatchError(index, f"shape {np.asarray(matrix).shape} != {reference}")
    stacked = np.stack([np.asarray(m, dtype=np.float64) for m in prob_matrices])
    # sorting along the voter axis fixes the summation order
    ordered = np.sort(stacked, axis=0)
    low, high = ordered[0], ordered[-1]
    return np.where(low == high, low, ordered.mean(axis=0))


def check_ensemble(checkpoints: Sequence[Checkpoint], codec: Codec = None) -> None:
    if not checkpoints:
        raise EmptyInputError("ensemble has no voters")
    first = checkpoints[0]
    codec = codec or first.codec
    for index, ckpt in enumerate(checkpoints):
        if ckpt.codec != codec:
            raise VoterMismatchError(index, "codec differs from the ensemble codec")
        if ckpt.arch != first.arch:
            raise VoterMismatchError(index, "architecture differs from voter 0")


def vote_and_decode(line: np.ndarray, checkpoints: Sequence[Checkpoint], codec: Codec) -> DecodeResult:
    """Forward one height-normalized line through every voter, vote, decode."""
    return predict_batch(checkpoints, [line], codec)[0]


def predict_batch(
    checkpoints: Sequence[Checkpoint],
    images: Sequence[np.ndarray],
    codec: Codec,
    batch_size: int = 16,
    threads: int = 1,
) -> List[DecodeResult]:
    """Voted decoding of many height-normalized lines, batched by width."""
    check_ensemble(checkpoints, codec)
    order = sorted(range(len(images)), key=lambda i: (images[i].shape[1], i))
    batches = [order[i : i + batch_size] for i in range(0, len(order), batch_size)]

    def run(ckpt: Checkpoint, members: List[int]) -> List[np.ndarray]:
        batch, widths = pad_batch([images[i] for i in members])
        probs, _, _ = forward(ckpt, batch, widths, training=False)
        return probs

    results: List[DecodeResult] = [None] * len(images)
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        for members in batches:
            per_voter = list(pool.map(lambda c: run(c, members), checkpoints))
            for slot, index in enumerate(members):
                voted = vote([voter[slot] for voter in per_voter])
                results[index] = greedy_decode(voted, codec)
    return results
