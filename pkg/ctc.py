"""
Connectionist temporal classification.

This module handles:
- CTC loss and its exact gradient wrt the pre-softmax logits (log space)
- A brute-force path-enumeration oracle for small instances
- Greedy best-path decoding with per-character confidences
"""

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np

from models.codec import BLANK, Codec
from utils.exceptions import EmptyInputError, InstanceTooLargeError, LabelTooLongError

PROB_FLOOR = 1e-30
BRUTE_FORCE_LIMIT = 10**7
_CHUNK = 1 << 16


@dataclass(frozen=True)
class DecodeResult:
    text: str
    char_confidences: Tuple[float, ...]
    sequence_confidence: float

    def to_dict(self):
        return {
            "text": self.text,
            "char_confidences": list(self.char_confidences),
            "sequence_confidence": self.sequence_confidence,
        }


def required_frames(label: Sequence[int]) -> int:
    """Label length plus one separating blank per adjacent repeat."""
    label = list(label)
    return len(label) + sum(1 for a, b in zip(label, label[1:]) if a == b)


def canonical_path(label: Sequence[int], frames: int) -> List[int]:
    """Label symbols separated by blanks, padded with blanks to ``frames``."""
    path: List[int] = []
    for i, symbol in enumerate(label):
        if i:
            path.append(BLANK)
        path.append(int(symbol))
    if len(path) > frames:
        raise LabelTooLongError(frames, len(path))
    return path + [BLANK] * (frames - len(path))


def _check(probs: np.ndarray, label: Sequence[int]) -> Tuple[np.ndarray, np.ndarray]:
    probs = np.asarray(probs, dtype=np.float64)
    label = np.asarray(label, dtype=np.int64)
    if label.size == 0:
        raise EmptyInputError("CTC needs a nonempty label")
    if label.min() < 1 or label.max() >= probs.shape[1]:
        raise ValueError(f"label indices must lie in 1..{probs.shape[1] - 1}")
    needed = required_frames(label)
    if probs.shape[0] < needed:
        raise LabelTooLongError(probs.shape[0], needed)
    return probs, label


def ctc_loss_grad(probs: np.ndarray, label: Sequence[int]) -> Tuple[float, np.ndarray]:
    """Negative log-likelihood of ``label`` and its gradient wrt the logits behind ``probs``."""
    probs, label = _check(probs, label)
    steps = probs.shape[0]
    ext = np.zeros(2 * label.size + 1, dtype=np.int64)
    ext[1::2] = label
    states = ext.size
    lp = np.log(np.maximum(probs, PROB_FLOOR))[:, ext]

    # a state may skip the blank before it unless it repeats the symbol two back
    skip = np.zeros(states, dtype=bool)
    skip[2:] = (ext[2:] != BLANK) & (ext[2:] != ext[:-2])
    neg_inf = np.full(states, -np.inf)

    alpha = np.full((steps, states), -np.inf)
    alpha[0, :2] = lp[0, :2]
    for t in range(1, steps):
        prev = alpha[t - 1]
        stay = prev
        step = np.concatenate(([-np.inf], prev[:-1]))
        jump = np.where(skip, np.concatenate(([-np.inf, -np.inf], prev[:-2])), neg_inf)
        alpha[t] = np.logaddexp(np.logaddexp(stay, step), jump) + lp[t]

    # beta excludes the emission at t
    beta = np.full((steps, states), -np.inf)
    beta[-1, -2:] = 0.0
    skip_next = np.zeros(states, dtype=bool)
    skip_next[:-2] = skip[2:]
    for t in range(steps - 2, -1, -1):
        nxt = beta[t + 1] + lp[t + 1]
        stay = nxt
        step = np.concatenate((nxt[1:], [-np.inf]))
        jump = np.where(skip_next, np.concatenate((nxt[2:], [-np.inf, -np.inf])), neg_inf)
        beta[t] = np.logaddexp(np.logaddexp(stay, step), jump)

    log_z = np.logaddexp(alpha[-1, -1], alpha[-1, -2])
    gamma = np.exp(alpha + beta - log_z)
    occupancy = np.zeros_like(probs)
    for s in range(states):
        occupancy[:, ext[s]] += gamma[:, s]
    return float(-log_z), probs - occupancy


def ctc_brute_force(probs: np.ndarray, label: Sequence[int]) -> float:
    """Sum over every frame path that collapses to ``label``; small instances only."""
    probs = np.asarray(probs, dtype=np.float64)
    steps, classes = probs.shape
    if classes**steps > BRUTE_FORCE_LIMIT:
        raise InstanceTooLargeError(f"{classes}^{steps} paths exceed the limit of {BRUTE_FORCE_LIMIT}")
    probs, label = _check(probs, label)

    place = classes ** np.arange(steps - 1, -1, -1, dtype=np.int64)
    total = 0.0
    for start in range(0, classes**steps, _CHUNK):
        ids = np.arange(start, min(start + _CHUNK, classes**steps), dtype=np.int64)
        paths = (ids[:, None] // place[None, :]) % classes
        prev = np.concatenate([np.full((len(ids), 1), -1), paths[:, :-1]], axis=1)
        emitted = (paths != BLANK) & (paths != prev)
        position = np.clip(np.cumsum(emitted, axis=1) - 1, 0, label.size - 1)
        matches = ~emitted | (paths == label[position])
        valid = (emitted.sum(axis=1) == label.size) & matches.all(axis=1)
        if valid.any():
            chosen = paths[valid]
            total += float(np.prod(probs[np.arange(steps)[None, :], chosen], axis=1).sum())
    return float(-np.log(total))


def greedy_decode(probs: np.ndarray, codec: Codec) -> DecodeResult:
    """Best path: argmax per frame, collapse repeats, drop blanks."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape[0] == 0:
        return DecodeResult("", (), 1.0)
    best = probs.argmax(axis=1)
    winning = probs[np.arange(probs.shape[0]), best]

    # run boundaries of the argmax path
    starts = np.flatnonzero(np.concatenate(([True], best[1:] != best[:-1])))
    ends = np.concatenate((starts[1:], [best.size]))
    labels: List[int] = []
    confidences: List[float] = []
    for s, e in zip(starts, ends):
        if best[s] == BLANK:
            continue
        labels.append(int(best[s]))
        confidences.append(float(winning[s:e].mean()))
    sequence = float(np.mean(confidences)) if confidences else 1.0
    return DecodeResult(codec.decode(labels), tuple(confidences), sequence)
