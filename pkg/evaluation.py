"""
Character error rates and confusion reports.

This module handles:
- Levenshtein distance and one deterministic optimal alignment
- Micro-averaged CER over line pairs, per group and macro-averaged
- Confusion tables of the most frequent edit operations
"""

import unicodedata
from dataclasses import dataclass
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import Config
from utils.exceptions import EmptyInputError

Pair = Tuple[str, str]

MATCH, SUBSTITUTE, DELETE, INSERT = "match", "substitute", "delete", "insert"
WHITESPACE_MARK = "␣"


@dataclass(frozen=True)
class EditOp:
    kind: str
    gt: str = ""
    pred: str = ""


def _distance_matrix(a: str, b: str) -> np.ndarray:
    """Full DP table; each row is solved at once with a running minimum for insertions."""
    a_codes = np.array([ord(c) for c in a], dtype=np.int64)
    b_codes = np.array([ord(c) for c in b], dtype=np.int64)
    n, m = a_codes.size, b_codes.size
    cols = np.arange(m + 1, dtype=np.int64)
    table = np.empty((n + 1, m + 1), dtype=np.int64)
    table[0] = cols
    for i in range(1, n + 1):
        prev = table[i - 1]
        best = np.empty(m + 1, dtype=np.int64)
        best[0] = i
        best[1:] = np.minimum(prev[1:] + 1, prev[:-1] + (b_codes != a_codes[i - 1]))
        # row[j] = min_k(best[k] + j - k) folds in the insertion chain
        table[i] = np.minimum.accumulate(best - cols) + cols
    return table


def levenshtein(a: str, b: str) -> int:
    return int(_distance_matrix(a, b)[-1, -1])


def align(gt: str, pred: str) -> List[EditOp]:
    """One optimal alignment; backtrace prefers match, then substitute, delete, insert."""
    table = _distance_matrix(gt, pred)
    i, j = len(gt), len(pred)
    ops: List[EditOp] = []
    while i > 0 or j > 0:
        here = table[i, j]
        if i > 0 and j > 0 and gt[i - 1] == pred[j - 1] and here == table[i - 1, j - 1]:
            ops.append(EditOp(MATCH, gt[i - 1], pred[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and j > 0 and here == table[i - 1, j - 1] + 1:
            ops.append(EditOp(SUBSTITUTE, gt[i - 1], pred[j - 1]))
            i, j = i - 1, j - 1
        elif i > 0 and here == table[i - 1, j] + 1:
            ops.append(EditOp(DELETE, gt=gt[i - 1]))
            i -= 1
        else:
            ops.append(EditOp(INSERT, pred=pred[j - 1]))
            j -= 1
    ops.reverse()
    return ops


def replay(gt: str, ops: Sequence[EditOp]) -> str:
    """Apply an alignment to the GT string; yields the prediction."""
    out: List[str] = []
    position = 0
    for op in ops:
        if op.kind in (MATCH, SUBSTITUTE, DELETE):
            if gt[position] != op.gt:
                raise ValueError(f"alignment does not fit GT at {position}")
            position += 1
        if op.kind != DELETE:
            out.append(op.pred)
    return "".join(out)


@dataclass(frozen=True)
class CERResult:
    cer: float
    total_errors: int
    total_gt_chars: int

    def to_dict(self) -> Dict[str, float]:
        return {"cer": self.cer, "total_errors": self.total_errors, "total_gt_chars": self.total_gt_chars}


def cer(pairs: Iterable[Pair]) -> CERResult:
    """Micro average: summed distances over summed GT lengths (codepoints)."""
    errors = 0
    chars = 0
    for gt, pred in pairs:
        errors += levenshtein(gt, pred)
        chars += len(gt)
    if chars == 0:
        raise EmptyInputError("CER is undefined for empty ground truth")
    return CERResult(errors / chars, errors, chars)


def prepare_pairs(pairs: Iterable[Pair], rules=None) -> List[Pair]:
    """NFC on both sides, then the normalization rules when given."""
    from textnorm import normalize

    out = []
    for gt, pred in pairs:
        gt = unicodedata.normalize("NFC", gt)
        pred = unicodedata.normalize("NFC", pred)
        if rules is not None:
            gt, pred = normalize(gt, rules), normalize(pred, rules)
        out.append((gt, pred))
    return out


@dataclass(frozen=True)
class GroupedCER:
    groups: Dict[str, CERResult]
    overall: CERResult

    @property
    def macro_cer(self) -> float:
        return float(np.mean([r.cer for r in self.groups.values()]))

    def to_dict(self):
        return {
            "overall": self.overall.to_dict(),
            "macro_cer": self.macro_cer,
            "groups": {k: v.to_dict() for k, v in self.groups.items()},
        }


def cer_by_group(groups: Mapping[str, Sequence[Pair]]) -> GroupedCER:
    results = {name: cer(pairs) for name, pairs in groups.items() if pairs}
    if not results:
        raise EmptyInputError("no group has pairs")
    overall = cer(pair for pairs in groups.values() for pair in pairs)
    return GroupedCER(results, overall)


# --------------------------------------------------------------- confusions


def render_token(token: str) -> str:
    return "".join(WHITESPACE_MARK if c.isspace() else c for c in token)


@dataclass(frozen=True)
class ConfusionRow:
    gt: str
    pred: str
    count: int
    percent: float


@dataclass(frozen=True)
class ConfusionReport:
    rows: Tuple[ConfusionRow, ...]
    remaining_count: int
    remaining_percent: float
    total_errors: int
    total_gt_chars: int

    @property
    def cer(self) -> float:
        return self.total_errors / self.total_gt_chars if self.total_gt_chars else 0.0

    def to_dict(self):
        return {
            "rows": [
                {"gt": render_token(r.gt), "pred": render_token(r.pred), "cnt": r.count, "perc": r.percent}
                for r in self.rows
            ],
            "remaining": {"cnt": self.remaining_count, "perc": self.remaining_percent},
            "total_errors": self.total_errors,
            "total_gt_chars": self.total_gt_chars,
            "cer": self.cer,
        }

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [(render_token(r.gt), render_token(r.pred), r.count, r.percent) for r in self.rows],
            columns=["gt", "pred", "cnt", "perc"],
        )

    def to_tsv(self) -> str:
        lines = ["gt\tpred\tcnt\tperc"]
        for r in self.rows:
            lines.append(f"{render_token(r.gt)}\t{render_token(r.pred)}\t{r.count}\t{r.percent:.2f}")
        lines.append(f"Remaining\t\t{self.remaining_count}\t{self.remaining_percent:.2f}")
        return "\n".join(lines) + "\n"


def edit_frame(pairs: Iterable[Pair]) -> pd.DataFrame:
    """Every non-match operation across the alignments as (gt, pred) tokens."""
    records = [
        (op.gt, op.pred)
        for gt, pred in pairs
        for op in align(gt, pred)
        if op.kind != MATCH
    ]
    return pd.DataFrame(records, columns=["gt", "pred"])


def confusion_table(pairs: Iterable[Pair], top_n: int = Config.DEFAULT_TOP_N) -> ConfusionReport:
    """Most frequent confusions; ties ordered by GT token, then predicted token."""
    if top_n < 1:
        raise ValueError(f"top_n must be >= 1, got {top_n}")
    pairs = list(pairs)
    gt_chars = sum(len(gt) for gt, _ in pairs)
    edits = edit_frame(pairs)
    total = len(edits)
    if total == 0:
        return ConfusionReport((), 0, 0.0, 0, gt_chars)

    counts = (
        edits.groupby(["gt", "pred"]).size().reset_index(name="count")
        .sort_values(["count", "gt", "pred"], ascending=[False, True, True], kind="mergesort")
    )
    top = counts.head(top_n)
    rows = tuple(
        ConfusionRow(g, p, int(c), 100.0 * int(c) / total)
        for g, p, c in top.itertuples(index=False, name=None)
    )
    remaining = total - sum(r.count for r in rows)
    return ConfusionReport(rows, remaining, 100.0 * remaining / total, total, gt_chars)
