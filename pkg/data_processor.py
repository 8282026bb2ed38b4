"""
Transcription tables.

Ground truth and predictions are exchanged as UTF-8 TSV files with the
header ``line_id<TAB>text``; tabs, newlines and backslashes inside the text
are written as ``\\t``, ``\\n`` and ``\\\\``.
"""

import csv
import os
from typing import Dict, Iterable, List, Tuple

import pandas as pd

from textnorm import _escape, _unescape
from utils.exceptions import HistOCRError
from utils.logger import Logger

COLUMNS = ["line_id", "text"]


class TranscriptionTable:
    def __init__(self, df: pd.DataFrame = None):
        self.df = df if df is not None else pd.DataFrame(columns=COLUMNS)
        self.logger = Logger("data_processor")

    @classmethod
    def from_records(cls, records: Iterable[Tuple[str, str]]) -> "TranscriptionTable":
        return cls(pd.DataFrame(list(records), columns=COLUMNS))

    @classmethod
    def load(cls, path: str) -> "TranscriptionTable":
        if not os.path.isfile(path):
            raise FileNotFoundError(f"transcription table not found: {path}")
        try:
            df = pd.read_csv(
                path,
                sep="\t",
                quoting=csv.QUOTE_NONE,
                dtype=str,
                keep_default_na=False,
                encoding="utf-8",
            )
        except pd.errors.ParserError as e:
            raise HistOCRError(f"{path}: malformed TSV ({e})")
        if list(df.columns) != COLUMNS:
            raise HistOCRError(f"{path}: expected header {'<TAB>'.join(COLUMNS)}, got {list(df.columns)}")
        duplicated = df["line_id"][df["line_id"].duplicated()]
        if not duplicated.empty:
            raise HistOCRError(f"{path}: duplicate line_id {duplicated.iloc[0]!r}")
        df["text"] = df["text"].map(_unescape)
        return cls(df)

    def to_tsv(self) -> str:
        lines = ["\t".join(COLUMNS)]
        for line_id, text in self.records():
            lines.append(f"{_escape(line_id)}\t{_escape(text)}")
        return "\n".join(lines) + "\n"

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            f.write(self.to_tsv())

    def records(self) -> List[Tuple[str, str]]:
        return list(zip(self.df["line_id"], self.df["text"]))

    def as_dict(self) -> Dict[str, str]:
        return dict(self.records())

    def __len__(self) -> int:
        return len(self.df)


def pair_transcriptions(gt: TranscriptionTable, pred: TranscriptionTable) -> List[Tuple[str, str, str]]:
    """(line_id, gt, pred) in GT order; a missing prediction counts as empty."""
    logger = Logger("data_processor")
    predictions = pred.as_dict()
    missing = [line_id for line_id, _ in gt.records() if line_id not in predictions]
    if missing:
        logger.warning(f"{len(missing)} lines have no prediction, scored as empty (first: {missing[0]})")
    extra = set(predictions) - set(gt.df["line_id"])
    if extra:
        logger.warning(f"{len(extra)} predictions have no ground truth and are ignored")
    return [(line_id, text, predictions.get(line_id, "")) for line_id, text in gt.records()]


def group_of(line_id: str) -> str:
    """Work part of a ``work/page/line`` id."""
    return line_id.split("/", 1)[0]
