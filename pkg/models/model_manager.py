"""
Voter ensemble management.

This module handles:
- Loading voter checkpoints from LSHOCR1 files
- Checking that every voter shares the codec and architecture
- Running voted prediction over raw line images
"""

from typing import List, Optional, Sequence, Tuple

import numpy as np

from ctc import DecodeResult
from imgproc import prepare_line_image
from models.checkpoint import Checkpoint, load_checkpoint
from models.codec import Codec
from utils.exceptions import EmptyInputError, VoterMismatchError
from utils.logger import Logger
from vote import predict_batch


class ModelManager:
    """
    Holds an ensemble of voters that can be applied to line images.

    Key responsibilities:
    - Load and validate voter checkpoints
    - Report the offending file when a voter does not fit the ensemble
    - Predict with confidence voting
    """

    def __init__(self, checkpoints: Sequence[Checkpoint], sources: Optional[Sequence[str]] = None):
        self.logger = Logger("model_manager")
        if not checkpoints:
            raise EmptyInputError("an ensemble needs at least one voter")
        self.sources = list(sources) if sources else [f"voter {i}" for i in range(len(checkpoints))]
        self.voters: List[Checkpoint] = list(checkpoints)

        ok, message = self.validate()
        if not ok:
            raise VoterMismatchError(self._bad_index, message)
        self.logger.info(f"ensemble of {len(self.voters)} voters, {self.codec.size - 1} characters")

    @classmethod
    def from_files(cls, paths: Sequence[str]) -> "ModelManager":
        return cls([load_checkpoint(p) for p in paths], paths)

    @property
    def codec(self) -> Codec:
        return self.voters[0].codec

    @property
    def input_height(self) -> int:
        return self.voters[0].arch.input_height

    def validate(self) -> Tuple[bool, str]:
        """Check that every voter matches voter 0."""
        first = self.voters[0]
        for index, voter in enumerate(self.voters):
            self._bad_index = index
            if voter.codec != first.codec:
                return False, f"{self.sources[index]}: codec differs from {self.sources[0]}"
            if voter.arch != first.arch:
                return False, f"{self.sources[index]}: architecture differs from {self.sources[0]}"
        return True, "Validation successful"

    def predict(
        self,
        raw_images: Sequence[np.ndarray],
        variant: str = "bin",
        batch_size: int = 16,
        threads: int = 1,
    ) -> List[DecodeResult]:
        """Voted decoding of raw grayscale lines preprocessed as ``variant``."""
        images = [prepare_line_image(img, variant, self.input_height) for img in raw_images]
        return predict_batch(self.voters, images, self.codec, batch_size, threads)
