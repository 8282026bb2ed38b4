from typing import Tuple

import numpy as np

KNOWN_VARIANTS = ("raw", "bin", "nrm", "sauvola", "wolf", "augmented")


class RasterValidator:
    @staticmethod
    def validate_raster(img) -> Tuple[bool, str]:
        """Validate a grayscale line or page raster."""
        if not isinstance(img, np.ndarray):
            return False, f"Raster must be a numpy array, got {type(img).__name__}"

        if img.ndim != 2:
            return False, f"Raster must be 2-dimensional, got shape {img.shape}"

        if img.shape[0] < 1 or img.shape[1] < 1:
            return False, f"Raster must have at least one row and column, got {img.shape}"

        if not np.all(np.isfinite(img)):
            return False, "Raster contains non-finite intensities"

        if img.min() < 0.0 or img.max() > 1.0:
            return False, "Raster intensities must lie in [0, 1]"

        return True, "Validation successful"

    @staticmethod
    def validate_variant(variant: str) -> Tuple[bool, str]:
        if variant not in KNOWN_VARIANTS:
            return False, f"Unknown variant {variant!r}; expected one of {', '.join(KNOWN_VARIANTS)}"
        return True, "Validation successful"


class ConfigValidator:
    @staticmethod
    def validate_train_config(config) -> Tuple[bool, str]:
        """Validate a TrainConfig."""
        if config.patience < 1:
            return False, "PATIENCE must be >= 1"
        if config.max_epochs < 1:
            return False, "MAX_EPOCHS must be >= 1"
        if config.voters < 1:
            return False, "VOTERS must be >= 1"
        if config.augmentations_per_sample < 0:
            return False, "AUGMENTATIONS_PER_SAMPLE must be >= 0"
        if config.batch_size < 1:
            return False, "BATCH_SIZE must be >= 1"
        if config.lr < 0:
            return False, "LR must be >= 0"
        if not 0 < config.ema_decay < 1:
            return False, "EMA_DECAY must lie in (0, 1)"
        if config.eval_interval_samples is not None and config.eval_interval_samples < 1:
            return False, "EVAL_INTERVAL_SAMPLES must be >= 1"
        if not config.variant_list:
            return False, "VARIANT_LIST must name at least one variant"
        unknown = [v for v in config.variant_list if v not in KNOWN_VARIANTS or v == "augmented"]
        if unknown:
            return False, f"Unknown training variants: {', '.join(unknown)}"
        return True, "Configuration validation successful"

    @staticmethod
    def validate_arch(arch) -> Tuple[bool, str]:
        """Validate an ArchSpec."""
        if arch.input_height % 4 != 0:
            return False, f"input_height must be divisible by 4, got {arch.input_height}"
        sizes = [arch.input_height, arch.lstm_hidden, arch.num_classes, *arch.conv_filters]
        if any(s < 1 for s in sizes):
            return False, "All architecture sizes must be >= 1"
        if len(arch.conv_filters) != 2:
            return False, "Exactly two convolution layers are supported"
        if not 0 <= arch.dropout < 1:
            return False, "dropout must lie in [0, 1)"
        return True, "Configuration validation successful"

    @staticmethod
    def validate_binarization(window: int, k: float, R: float) -> Tuple[bool, str]:
        if window < 3 or window % 2 == 0:
            return False, f"window must be odd and >= 3, got {window}"
        if not 0 < k < 1:
            return False, f"k must lie in (0, 1), got {k}"
        if R <= 0:
            return False, f"R must be > 0, got {R}"
        return True, "Configuration validation successful"
