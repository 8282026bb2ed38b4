"""
Image preprocessing variants used to enrich training data.

This module handles:
- Raster IO and grayscale conversion
- Sauvola and Wolf binarization (integral images over 8-bit window sums)
- nlbin-style background flattening, normalization and thresholding
- Height normalization for the recognizer input
- ocrodeg-style degradation for data augmentation
"""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple

import numpy as np
from PIL import Image
from scipy import ndimage

from utils.exceptions import ShapeMismatchError
from utils.logger import Logger
from utils.seeding import rng_for
from utils.validator import ConfigValidator, RasterValidator

logger = Logger("imgproc")

LUMA = (0.299, 0.587, 0.114)
QUANT = 255

VARIANT_PRESETS: Dict[str, Tuple[str, ...]] = {
    "bin": ("bin",),
    "ocro": ("bin", "nrm"),
    "all-var": ("bin", "nrm", "sauvola", "wolf", "raw"),
}


@dataclass(frozen=True)
class BinarizationParams:
    window: int = 31
    k: float = 0.34
    R: float = 0.5

    def __post_init__(self):
        ok, message = ConfigValidator.validate_binarization(self.window, self.k, self.R)
        if not ok:
            raise ValueError(message)


SAUVOLA_DEFAULTS = BinarizationParams(window=31, k=0.34, R=0.5)
WOLF_DEFAULTS = BinarizationParams(window=31, k=0.5, R=0.5)


@dataclass(frozen=True)
class NlbinParams:
    low_percentile: float = 5.0
    high_percentile: float = 90.0
    bg_window: int = 31
    bg_percentile: float = 80.0
    threshold: float = 0.5


@dataclass(frozen=True)
class AugmentParams:
    blur_sigma_range: Tuple[float, float] = (0.0, 1.2)
    speckle_density_range: Tuple[float, float] = (0.0, 2e-3)
    jitter_rotation_range: Tuple[float, float] = (0.0, 1.5)
    jitter_translate_range: Tuple[float, float] = (0.0, 2.0)
    threshold_noise_range: Tuple[float, float] = (0.0, 0.1)

    def __post_init__(self):
        for name in (
            "blur_sigma_range",
            "speckle_density_range",
            "jitter_rotation_range",
            "jitter_translate_range",
            "threshold_noise_range",
        ):
            lo, hi = getattr(self, name)
            if lo < 0 or lo > hi:
                raise ValueError(f"{name} must satisfy 0 <= lo <= hi, got {(lo, hi)}")

    @classmethod
    def identity(cls) -> "AugmentParams":
        zero = (0.0, 0.0)
        return cls(zero, zero, zero, zero, zero)


# ---------------------------------------------------------------- raster IO


def to_grayscale(img: np.ndarray) -> np.ndarray:
    """Luma of a rows x cols x 3 raster with channels in [0, 1]."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        return img.copy()
    return LUMA[0] * img[..., 0] + LUMA[1] * img[..., 1] + LUMA[2] * img[..., 2]


def load_raster(path: str) -> np.ndarray:
    """Read a PNG/PGM as grayscale float64 in [0, 1]; color is converted by luma."""
    with Image.open(path) as im:
        if im.mode in ("L", "1"):
            return np.asarray(im.convert("L"), dtype=np.float64) / 255.0
        rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
    return np.clip(to_grayscale(rgb), 0.0, 1.0)


def save_raster(img: np.ndarray, path: str) -> None:
    """Write an 8-bit grayscale PNG."""
    ok, message = RasterValidator.validate_raster(img)
    if not ok:
        raise ShapeMismatchError(message)
    Image.fromarray(quantize(img).astype(np.uint8), mode="L").save(path)


def quantize(img: np.ndarray) -> np.ndarray:
    """8-bit integer intensities."""
    return np.rint(np.clip(img, 0.0, 1.0) * QUANT).astype(np.int64)


# ------------------------------------------------------------ binarization


def _window_sums(q: np.ndarray, window: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sum and sum of squares over centered windows, clamp-to-edge, via integral images."""
    r = window // 2
    padded = np.pad(q, r, mode="edge")
    integral = np.zeros((padded.shape[0] + 1, padded.shape[1] + 1), dtype=np.int64)
    integral_sq = np.zeros_like(integral)
    integral[1:, 1:] = padded.cumsum(0).cumsum(1)
    integral_sq[1:, 1:] = (padded * padded).cumsum(0).cumsum(1)

    h, w = q.shape

    def box(ii):
        return (
            ii[window : window + h, window : window + w]
            - ii[:h, window : window + w]
            - ii[window : window + h, :w]
            + ii[:h, :w]
        )

    return box(integral), box(integral_sq)


def local_mean_std(s1: np.ndarray, s2: np.ndarray, window: int) -> Tuple[np.ndarray, np.ndarray]:
    """Mean and standard deviation in [0, 1] units from exact 8-bit window sums."""
    n = window * window
    mean = s1 / (n * QUANT)
    # n*S2 - S1^2 is an exact integer, never negative
    var = (n * s2 - s1 * s1) / float(n * n * QUANT * QUANT)
    return mean, np.sqrt(np.maximum(var, 0.0))


def sauvola_threshold(mean, std, params: BinarizationParams):
    return mean * (1.0 + params.k * (std / params.R - 1.0))


def wolf_threshold(mean, std, global_min, max_std, params: BinarizationParams):
    # (1-k)m + kM + k(s/S)(m-M), arranged so that m == M gives exactly m
    ratio = std / max_std if max_std > 0 else np.zeros_like(std)
    return mean - params.k * (mean - global_min) * (1.0 - ratio)


def sauvola(img: np.ndarray, params: BinarizationParams = SAUVOLA_DEFAULTS) -> np.ndarray:
    """Sauvola binarization: white (1) where pixel > T, black (0) otherwise.

    Pixel values, window means and deviations all come from the image
    quantized to 8 bits, so results are exact functions of the 8-bit raster.
    """
    q = quantize(img)
    s1, s2 = _window_sums(q, params.window)
    mean, std = local_mean_std(s1, s2, params.window)
    value = q / QUANT
    return (value > sauvola_threshold(mean, std, params)).astype(np.float64)


def wolf(img: np.ndarray, params: BinarizationParams = WOLF_DEFAULTS) -> np.ndarray:
    """Wolf-Jolion binarization with global minimum and maximal local deviation.

    Like ``sauvola``, thresholds are computed on the 8-bit quantized image.
    """
    q = quantize(img)
    s1, s2 = _window_sums(q, params.window)
    mean, std = local_mean_std(s1, s2, params.window)
    value = q / QUANT
    threshold = wolf_threshold(mean, std, value.min(), std.max(), params)
    return (value > threshold).astype(np.float64)


def background_rank(window: int, percentile: float) -> int:
    n = window * window
    return int(round(percentile / 100.0 * (n - 1)))


def nlbin(
    img: np.ndarray, params: NlbinParams = NlbinParams(), eps: float = 1e-6
) -> Tuple[np.ndarray, np.ndarray]:
    """Flatten the background, stretch between percentiles and threshold.

    Returns (nrm, bin). A constant image yields all-white outputs.
    """
    if not 0 <= params.low_percentile < params.high_percentile <= 100:
        raise ValueError("nlbin needs 0 <= low_percentile < high_percentile <= 100")
    img = np.asarray(img, dtype=np.float64)
    background = ndimage.rank_filter(
        img,
        rank=background_rank(params.bg_window, params.bg_percentile),
        size=params.bg_window,
        mode="nearest",
    )
    flat = np.clip(img / np.maximum(background, eps), 0.0, 1.0)
    lo, hi = np.percentile(flat, [params.low_percentile, params.high_percentile])
    if hi <= lo:
        white = np.ones_like(img)
        return white, white.copy()
    nrm = np.clip((flat - lo) / (hi - lo), 0.0, 1.0)
    return nrm, (nrm > params.threshold).astype(np.float64)


# --------------------------------------------------------------- geometry


def normalize_height(img: np.ndarray, target_height: int) -> np.ndarray:
    """Bilinear rescale to ``target_height`` keeping the aspect ratio."""
    if target_height < 8:
        raise ValueError(f"target_height must be >= 8, got {target_height}")
    img = np.asarray(img, dtype=np.float64)
    h, w = img.shape
    new_w = max(1, int(round(w * target_height / h)))
    if (h, w) == (target_height, new_w):
        return img.copy()
    ys = (np.arange(target_height) + 0.5) * (h / target_height) - 0.5
    xs = (np.arange(new_w) + 0.5) * (w / new_w) - 0.5
    grid_y, grid_x = np.meshgrid(np.clip(ys, 0, h - 1), np.clip(xs, 0, w - 1), indexing="ij")
    out = ndimage.map_coordinates(img, [grid_y, grid_x], order=1, mode="nearest")
    return np.clip(out, 0.0, 1.0)


# ------------------------------------------------------------ augmentation


def _uniform(rng: np.random.Generator, bounds: Tuple[float, float]) -> float:
    lo, hi = bounds
    return float(rng.uniform(lo, hi)) if hi > lo else float(lo)


def augment(
    img: np.ndarray, params: AugmentParams, seed: int, stream_id: int
) -> np.ndarray:
    """Deterministic degradation keyed by (seed, stream_id).

    Order: jitter (rotation + translation), blur, speckle, threshold noise.
    """
    rng = rng_for("augment", seed, stream_id)
    out = np.asarray(img, dtype=np.float64).copy()
    h, w = out.shape

    # Every draw happens in a fixed order so the stream layout never depends on params.
    angle = _uniform(rng, params.jitter_rotation_range) * (1 if rng.random() < 0.5 else -1)
    shift = _uniform(rng, params.jitter_translate_range)
    direction = rng.uniform(0.0, 2.0 * np.pi)
    sigma = _uniform(rng, params.blur_sigma_range)
    density = _uniform(rng, params.speckle_density_range)
    noise = _uniform(rng, params.threshold_noise_range)

    if angle != 0.0 or shift != 0.0:
        theta = np.deg2rad(angle)
        rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
        center = np.array([(h - 1) / 2.0, (w - 1) / 2.0])
        offset_vec = np.array([shift * np.sin(direction), shift * np.cos(direction)])
        offset = center - rot @ center - offset_vec
        out = ndimage.affine_transform(out, rot, offset=offset, order=1, mode="constant", cval=1.0)

    if sigma > 0.0:
        out = ndimage.gaussian_filter(out, sigma=sigma, mode="nearest")

    if density > 0.0:
        count = int(rng.poisson(density * h * w))
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(count):
            cy, cx = rng.integers(0, h), rng.integers(0, w)
            radius = rng.uniform(0.5, 2.0)
            value = 0.0 if rng.random() < 0.5 else 1.0
            out[(yy - cy) ** 2 + (xx - cx) ** 2 <= radius * radius] = value

    if noise > 0.0:
        out = out + rng.uniform(-noise, noise, size=out.shape)

    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------- variants


def make_variant(
    raw: np.ndarray,
    variant: str,
    sauvola_params: BinarizationParams = SAUVOLA_DEFAULTS,
    wolf_params: BinarizationParams = WOLF_DEFAULTS,
    nlbin_params: NlbinParams = NlbinParams(),
) -> np.ndarray:
    """Derive a preprocessing variant from a raw grayscale line."""
    if variant == "raw":
        return np.asarray(raw, dtype=np.float64).copy()
    if variant in ("bin", "nrm"):
        nrm, binary = nlbin(raw, nlbin_params)
        return binary if variant == "bin" else nrm
    if variant == "sauvola":
        return sauvola(raw, sauvola_params)
    if variant == "wolf":
        return wolf(raw, wolf_params)
    raise ValueError(f"Cannot derive variant {variant!r} from a raw line")


def pad_batch(images, height: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Stack same-height rasters, padding on the right with white; returns (batch, widths)."""
    heights = {im.shape[0] for im in images}
    if len(heights) != 1 or (height is not None and heights != {height}):
        raise ShapeMismatchError(f"batch rasters must share height {height}, got {sorted(heights)}")
    widths = np.array([im.shape[1] for im in images], dtype=np.int64)
    batch = np.ones((len(images), heights.pop(), int(widths.max())), dtype=np.float64)
    for i, im in enumerate(images):
        batch[i, :, : im.shape[1]] = im
    return batch, widths


def prepare_line_image(raw: np.ndarray, variant: str, height: int) -> np.ndarray:
    """The recognizer input for a raw line: the variant, rescaled to ``height``."""
    return normalize_height(make_variant(raw, variant), height)
