"""Spatial degradation of frame triplets: bicubic downscaling and the realistic second-order pipeline."""
import enum
import logging
import math
from dataclasses import dataclass

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from scipy import ndimage, special

from .errors import CineSrError

logger = logging.getLogger(__name__)

CUBIC_A = -0.5  # Catmull-Rom
CUBIC_SUPPORT = 4.0


class InvalidScaleError(CineSrError):
    """Scale factor is not positive or would produce an empty image."""


class ConfigModeMismatchError(CineSrError):
    """Degradation function called with a configuration of another mode."""


class DegradationMode(enum.StrEnum):
    """Spatial degradation variants evaluated side by side."""

    REALISTIC = 'realistic'
    BICUBIC_ONLY = 'bicubic_only'


class ResizeDirection(enum.StrEnum):
    """Random resize direction of one degradation stage."""

    UP = 'up'
    DOWN = 'down'
    KEEP = 'keep'


RESIZE_INTERPOLATIONS = (cv2.INTER_AREA, cv2.INTER_LINEAR, cv2.INTER_CUBIC)


def _check_range(value: tuple[float, float]) -> tuple[float, float]:
    low, high = value
    if low > high:
        error = f'Range lower bound {low} exceeds upper bound {high}'
        raise ValueError(error)
    return value


def _check_probabilities(value: tuple[float, ...]) -> tuple[float, ...]:
    if any(p < 0 or p > 1 for p in value):
        error = f'Probabilities must be within [0, 1]: {value}'
        raise ValueError(error)
    return value


class DegradationConfig(BaseModel):
    """Pydantic model for the spatial degradation settings."""

    model_config = ConfigDict(extra='forbid')

    mode: DegradationMode = Field(DegradationMode.REALISTIC, description='Degradation variant.')
    scale: int = Field(4, ge=1, description='Integer downscaling factor.')
    second_order: bool = Field(default=True, description='Repeat the blur/resize/noise/JPEG round a second time.')
    blur_kernel_sizes: tuple[int, ...] = Field((7, 9, 11, 13, 15, 17, 19, 21), description='Odd Gaussian kernel sizes.')
    blur_prob: float = Field(1.0, ge=0, le=1, description='Probability of the first blur.')
    blur_sigma_range: tuple[float, float] = Field((0.2, 3.0), description='Sigma of the first blur, pixels.')
    second_blur_prob: float = Field(0.8, ge=0, le=1, description='Probability of the second blur.')
    blur_sigma_range2: tuple[float, float] = Field((0.2, 1.5), description='Sigma of the second blur, pixels.')
    resize_prob: float = Field(1.0, ge=0, le=1, description='Probability of each random resize.')
    resize_direction_probs: tuple[float, float, float] = Field((0.2, 0.7, 0.1), description='Up/down/keep, first round.')
    resize_range: tuple[float, float] = Field((0.15, 1.5), description='Random resize factor range, first round.')
    resize_direction_probs2: tuple[float, float, float] = Field((0.3, 0.4, 0.3), description='Up/down/keep, second round.')
    resize_range2: tuple[float, float] = Field((0.3, 1.2), description='Random resize factor range, second round.')
    noise_prob: float = Field(1.0, ge=0, le=1, description='Probability of Gaussian noise in each round.')
    noise_sigma_range: tuple[float, float] = Field((0.0, 0.06), description='Gray noise sigma in [0, 1] units, first round.')
    noise_sigma_range2: tuple[float, float] = Field((0.0, 0.05), description='Gray noise sigma, second round.')
    jpeg_prob: float = Field(1.0, ge=0, le=1, description='Probability of JPEG compression in each round.')
    jpeg_quality_range: tuple[int, int] = Field((30, 95), description='JPEG quality range, first round.')
    jpeg_quality_range2: tuple[int, int] = Field((30, 95), description='JPEG quality range, second round.')
    final_sinc_prob: float = Field(0.8, ge=0, le=1, description='Probability of the final sinc filter.')

    @field_validator('blur_kernel_sizes')
    @classmethod
    def _odd_kernel_sizes(cls, value: tuple[int, ...]) -> tuple[int, ...]:
        if not value or any(size < 1 or size % 2 == 0 for size in value):
            error = f'Blur kernel sizes must be odd and positive: {value}'
            raise ValueError(error)
        return value

    @field_validator(
        'blur_sigma_range', 'blur_sigma_range2', 'resize_range', 'resize_range2',
        'noise_sigma_range', 'noise_sigma_range2', 'jpeg_quality_range', 'jpeg_quality_range2',
    )
    @classmethod
    def _ordered_range(cls, value: tuple[float, float]) -> tuple[float, float]:
        return _check_range(value)

    @field_validator('resize_direction_probs', 'resize_direction_probs2')
    @classmethod
    def _direction_probabilities(cls, value: tuple[float, float, float]) -> tuple[float, float, float]:
        _check_probabilities(value)
        if not math.isclose(sum(value), 1.0, abs_tol=1e-6):
            error = f'Resize direction probabilities must sum to 1: {value}'
            raise ValueError(error)
        return value

    @model_validator(mode='after')
    def _positive_resize(self) -> 'DegradationConfig':
        if min(self.resize_range[0], self.resize_range2[0]) <= 0:
            error = 'Resize factors must be positive'
            raise ValueError(error)
        return self


def _cubic(x: np.ndarray) -> np.ndarray:
    absx = np.abs(x)
    absx2 = absx**2
    absx3 = absx**3
    inner = ((CUBIC_A + 2) * absx3 - (CUBIC_A + 3) * absx2 + 1) * (absx <= 1)
    outer = (CUBIC_A * absx3 - 5 * CUBIC_A * absx2 + 8 * CUBIC_A * absx - 4 * CUBIC_A) * ((absx > 1) & (absx <= 2))
    return inner + outer


def _resize_matrix(in_length: int, out_length: int, scale: float) -> np.ndarray:
    """Build the [out, in] interpolation matrix of one axis.

    The kernel is widened by 1/scale when downscaling (antialiasing) and rows are normalized,
    borders use symmetric reflection.
    """
    kernel_scale = min(scale, 1.0)
    kernel_width = CUBIC_SUPPORT / kernel_scale
    centers = (np.arange(out_length) + 0.5) / scale - 0.5
    left = np.floor(centers - kernel_width / 2).astype(np.int64)
    taps = math.ceil(kernel_width) + 2
    indices = left[:, None] + np.arange(taps)[None, :]
    weights = kernel_scale * _cubic((centers[:, None] - indices) * kernel_scale)
    weights /= weights.sum(axis=1, keepdims=True)

    period = 2 * in_length
    folded = np.mod(indices, period)
    folded = np.where(folded >= in_length, period - folded - 1, folded)

    matrix = np.zeros((out_length, in_length), dtype=np.float64)
    rows = np.repeat(np.arange(out_length), taps)
    np.add.at(matrix, (rows, folded.ravel()), weights.ravel())
    return matrix


def _apply_resize(image: np.ndarray, out_shape: tuple[int, int], scales: tuple[float, float]) -> np.ndarray:
    rows = _resize_matrix(image.shape[-2], out_shape[0], scales[0])
    cols = _resize_matrix(image.shape[-1], out_shape[1], scales[1])
    resized = rows @ np.asarray(image, dtype=np.float64) @ cols.T
    return np.clip(resized, 0.0, 1.0)


def bicubic_resize(image: np.ndarray, scale: float) -> np.ndarray:
    """Resample the last two axes by `scale` with the Catmull-Rom kernel.

    Args:
        image: Array [..., H, W] with intensities in [0, 1].
        scale: Positive factor, below 1 for downscaling.

    Returns:
        Array [..., round(H*scale), round(W*scale)] clamped to [0, 1].

    Raises:
        InvalidScaleError: If scale is not positive or the output would be empty.

    """
    height, width = image.shape[-2:]
    if not scale > 0:
        error = f'Scale must be positive, got {scale}'
        raise InvalidScaleError(error)
    out_shape = (round(height * scale), round(width * scale))
    if min(out_shape) < 1:
        error = f'Scale {scale} maps {height}x{width} to an empty image'
        raise InvalidScaleError(error)
    return _apply_resize(image, out_shape, (scale, scale))


def resize_to(image: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Resample the last two axes to an explicit shape (aspect ratio is not preserved).

    Raises:
        InvalidScaleError: If the target shape is empty.

    """
    if min(shape) < 1:
        error = f'Target shape must be positive, got {shape}'
        raise InvalidScaleError(error)
    height, width = image.shape[-2:]
    return _apply_resize(image, shape, (shape[0] / height, shape[1] / width))


def _check_divisible(frames: np.ndarray, scale: int) -> None:
    if scale < 1 or int(scale) != scale:
        error = f'Degradation scale must be a positive integer, got {scale}'
        raise InvalidScaleError(error)
    height, width = frames.shape[-2:]
    if height % scale or width % scale:
        error = f'Frame size {height}x{width} is not divisible by {scale}'
        raise InvalidScaleError(error)


def degrade_bicubic(frames: np.ndarray, scale: int) -> np.ndarray:
    """Downscale every frame of a stack by an integer factor with bicubic resampling only.

    Returns:
        Array [N, H/scale, W/scale].

    """
    _check_divisible(frames, scale)
    if scale == 1:
        return np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0)
    return bicubic_resize(frames, 1 / scale)


@dataclass(frozen=True)
class StagePlan:
    """Random draws of one blur/resize/noise/JPEG round."""

    blur_kernel: np.ndarray | None
    resize_factor: float | None
    resize_interpolation: int
    noise_sigma: float | None
    noise_seed: int
    jpeg_quality: int | None


@dataclass(frozen=True)
class DegradationPlan:
    """All random draws of one sample, shared by every frame of the triplet."""

    first: StagePlan
    second: StagePlan | None
    final_sinc_kernel: np.ndarray | None
    jpeg_before_final_resize: bool


def gaussian_kernel(kernel_size: int, sigma: float) -> np.ndarray:
    axis = np.arange(kernel_size) - kernel_size // 2
    xx, yy = np.meshgrid(axis, axis)
    kernel = np.exp(-(xx**2 + yy**2) / (2 * sigma**2))
    return kernel / kernel.sum()


def circular_lowpass_kernel(cutoff: float, kernel_size: int) -> np.ndarray:
    """2D sinc (circular low-pass) kernel with the given cutoff frequency in radians."""
    center = (kernel_size - 1) / 2
    yy, xx = np.mgrid[0:kernel_size, 0:kernel_size]
    radius = np.hypot(xx - center, yy - center)
    with np.errstate(divide='ignore', invalid='ignore'):
        kernel = cutoff * special.j1(cutoff * radius) / (2 * np.pi * radius)
    kernel[radius == 0] = cutoff**2 / (4 * np.pi)
    return kernel / kernel.sum()


def _draw_stage(
    rng: np.random.Generator,
    config: DegradationConfig,
    *,
    second: bool,
) -> StagePlan:
    blur_prob = config.second_blur_prob if second else config.blur_prob
    sigma_range = config.blur_sigma_range2 if second else config.blur_sigma_range
    direction_probs = config.resize_direction_probs2 if second else config.resize_direction_probs
    resize_range = config.resize_range2 if second else config.resize_range
    noise_range = config.noise_sigma_range2 if second else config.noise_sigma_range
    quality_range = config.jpeg_quality_range2 if second else config.jpeg_quality_range

    blur_kernel = None
    if rng.random() < blur_prob:
        kernel_size = int(rng.choice(config.blur_kernel_sizes))
        blur_kernel = gaussian_kernel(kernel_size, float(rng.uniform(*sigma_range)))

    resize_factor = None
    if rng.random() < config.resize_prob:
        direction = ResizeDirection(rng.choice(list(ResizeDirection), p=direction_probs))
        if direction == ResizeDirection.UP:
            resize_factor = float(rng.uniform(1.0, max(1.0, resize_range[1])))
        elif direction == ResizeDirection.DOWN:
            resize_factor = float(rng.uniform(resize_range[0], min(1.0, resize_range[1])))
        else:
            resize_factor = 1.0
    interpolation = int(rng.choice(RESIZE_INTERPOLATIONS))

    noise_sigma = float(rng.uniform(*noise_range)) if rng.random() < config.noise_prob else None
    noise_seed = int(rng.integers(0, 2**31 - 1))
    jpeg_quality = int(rng.integers(quality_range[0], quality_range[1] + 1)) if rng.random() < config.jpeg_prob else None
    return StagePlan(blur_kernel, resize_factor, interpolation, noise_sigma, noise_seed, jpeg_quality)


def draw_degradation_plan(config: DegradationConfig, rng_seed: int) -> DegradationPlan:
    """Draw every random parameter of the realistic pipeline for one sample."""
    rng = np.random.default_rng(rng_seed)
    first = _draw_stage(rng, config, second=False)
    second = _draw_stage(rng, config, second=True) if config.second_order else None
    final_sinc_kernel = None
    if rng.random() < config.final_sinc_prob:
        kernel_size = int(rng.choice(config.blur_kernel_sizes))
        final_sinc_kernel = circular_lowpass_kernel(float(rng.uniform(np.pi / 3, np.pi)), kernel_size)
    jpeg_before_final_resize = bool(rng.random() < 0.5)  # noqa: PLR2004 even odds between the two orders
    return DegradationPlan(first, second, final_sinc_kernel, jpeg_before_final_resize)


def _convolve(frames: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    return np.clip(np.stack([ndimage.convolve(frame, kernel, mode='reflect') for frame in frames]), 0.0, 1.0)


def _random_resize(frames: np.ndarray, shape: tuple[int, int], interpolation: int) -> np.ndarray:
    size = (max(1, shape[1]), max(1, shape[0]))  # cv2 takes (width, height)
    resized = [cv2.resize(frame.astype(np.float32), size, interpolation=interpolation) for frame in frames]
    return np.clip(np.stack(resized).astype(np.float64), 0.0, 1.0)


def _add_noise(frames: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    noise = np.random.default_rng(seed).normal(0.0, sigma, size=frames.shape[-2:])
    return np.clip(frames + noise[None], 0.0, 1.0)


def jpeg_roundtrip(frames: np.ndarray, quality: int) -> np.ndarray:
    """Encode and decode each gray frame as an 8-bit JPEG at the given quality."""
    decoded = []
    for frame in frames:
        as_uint8 = np.clip(np.round(frame * 255.0), 0, 255).astype(np.uint8)
        _ok, buffer = cv2.imencode('.jpg', as_uint8, [int(cv2.IMWRITE_JPEG_QUALITY), int(quality)])
        decoded.append(cv2.imdecode(buffer, cv2.IMREAD_GRAYSCALE).astype(np.float64) / 255.0)
    return np.stack(decoded)


def _apply_stage(frames: np.ndarray, stage: StagePlan, resize_base: tuple[int, int], *, with_jpeg: bool) -> np.ndarray:
    if stage.blur_kernel is not None:
        frames = _convolve(frames, stage.blur_kernel)
    if stage.resize_factor is not None:
        shape = (round(resize_base[0] * stage.resize_factor), round(resize_base[1] * stage.resize_factor))
        frames = _random_resize(frames, shape, stage.resize_interpolation)
    if stage.noise_sigma is not None:
        frames = _add_noise(frames, stage.noise_sigma, stage.noise_seed)
    if with_jpeg and stage.jpeg_quality is not None:
        frames = jpeg_roundtrip(frames, stage.jpeg_quality)
    return frames


def apply_degradation_plan(frames: np.ndarray, plan: DegradationPlan, target_shape: tuple[int, int]) -> np.ndarray:
    """Run the drawn pipeline over a frame stack and end at `target_shape`."""
    frames = np.clip(np.asarray(frames, dtype=np.float64), 0.0, 1.0)
    frames = _apply_stage(frames, plan.first, frames.shape[-2:], with_jpeg=True)

    def final_resize(stack: np.ndarray) -> np.ndarray:
        stack = resize_to(stack, target_shape)
        if plan.final_sinc_kernel is not None:
            stack = _convolve(stack, plan.final_sinc_kernel)
        return stack

    if plan.second is None:
        return final_resize(frames)

    frames = _apply_stage(frames, plan.second, target_shape, with_jpeg=False)
    if plan.second.jpeg_quality is None:
        return final_resize(frames)
    if plan.jpeg_before_final_resize:
        return final_resize(jpeg_roundtrip(frames, plan.second.jpeg_quality))
    return jpeg_roundtrip(final_resize(frames), plan.second.jpeg_quality)


def degrade_realistic(frames: np.ndarray, config: DegradationConfig, rng_seed: int) -> np.ndarray:
    """Degrade a frame stack with one shared draw of the realistic second-order pipeline.

    Returns:
        Array [N, H/scale, W/scale] in [0, 1].

    Raises:
        ConfigModeMismatchError: If the configuration is not in realistic mode.

    """
    if config.mode != DegradationMode.REALISTIC:
        error = f'degrade_realistic requires mode "{DegradationMode.REALISTIC}", got "{config.mode}"'
        raise ConfigModeMismatchError(error)
    _check_divisible(frames, config.scale)
    height, width = frames.shape[-2:]
    plan = draw_degradation_plan(config, rng_seed)
    logger.debug('Degradation plan for seed %d: %s', rng_seed, plan)
    return apply_degradation_plan(frames, plan, (height // config.scale, width // config.scale))


def degrade(frames: np.ndarray, config: DegradationConfig, rng_seed: int) -> np.ndarray:
    """Dispatch to the degradation selected by `config.mode`."""
    if config.mode == DegradationMode.BICUBIC_ONLY:
        return degrade_bicubic(frames, config.scale)
    return degrade_realistic(frames, config, rng_seed)
