"""Temporal low-resolution signal: Farneback flow, flow-based frame interpolation, training windows."""
import logging
from dataclasses import dataclass

import cv2
import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy import ndimage

from .data_ingest import CineClip
from .errors import CineSrError

logger = logging.getLogger(__name__)

DEFAULT_K = 8
TRIPLET_LENGTH = 3


class ShapeMismatchError(CineSrError):
    """Frames or flow fields do not share a shape."""


class ClipTooShortError(CineSrError):
    """Clip has fewer than K + 1 frames."""


class FlowParams(BaseModel):
    """Pydantic model for the Farneback optical flow parameters."""

    model_config = ConfigDict(extra='forbid')

    pyramid_levels: int = Field(3, ge=1, description='Number of pyramid levels including the full resolution.')
    pyramid_scale: float = Field(0.5, gt=0, lt=1, description='Downscaling between pyramid levels.')
    window_size: int = Field(15, ge=3, description='Averaging window size, odd.')
    iterations: int = Field(3, ge=1, description='Refinement iterations per level.')
    poly_n: int = Field(5, ge=3, description='Neighbourhood of the polynomial expansion, odd.')
    poly_sigma: float = Field(1.1, gt=0, description='Gaussian sigma of the polynomial expansion.')

    @field_validator('window_size', 'poly_n')
    @classmethod
    def _odd(cls, value: int) -> int:
        if value % 2 == 0:
            error = f'Expected an odd value, got {value}'
            raise ValueError(error)
        return value


@dataclass(frozen=True)
class FlowField:
    """Dense displacement [H, W, 2] (dx, dy) in pixels, frame_a(p) ~ frame_b(p + displacement(p))."""

    displacement: np.ndarray
    degenerate: bool = False


@dataclass(frozen=True)
class TrainingWindow:
    """K + 1 consecutive frames, the interpolated interior and the ground-truth triplet."""

    start_index: int
    K: int
    endpoint_a: np.ndarray
    endpoint_b: np.ndarray
    interpolated: np.ndarray
    triplet_offsets: tuple[int, int, int]
    gt_frames: np.ndarray

    @property
    def interpolated_triplet(self) -> np.ndarray:
        """Interpolated frames at the triplet offsets, [3, H, W]."""
        return self.interpolated[[offset - 1 for offset in self.triplet_offsets]]


def _check_same_shape(first: np.ndarray, second: np.ndarray, what: str) -> None:
    if first.shape[:2] != second.shape[:2]:
        error = f'{what}: shapes {first.shape} and {second.shape} differ'
        raise ShapeMismatchError(error)


def _to_uint8(frame: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(frame, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def estimate_flow(frame_a: np.ndarray, frame_b: np.ndarray, params: FlowParams | None = None) -> FlowField:
    """Dense Farneback flow from frame_a to frame_b.

    Constant frames carry no motion information and yield a zero field flagged as degenerate.

    Raises:
        ShapeMismatchError: If the frames differ in shape.

    """
    params = params or FlowParams()
    _check_same_shape(frame_a, frame_b, 'estimate_flow')
    if np.ptp(frame_a) == 0 or np.ptp(frame_b) == 0:
        logger.debug('Degenerate frame pair, returning zero flow')
        return FlowField(np.zeros((*frame_a.shape, 2), dtype=np.float64), degenerate=True)
    if np.array_equal(frame_a, frame_b):
        return FlowField(np.zeros((*frame_a.shape, 2), dtype=np.float64))
    flow = cv2.calcOpticalFlowFarneback(
        _to_uint8(frame_a),
        _to_uint8(frame_b),
        None,
        params.pyramid_scale,
        params.pyramid_levels,
        params.window_size,
        params.iterations,
        params.poly_n,
        params.poly_sigma,
        0,
    )
    return FlowField(flow.astype(np.float64))


def warp_image(frame: np.ndarray, flow: FlowField, scale: float) -> np.ndarray:
    """Backward warp: output(p) = frame(p + scale * flow(p)), bilinear, border replicated.

    Raises:
        ShapeMismatchError: If the flow does not match the frame.

    """
    _check_same_shape(frame, flow.displacement, 'warp_image')
    height, width = frame.shape
    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    coords = np.stack([yy + scale * flow.displacement[..., 1], xx + scale * flow.displacement[..., 0]])
    return ndimage.map_coordinates(np.asarray(frame, dtype=np.float64), coords, order=1, mode='nearest')


def interpolate_at(
    endpoint_a: np.ndarray,
    endpoint_b: np.ndarray,
    taus: list[float],
    params: FlowParams | None = None,
) -> np.ndarray:
    """Blend both endpoints warped to each normalized time in `taus`, result [len(taus), H, W]."""
    _check_same_shape(endpoint_a, endpoint_b, 'interpolate')
    flow_ab = estimate_flow(endpoint_a, endpoint_b, params)
    flow_ba = estimate_flow(endpoint_b, endpoint_a, params)
    frames = []
    for tau in taus:
        # content of a moves along flow_ab, so a is sampled with the reverse flow and vice versa
        from_a = warp_image(endpoint_a, flow_ba, tau)
        from_b = warp_image(endpoint_b, flow_ab, 1.0 - tau)
        frames.append(np.clip((1.0 - tau) * from_a + tau * from_b, 0.0, 1.0))
    return np.stack(frames)


def interpolate_pair(
    endpoint_a: np.ndarray,
    endpoint_b: np.ndarray,
    K: int = DEFAULT_K,
    params: FlowParams | None = None,
) -> np.ndarray:
    """Interior frames at tau = k/K, k = 1..K-1, result [K-1, H, W].

    Raises:
        ValueError: If K < 2.

    """
    if K < 2:  # noqa: PLR2004 at least one interior frame
        error = f'K must be >= 2, got {K}'
        raise ValueError(error)
    return interpolate_at(endpoint_a, endpoint_b, [k / K for k in range(1, K)], params)


def sample_training_window(
    clip: CineClip,
    K: int = DEFAULT_K,
    rng_seed: int = 0,
    params: FlowParams | None = None,
) -> TrainingWindow:
    """Pick a random K+1 frame window and a random triplet of interpolated interior frames.

    Raises:
        ClipTooShortError: If the clip has fewer than K + 1 frames.
        ValueError: If K leaves no room for three interior frames.

    """
    if clip.T < K + 1:
        error = f'Clip {clip.patient_id}/{clip.slice_id} has {clip.T} frames, window needs {K + 1}'
        raise ClipTooShortError(error)
    if K - 1 < TRIPLET_LENGTH:
        error = f'K={K} has fewer than {TRIPLET_LENGTH} interior frames'
        raise ValueError(error)
    rng = np.random.default_rng(rng_seed)
    start_index = int(rng.integers(0, clip.T - K))
    triplet_start = int(rng.integers(1, K - TRIPLET_LENGTH + 1))
    offsets = (triplet_start, triplet_start + 1, triplet_start + 2)

    endpoint_a = clip.frames[start_index]
    endpoint_b = clip.frames[start_index + K]
    interpolated = interpolate_pair(endpoint_a, endpoint_b, K, params)
    gt_frames = clip.frames[[start_index + offset for offset in offsets]].copy()
    return TrainingWindow(
        start_index=start_index,
        K=K,
        endpoint_a=endpoint_a.copy(),
        endpoint_b=endpoint_b.copy(),
        interpolated=interpolated,
        triplet_offsets=offsets,
        gt_frames=gt_frames,
    )
