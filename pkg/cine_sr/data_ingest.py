"""Cine MRI ingestion: dataset scanning, clip loading and normalization, synthetic beating phantoms."""
import enum
import logging
import re
import threading
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import pydicom
from pydantic import BaseModel, ConfigDict, Field, ValidationError
from pydicom.errors import InvalidDicomError
from scipy import ndimage

from .errors import CineSrError, ErrorCategory
from .spatial_pipeline import resize_to

logger = logging.getLogger(__name__)

FRAME_SIZE = 256
PGM_MAXVAL = 65535
PGM_FRAME_PATTERN = re.compile(r'^frame_(\d+)\.pgm$')
PATIENT_DIR_PREFIX = 'patient_'
SLICE_DIR_PREFIX = 'slice_'


class DataError(CineSrError):
    """Base class of dataset errors."""

    category = ErrorCategory.DATA


class RootNotFoundError(DataError):
    """Dataset root directory does not exist."""


class SeriesNotFoundError(DataError):
    """Requested (patient, slice) series is not part of the index."""


class CorruptFrameError(DataError):
    """A frame file could not be decoded."""

    def __init__(self, path: Path, reason: str) -> None:
        """Keep the failing path next to the message."""
        super().__init__(f'Could not decode frame {path}: {reason}')
        self.path = path


class MissingFrameError(DataError):
    """Time indices of a series are not contiguous."""

    def __init__(self, patient_id: str, slice_id: str, missing_index: int) -> None:
        """Keep the first missing time index."""
        super().__init__(f'Series {patient_id}/{slice_id} is missing time index {missing_index}')
        self.missing_index = missing_index


class InvalidConfigError(DataError):
    """Phantom configuration violates its invariants."""

    category = ErrorCategory.CONFIG


class DatasetFormat(enum.StrEnum):
    """Supported on-disk layouts."""

    DICOM = 'dicom'
    PGM_TREE = 'pgm_tree'


@dataclass(frozen=True)
class SeriesRecord:
    """Files of one slice position ordered by time index."""

    patient_id: str
    slice_id: str
    frame_count: int
    source_paths: tuple[Path, ...]
    time_indices: tuple[int, ...]


@dataclass
class PatientIndex:
    """All series found under a dataset root."""

    entries: list[SeriesRecord] = field(default_factory=list)
    dataset_format: DatasetFormat = DatasetFormat.PGM_TREE

    def find(self, patient_id: str, slice_id: str) -> SeriesRecord:
        for record in self.entries:
            if record.patient_id == patient_id and record.slice_id == slice_id:
                return record
        error = f'Series {patient_id}/{slice_id} not found in index of {len(self.entries)} series'
        raise SeriesNotFoundError(error)

    @property
    def patient_ids(self) -> list[str]:
        return sorted({record.patient_id for record in self.entries})


@dataclass
class CineClip:
    """One slice position over the cardiac cycle, frames [T, H, W] in [0, 1]."""

    patient_id: str
    slice_id: str
    frames: np.ndarray

    @property
    def T(self) -> int:  # noqa: N802 frame count symbol
        return self.frames.shape[0]


class PhantomConfig(BaseModel):
    """Pydantic model for the beating phantom generator."""

    model_config = ConfigDict(extra='forbid')

    period: int = Field(30, ge=2, description='Frames per cardiac cycle.')
    base_radius: float = Field(70.0, gt=0, description='Ellipse radius at end-diastole, pixels of a 256 frame.')
    contraction_amplitude: float = Field(0.3, ge=0, lt=1, description='Relative radius reduction at end-systole.')
    noise_level: float = Field(0.0, ge=0, description='Standard deviation of additive Gaussian noise.')
    texture_seed: int = Field(0, description='Seed of the fixed background and myocardium texture.')
    size: int = Field(FRAME_SIZE, ge=8, description='Frame height and width in pixels.')


class ScanLog:
    """Line-delimited scan report, appended under a lock so lines never interleave."""

    _lock = threading.Lock()

    def __init__(self, path: Path | None = None) -> None:
        """Keep lines in memory and optionally append them to `path`."""
        self.path = path
        self.lines: list[str] = []

    def write(self, line: str) -> None:
        with self._lock:
            self.lines.append(line)
            if self.path is not None:
                self.path.parent.mkdir(parents=True, exist_ok=True)
                with self.path.open('a', encoding='utf-8') as file:
                    file.write(line + '\n')


def read_pgm(path: Path) -> np.ndarray:
    """Read a binary PGM frame with its stored integer values.

    Raises:
        CorruptFrameError: If OpenCV cannot decode the file.

    """
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None or image.ndim != 2:  # noqa: PLR2004 single-channel
        raise CorruptFrameError(path, 'not a single-channel PGM image')
    return image


def write_pgm(path: Path, frame: np.ndarray) -> None:
    """Write a [0, 1] float frame as a 16-bit binary PGM (P5, maxval 65535)."""
    path.parent.mkdir(parents=True, exist_ok=True)
    quantized = np.clip(np.round(np.asarray(frame) * PGM_MAXVAL), 0, PGM_MAXVAL).astype(np.uint16)
    if not cv2.imwrite(str(path), quantized):
        error = f'Could not write PGM file {path}'
        raise DataError(error)


def write_pgm_grid(path: Path, rows: list[np.ndarray], padding: int = 2) -> None:
    """Tile rows of frames ([N, H, W] each) into one PGM image."""
    tiles = [np.concatenate([np.pad(frame, padding) for frame in row], axis=1) for row in rows]
    write_pgm(path, np.concatenate(tiles, axis=0))


def normalize_frame(raw: np.ndarray, bit_depth_max: int) -> np.ndarray:
    """Min-max normalize integer pixel data to [0, 1].

    Works on any array shape, so a whole clip stack is normalized with a single min and max.
    Signed data keeps its negative values in the range; constant input maps to zeros.

    Raises:
        ValueError: If `bit_depth_max` is not positive.

    """
    if bit_depth_max <= 0:
        error = f'bit_depth_max must be positive, got {bit_depth_max}'
        raise ValueError(error)
    values = np.asarray(raw, dtype=np.float64)
    low, high = values.min(), values.max()
    if high <= low:
        return np.zeros_like(values)
    return (values - low) / (high - low)


def _scan_pgm_tree(root: Path, scan_log: ScanLog) -> list[SeriesRecord]:
    entries = []
    for patient_dir in sorted(root.glob(f'{PATIENT_DIR_PREFIX}*')):
        if not patient_dir.is_dir():
            continue
        patient_id = patient_dir.name.removeprefix(PATIENT_DIR_PREFIX)
        for slice_dir in sorted(patient_dir.glob(f'{SLICE_DIR_PREFIX}*')):
            if not slice_dir.is_dir():
                continue
            slice_id = slice_dir.name.removeprefix(SLICE_DIR_PREFIX)
            frames = []
            for frame_path in slice_dir.iterdir():
                if match := PGM_FRAME_PATTERN.match(frame_path.name):
                    frames.append((int(match.group(1)), frame_path))
                else:
                    scan_log.write(f'SKIP {frame_path}: file name does not match frame_<k>.pgm')
            if not frames:
                scan_log.write(f'SKIP {slice_dir}: no frames')
                continue
            frames.sort()
            entries.append(SeriesRecord(
                patient_id=patient_id,
                slice_id=slice_id,
                frame_count=len(frames),
                source_paths=tuple(path for _index, path in frames),
                time_indices=tuple(index for index, _path in frames),
            ))
    return entries


def _dicom_series_key(root: Path, path: Path, dataset: pydicom.Dataset) -> tuple[str, str, str]:
    relative = path.relative_to(root)
    if len(relative.parts) > 1:
        patient_id = relative.parts[0]
    else:
        patient_id = str(dataset.get('PatientID', '') or 'unknown')
    slice_id = path.parent.name if path.parent != root else str(dataset.get('SeriesNumber', '0'))
    return patient_id, slice_id, str(dataset.get('SeriesInstanceUID', '') or '')


def _series_labels(uids: list[tuple[int, str]]) -> dict[str, str]:
    """Suffix per series UID of one directory: the series number, or the rank when numbers repeat."""
    numbers = [number for number, _uid in uids]
    unique_numbers = len(set(numbers)) == len(numbers)
    return {uid: str(number) if unique_numbers else str(rank) for rank, (number, uid) in enumerate(sorted(uids), start=1)}


def _scan_dicom(root: Path, scan_log: ScanLog) -> list[SeriesRecord]:
    series: dict[tuple[str, str, str], dict[int, Path]] = {}
    series_numbers: dict[tuple[str, str, str], int] = {}
    for path in sorted(p for p in root.rglob('*') if p.is_file()):
        try:
            dataset = pydicom.dcmread(path, stop_before_pixels=True)
            time_index = int(dataset.get('InstanceNumber') or round(float(dataset.TriggerTime)))
            series_number = int(dataset.get('SeriesNumber') or 0)
        except (InvalidDicomError, AttributeError, TypeError, ValueError, OSError) as exception:
            scan_log.write(f'SKIP {path}: unparseable header ({exception.__class__.__name__})')
            continue
        key = _dicom_series_key(root, path, dataset)
        series_numbers.setdefault(key, series_number)
        frames = series.setdefault(key, {})
        if time_index in frames:
            scan_log.write(f'SKIP {path}: duplicate time index {time_index} in {key[0]}/{key[1]}')
            continue
        frames[time_index] = path

    # repeated acquisitions in one directory become separate slices
    acquisitions: dict[tuple[str, str], list[tuple[int, str]]] = {}
    for patient_id, slice_id, uid in series:
        acquisitions.setdefault((patient_id, slice_id), []).append((series_numbers[patient_id, slice_id, uid], uid))
    entries = []
    for (patient_id, directory_id, uid), frames in series.items():
        uids = acquisitions[patient_id, directory_id]
        slice_id = f'{directory_id}_{_series_labels(uids)[uid]}' if len(uids) > 1 else directory_id
        ordered = sorted(frames.items())
        entries.append(SeriesRecord(
            patient_id=patient_id,
            slice_id=slice_id,
            frame_count=len(ordered),
            source_paths=tuple(path for _index, path in ordered),
            time_indices=tuple(index for index, _path in ordered),
        ))
    entries.sort(key=lambda record: (record.patient_id, record.slice_id))
    return entries


def scan_dataset(root: Path, dataset_format: DatasetFormat | str, scan_log: ScanLog | None = None) -> PatientIndex:
    """Group the files under `root` into (patient, slice) series ordered by time index.

    Returns:
        PatientIndex, empty (with a warning) when nothing was found.

    Raises:
        RootNotFoundError: If `root` is not a directory.

    """
    root = Path(root)
    if not root.is_dir():
        error = f'Dataset root not found: {root}'
        raise RootNotFoundError(error)
    dataset_format = DatasetFormat(dataset_format)
    scan_log = scan_log or ScanLog()
    if dataset_format == DatasetFormat.DICOM:
        entries = _scan_dicom(root, scan_log)
    else:
        entries = _scan_pgm_tree(root, scan_log)
    if not entries:
        logger.warning('No series found under %s', root)
        scan_log.write(f'EMPTY {root}: no series found')
    index = PatientIndex(entries=entries, dataset_format=dataset_format)
    scan_log.write(f'SCANNED {root}: {len(index.patient_ids)} patients, {len(entries)} series')
    return index


def _read_dicom_pixels(path: Path) -> tuple[np.ndarray, int]:
    try:
        dataset = pydicom.dcmread(path)
        pixels = dataset.pixel_array
    except Exception as exception:  # noqa: BLE001 pydicom raises many decoder-specific types
        raise CorruptFrameError(path, str(exception)) from exception
    bits_stored = int(dataset.get('BitsStored', 16))
    return pixels, 2**bits_stored - 1


def _check_contiguous(record: SeriesRecord) -> None:
    expected = record.time_indices[0]
    for index in record.time_indices:
        if index != expected:
            raise MissingFrameError(record.patient_id, record.slice_id, expected)
        expected += 1


def load_cine_clip(index: PatientIndex, patient_id: str, slice_id: str, size: int = FRAME_SIZE) -> CineClip:
    """Decode one series into a clip normalized per clip and resized to `size` x `size`.

    Raises:
        SeriesNotFoundError: If the series is not in the index.
        MissingFrameError: If the time indices have a gap.
        CorruptFrameError: If a frame cannot be decoded or is not integer pixel data.

    """
    record = index.find(patient_id, slice_id)
    _check_contiguous(record)
    raw_frames = []
    bit_depth_max = PGM_MAXVAL
    for path in record.source_paths:
        if index.dataset_format == DatasetFormat.DICOM:
            pixels, bit_depth_max = _read_dicom_pixels(path)
        else:
            pixels = read_pgm(path)
        if not np.issubdtype(pixels.dtype, np.integer):
            raise CorruptFrameError(path, f'expected integer pixel data, got {pixels.dtype}')
        if pixels.ndim != 2:  # noqa: PLR2004 single 2D frame
            raise CorruptFrameError(path, f'expected a 2D frame, got shape {pixels.shape}')
        raw_frames.append(pixels)
    shapes = {frame.shape for frame in raw_frames}
    if len(shapes) != 1:
        raise CorruptFrameError(record.source_paths[0], f'frames of one series differ in shape: {sorted(shapes)}')
    stack = normalize_frame(np.stack(raw_frames), bit_depth_max)
    if stack.shape[1:] != (size, size):
        stack = resize_to(stack, (size, size))
    return CineClip(patient_id=patient_id, slice_id=slice_id, frames=stack)


def _validated_phantom_config(config: PhantomConfig | dict) -> PhantomConfig:
    try:
        return PhantomConfig.model_validate(config if isinstance(config, dict) else config.model_dump())
    except ValidationError as exception:
        raise InvalidConfigError(str(exception)) from exception


def _smooth_texture(rng: np.random.Generator, size: int, sigma: float) -> np.ndarray:
    texture = ndimage.gaussian_filter(rng.standard_normal((size, size)), sigma=sigma, mode='wrap')
    texture -= texture.min()
    return texture / max(texture.max(), 1e-12)


def synth_phantom_clip(config: PhantomConfig | dict, T: int, seed: int) -> CineClip:
    """Render a beating textured ellipse over a fixed textured background.

    The radius follows a cosine with the configured period. `texture_seed` fixes the textures,
    `seed` fixes the phase offset, the centre jitter and the noise.

    Raises:
        InvalidConfigError: If the configuration or T is invalid.

    """
    config = _validated_phantom_config(config)
    if T < 2:  # noqa: PLR2004 at least two frames
        error = f'Phantom clip needs T >= 2, got {T}'
        raise InvalidConfigError(error)
    size = config.size
    texture_rng = np.random.default_rng(config.texture_seed)
    background = _smooth_texture(texture_rng, size, sigma=size / 32)
    myocardium = _smooth_texture(texture_rng, size, sigma=size / 64)

    rng = np.random.default_rng(seed)
    phase_offset = int(rng.integers(0, config.period))
    center = size / 2 + rng.uniform(-size / 32, size / 32, size=2)
    scale = size / FRAME_SIZE
    edge = max(1.0, 2.0 * scale)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    frames = np.empty((T, size, size), dtype=np.float64)
    for t in range(T):
        phase = ((t + phase_offset) % config.period) / config.period
        contraction = config.contraction_amplitude * 0.5 * (1.0 - np.cos(2.0 * np.pi * phase))
        radius = config.base_radius * scale * (1.0 - contraction)
        dy, dx = (yy - center[0]) / (0.8 * radius), (xx - center[1]) / radius
        distance = np.hypot(dx, dy)
        mask = 0.5 * (1.0 - np.tanh((distance - 1.0) * radius / edge))
        # texture follows the wall: sample it at coordinates scaled with the radius
        zoom = config.base_radius * scale / radius
        coords = np.stack([center[0] + (yy - center[0]) * zoom, center[1] + (xx - center[1]) * zoom])
        wall = ndimage.map_coordinates(myocardium, coords, order=1, mode='wrap')
        frame = 0.15 + 0.25 * background + mask * (0.35 + 0.3 * wall)
        if config.noise_level > 0:
            frame = frame + rng.normal(0.0, config.noise_level, size=frame.shape)
        frames[t] = np.clip(frame, 0.0, 1.0)
    return CineClip(patient_id=f'phantom{seed}', slice_id='0', frames=frames)


def phantom_population_clip(
    config: PhantomConfig,
    patient: int,
    slice_number: int,
    slices: int,
    T: int,
    seed: int = 0,
) -> CineClip:
    """Clip of one (patient, slice) of a phantom population; each patient gets its own texture."""
    patient_config = config.model_copy(update={'texture_seed': config.texture_seed + patient})
    clip = synth_phantom_clip(patient_config, T, seed + patient * slices + slice_number)
    return CineClip(
        patient_id=f'{patient:04d}',
        slice_id=f'{slice_number:02d}',
        frames=clip.frames,
    )


def write_phantom_dataset(
    root: Path,
    config: PhantomConfig,
    patients: int,
    slices: int,
    T: int,
    seed: int = 0,
) -> PatientIndex:
    """Materialize phantom clips as a pgm_tree dataset and return its index."""
    for patient in range(patients):
        for slice_number in range(slices):
            clip = phantom_population_clip(config, patient, slice_number, slices, T, seed)
            slice_dir = Path(root) / f'{PATIENT_DIR_PREFIX}{clip.patient_id}' / f'{SLICE_DIR_PREFIX}{clip.slice_id}'
            for t, frame in enumerate(clip.frames):
                write_pgm(slice_dir / f'frame_{t:03d}.pgm', frame)
    logger.info('Wrote %d phantom series to %s', patients * slices, root)
    return scan_dataset(Path(root), DatasetFormat.PGM_TREE)
