"""Sample assembly, clip sources, evaluation, inference and the bicubic baseline."""
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
import torch
from torch.utils.data import Dataset
from tqdm import tqdm

from .checkpoints import CheckpointMismatchError, load_checkpoint, save_checkpoint, state_fingerprint
from .config import DataConfig, DataSource, ExperimentConfig
from .data_ingest import CineClip, DatasetFormat, ScanLog, load_cine_clip, phantom_population_clip, scan_dataset, write_pgm_grid
from .errors import CineSrError, ErrorCategory
from .latent_diffusion import TRAJECTORY_TIMES, Denoiser, DiffusionSchedule, LatentUNet, sample, schedule_from_config
from .metrics import (
    BackboneUnavailableError,
    FrameScores,
    LpipsScorer,
    MetricReport,
    aggregate,
    load_lpips,
    score_frame,
)
from .settings import RunPaths, settings
from .spatial_pipeline import degrade, resize_to
from .temporal_pipeline import sample_training_window
from .vq_autoencoder import VQAutoencoder

logger = logging.getLogger(__name__)

DIFFUSION_CHECKPOINT_KIND = 'diffusion'
CLIP_CACHE_SIZE = 64
BASELINE = 'Baseline'
MODEL = 'LDM'


class DataUnavailableError(CineSrError):
    """No clips to train or evaluate on."""

    category = ErrorCategory.DATA


class EmptyEvalSetError(CineSrError):
    """Evaluation called with no samples."""

    category = ErrorCategory.DATA


@dataclass(frozen=True)
class SampleMetadata:
    """Everything needed to rebuild a TrainingSample from its clip source and configuration."""

    patient_id: str
    slice_id: str
    start_index: int
    triplet_offsets: tuple[int, int, int]
    seed: int


@dataclass(frozen=True)
class TrainingSample:
    """Degraded interpolated triplet [3, H/4, W/4] and the original frames [3, H, W] at the same times."""

    lr_triplet: np.ndarray
    gt_triplet: np.ndarray
    interpolated_triplet: np.ndarray
    metadata: SampleMetadata

    @property
    def frame_shape(self) -> tuple[int, int]:
        return self.gt_triplet.shape[-2:]


class JsonLinesLog:
    """Append-only JSON-lines file."""

    _lock = threading.Lock()

    def __init__(self, path: Path) -> None:
        """Log to `path`, created on the first append."""
        self.path = Path(path)

    def append(self, record: dict[str, Any]) -> None:
        with self._lock:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with self.path.open('a', encoding='utf-8') as file:
                file.write(json.dumps(record) + '\n')

    def read(self) -> list[dict[str, Any]]:
        if not self.path.is_file():
            return []
        return [json.loads(line) for line in self.path.read_text(encoding='utf-8').splitlines() if line.strip()]

    def truncate_after(self, iteration: int) -> None:
        """Drop records with an iteration above `iteration`."""
        kept = [record for record in self.read() if record.get('iteration', 0) <= iteration]
        with self._lock:
            self.path.write_text(''.join(json.dumps(record) + '\n' for record in kept), encoding='utf-8')

    def clear(self) -> None:
        with self._lock:
            self.path.unlink(missing_ok=True)


class ClipSource:
    """Clips of a scanned dataset or of an in-memory phantom population, split by patient."""

    def __init__(self, config: DataConfig, scan_log: ScanLog | None = None) -> None:
        """Index the clips; datasets on disk are scanned once.

        Raises:
            DataUnavailableError: If no clip was found.

        """
        self.config = config
        self._cache: OrderedDict[tuple[str, str], CineClip] = OrderedDict()
        self._lock = threading.Lock()
        self.index = None
        if config.source == DataSource.PHANTOM:
            self._phantom_numbers = {
                (f'{patient:04d}', f'{slice_number:02d}'): (patient, slice_number)
                for patient in range(config.phantom_patients)
                for slice_number in range(config.phantom_slices)
            }
            self.keys = sorted(self._phantom_numbers)
        else:
            self.index = scan_dataset(config.root, DatasetFormat(config.source.value), scan_log)
            self.keys = sorted((record.patient_id, record.slice_id) for record in self.index.entries)
        if not self.keys:
            error = f'No clips available from the {config.source} source'
            raise DataUnavailableError(error)

    def __getstate__(self) -> dict[str, Any]:
        """State for spawned data loader workers; the lock and the clip cache stay behind."""
        state = self.__dict__.copy()
        del state['_lock'], state['_cache']
        return state

    def __setstate__(self, state: dict[str, Any]) -> None:
        self.__dict__.update(state)
        self._cache = OrderedDict()
        self._lock = threading.Lock()

    @property
    def patient_ids(self) -> list[str]:
        return sorted({patient_id for patient_id, _slice_id in self.keys})

    def clip(self, patient_id: str, slice_id: str) -> CineClip:
        key = (patient_id, slice_id)
        with self._lock:
            if key in self._cache:
                self._cache.move_to_end(key)
                return self._cache[key]
        if self.index is None:
            patient, slice_number = self._phantom_numbers[key]
            clip = phantom_population_clip(
                self.config.phantom, patient, slice_number, self.config.phantom_slices, self.config.frames_per_clip,
            )
        else:
            clip = load_cine_clip(self.index, patient_id, slice_id, self.config.frame_size)
        with self._lock:
            self._cache[key] = clip
            while len(self._cache) > CLIP_CACHE_SIZE:
                self._cache.popitem(last=False)
        return clip

    def split(self) -> tuple[list[tuple[str, str]], list[tuple[str, str]]]:
        """Train and eval keys; the last eval_fraction of the sorted patients are held out.

        Raises:
            DataUnavailableError: If there are fewer than two patients.

        """
        patients = self.patient_ids
        if len(patients) < 2:  # noqa: PLR2004 one train and one eval patient
            error = f'Need at least two patients for a train/eval split, found {len(patients)}'
            raise DataUnavailableError(error)
        n_eval = min(len(patients) - 1, max(1, round(len(patients) * self.config.eval_fraction)))
        eval_patients = set(patients[-n_eval:])
        train = [key for key in self.keys if key[0] not in eval_patients]
        held_out = [key for key in self.keys if key[0] in eval_patients]
        return train, held_out


def _stream_seeds(seed: int) -> tuple[int, int, int]:
    """Independent seeds for clip choice, window draw and degradation."""
    clip_seed, window_seed, degradation_seed = np.random.SeedSequence(seed).generate_state(3)
    return int(clip_seed), int(window_seed), int(degradation_seed)


def assemble_training_sample(clip: CineClip, config: ExperimentConfig, seed: int) -> TrainingSample:
    """Window draw, flow interpolation and spatial degradation of one triplet, deterministic in `seed`."""
    _clip_seed, window_seed, degradation_seed = _stream_seeds(seed)
    window = sample_training_window(clip, config.K, rng_seed=window_seed, params=config.flow)
    interpolated = window.interpolated_triplet
    lr_triplet = degrade(interpolated, config.degradation, degradation_seed)
    metadata = SampleMetadata(
        patient_id=clip.patient_id,
        slice_id=clip.slice_id,
        start_index=window.start_index,
        triplet_offsets=window.triplet_offsets,
        seed=seed,
    )
    return TrainingSample(
        lr_triplet=lr_triplet,
        gt_triplet=window.gt_frames,
        interpolated_triplet=interpolated,
        metadata=metadata,
    )


def draw_sample(source: ClipSource, keys: list[tuple[str, str]], config: ExperimentConfig, seed: int) -> TrainingSample:
    """Pick a clip from `keys` and assemble a sample from it, both driven by `seed`."""
    clip_seed, _window_seed, _degradation_seed = _stream_seeds(seed)
    patient_id, slice_id = keys[int(np.random.default_rng(clip_seed).integers(len(keys)))]
    return assemble_training_sample(source.clip(patient_id, slice_id), config, seed)


def regenerate_sample(metadata: SampleMetadata, config: ExperimentConfig, source: ClipSource) -> TrainingSample:
    """Rebuild a sample bit-exactly from its metadata."""
    return assemble_training_sample(source.clip(metadata.patient_id, metadata.slice_id), config, metadata.seed)


def upscale_bicubic(lr_triplet: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Bicubic upscaling of the model input to the ground-truth size, the evaluation baseline."""
    return np.clip(resize_to(lr_triplet, shape), 0.0, 1.0)


class SampleDataset(Dataset):
    """Training samples by index; sample i is drawn with seed `base_seed ^ (offset + i)`."""

    def __init__(
        self,
        source: ClipSource,
        keys: list[tuple[str, str]],
        config: ExperimentConfig,
        length: int,
        offset: int = 0,
    ) -> None:
        """Serve `length` samples starting at global sample number `offset`."""
        self.source = source
        self.keys = keys
        self.config = config
        self.length = length
        self.offset = offset

    def __len__(self) -> int:
        return self.length

    def __getitem__(self, index: int) -> dict[str, torch.Tensor]:
        training_sample = draw_sample(self.source, self.keys, self.config, self.config.seed ^ (self.offset + index))
        upscaled = upscale_bicubic(training_sample.lr_triplet, training_sample.frame_shape)
        return {
            'gt': torch.from_numpy(training_sample.gt_triplet.astype(np.float32)),
            'upscaled': torch.from_numpy(upscaled.astype(np.float32)),
        }


@dataclass
class DiffusionModel:
    """Frozen autoencoder, denoiser and schedule, everything needed to super-resolve a triplet."""

    autoencoder: VQAutoencoder
    denoiser: Denoiser
    schedule: DiffusionSchedule

    @property
    def device(self) -> torch.device:
        return next(self.autoencoder.parameters()).device


def save_diffusion(
    path: Path,
    config: ExperimentConfig,
    autoencoder: VQAutoencoder,
    denoiser: LatentUNet,
    extra: dict[str, Any] | None = None,
) -> Path:
    header = {
        'config': config.model_dump(mode='json'),
        'fingerprint': config.fingerprint(),
        'autoencoder_hash': state_fingerprint(autoencoder),
    }
    arrays = {'autoencoder': autoencoder.state_dict(), 'denoiser': denoiser.state_dict()}
    return save_checkpoint(path, DIFFUSION_CHECKPOINT_KIND, header, arrays, extra)


def load_diffusion(path: Path, device: str = 'cpu') -> tuple[DiffusionModel, dict[str, Any]]:
    """Rebuild the frozen autoencoder and the denoiser from a diffusion checkpoint.

    Raises:
        CheckpointMismatchError: If the file is missing, of another kind, or its weights do not fit.

    """
    payload = load_checkpoint(path, DIFFUSION_CHECKPOINT_KIND)
    stored = ExperimentConfig.model_validate(payload['header']['config'])
    autoencoder = VQAutoencoder(stored.autoencoder)
    denoiser = LatentUNet(stored.autoencoder.latent_channels, stored.denoiser)
    try:
        autoencoder.load_state_dict(payload['arrays']['autoencoder'])
        denoiser.load_state_dict(payload['arrays']['denoiser'])
    except (KeyError, RuntimeError) as exception:
        error = f'Diffusion checkpoint {path} does not fit its stored configuration: {exception}'
        raise CheckpointMismatchError(error) from exception
    autoencoder.to(device).freeze()
    denoiser.to(device).eval()
    return DiffusionModel(autoencoder, denoiser, schedule_from_config(stored.schedule)), payload


@dataclass
class SuperResolved:
    """Output frames [3, H, W] and decoded trajectory snapshots (normalized time, frames)."""

    frames: np.ndarray
    trajectory: list[tuple[float, np.ndarray]] = field(default_factory=list)


def _frames_to_latents(model: DiffusionModel, frames: np.ndarray) -> torch.Tensor:
    stack = torch.as_tensor(np.asarray(frames, dtype=np.float32), device=model.device)[None]
    with torch.no_grad():
        return model.autoencoder.encode_stack(stack)


def _latents_to_frames(model: DiffusionModel, latents: torch.Tensor) -> np.ndarray:
    with torch.no_grad():
        return model.autoencoder.decode_stack(latents)[0].cpu().numpy().astype(np.float64)


def super_resolve(
    model: DiffusionModel,
    lr_triplet: np.ndarray,
    frame_shape: tuple[int, int],
    seed: int,
    trajectory_times: tuple[float, ...] | None = None,
) -> SuperResolved:
    """Encode the bicubic-upscaled input as condition, run the reverse process and decode."""
    cond = _frames_to_latents(model, upscale_bicubic(lr_triplet, frame_shape))
    result = sample(model.denoiser, cond, cond, model.schedule, seed, trajectory_times)
    trajectory = [(time, _latents_to_frames(model, state)) for time, state in result.trajectory]
    return SuperResolved(frames=_latents_to_frames(model, result.x0), trajectory=trajectory)


def build_eval_set(source: ClipSource, config: ExperimentConfig, n_samples: int | None = None) -> list[TrainingSample]:
    """Held-out triplets drawn with seeds `eval_seed ^ i`, identical across runs."""
    _train, held_out = source.split()
    count = config.data.eval_samples if n_samples is None else n_samples
    return [draw_sample(source, held_out, config, config.eval_seed ^ index) for index in range(count)]


def optional_lpips(config: ExperimentConfig) -> LpipsScorer | None:
    """LPIPS scorer when weights are configured and loadable, else None with a warning."""
    if config.lpips_weights is None:
        logger.info('No LPIPS weights configured, LPIPS is reported absent')
        return None
    try:
        return load_lpips(config.lpips_weights, config.lpips_backbone, config.device)
    except BackboneUnavailableError as exception:
        logger.warning('LPIPS unavailable, reported absent: %s', exception)
        return None


def _frame_record(scores: FrameScores, mode: str, model_name: str, number: int, frame: int, metadata: SampleMetadata) -> dict:
    return {
        'mode': mode,
        'sample': number,
        'frame': frame,
        'model': model_name,
        'patient_id': metadata.patient_id,
        'slice_id': metadata.slice_id,
        'start_index': metadata.start_index,
        **asdict(scores),
    }


def run_baseline(
    eval_set: list[TrainingSample],
    lpips_scorer: LpipsScorer | None = None,
    autoencoder: VQAutoencoder | None = None,
) -> MetricReport:
    """Score the bicubic upscaling of the model input against the ground truth; no trained model needed.

    Raises:
        EmptyEvalSetError: If `eval_set` is empty.

    """
    if not eval_set:
        error = 'Baseline evaluation needs at least one sample'
        raise EmptyEvalSetError(error)
    scores = []
    for training_sample in eval_set:
        baseline = upscale_bicubic(training_sample.lr_triplet, training_sample.frame_shape)
        scores += [
            score_frame(reference, output, lpips_scorer, autoencoder)
            for reference, output in zip(training_sample.gt_triplet, baseline, strict=True)
        ]
    return aggregate(scores)


def run_evaluation(
    config: ExperimentConfig,
    checkpoint: Path | None,
    eval_set: list[TrainingSample],
    *,
    model: DiffusionModel | None = None,
    lpips_scorer: LpipsScorer | None = None,
    paths: RunPaths | None = None,
    compare_dumps: int = 0,
    progress: bool = True,
) -> tuple[MetricReport, MetricReport]:
    """Score the bicubic baseline and the diffusion model on every frame of `eval_set`.

    Sample i is super-resolved with seed `eval_seed ^ i`. Per-frame scores are appended to the
    eval log of `paths`; the first `compare_dumps` samples are written as Baseline / LDM / ground
    truth comparison strips.

    Returns:
        (baseline report, model report).

    Raises:
        EmptyEvalSetError: If `eval_set` is empty.
        CheckpointMismatchError: If no model is given and the checkpoint cannot be loaded.

    """
    if not eval_set:
        error = 'Evaluation needs at least one sample'
        raise EmptyEvalSetError(error)
    if model is None:
        if checkpoint is None:
            error = 'Evaluation needs a diffusion checkpoint'
            raise CheckpointMismatchError(error)
        model, _payload = load_diffusion(checkpoint, config.device)
    frame_log = JsonLinesLog(paths.eval_frames_log) if paths is not None else None
    mode = config.degradation.mode.value
    baseline_scores, model_scores = [], []
    for number, training_sample in enumerate(tqdm(eval_set, desc=f'evaluate {mode}', disable=not progress)):
        baseline = upscale_bicubic(training_sample.lr_triplet, training_sample.frame_shape)
        output = super_resolve(model, training_sample.lr_triplet, training_sample.frame_shape, config.eval_seed ^ number)
        for frame, reference in enumerate(training_sample.gt_triplet):
            baseline_frame = score_frame(reference, baseline[frame], lpips_scorer, model.autoencoder)
            model_frame = score_frame(reference, output.frames[frame], lpips_scorer, model.autoencoder)
            baseline_scores.append(baseline_frame)
            model_scores.append(model_frame)
            if frame_log is not None:
                metadata = training_sample.metadata
                frame_log.append(_frame_record(baseline_frame, mode, BASELINE, number, frame, metadata))
                frame_log.append(_frame_record(model_frame, mode, MODEL, number, frame, metadata))
        if paths is not None and number < compare_dumps:
            strip = paths.dumps / f'compare_{mode}_{number:03d}.pgm'
            write_pgm_grid(strip, [baseline, output.frames, training_sample.gt_triplet])
    return aggregate(baseline_scores), aggregate(model_scores)


@dataclass
class InferenceResult:
    """Super-resolved triplet of one window with the written dump files."""

    sample: TrainingSample
    frames: np.ndarray
    trajectory: list[tuple[float, np.ndarray]]
    dump_paths: list[Path] = field(default_factory=list)


def run_inference(
    config: ExperimentConfig,
    checkpoint: Path | None,
    clip: CineClip,
    *,
    seed: int = 0,
    model: DiffusionModel | None = None,
    paths: RunPaths | None = None,
    dump_trajectory: bool = False,
    dump_interpolated: bool = False,
) -> InferenceResult:
    """Assemble one window of `clip` with `seed`, super-resolve it and optionally write PGM dumps.

    The trajectory dump holds one row per normalized time 0, 0.25, 0.5, 0.75 and 1 of the reverse
    process. The interpolation dump holds the interpolated frames, the ground truth and the
    bicubic-upscaled model input.

    Raises:
        CheckpointMismatchError: If no model is given and the checkpoint cannot be loaded.

    """
    if model is None:
        if checkpoint is None:
            error = 'Inference needs a diffusion checkpoint'
            raise CheckpointMismatchError(error)
        model, _payload = load_diffusion(checkpoint, config.device)
    training_sample = assemble_training_sample(clip, config, seed)
    output = super_resolve(
        model,
        training_sample.lr_triplet,
        training_sample.frame_shape,
        seed,
        TRAJECTORY_TIMES if dump_trajectory else None,
    )
    dumps = []
    if paths is not None:
        stem = f'{clip.patient_id}_{clip.slice_id}_seed{seed}'
        dumps.append(paths.dumps / f'sr_{stem}.pgm')
        write_pgm_grid(dumps[-1], [output.frames])
        if dump_trajectory:
            dumps.append(paths.dumps / f'trajectory_{stem}.pgm')
            write_pgm_grid(dumps[-1], [frames for _time, frames in output.trajectory])
        if dump_interpolated:
            dumps.append(paths.dumps / f'interpolated_{stem}.pgm')
            upscaled = upscale_bicubic(training_sample.lr_triplet, training_sample.frame_shape)
            write_pgm_grid(dumps[-1], [training_sample.interpolated_triplet, training_sample.gt_triplet, upscaled])
    for dump in dumps:
        logger.info('Wrote %s', dump)
    return InferenceResult(sample=training_sample, frames=output.frames, trajectory=output.trajectory, dump_paths=dumps)


def default_paths(config: ExperimentConfig) -> RunPaths:
    return settings.run_paths(config.run_dir).create()
