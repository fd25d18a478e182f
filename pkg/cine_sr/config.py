"""Experiment configuration: pydantic models, bundled YAML profiles and dotted command-line overrides."""
import enum
import hashlib
import json
import logging
from pathlib import Path
from typing import Any

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .data_ingest import PhantomConfig
from .errors import ConfigError
from .latent_diffusion import DenoiserConfig, ScheduleConfig
from .settings import settings
from .spatial_pipeline import DegradationConfig
from .temporal_pipeline import DEFAULT_K, FlowParams
from .vq_autoencoder import DOWNSAMPLE_FACTOR, AutoencoderConfig

logger = logging.getLogger(__name__)

PROFILES_DIR = Path(__file__).parent / 'profiles'
PROFILE_SUFFIX = '.yaml'
# fields that change what the weights learn; a checkpoint is only valid for the same values
FINGERPRINT_FIELDS = {'K', 'flow', 'degradation', 'autoencoder', 'schedule', 'denoiser'}


class DataSource(enum.StrEnum):
    """Where clips come from."""

    PHANTOM = 'phantom'
    DICOM = 'dicom'
    PGM_TREE = 'pgm_tree'


class DataConfig(BaseModel):
    """Pydantic model for the clip population and its train/eval split."""

    model_config = ConfigDict(extra='forbid')

    source: DataSource = Field(DataSource.PHANTOM, description='phantom, dicom or pgm_tree.')
    root: Path | None = Field(None, description='Dataset root for dicom and pgm_tree sources.')
    phantom: PhantomConfig = Field(default_factory=PhantomConfig, description='Generator settings of phantom clips.')
    phantom_patients: int = Field(16, ge=2, description='Patients of the in-memory phantom population.')
    phantom_slices: int = Field(2, ge=1, description='Slices per phantom patient.')
    frames_per_clip: int = Field(30, ge=2, description='Frames of each phantom clip.')
    frame_size: int = Field(256, ge=32, description='Frames are resized to frame_size x frame_size.')
    eval_fraction: float = Field(0.2, gt=0, lt=1, description='Share of patients held out for evaluation.')
    eval_samples: int = Field(50, ge=1, description='Triplets drawn from the held-out clips for evaluation.')

    @model_validator(mode='after')
    def _check(self) -> 'DataConfig':
        if self.source != DataSource.PHANTOM and self.root is None:
            error = f'Data source "{self.source}" needs a root directory'
            raise ValueError(error)
        # frame / 4 spatial, / 4 autoencoder, / 2 denoiser
        multiple = 4 * DOWNSAMPLE_FACTOR * 2
        if self.frame_size % multiple:
            error = f'frame_size must be divisible by {multiple}, got {self.frame_size}'
            raise ValueError(error)
        if self.phantom.size != self.frame_size:
            self.phantom = self.phantom.model_copy(update={'size': self.frame_size})
        return self


class OptimizerConfig(BaseModel):
    """Pydantic model for the denoiser optimization."""

    model_config = ConfigDict(extra='forbid')

    learning_rate: float = Field(5e-5, gt=0, description='Adam learning rate.')
    batch_size: int = Field(44, ge=1, description='Samples per forward pass.')
    grad_accum_steps: int = Field(4, ge=1, description='Forward passes accumulated per optimizer step.')
    total_iterations: int = Field(25000, ge=1, description='Optimizer steps.')
    checkpoint_every: int = Field(1000, ge=1, description='Checkpoint cadence in optimizer steps.')
    num_workers: int = Field(0, ge=0, description='DataLoader worker processes.')

    @property
    def effective_batch(self) -> int:
        return self.batch_size * self.grad_accum_steps


class ExperimentConfig(BaseModel):
    """Pydantic model for one experiment, the root of a profile file."""

    model_config = ConfigDict(extra='forbid')

    seed: int = Field(0, ge=0, description='Global seed of training samples; sample i uses seed ^ i.')
    eval_seed: int = Field(20240, ge=0, description='Seed of the evaluation triplet selection.')
    run_dir: Path = Field(Path('runs/default'), description='Output directory of checkpoints, logs, reports, dumps.')
    device: str = Field('cpu', description='Torch device.')
    K: int = Field(DEFAULT_K, ge=4, description='Temporal factor, frames between interpolation endpoints.')
    data: DataConfig = Field(default_factory=DataConfig)
    flow: FlowParams = Field(default_factory=FlowParams)
    degradation: DegradationConfig = Field(default_factory=DegradationConfig)
    autoencoder: AutoencoderConfig = Field(default_factory=AutoencoderConfig)
    pretrain_autoencoder: bool = Field(True, description='Train the autoencoder when no checkpoint exists.')
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    denoiser: DenoiserConfig = Field(default_factory=DenoiserConfig)
    optimizer: OptimizerConfig = Field(default_factory=OptimizerConfig)
    lpips_weights: Path | None = Field(None, description='State dict of the LPIPS network; LPIPS is absent without it.')
    lpips_backbone: str = Field('alex', description='LPIPS feature backbone.')

    @model_validator(mode='after')
    def _check(self) -> 'ExperimentConfig':
        if self.data.frames_per_clip < self.K + 1 and self.data.source == DataSource.PHANTOM:
            error = f'Phantom clips of {self.data.frames_per_clip} frames are shorter than a window of {self.K + 1}'
            raise ValueError(error)
        return self

    def fingerprint(self) -> str:
        """Stable sha256 over the fields that affect the learned weights and the frame size."""
        values = self.model_dump(mode='json', include=FINGERPRINT_FIELDS)
        values['frame_size'] = self.data.frame_size
        return hashlib.sha256(json.dumps(values, sort_keys=True).encode('utf-8')).hexdigest()


def _profile_path(source: str | Path) -> Path:
    path = Path(source)
    if path.is_file():
        return path
    profile = PROFILES_DIR / f'{source}{PROFILE_SUFFIX}'
    if profile.is_file():
        return profile
    available = sorted(item.stem for item in PROFILES_DIR.glob(f'*{PROFILE_SUFFIX}'))
    error = f'Configuration "{source}" is neither a file nor a bundled profile {available}'
    raise ConfigError(error)


def apply_override(values: dict[str, Any], override: str) -> None:
    """Set a dotted `key=value` in nested dictionaries; the value is parsed as YAML.

    Raises:
        ConfigError: If the override has no `=` or an empty key.

    """
    key, separator, raw_value = override.partition('=')
    if not separator or not key.strip():
        error = f'Override "{override}" is not of the form key=value'
        raise ConfigError(error)
    try:
        value = yaml.safe_load(raw_value)
    except yaml.YAMLError as exception:
        error = f'Override "{override}" has an unreadable value: {exception}'
        raise ConfigError(error) from exception
    *parents, leaf = key.strip().split('.')
    node = values
    for parent in parents:
        child = node.setdefault(parent, {})
        if not isinstance(child, dict):
            error = f'Override "{override}": "{parent}" is not a section'
            raise ConfigError(error)
        node = child
    node[leaf] = value


def _check_paths(config: ExperimentConfig) -> None:
    if config.data.source != DataSource.PHANTOM and not config.data.root.is_dir():
        error = f'Data root not found: {config.data.root}'
        raise ConfigError(error)
    if config.lpips_weights is not None and not config.lpips_weights.is_file():
        error = f'LPIPS weights not found: {config.lpips_weights}'
        raise ConfigError(error)


def load_config(
    source: str | Path | None = None,
    overrides: list[str] | None = None,
    *,
    check_paths: bool = False,
) -> ExperimentConfig:
    """Read a profile (bundled name or YAML path), apply overrides and validate.

    Raises:
        ConfigError: If the file is unreadable, a key is unknown or a value is invalid.

    """
    path = _profile_path(source or settings.default_profile)
    try:
        values = yaml.safe_load(path.read_text(encoding='utf-8')) or {}
    except yaml.YAMLError as exception:
        error = f'Could not parse {path}: {exception}'
        raise ConfigError(error) from exception
    if not isinstance(values, dict):
        error = f'{path} does not hold a mapping'
        raise ConfigError(error)
    for override in overrides or []:
        apply_override(values, override)
    try:
        config = ExperimentConfig.model_validate(values)
    except ValidationError as exception:
        error = f'Invalid configuration {path}:\n{exception}'
        raise ConfigError(error) from exception
    if check_paths:
        _check_paths(config)
    logger.debug('Loaded configuration %s with fingerprint %s', path, config.fingerprint())
    return config
