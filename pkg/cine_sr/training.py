"""Autoencoder pre-training and the diffusion training loop."""
import logging
import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812
from torch.utils.data import DataLoader
from tqdm import tqdm

from .checkpoints import CheckpointMismatchError, load_checkpoint, state_fingerprint
from .config import ExperimentConfig
from .errors import CineSrError, ConfigError, ErrorCategory
from .harness import DIFFUSION_CHECKPOINT_KIND, ClipSource, JsonLinesLog, SampleDataset, default_paths, save_diffusion
from .latent_diffusion import LatentUNet, schedule_from_config, training_loss
from .metrics import psnr
from .settings import RunPaths
from .vq_autoencoder import VQAutoencoder, load_autoencoder, save_autoencoder

logger = logging.getLogger(__name__)

AUTOENCODER_VALIDATION_FRAMES = 32


class FrozenWeightsError(CineSrError):
    """Autoencoder weights changed while training the denoiser."""

    category = ErrorCategory.MODEL


@dataclass
class AutoencoderResult:
    model: VQAutoencoder
    validation_psnr: float
    iterations: int
    checkpoint: Path


@dataclass
class TrainingResult:
    """Outcome of a diffusion training run."""

    checkpoint: Path
    loss_log: Path
    iterations: int
    effective_batch: int


def _random_frames(source: ClipSource, keys: list[tuple[str, str]], rng: np.random.Generator, count: int) -> np.ndarray:
    """Frames [count, 1, H, W] of random clips at random times."""
    frames = []
    for key_index in rng.integers(0, len(keys), size=count):
        clip = source.clip(*keys[key_index])
        frames.append(clip.frames[rng.integers(0, clip.T)])
    return np.stack(frames)[:, None]


def _validation_psnr(model: VQAutoencoder, frames: torch.Tensor) -> float:
    model.eval()
    with torch.no_grad():
        reconstruction = model.decode_tensor(model.encode_tensor(frames)).cpu().numpy()
    model.train()
    references = frames.cpu().numpy()
    return float(np.mean([psnr(reference[0], output[0]) for reference, output in zip(references, reconstruction, strict=True)]))


def train_autoencoder(config: ExperimentConfig, paths: RunPaths | None = None, *, progress: bool = True) -> AutoencoderResult:
    """Train the autoencoder on single frames until the validation PSNR reaches the target or the step limit.

    The loss is L1 reconstruction plus the codebook term plus commitment_beta times the commitment term.
    Validation uses frames of the held-out patients.
    """
    paths = paths or default_paths(config)
    ae_config = config.autoencoder
    device = torch.device(config.device)
    source = ClipSource(config.data)
    train_keys, eval_keys = source.split()
    rng = np.random.default_rng(config.seed)
    validation_frames = _random_frames(source, eval_keys, rng, AUTOENCODER_VALIDATION_FRAMES)
    validation = torch.as_tensor(validation_frames, dtype=torch.float32, device=device)

    torch.manual_seed(config.seed)
    model = VQAutoencoder(ae_config).to(device)
    optimizer = torch.optim.Adam(model.parameters(), lr=ae_config.learning_rate)
    loss_log = JsonLinesLog(paths.autoencoder_loss_log)
    loss_log.clear()
    model.train()
    start = time.monotonic()
    validation_psnr = -math.inf
    iteration = 0
    for iteration in tqdm(range(1, ae_config.max_iterations + 1), desc='autoencoder', disable=not progress):
        batch = _random_frames(source, train_keys, rng, ae_config.batch_size)
        frames = torch.as_tensor(batch, dtype=torch.float32, device=device)
        reconstruction, quantizer = model(frames)
        reconstruction_loss = F.l1_loss(reconstruction, frames)
        loss = reconstruction_loss + quantizer.codebook_loss + ae_config.commitment_beta * quantizer.commitment_loss
        optimizer.zero_grad()
        loss.backward()
        optimizer.step()
        record = {
            'iteration': iteration,
            'loss': loss.item(),
            'l1': reconstruction_loss.item(),
            'elapsed_s': time.monotonic() - start,
        }
        if iteration % ae_config.eval_every == 0 or iteration == ae_config.max_iterations:
            validation_psnr = _validation_psnr(model, validation)
            record['validation_psnr'] = validation_psnr
            logger.info('Autoencoder iteration %d: loss %.4f, validation PSNR %.2f dB', iteration, loss.item(), validation_psnr)
        loss_log.append(record)
        if validation_psnr >= ae_config.target_psnr:
            break
    if validation_psnr < ae_config.target_psnr:
        logger.warning('Autoencoder stopped at %.2f dB, below the %.2f dB target', validation_psnr, ae_config.target_psnr)
    model.eval()
    extra = {'validation_psnr': validation_psnr, 'iterations': iteration}
    checkpoint = save_autoencoder(paths.autoencoder_checkpoint, model, extra)
    return AutoencoderResult(model=model, validation_psnr=validation_psnr, iterations=iteration, checkpoint=checkpoint)


def _prepare_autoencoder(config: ExperimentConfig, paths: RunPaths, *, progress: bool) -> VQAutoencoder:
    if paths.autoencoder_checkpoint.is_file():
        logger.info('Using autoencoder %s', paths.autoencoder_checkpoint)
        return load_autoencoder(paths.autoencoder_checkpoint, expected=config.autoencoder)
    if not config.pretrain_autoencoder:
        error = f'No autoencoder checkpoint at {paths.autoencoder_checkpoint} and pre-training is disabled'
        raise ConfigError(error)
    return train_autoencoder(config, paths, progress=progress).model


def _check_frozen(autoencoder: VQAutoencoder, expected_hash: str) -> None:
    if state_fingerprint(autoencoder) != expected_hash:
        error = 'Autoencoder weights changed during diffusion training'
        raise FrozenWeightsError(error)


def _step_generator(seed: int, iteration: int, device: torch.device) -> torch.Generator:
    return torch.Generator(device=device).manual_seed(seed * 1_000_003 + iteration)


def run_training(
    config: ExperimentConfig,
    *,
    resume: bool = False,
    paths: RunPaths | None = None,
    progress: bool = True,
) -> TrainingResult:
    """Train the denoiser on top of the frozen autoencoder.

    Every optimizer step accumulates `grad_accum_steps` batches of `batch_size` samples. One JSON
    line is logged per step; checkpoints are written every `checkpoint_every` steps and at the end.
    With `resume`, training continues after the iteration of the last checkpoint and the loss log
    is cut back to it.

    Raises:
        ConfigError: If no autoencoder is available and pre-training is disabled.
        DataUnavailableError: If there are no training clips.
        CheckpointMismatchError: If the checkpoint to resume was written with another configuration.
        FrozenWeightsError: If the autoencoder weights changed.

    """
    paths = paths or default_paths(config)
    device = torch.device(config.device)
    optimizer_config = config.optimizer
    autoencoder = _prepare_autoencoder(config, paths, progress=progress).to(device).freeze()
    torch.manual_seed(config.seed)
    denoiser = LatentUNet(autoencoder.latent_channels, config.denoiser).to(device)
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=optimizer_config.learning_rate)
    schedule = schedule_from_config(config.schedule)
    loss_log = JsonLinesLog(paths.train_loss_log)

    start_iteration = 0
    if resume and paths.diffusion_checkpoint.is_file():
        payload = load_checkpoint(paths.diffusion_checkpoint, DIFFUSION_CHECKPOINT_KIND)
        if payload['header']['fingerprint'] != config.fingerprint():
            error = f'Refusing to resume {paths.diffusion_checkpoint}: it was written with another configuration'
            raise CheckpointMismatchError(error)
        autoencoder.load_state_dict(payload['arrays']['autoencoder'])
        denoiser.load_state_dict(payload['arrays']['denoiser'])
        optimizer.load_state_dict(payload['extra']['optimizer'])
        start_iteration = payload['extra']['iteration']
        loss_log.truncate_after(start_iteration)
        logger.info('Resuming from iteration %d', start_iteration)
    else:
        if resume:
            logger.warning('No checkpoint at %s, starting from scratch', paths.diffusion_checkpoint)
        loss_log.clear()
    frozen_hash = state_fingerprint(autoencoder)

    source = ClipSource(config.data)
    train_keys, _eval_keys = source.split()
    effective_batch = optimizer_config.effective_batch
    remaining = optimizer_config.total_iterations - start_iteration
    dataset = SampleDataset(
        source,
        train_keys,
        config,
        length=max(remaining, 0) * effective_batch,
        offset=start_iteration * effective_batch,
    )
    loader = DataLoader(dataset, batch_size=optimizer_config.batch_size, shuffle=False, num_workers=optimizer_config.num_workers)
    batches = iter(loader)

    denoiser.train()
    start = time.monotonic()
    iterations = range(start_iteration + 1, optimizer_config.total_iterations + 1)
    for iteration in tqdm(iterations, desc='diffusion', disable=not progress):
        generator = _step_generator(config.seed, iteration, device)
        optimizer.zero_grad()
        step_loss = 0.0
        for _ in range(optimizer_config.grad_accum_steps):
            batch = next(batches)
            with torch.no_grad():
                x0 = autoencoder.encode_stack(batch['gt'].to(device))
                y = autoencoder.encode_stack(batch['upscaled'].to(device))
            t = torch.randint(1, schedule.T + 1, (x0.shape[0],), generator=generator, device=device)
            noise = torch.randn(x0.shape, generator=generator, device=device)
            loss = training_loss(denoiser, x0, y, y, t, schedule, noise) / optimizer_config.grad_accum_steps
            loss.backward()
            step_loss += loss.item()
        optimizer.step()
        loss_log.append({
            'iteration': iteration,
            'loss': step_loss,
            'effective_batch': effective_batch,
            'lr': optimizer.param_groups[0]['lr'],
            'elapsed_s': time.monotonic() - start,
        })
        if iteration % optimizer_config.checkpoint_every == 0 or iteration == optimizer_config.total_iterations:
            _check_frozen(autoencoder, frozen_hash)
            save_diffusion(
                paths.diffusion_checkpoint,
                config,
                autoencoder,
                denoiser,
                {'optimizer': optimizer.state_dict(), 'iteration': iteration},
            )
    logger.info('Diffusion training finished at iteration %d', optimizer_config.total_iterations)
    return TrainingResult(
        checkpoint=paths.diffusion_checkpoint,
        loss_log=paths.train_loss_log,
        iterations=optimizer_config.total_iterations,
        effective_batch=effective_batch,
    )
