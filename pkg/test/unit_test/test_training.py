"""Unit tests for autoencoder pre-training and the diffusion training loop."""
import shutil
from pathlib import Path

import numpy as np
import pytest
import torch
from pytest_mock import MockerFixture

from cine_sr import training
from cine_sr.checkpoints import CheckpointMismatchError, load_checkpoint
from cine_sr.config import ExperimentConfig, load_config
from cine_sr.errors import ConfigError
from cine_sr.harness import (
    BASELINE,
    MODEL,
    ClipSource,
    DiffusionModel,
    JsonLinesLog,
    TrainingSample,
    build_eval_set,
    load_diffusion,
    run_evaluation,
    upscale_bicubic,
)
from cine_sr.latent_diffusion import Denoiser
from cine_sr.settings import RunPaths, Settings
from cine_sr.training import FrozenWeightsError, run_training, train_autoencoder
from cine_sr.vq_autoencoder import VQAutoencoder, encode, quantize

SMOKE_OVERRIDES = [
    'data.phantom_patients=4',
    'data.frames_per_clip=12',
    'data.eval_fraction=0.25',
    'autoencoder.base_channels=8',
    'autoencoder.n_codes=16',
    'autoencoder.batch_size=2',
    'autoencoder.max_iterations=2',
    'autoencoder.eval_every=1',
    'autoencoder.target_psnr=99.0',
    'denoiser.base_channels=8',
    'denoiser.n_res_blocks=1',
    'denoiser.time_embed_dim=8',
    'optimizer.batch_size=2',
    'optimizer.grad_accum_steps=2',
    'optimizer.total_iterations=4',
    'optimizer.checkpoint_every=2',
]


def _config(run_dir: Path, *overrides: str) -> ExperimentConfig:
    return load_config('toy', [*SMOKE_OVERRIDES, f'run_dir={run_dir}', *overrides])


def _paths(config: ExperimentConfig) -> RunPaths:
    return Settings().run_paths(config.run_dir).create()


@pytest.fixture(scope='module')
def autoencoder_checkpoint(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """Autoencoder pre-trained by the smoke configuration.

    Returns:
        Checkpoint path.

    """
    config = _config(tmp_path_factory.mktemp('autoencoder'))
    return train_autoencoder(config, _paths(config), progress=False).checkpoint


def _run_with_autoencoder(tmp_path: Path, autoencoder_checkpoint: Path, *overrides: str) -> tuple[ExperimentConfig, RunPaths]:
    config = _config(tmp_path, *overrides)
    paths = _paths(config)
    shutil.copy(autoencoder_checkpoint, paths.autoencoder_checkpoint)
    return config, paths


def _oracle_denoiser(model: DiffusionModel, eval_set: list[TrainingSample]) -> Denoiser:
    """Denoiser answering the ground-truth latents of the eval sample whose condition it is given."""
    table = []
    with torch.no_grad():
        for training_sample in eval_set:
            upscaled = upscale_bicubic(training_sample.lr_triplet, training_sample.frame_shape)
            cond = model.autoencoder.encode_stack(torch.as_tensor(upscaled, dtype=torch.float32)[None])
            target = model.autoencoder.encode_stack(torch.as_tensor(training_sample.gt_triplet, dtype=torch.float32)[None])
            table.append((cond, target))

    def oracle(_x_t: torch.Tensor, cond: torch.Tensor, _t: torch.Tensor) -> torch.Tensor:
        distances = [float((cond - key).abs().sum()) for key, _target in table]
        return table[int(np.argmin(distances))][1]

    return oracle


def test_train_autoencoder(tmp_path: Path) -> None:
    """Test the step limit, the loss log and the saved checkpoint."""
    config = _config(tmp_path)
    paths = _paths(config)
    result = train_autoencoder(config, paths, progress=False)
    assert result.iterations == 2
    records = JsonLinesLog(paths.autoencoder_loss_log).read()
    assert [record['iteration'] for record in records] == [1, 2]
    assert all('validation_psnr' in record for record in records)
    assert load_checkpoint(result.checkpoint, 'autoencoder')['extra']['iterations'] == 2


def test_train_autoencoder_stops_at_target(tmp_path: Path) -> None:
    """Test that reaching the target PSNR ends pre-training."""
    config = _config(tmp_path, 'autoencoder.target_psnr=-100.0')
    assert train_autoencoder(config, _paths(config), progress=False).iterations == 1


def _quantization_error(model: VQAutoencoder, frames: list[np.ndarray]) -> float:
    codebook = model.quantizer.codebook()
    errors = []
    for frame in frames:
        latent = encode(model, frame)
        errors.append(np.linalg.norm(latent.values - quantize(latent, codebook).values, axis=-1).mean())
    return float(np.mean(errors))


def test_autoencoder_training_tightens_codebook(tmp_path: Path) -> None:
    """Test that training lowers the quantization error of a fixed batch and leaves distinct codebook entries."""
    config = _config(
        tmp_path,
        'autoencoder.batch_size=4',
        'autoencoder.max_iterations=150',
        'autoencoder.eval_every=150',
        'autoencoder.learning_rate=2e-3',
        'autoencoder.commitment_beta=1.0',
    )
    source = ClipSource(config.data)
    _train_keys, eval_keys = source.split()
    frames = [source.clip(*key).frames[index] for key in eval_keys for index in (0, 6)]
    torch.manual_seed(config.seed)
    untrained = VQAutoencoder(config.autoencoder)
    trained = train_autoencoder(config, _paths(config), progress=False).model
    assert _quantization_error(trained, frames) <= _quantization_error(untrained, frames)
    entries = trained.quantizer.codebook().entries
    assert np.isfinite(entries).all()
    distances = np.linalg.norm(entries[:, None, :] - entries[None, :, :], axis=-1)
    assert distances[np.triu_indices(len(entries), k=1)].min() > 1e-6


def test_training_logs_every_step(tmp_path: Path, autoencoder_checkpoint: Path, mocker: MockerFixture) -> None:
    """Test one record per optimizer step with the effective batch and accumulated forward passes."""
    config, paths = _run_with_autoencoder(tmp_path, autoencoder_checkpoint)
    loss_spy = mocker.spy(training, 'training_loss')
    result = run_training(config, paths=paths, progress=False)
    assert result.iterations == 4
    assert result.effective_batch == 4
    assert loss_spy.call_count == 4 * 2
    records = JsonLinesLog(paths.train_loss_log).read()
    assert [record['iteration'] for record in records] == [1, 2, 3, 4]
    assert {record['effective_batch'] for record in records} == {4}
    assert set(records[0]) == {'iteration', 'loss', 'effective_batch', 'lr', 'elapsed_s'}
    payload = load_checkpoint(result.checkpoint, 'diffusion')
    assert payload['extra']['iteration'] == 4
    assert payload['header']['fingerprint'] == config.fingerprint()
    model, _payload = load_diffusion(result.checkpoint)
    assert model.schedule.T == 15


def test_resume_continues_the_run(tmp_path: Path, autoencoder_checkpoint: Path) -> None:
    """Test that stopping at iteration 2 and resuming reproduces the uninterrupted loss curve."""
    config, paths = _run_with_autoencoder(tmp_path / 'full', autoencoder_checkpoint)
    run_training(config, paths=paths, progress=False)
    full = JsonLinesLog(paths.train_loss_log).read()

    resumed_dir = tmp_path / 'resumed'
    first_half, resumed_paths = _run_with_autoencoder(resumed_dir, autoencoder_checkpoint, 'optimizer.total_iterations=2')
    run_training(first_half, paths=resumed_paths, progress=False)
    JsonLinesLog(resumed_paths.train_loss_log).append({'iteration': 3, 'loss': -1.0})
    second_half = _config(resumed_dir)
    run_training(second_half, resume=True, paths=resumed_paths, progress=False)
    resumed = JsonLinesLog(resumed_paths.train_loss_log).read()

    assert [record['iteration'] for record in resumed] == [1, 2, 3, 4]
    for expected, actual in zip(full, resumed, strict=True):
        assert actual['loss'] == pytest.approx(expected['loss'], rel=1e-4)


def test_resume_refuses_other_configuration(tmp_path: Path, autoencoder_checkpoint: Path) -> None:
    """Test that a checkpoint of another schedule is not resumed."""
    config, paths = _run_with_autoencoder(tmp_path, autoencoder_checkpoint, 'optimizer.total_iterations=2')
    run_training(config, paths=paths, progress=False)
    changed = _config(tmp_path, 'schedule.kappa=2.0')
    with pytest.raises(CheckpointMismatchError):
        run_training(changed, resume=True, paths=paths, progress=False)


def test_changed_autoencoder_weights_are_detected(tmp_path: Path, autoencoder_checkpoint: Path, mocker: MockerFixture) -> None:
    """Test that a differing autoencoder hash at checkpoint time raises."""
    config, paths = _run_with_autoencoder(tmp_path, autoencoder_checkpoint)
    mocker.patch.object(training, 'state_fingerprint', side_effect=['before', 'after'])
    with pytest.raises(FrozenWeightsError):
        run_training(config, paths=paths, progress=False)
    assert not paths.diffusion_checkpoint.exists()


def test_missing_autoencoder_without_pretraining(tmp_path: Path) -> None:
    """Test that disabled pre-training needs an autoencoder checkpoint."""
    config = _config(tmp_path, 'pretrain_autoencoder=false')
    with pytest.raises(ConfigError):
        run_training(config, paths=_paths(config), progress=False)


@pytest.mark.slow
def test_toy_run_beats_bicubic_baseline(tmp_path: Path) -> None:
    """Test the full toy profile: falling loss, model above the baseline by 0.5 dB, and an oracle denoiser not below it."""
    config = load_config('toy', [f'run_dir={tmp_path}'])
    paths = _paths(config)
    result = run_training(config, paths=paths, progress=False)
    assert result.iterations <= 2000
    autoencoder_psnr = load_checkpoint(paths.autoencoder_checkpoint, 'autoencoder')['extra']['validation_psnr']
    assert autoencoder_psnr >= 25.0
    eval_set = build_eval_set(ClipSource(config.data), config)
    assert len(eval_set) >= 50
    baseline, ldm = run_evaluation(config, result.checkpoint, eval_set, paths=paths, progress=False)
    assert ldm.psnr_db >= baseline.psnr_db + 0.5, {BASELINE: baseline, MODEL: ldm}
    assert ldm.latent_l1 < baseline.latent_l1

    losses = [record['loss'] for record in JsonLinesLog(paths.train_loss_log).read()]
    assert len(losses) >= 200
    assert np.mean(losses[-100:]) < np.mean(losses[:100])

    oracle_model, _payload = load_diffusion(result.checkpoint)
    oracle_model.denoiser = _oracle_denoiser(oracle_model, eval_set)
    oracle_baseline, oracle_ldm = run_evaluation(config, None, eval_set, model=oracle_model, progress=False)
    assert oracle_ldm.psnr_db >= oracle_baseline.psnr_db
