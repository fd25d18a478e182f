"""Unit tests for the image quality metrics and the report writers."""
import configparser
import math
from pathlib import Path

import lpips
import numpy as np
import pytest
import torch
from scipy import ndimage

from cine_sr.metrics import (
    BackboneUnavailableError,
    FrameScores,
    MetricReport,
    MetricShapeError,
    NoScoresError,
    TooSmallError,
    aggregate,
    format_key_values,
    format_table,
    latent_l1,
    load_lpips,
    psnr,
    score_frame,
    ssim,
    write_report,
)
from cine_sr.vq_autoencoder import AutoencoderConfig, VQAutoencoder


def _texture(seed: int = 0, size: int = 64) -> np.ndarray:
    texture = ndimage.gaussian_filter(np.random.default_rng(seed).standard_normal((size, size)), 2.0)
    texture -= texture.min()
    return 0.1 + 0.8 * texture / texture.max()


def _noisy(image: np.ndarray, sigma: float, seed: int = 1) -> np.ndarray:
    return np.clip(image + np.random.default_rng(seed).normal(0.0, sigma, image.shape), 0.0, 1.0)


@pytest.fixture(scope='module')
def lpips_weights(tmp_path_factory: pytest.TempPathFactory) -> Path:
    """State dict of a randomly initialized AlexNet LPIPS with non-negative linear heads.

    Returns:
        Path of the saved weights.

    """
    torch.manual_seed(0)
    model = lpips.LPIPS(net='alex', pretrained=False, pnet_rand=True, verbose=False)
    with torch.no_grad():
        for name, parameter in model.named_parameters():
            if name.startswith('lin'):
                parameter.abs_()
    path = tmp_path_factory.mktemp('lpips') / 'alex.pth'
    torch.save(model.state_dict(), path)
    return path


def test_psnr_known_value() -> None:
    """Test zeros against 0.5 everywhere, 10 log10(4) dB."""
    assert psnr(np.zeros((8, 8)), np.full((8, 8), 0.5)) == pytest.approx(6.0206, abs=1e-4)


def test_psnr_identical_is_infinite() -> None:
    """Test that identical frames give math.inf."""
    image = _texture()
    assert psnr(image, image) == math.inf


def test_psnr_decreases_with_noise() -> None:
    """Test that stronger noise lowers PSNR."""
    image = _texture()
    values = [psnr(image, _noisy(image, sigma)) for sigma in (0.01, 0.05, 0.1, 0.2)]
    assert values == sorted(values, reverse=True)


def test_ssim_of_identical_frames() -> None:
    """Test that a frame against itself scores 1."""
    image = _texture()
    assert ssim(image, image) == pytest.approx(1.0, abs=1e-12)


def test_ssim_symmetry_and_flips() -> None:
    """Test symmetry and invariance under joint flips."""
    reference, test = _texture(0), _noisy(_texture(0), 0.05)
    value = ssim(reference, test)
    assert ssim(test, reference) == pytest.approx(value, abs=1e-12)
    assert ssim(reference[::-1], test[::-1]) == pytest.approx(value, abs=1e-9)
    assert ssim(reference[:, ::-1], test[:, ::-1]) == pytest.approx(value, abs=1e-9)
    assert psnr(reference[::-1], test[::-1]) == pytest.approx(psnr(reference, test))


def test_ssim_of_unrelated_noise() -> None:
    """Test that independent noise scores near zero."""
    noise = np.random.default_rng(5).uniform(size=(64, 64))
    assert abs(ssim(_texture(), noise)) < 0.1


def test_ssim_too_small_and_shape_mismatch() -> None:
    """Test images below 11 pixels and mismatched shapes."""
    with pytest.raises(TooSmallError):
        ssim(np.zeros((10, 32)), np.zeros((10, 32)))
    with pytest.raises(MetricShapeError):
        ssim(np.zeros((16, 16)), np.zeros((16, 17)))
    with pytest.raises(MetricShapeError):
        psnr(np.zeros((16, 16)), np.zeros((17, 16)))


def test_lpips_distance(lpips_weights: Path) -> None:
    """Test zero self distance, positive distance and symmetry."""
    scorer = load_lpips(lpips_weights, 'alex')
    reference, test = _texture(0), _noisy(_texture(0), 0.2)
    assert scorer(reference, reference) == pytest.approx(0.0, abs=1e-6)
    distance = scorer(reference, test)
    assert distance > 0.0
    assert scorer(test, reference) == pytest.approx(distance, rel=1e-4)


def test_lpips_unavailable(tmp_path: Path, lpips_weights: Path) -> None:
    """Test missing weights, weights of another backbone and unknown backbones."""
    with pytest.raises(BackboneUnavailableError):
        load_lpips(tmp_path / 'missing.pth')
    with pytest.raises(BackboneUnavailableError):
        load_lpips(None)
    with pytest.raises(BackboneUnavailableError):
        load_lpips(lpips_weights, 'squeeze')
    with pytest.raises(BackboneUnavailableError):
        load_lpips(lpips_weights, 'resnet')


def test_latent_l1() -> None:
    """Test zero distance for identical frames and a positive one otherwise."""
    torch.manual_seed(0)
    model = VQAutoencoder(AutoencoderConfig(base_channels=8, n_codes=16)).eval()
    image = _texture(size=32)
    assert latent_l1(model, image, image) == 0.0
    assert latent_l1(model, image, 1.0 - image) > 0.0
    assert latent_l1(model, np.stack([image] * 3), np.stack([image] * 3)) == 0.0


def test_score_frame_without_optional_metrics() -> None:
    """Test that LPIPS and latent L1 stay absent when not requested."""
    scores = score_frame(_texture(), _noisy(_texture(), 0.05))
    assert scores.lpips is None
    assert scores.latent_l1 is None
    assert 0.0 < scores.ssim < 1.0


def test_aggregate_means() -> None:
    """Test per-frame arithmetic means and absent metrics."""
    report = aggregate([FrameScores(20.0, 0.5, 0.2, 0.1), FrameScores(30.0, 0.7, 0.4, 0.3)])
    assert report == MetricReport(psnr_db=25.0, ssim=0.6, lpips=pytest.approx(0.3), latent_l1=0.2, n_images=2)
    partial = aggregate([FrameScores(20.0, 0.5, 0.2), FrameScores(30.0, 0.7)])
    assert partial.lpips is None
    assert partial.latent_l1 is None
    assert partial.aggregation == 'mean'
    with pytest.raises(NoScoresError):
        aggregate([])


def test_report_formats(tmp_path: Path) -> None:
    """Test the table, the key-value sections and the written files."""
    rows = {
        'realistic': {
            'Baseline': MetricReport(24.5, 0.71, None, 0.12, 150),
            'LDM': MetricReport(27.25, 0.8, 0.15, None, 150),
        },
    }
    table = format_table(rows).splitlines()
    assert len(table) == 3
    assert table[1].split() == ['realistic', 'Baseline', '24.50', '0.7100', '-', '0.1200', '150']
    parser = configparser.ConfigParser()
    parser.read_string(format_key_values(rows))
    assert parser.sections() == ['realistic.Baseline', 'realistic.LDM']
    assert parser['realistic.Baseline']['lpips'] == 'absent'
    assert float(parser['realistic.LDM']['psnr_db']) == 27.25
    assert parser['realistic.LDM']['aggregation'] == 'mean'
    table_path, key_value_path = write_report(tmp_path / 'reports', rows, stem='baseline')
    assert table_path.name == 'baseline.txt'
    assert key_value_path.read_text(encoding='utf-8') == format_key_values(rows)
