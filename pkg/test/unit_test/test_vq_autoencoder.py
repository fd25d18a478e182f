"""Unit tests for the vector-quantized autoencoder."""
from pathlib import Path

import numpy as np
import pytest
import torch

from cine_sr.checkpoints import CheckpointMismatchError, load_checkpoint
from cine_sr.vq_autoencoder import (
    AutoencoderConfig,
    Codebook,
    DimensionMismatchError,
    LatentGrid,
    LatentShapeError,
    VQAutoencoder,
    decode,
    encode,
    load_autoencoder,
    quantize,
    save_autoencoder,
)

TINY = AutoencoderConfig(base_channels=8, n_codes=16, n_res_blocks=1)


@pytest.fixture
def model() -> VQAutoencoder:
    """Randomly initialized tiny autoencoder.

    Returns:
        Model in evaluation mode.

    """
    torch.manual_seed(0)
    return VQAutoencoder(TINY).eval()


@pytest.mark.parametrize(('size', 'latent_size'), [(64, 16), (256, 64)])
def test_encode_decode_shapes(model: VQAutoencoder, size: int, latent_size: int) -> None:
    """Test that frames are encoded at a quarter of their size and decoded back."""
    frame = np.random.default_rng(0).uniform(size=(size, size))
    latent = encode(model, frame)
    assert latent.values.shape == (latent_size, latent_size, 3)
    assert not latent.quantized
    reconstruction = decode(model, latent)
    assert reconstruction.shape == (size, size)
    assert reconstruction.min() >= 0.0
    assert reconstruction.max() <= 1.0


def test_encode_rejects_indivisible_size(model: VQAutoencoder) -> None:
    """Test that a 250 pixel frame does not fit the encoder."""
    with pytest.raises(LatentShapeError):
        encode(model, np.zeros((250, 250)))


def test_decode_rejects_wrong_channels(model: VQAutoencoder) -> None:
    """Test that a grid with the wrong channel count raises."""
    with pytest.raises(LatentShapeError):
        decode(model, LatentGrid(values=np.zeros((4, 4, 5))))


def test_stack_layout(model: VQAutoencoder) -> None:
    """Test the frame-major channel blocks of stacked latents."""
    frames = torch.rand(2, 3, 32, 32)
    with torch.no_grad():
        latents = model.encode_stack(frames)
        single = model.encode_tensor(frames[:, 1:2])
        decoded = model.decode_stack(latents)
    assert latents.shape == (2, 9, 8, 8)
    torch.testing.assert_close(latents[:, 3:6], single)
    assert decoded.shape == (2, 3, 32, 32)


def test_quantize_codebook_entry_is_fixed_point() -> None:
    """Test that a grid made of entry 7 quantizes to itself."""
    codebook = Codebook(np.random.default_rng(1).normal(size=(16, 3)))
    grid = LatentGrid(values=np.broadcast_to(codebook.entries[7], (4, 4, 3)).copy())
    quantized = quantize(grid, codebook)
    assert quantized.quantized
    assert (quantized.indices == 7).all()
    np.testing.assert_array_equal(quantized.values, grid.values)


def test_quantize_is_idempotent() -> None:
    """Test that quantizing twice equals quantizing once."""
    rng = np.random.default_rng(2)
    codebook = Codebook(rng.normal(size=(32, 3)))
    once = quantize(LatentGrid(values=rng.normal(size=(8, 8, 3))), codebook)
    twice = quantize(once, codebook)
    np.testing.assert_array_equal(once.values, twice.values)
    np.testing.assert_array_equal(once.indices, twice.indices)


def test_quantize_nearest_entry_and_ties() -> None:
    """Test nearest-entry selection and the lowest index on ties."""
    codebook = Codebook(np.array([[0.0, 0.0], [1.0, 1.0]]))
    nearest = quantize(LatentGrid(values=np.array([[[0.6, 0.6]]])), codebook)
    assert nearest.indices[0, 0] == 1
    np.testing.assert_array_equal(nearest.values[0, 0], [1.0, 1.0])
    tie = quantize(LatentGrid(values=np.array([[[0.5, 0.5]]])), codebook)
    assert tie.indices[0, 0] == 0


def test_quantize_dimension_mismatch() -> None:
    """Test that latent and codebook dimensions must agree."""
    with pytest.raises(DimensionMismatchError):
        quantize(LatentGrid(values=np.zeros((2, 2, 4))), Codebook(np.zeros((8, 3))))


def test_straight_through_gradients_reach_encoder() -> None:
    """Test that the reconstruction loss trains the encoder through quantization."""
    torch.manual_seed(0)
    model = VQAutoencoder(TINY).train()
    frames = torch.rand(2, 1, 16, 16)
    reconstruction, quantizer = model(frames)
    loss = (reconstruction - frames).abs().mean() + quantizer.codebook_loss + TINY.commitment_beta * quantizer.commitment_loss
    loss.backward()
    assert model.encoder.net[0].weight.grad is not None
    assert model.encoder.net[0].weight.grad.abs().sum() > 0
    assert model.quantizer.embedding.weight.grad is not None


def test_freeze(model: VQAutoencoder) -> None:
    """Test that freezing stops gradient tracking."""
    model.freeze()
    assert not any(parameter.requires_grad for parameter in model.parameters())
    assert not model.training


def test_save_and_load(tmp_path: Path, model: VQAutoencoder) -> None:
    """Test that a reloaded autoencoder encodes identically."""
    path = save_autoencoder(tmp_path / 'ae.pt', model, {'validation_psnr': 30.0})
    restored = load_autoencoder(path, expected=TINY)
    frame = np.random.default_rng(3).uniform(size=(32, 32))
    np.testing.assert_array_equal(encode(model, frame).values, encode(restored, frame).values)
    assert load_checkpoint(path, 'autoencoder')['extra']['validation_psnr'] == 30.0


def test_load_refuses_other_architecture(tmp_path: Path, model: VQAutoencoder) -> None:
    """Test that another architecture or checkpoint kind is refused."""
    path = save_autoencoder(tmp_path / 'ae.pt', model)
    with pytest.raises(CheckpointMismatchError):
        load_autoencoder(path, expected=TINY.model_copy(update={'n_codes': 32}))
    with pytest.raises(CheckpointMismatchError):
        load_checkpoint(path, 'diffusion')
    with pytest.raises(CheckpointMismatchError):
        load_autoencoder(tmp_path / 'missing.pt')
