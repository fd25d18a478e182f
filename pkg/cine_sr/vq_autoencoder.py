"""Vector-quantized convolutional autoencoder, the frozen latent space of the diffusion model.

Frames [H, W] are encoded to a [H/4, W/4, C_latent] grid by two stride-2 stages and decoded by a
mirrored decoder. Quantization snaps each grid vector to its nearest codebook entry and passes
gradients straight through during training.
"""
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .checkpoints import CheckpointMismatchError, load_checkpoint, save_checkpoint
from .errors import CineSrError, ErrorCategory

logger = logging.getLogger(__name__)

DOWNSAMPLE_FACTOR = 4
CHECKPOINT_KIND = 'autoencoder'


class LatentShapeError(CineSrError):
    """Input size does not fit the encoder or decoder."""

    category = ErrorCategory.MODEL


class DimensionMismatchError(CineSrError):
    """Latent channel count differs from the codebook dimension."""

    category = ErrorCategory.MODEL


class AutoencoderConfig(BaseModel):
    """Pydantic model for the autoencoder architecture and its pre-training."""

    model_config = ConfigDict(extra='forbid')

    base_channels: int = Field(64, ge=4, description='Channels of the first encoder stage.')
    latent_channels: int = Field(3, ge=1, description='C_latent, channels of the latent grid.')
    n_codes: int = Field(512, ge=2, description='Codebook size.')
    n_res_blocks: int = Field(1, ge=0, description='Residual blocks per resolution.')
    commitment_beta: float = Field(0.25, ge=0, description='Weight of the commitment loss.')
    learning_rate: float = Field(2e-4, gt=0, description='Adam learning rate of the pre-training.')
    batch_size: int = Field(16, ge=1, description='Frames per pre-training step.')
    max_iterations: int = Field(3000, ge=1, description='Upper bound of pre-training steps.')
    target_psnr: float = Field(25.0, description='Stop pre-training once validation PSNR reaches this, dB.')
    eval_every: int = Field(200, ge=1, description='Validation cadence of the pre-training, steps.')


@dataclass(frozen=True)
class Codebook:
    """Code vectors [N_codes, C_latent]."""

    entries: np.ndarray

    @property
    def n_codes(self) -> int:
        return self.entries.shape[0]

    @property
    def latent_channels(self) -> int:
        return self.entries.shape[1]


@dataclass(frozen=True)
class LatentGrid:
    """Latent values [h, w, C_latent], quantized ones carry their code indices [h, w]."""

    values: np.ndarray
    quantized: bool = False
    indices: np.ndarray | None = None


def nearest_codes(vectors: torch.Tensor, entries: torch.Tensor) -> torch.Tensor:
    """Index of the nearest entry (Euclidean) for each row of `vectors`; ties go to the lowest index."""
    distances = ((vectors[:, None, :] - entries[None, :, :]) ** 2).sum(dim=-1)
    return torch.argmin(distances, dim=1)


def quantize(latent: LatentGrid, codebook: Codebook) -> LatentGrid:
    """Replace every grid vector by its nearest codebook entry.

    Raises:
        DimensionMismatchError: If the latent and codebook dimensions differ.

    """
    values = np.asarray(latent.values)
    if values.shape[-1] != codebook.latent_channels:
        error = f'Latent has {values.shape[-1]} channels, codebook entries have {codebook.latent_channels}'
        raise DimensionMismatchError(error)
    entries = torch.from_numpy(np.asarray(codebook.entries, dtype=np.float64))
    flat = torch.from_numpy(values.reshape(-1, values.shape[-1]).astype(np.float64))
    indices = nearest_codes(flat, entries).numpy()
    quantized_values = codebook.entries[indices].reshape(values.shape)
    return LatentGrid(values=quantized_values, quantized=True, indices=indices.reshape(values.shape[:-1]))


class ResidualBlock(nn.Module):
    """Two 3x3 convolutions with a skip connection."""

    def __init__(self, channels: int) -> None:
        """Build the block."""
        super().__init__()
        self.body = nn.Sequential(
            nn.GroupNorm(min(8, channels), channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
            nn.GroupNorm(min(8, channels), channels),
            nn.SiLU(),
            nn.Conv2d(channels, channels, 3, padding=1),
        )

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return x + self.body(x)


class Encoder(nn.Module):
    def __init__(self, config: AutoencoderConfig) -> None:
        """Two stride-2 stages, f = 4."""
        super().__init__()
        channels = config.base_channels
        layers: list[nn.Module] = [nn.Conv2d(1, channels, 3, padding=1)]
        for stage_out in (channels * 2, channels * 2):
            layers += [ResidualBlock(channels) for _ in range(config.n_res_blocks)]
            layers.append(nn.Conv2d(channels, stage_out, 4, stride=2, padding=1))
            channels = stage_out
        layers += [ResidualBlock(channels) for _ in range(config.n_res_blocks)]
        layers += [nn.GroupNorm(min(8, channels), channels), nn.SiLU(), nn.Conv2d(channels, config.latent_channels, 1)]
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, config: AutoencoderConfig) -> None:
        """Mirror of the encoder, nearest-neighbour upsampling followed by convolutions."""
        super().__init__()
        channels = config.base_channels * 2
        layers: list[nn.Module] = [nn.Conv2d(config.latent_channels, channels, 3, padding=1)]
        for stage_out in (config.base_channels * 2, config.base_channels):
            layers += [ResidualBlock(channels) for _ in range(config.n_res_blocks)]
            layers += [nn.Upsample(scale_factor=2, mode='nearest'), nn.Conv2d(channels, stage_out, 3, padding=1)]
            channels = stage_out
        layers += [ResidualBlock(channels) for _ in range(config.n_res_blocks)]
        layers += [nn.GroupNorm(min(8, channels), channels), nn.SiLU(), nn.Conv2d(channels, 1, 3, padding=1)]
        self.net = nn.Sequential(*layers)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        return self.net(z)


@dataclass
class QuantizerOutput:
    """Straight-through quantized latents with the two vector-quantization losses."""

    quantized: torch.Tensor
    indices: torch.Tensor
    codebook_loss: torch.Tensor
    commitment_loss: torch.Tensor


class VectorQuantizer(nn.Module):
    def __init__(self, n_codes: int, latent_channels: int) -> None:
        """Codebook initialized uniformly in [-1/N, 1/N]."""
        super().__init__()
        self.embedding = nn.Embedding(n_codes, latent_channels)
        self.embedding.weight.data.uniform_(-1.0 / n_codes, 1.0 / n_codes)

    def forward(self, z: torch.Tensor) -> QuantizerOutput:
        batch, channels, height, width = z.shape
        flat = z.permute(0, 2, 3, 1).reshape(-1, channels)
        indices = torch.argmin(torch.cdist(flat.detach(), self.embedding.weight.detach()), dim=1)
        quantized = self.embedding(indices).view(batch, height, width, channels).permute(0, 3, 1, 2)
        codebook_loss = F.mse_loss(quantized, z.detach())
        commitment_loss = F.mse_loss(z, quantized.detach())
        straight_through = z + (quantized - z).detach()
        return QuantizerOutput(straight_through, indices.view(batch, height, width), codebook_loss, commitment_loss)

    def codebook(self) -> Codebook:
        return Codebook(self.embedding.weight.detach().cpu().numpy().astype(np.float64))


class VQAutoencoder(nn.Module):
    """Encoder, vector quantizer and decoder."""

    def __init__(self, config: AutoencoderConfig | None = None) -> None:
        """Build all three parts from the configuration."""
        super().__init__()
        self.config = config or AutoencoderConfig()
        self.encoder = Encoder(self.config)
        self.quantizer = VectorQuantizer(self.config.n_codes, self.config.latent_channels)
        self.decoder = Decoder(self.config)

    @property
    def latent_channels(self) -> int:
        return self.config.latent_channels

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        """Continuous latents [B, C_latent, H/4, W/4] of frames [B, 1, H, W].

        Raises:
            LatentShapeError: If H or W is not divisible by 4.

        """
        height, width = x.shape[-2:]
        if height % DOWNSAMPLE_FACTOR or width % DOWNSAMPLE_FACTOR:
            error = f'Frame size {height}x{width} is not divisible by {DOWNSAMPLE_FACTOR}'
            raise LatentShapeError(error)
        return self.encoder(x)

    def decode_tensor(self, z: torch.Tensor, *, quantize_first: bool = True) -> torch.Tensor:
        """Frames [B, 1, 4h, 4w] in [0, 1] from latents [B, C_latent, h, w].

        Raises:
            LatentShapeError: If the channel count does not match.

        """
        if z.ndim != 4 or z.shape[1] != self.latent_channels:  # noqa: PLR2004 [B, C, h, w]
            error = f'Expected latents [B, {self.latent_channels}, h, w], got {tuple(z.shape)}'
            raise LatentShapeError(error)
        if quantize_first:
            z = self.quantizer(z).quantized
        return self.decoder(z).clamp(0.0, 1.0)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, QuantizerOutput]:
        """Unclamped reconstruction and quantizer output, for training."""
        quantizer_output = self.quantizer(self.encode_tensor(x))
        return self.decoder(quantizer_output.quantized), quantizer_output

    def encode_stack(self, frames: torch.Tensor) -> torch.Tensor:
        """Latents [B, N*C_latent, h, w] of frame stacks [B, N, H, W], frame-major channel blocks."""
        batch, count, height, width = frames.shape
        latents = self.encode_tensor(frames.reshape(batch * count, 1, height, width))
        return latents.reshape(batch, count * self.latent_channels, *latents.shape[-2:])

    def decode_stack(self, latents: torch.Tensor) -> torch.Tensor:
        """Frame stacks [B, N, 4h, 4w] from latents [B, N*C_latent, h, w]."""
        batch, channels, height, width = latents.shape
        count = channels // self.latent_channels
        frames = self.decode_tensor(latents.reshape(batch * count, self.latent_channels, height, width))
        return frames.reshape(batch, count, *frames.shape[-2:])

    def freeze(self) -> 'VQAutoencoder':
        self.eval()
        for parameter in self.parameters():
            parameter.requires_grad_(requires_grad=False)
        return self


def _device_of(model: nn.Module) -> torch.device:
    return next(model.parameters()).device


def encode(model: VQAutoencoder, frame: np.ndarray) -> LatentGrid:
    """Continuous latent grid [H/4, W/4, C_latent] of one frame, evaluation mode."""
    model.eval()
    with torch.no_grad():
        x = torch.as_tensor(np.asarray(frame), dtype=torch.float32, device=_device_of(model))[None, None]
        z = model.encode_tensor(x)[0].permute(1, 2, 0)
    return LatentGrid(values=z.cpu().numpy().astype(np.float64))


def decode(model: VQAutoencoder, latent: LatentGrid) -> np.ndarray:
    """Frame [4h, 4w] in [0, 1]; continuous latents are quantized first.

    Raises:
        LatentShapeError: If the grid is not [h, w, C_latent].

    """
    values = np.asarray(latent.values)
    if values.ndim != 3 or values.shape[-1] != model.latent_channels:  # noqa: PLR2004 [h, w, C]
        error = f'Expected a latent grid [h, w, {model.latent_channels}], got {values.shape}'
        raise LatentShapeError(error)
    model.eval()
    with torch.no_grad():
        z = torch.as_tensor(values, dtype=torch.float32, device=_device_of(model)).permute(2, 0, 1)[None]
        frame = model.decode_tensor(z, quantize_first=not latent.quantized)
    return frame[0, 0].cpu().numpy().astype(np.float64)


def save_autoencoder(path: Path, model: VQAutoencoder, extra: dict | None = None) -> Path:
    header = {
        'f': DOWNSAMPLE_FACTOR,
        'latent_channels': model.config.latent_channels,
        'n_codes': model.config.n_codes,
        'config': model.config.model_dump(),
    }
    return save_checkpoint(path, CHECKPOINT_KIND, header, {'autoencoder': model.state_dict()}, extra)


def load_autoencoder(path: Path, expected: AutoencoderConfig | None = None) -> VQAutoencoder:
    """Rebuild an autoencoder from its checkpoint.

    Raises:
        CheckpointMismatchError: If `expected` is given and the stored architecture differs.

    """
    payload = load_checkpoint(path, CHECKPOINT_KIND)
    config = AutoencoderConfig.model_validate(payload['header']['config'])
    architecture = ('base_channels', 'latent_channels', 'n_codes', 'n_res_blocks')
    if expected is not None and any(getattr(config, key) != getattr(expected, key) for key in architecture):
        error = f'Autoencoder checkpoint {path} architecture differs from the configuration'
        raise CheckpointMismatchError(error)
    model = VQAutoencoder(config)
    model.load_state_dict(payload['arrays']['autoencoder'])
    return model.eval()
