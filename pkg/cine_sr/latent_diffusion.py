"""Residual-shifting diffusion between high- and low-resolution latents.

The forward process moves the clean latent x0 toward the degraded latent y along a shifting
sequence eta_1 < ... < eta_T while injecting noise of scale kappa * sqrt(eta_t)::

    x_t = x0 + eta_t * (y - x0) + kappa * sqrt(eta_t) * noise

The denoiser predicts x0 directly; each reverse step mixes that prediction with x_t through the
Gaussian posterior of the forward process.
"""
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F  # noqa: N812
from pydantic import BaseModel, ConfigDict, Field
from torch import nn

from .errors import CineSrError, ErrorCategory

logger = logging.getLogger(__name__)

TRAJECTORY_TIMES = (0.0, 0.25, 0.5, 0.75, 1.0)

Denoiser = Callable[[torch.Tensor, torch.Tensor, torch.Tensor], torch.Tensor]


class InvalidScheduleParamsError(CineSrError):
    """Schedule parameters violate T >= 2, kappa > 0 or 0 < eta_min < eta_max <= 1."""

    category = ErrorCategory.CONFIG


class StepOutOfRangeError(CineSrError):
    """Diffusion step outside [1, T]."""


class DiffusionShapeError(CineSrError):
    """Latent stacks of one call do not share a shape."""


class ScheduleConfig(BaseModel):
    """Pydantic model for the shifting sequence."""

    model_config = ConfigDict(extra='forbid')

    T: int = Field(15, ge=2, description='Diffusion steps for training and sampling.')
    kappa: float = Field(2.0, gt=0, description='Noise scale.')
    p: float = Field(0.3, gt=0, description='Exponent warping the geometric schedule.')
    eta_min: float = Field(0.04, gt=0, description='eta_1.')
    eta_max: float = Field(0.999, le=1, description='eta_T.')


class DenoiserConfig(BaseModel):
    """Pydantic model for the x0-predicting U-Net."""

    model_config = ConfigDict(extra='forbid')

    base_channels: int = Field(64, ge=4, description='Channels at the latent resolution.')
    n_res_blocks: int = Field(2, ge=1, description='Residual blocks per resolution.')
    time_embed_dim: int = Field(128, ge=8, description='Width of the sinusoidal time embedding, even.')
    frames: int = Field(3, ge=1, description='Frames predicted jointly per sample.')


@dataclass(frozen=True)
class DiffusionSchedule:
    """Shifting sequence, eta[t - 1] holds eta_t."""

    T: int
    eta: np.ndarray
    kappa: float
    p: float
    eta_min: float
    eta_max: float

    def eta_at(self, t: int) -> float:
        return float(self.eta[t - 1])

    def eta_prev(self, t: int) -> float:
        return float(self.eta[t - 2]) if t > 1 else 0.0


def build_schedule(
    T: int = 15,
    kappa: float = 2.0,
    p: float = 0.3,
    eta_min: float = 0.04,
    eta_max: float = 0.999,
) -> DiffusionSchedule:
    """Geometric interpolation of sqrt(eta) from sqrt(eta_min) to sqrt(eta_max), warped by ((t-1)/(T-1))**p.

    Raises:
        InvalidScheduleParamsError: If the parameters are out of range.

    """
    if T < 2 or not kappa > 0 or not 0 < eta_min < eta_max <= 1 or not p > 0:  # noqa: PLR2004 at least two steps
        error = f'Invalid schedule parameters: T={T}, kappa={kappa}, p={p}, eta_min={eta_min}, eta_max={eta_max}'
        raise InvalidScheduleParamsError(error)
    warp = (np.arange(T, dtype=np.float64) / (T - 1)) ** p
    sqrt_eta = math.sqrt(eta_min) * (math.sqrt(eta_max) / math.sqrt(eta_min)) ** warp
    eta = sqrt_eta**2
    eta[0], eta[-1] = eta_min, eta_max
    return DiffusionSchedule(T=T, eta=eta, kappa=kappa, p=p, eta_min=eta_min, eta_max=eta_max)


def schedule_from_config(config: ScheduleConfig) -> DiffusionSchedule:
    return build_schedule(config.T, config.kappa, config.p, config.eta_min, config.eta_max)


def _check_step(t: int | torch.Tensor, schedule: DiffusionSchedule) -> None:
    steps = torch.as_tensor(t)
    if steps.numel() == 0 or steps.min() < 1 or steps.max() > schedule.T:
        error = f'Step {t} outside [1, {schedule.T}]'
        raise StepOutOfRangeError(error)


def _check_shapes(*tensors: torch.Tensor) -> None:
    shapes = {tuple(tensor.shape) for tensor in tensors}
    if len(shapes) != 1:
        error = f'Latent stacks differ in shape: {sorted(shapes)}'
        raise DiffusionShapeError(error)


def _per_sample(values: np.ndarray, t: int | torch.Tensor, like: torch.Tensor) -> torch.Tensor:
    """Gather values[t - 1] and broadcast over the non-batch dimensions of `like`."""
    table = torch.as_tensor(values, dtype=like.dtype, device=like.device)
    steps = torch.as_tensor(t, device=like.device).long()
    gathered = table[steps - 1]
    if gathered.ndim == 0:
        return gathered
    return gathered.reshape(-1, *([1] * (like.ndim - 1)))


def forward_sample(
    x0: torch.Tensor,
    y: torch.Tensor,
    t: int | torch.Tensor,
    schedule: DiffusionSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """x_t = x0 + eta_t (y - x0) + kappa sqrt(eta_t) noise; t is an int or one step per batch item.

    Raises:
        DiffusionShapeError: If the stacks differ in shape.
        StepOutOfRangeError: If a step is outside [1, T].

    """
    _check_shapes(x0, y, noise)
    _check_step(t, schedule)
    eta = _per_sample(schedule.eta, t, x0)
    return x0 + eta * (y - x0) + schedule.kappa * torch.sqrt(eta) * noise


def posterior_step(
    x_t: torch.Tensor,
    x0_hat: torch.Tensor,
    y: torch.Tensor,
    t: int,
    schedule: DiffusionSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Draw x_{t-1} from the forward-process posterior given the predicted x0; t = 1 returns x0_hat.

    Raises:
        DiffusionShapeError: If the stacks differ in shape.
        StepOutOfRangeError: If t is outside [1, T].

    """
    _check_shapes(x_t, x0_hat, y, noise)
    _check_step(t, schedule)
    if t == 1:
        return x0_hat
    eta_t, eta_prev = schedule.eta_at(t), schedule.eta_prev(t)
    alpha = eta_t - eta_prev
    mean = (eta_prev / eta_t) * x_t + (alpha / eta_t) * x0_hat
    variance = schedule.kappa**2 * (eta_prev / eta_t) * alpha
    return mean + math.sqrt(variance) * noise


def training_loss(
    f_theta: Denoiser,
    x0: torch.Tensor,
    y: torch.Tensor,
    cond: torch.Tensor,
    t: int | torch.Tensor,
    schedule: DiffusionSchedule,
    noise: torch.Tensor,
) -> torch.Tensor:
    """Mean squared error between the denoiser's x0 prediction at x_t and x0.

    Raises:
        DiffusionShapeError: If the stacks differ in shape.

    """
    _check_shapes(x0, y, cond, noise)
    x_t = forward_sample(x0, y, t, schedule, noise)
    steps = torch.as_tensor(t, device=x0.device).long().expand(x0.shape[0])
    prediction = f_theta(x_t, cond, steps)
    _check_shapes(prediction, x0)
    return F.mse_loss(prediction, x0)


@dataclass
class SampleResult:
    """Final x0 estimate and the states recorded at normalized reverse times."""

    x0: torch.Tensor
    trajectory: list[tuple[float, torch.Tensor]] = field(default_factory=list)


def trajectory_steps(T: int, times: Sequence[float] = TRAJECTORY_TIMES) -> list[int]:
    """Number of completed reverse steps at each normalized time (0 = x_T, 1 = final output)."""
    return [round(time * T) for time in times]


def sample(
    f_theta: Denoiser,
    y: torch.Tensor,
    cond: torch.Tensor,
    schedule: DiffusionSchedule,
    rng_seed: int,
    trajectory_times: Sequence[float] | None = None,
) -> SampleResult:
    """Run the T-step reverse process from x_T = y + kappa sqrt(eta_T) noise.

    The denoiser is called exactly T times. When `trajectory_times` is given, the state after
    round(time * T) completed steps is recorded for each time.
    """
    _check_shapes(y, cond)
    generator = torch.Generator(device=y.device).manual_seed(rng_seed)

    def draw() -> torch.Tensor:
        return torch.randn(y.shape, generator=generator, device=y.device, dtype=y.dtype)

    snapshot_steps = trajectory_steps(schedule.T, trajectory_times) if trajectory_times is not None else []
    states = {}
    x = y + schedule.kappa * math.sqrt(schedule.eta_at(schedule.T)) * draw()
    if 0 in snapshot_steps:
        states[0] = x
    with torch.no_grad():
        for completed, t in enumerate(range(schedule.T, 0, -1), start=1):
            steps = torch.full((y.shape[0],), t, dtype=torch.long, device=y.device)
            x0_hat = f_theta(x, cond, steps)
            x = posterior_step(x, x0_hat, y, t, schedule, draw())
            if completed in snapshot_steps:
                states[completed] = x
    trajectory = [(time, states[step]) for time, step in zip(trajectory_times or [], snapshot_steps, strict=True)]
    return SampleResult(x0=x, trajectory=trajectory)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    """Sinusoidal embedding [B, dim] of integer steps [B]."""
    half = dim // 2
    frequencies = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float32, device=t.device) / half)
    angles = t.float()[:, None] * frequencies[None]
    return torch.cat([torch.cos(angles), torch.sin(angles)], dim=1)


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


class TimeResBlock(nn.Module):
    """Residual block whose features are shifted by a projection of the time embedding."""

    def __init__(self, in_channels: int, out_channels: int, embed_dim: int) -> None:
        """Build the block."""
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_channels), in_channels)
        self.conv1 = nn.Conv2d(in_channels, out_channels, 3, padding=1)
        self.embed = nn.Linear(embed_dim, out_channels)
        self.norm2 = nn.GroupNorm(_groups(out_channels), out_channels)
        self.conv2 = nn.Conv2d(out_channels, out_channels, 3, padding=1)
        self.skip = nn.Conv2d(in_channels, out_channels, 1) if in_channels != out_channels else nn.Identity()

    def forward(self, x: torch.Tensor, embedding: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.embed(embedding)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class LatentUNet(nn.Module):
    """Two-resolution U-Net predicting x0 from (x_t concatenated with cond) and the step index.

    The output is added to `cond` and the last convolution starts at zero, so an untrained
    network returns the conditioning latents.
    """

    def __init__(self, latent_channels: int, config: DenoiserConfig | None = None) -> None:
        """Build the network for `config.frames` frames of `latent_channels` each."""
        super().__init__()
        self.config = config or DenoiserConfig()
        stack_channels = self.config.frames * latent_channels
        channels = self.config.base_channels
        embed_dim = self.config.time_embed_dim
        self.stack_channels = stack_channels
        self.time_mlp = nn.Sequential(nn.Linear(embed_dim, embed_dim * 2), nn.SiLU(), nn.Linear(embed_dim * 2, embed_dim))
        self.conv_in = nn.Conv2d(2 * stack_channels, channels, 3, padding=1)
        blocks = self.config.n_res_blocks
        self.down_high = nn.ModuleList([TimeResBlock(channels, channels, embed_dim) for _ in range(blocks)])
        self.downsample = nn.Conv2d(channels, channels * 2, 3, stride=2, padding=1)
        self.down_low = nn.ModuleList([TimeResBlock(channels * 2, channels * 2, embed_dim) for _ in range(blocks)])
        self.middle = TimeResBlock(channels * 2, channels * 2, embed_dim)
        self.up_low = nn.ModuleList([TimeResBlock(channels * 2, channels * 2, embed_dim) for _ in range(blocks)])
        self.upsample = nn.Sequential(
            nn.Upsample(scale_factor=2, mode='nearest'),
            nn.Conv2d(channels * 2, channels, 3, padding=1),
        )
        self.up_high = nn.ModuleList(
            [TimeResBlock(channels * 2, channels, embed_dim)]
            + [TimeResBlock(channels, channels, embed_dim) for _ in range(blocks - 1)],
        )
        self.norm_out = nn.GroupNorm(_groups(channels), channels)
        self.conv_out = nn.Conv2d(channels, stack_channels, 3, padding=1)
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x_t: torch.Tensor, cond: torch.Tensor, t: torch.Tensor) -> torch.Tensor:
        embedding = self.time_mlp(timestep_embedding(t, self.config.time_embed_dim).to(x_t.dtype))
        h = self.conv_in(torch.cat([x_t, cond], dim=1))
        for block in self.down_high:
            h = block(h, embedding)
        skip = h
        h = self.downsample(h)
        for block in self.down_low:
            h = block(h, embedding)
        h = self.middle(h, embedding)
        for block in self.up_low:
            h = block(h, embedding)
        h = torch.cat([self.upsample(h), skip], dim=1)
        for block in self.up_high:
            h = block(h, embedding)
        return cond + self.conv_out(F.silu(self.norm_out(h)))
