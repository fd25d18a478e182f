"""Checkpoint container shared by the autoencoder and the diffusion model.

A checkpoint is a torch-serialized dict::

    {
        'format_version': int,          # settings.ini checkpoint_format_version
        'kind': 'autoencoder' | 'diffusion',
        'header': {...},                # plain config values, e.g. f, latent_channels, n_codes
        'arrays': {name: state_dict},   # named parameter collections
        'extra': {...},                 # optimizer state, iteration, fingerprints
    }
"""
import hashlib
import logging
from pathlib import Path
from typing import Any

import torch
from torch import nn

from .errors import CineSrError, ErrorCategory
from .settings import settings

logger = logging.getLogger(__name__)


class CheckpointMismatchError(CineSrError):
    """Checkpoint cannot be used with the current code or configuration."""

    category = ErrorCategory.CHECKPOINT


def save_checkpoint(
    path: Path,
    kind: str,
    header: dict[str, Any],
    arrays: dict[str, dict[str, torch.Tensor]],
    extra: dict[str, Any] | None = None,
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        'format_version': settings.checkpoint_format_version,
        'kind': kind,
        'header': header,
        'arrays': {name: {key: value.detach().cpu() for key, value in state.items()} for name, state in arrays.items()},
        'extra': extra or {},
    }
    temporary = path.with_suffix(path.suffix + '.tmp')
    torch.save(payload, temporary)
    temporary.replace(path)
    logger.info('Saved %s checkpoint to %s', kind, path)
    return path


def load_checkpoint(path: Path, kind: str) -> dict[str, Any]:
    """Load a checkpoint and check its format version and kind.

    Returns:
        The checkpoint dictionary.

    Raises:
        CheckpointMismatchError: If the file is missing, of another kind, or of another format version.

    """
    path = Path(path)
    if not path.is_file():
        error = f'Checkpoint not found: {path}'
        raise CheckpointMismatchError(error)
    payload = torch.load(path, map_location='cpu', weights_only=False)
    if payload.get('format_version') != settings.checkpoint_format_version:
        error = (
            f'Checkpoint {path} has format version {payload.get("format_version")}, '
            f'expected {settings.checkpoint_format_version}'
        )
        raise CheckpointMismatchError(error)
    if payload.get('kind') != kind:
        error = f'Checkpoint {path} holds a "{payload.get("kind")}" model, expected "{kind}"'
        raise CheckpointMismatchError(error)
    return payload


def state_fingerprint(module: nn.Module) -> str:
    """Sha256 over every tensor of a module's state dict, in key order."""
    digest = hashlib.sha256()
    for key, value in sorted(module.state_dict().items()):
        digest.update(key.encode('utf-8'))
        digest.update(value.detach().cpu().contiguous().numpy().tobytes())
    return digest.hexdigest()
