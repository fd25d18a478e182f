"""Full-reference image quality metrics and the report tables built from them.

All metrics take frames [H, W] normalized to [0, 1] with peak value 1.0, computed per frame over
the whole image.
"""
import configparser
import io
import logging
import math
import statistics
from dataclasses import asdict, dataclass
from pathlib import Path

import lpips as lpips_package
import numpy as np
import torch
from skimage.metrics import structural_similarity

from .errors import CineSrError, ErrorCategory
from .vq_autoencoder import VQAutoencoder

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_MIN_SIZE = 11
LPIPS_BACKBONES = ('alex', 'vgg', 'squeeze')


class MetricShapeError(CineSrError):
    """Reference and test images differ in shape."""

    category = ErrorCategory.METRIC


class TooSmallError(CineSrError):
    """Image is smaller than the SSIM window."""

    category = ErrorCategory.METRIC


class BackboneUnavailableError(CineSrError):
    """LPIPS weights file is missing or does not fit the backbone."""

    category = ErrorCategory.METRIC


class NoScoresError(CineSrError):
    """Aggregation over zero frames."""

    category = ErrorCategory.METRIC


def _pair(reference: np.ndarray, test: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    reference = np.asarray(reference, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    if reference.shape != test.shape:
        error = f'Reference {reference.shape} and test {test.shape} differ in shape'
        raise MetricShapeError(error)
    return reference, test


def psnr(reference: np.ndarray, test: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB with peak 1.0; identical inputs give math.inf.

    Raises:
        MetricShapeError: If the shapes differ.

    """
    reference, test = _pair(reference, test)
    mse = float(np.mean((reference - test) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def ssim(reference: np.ndarray, test: np.ndarray) -> float:
    """Single-scale SSIM, 11x11 Gaussian window with sigma 1.5, K1 = 0.01, K2 = 0.03, data range 1.0.

    Raises:
        MetricShapeError: If the shapes differ.
        TooSmallError: If a side is shorter than 11 pixels.

    """
    reference, test = _pair(reference, test)
    if reference.ndim != 2 or min(reference.shape) < SSIM_MIN_SIZE:  # noqa: PLR2004 single frame
        error = f'SSIM needs a 2-D image of at least {SSIM_MIN_SIZE}x{SSIM_MIN_SIZE}, got {reference.shape}'
        raise TooSmallError(error)
    return float(
        structural_similarity(
            reference,
            test,
            gaussian_weights=True,
            sigma=SSIM_SIGMA,
            use_sample_covariance=False,
            data_range=1.0,
        ),
    )


class LpipsScorer:
    """Learned perceptual distance with a backbone loaded from a local weights file."""

    def __init__(self, model: lpips_package.LPIPS, device: str = 'cpu') -> None:
        """Wrap a loaded LPIPS network."""
        self.device = torch.device(device)
        self.model = model.to(self.device).eval()

    def _to_input(self, frame: np.ndarray) -> torch.Tensor:
        tensor = torch.as_tensor(np.asarray(frame, dtype=np.float32), device=self.device)
        return (tensor * 2.0 - 1.0)[None, None].expand(1, 3, *tensor.shape)

    def __call__(self, reference: np.ndarray, test: np.ndarray) -> float:
        """Distance between two grayscale frames, replicated to three channels and scaled to [-1, 1].

        Raises:
            MetricShapeError: If the shapes differ.

        """
        reference, test = _pair(reference, test)
        with torch.no_grad():
            distance = self.model(self._to_input(reference), self._to_input(test))
        return float(distance.reshape(-1)[0])


def load_lpips(weights_path: Path | None, backbone: str = 'alex', device: str = 'cpu') -> LpipsScorer:
    """Build the LPIPS network without downloads and load backbone and linear heads from one state dict.

    Raises:
        BackboneUnavailableError: If the weights file is missing or its keys do not fit the backbone.

    """
    if backbone not in LPIPS_BACKBONES:
        error = f'Unknown LPIPS backbone "{backbone}", expected one of {LPIPS_BACKBONES}'
        raise BackboneUnavailableError(error)
    if weights_path is None or not Path(weights_path).is_file():
        error = f'LPIPS weights file not available: {weights_path}'
        raise BackboneUnavailableError(error)
    model = lpips_package.LPIPS(net=backbone, pretrained=False, pnet_rand=True, verbose=False)
    state = torch.load(weights_path, map_location='cpu', weights_only=True)
    try:
        model.load_state_dict(state)
    except RuntimeError as e:
        error = f'LPIPS weights {weights_path} do not fit the "{backbone}" backbone: {e}'
        raise BackboneUnavailableError(error) from e
    logger.info('Loaded LPIPS %s weights from %s', backbone, weights_path)
    return LpipsScorer(model, device)


def latent_l1(model: VQAutoencoder, reference: np.ndarray, test: np.ndarray) -> float:
    """Mean absolute difference of the continuous autoencoder latents of two frames or frame stacks.

    Raises:
        MetricShapeError: If the shapes differ.

    """
    reference, test = _pair(reference, test)
    frames = np.stack([reference.reshape(-1, *reference.shape[-2:]), test.reshape(-1, *test.shape[-2:])])
    device = next(model.parameters()).device
    with torch.no_grad():
        latents = model.encode_stack(torch.as_tensor(frames, dtype=torch.float32, device=device))
    return float(torch.mean(torch.abs(latents[0] - latents[1])))


@dataclass(frozen=True)
class FrameScores:
    """Metrics of one output frame; lpips and latent_l1 are None when not computed."""

    psnr_db: float
    ssim: float
    lpips: float | None = None
    latent_l1: float | None = None


@dataclass(frozen=True)
class MetricReport:
    """Arithmetic means over all evaluated frames."""

    psnr_db: float
    ssim: float
    lpips: float | None
    latent_l1: float | None
    n_images: int
    aggregation: str = 'mean'


def score_frame(
    reference: np.ndarray,
    test: np.ndarray,
    lpips_scorer: LpipsScorer | None = None,
    autoencoder: VQAutoencoder | None = None,
) -> FrameScores:
    """All available metrics of one frame against its reference."""
    return FrameScores(
        psnr_db=psnr(reference, test),
        ssim=ssim(reference, test),
        lpips=lpips_scorer(reference, test) if lpips_scorer is not None else None,
        latent_l1=latent_l1(autoencoder, reference, test) if autoencoder is not None else None,
    )


def _mean_or_none(values: list[float | None]) -> float | None:
    if any(value is None for value in values):
        return None
    return statistics.fmean(values)


def aggregate(scores: list[FrameScores]) -> MetricReport:
    """Per-frame arithmetic mean; a metric missing on any frame is reported absent.

    Raises:
        NoScoresError: If `scores` is empty.

    """
    if not scores:
        error = 'Cannot aggregate metrics over zero frames'
        raise NoScoresError(error)
    return MetricReport(
        psnr_db=statistics.fmean(score.psnr_db for score in scores),
        ssim=statistics.fmean(score.ssim for score in scores),
        lpips=_mean_or_none([score.lpips for score in scores]),
        latent_l1=_mean_or_none([score.latent_l1 for score in scores]),
        n_images=len(scores),
    )


def _cell(value: float | None, digits: int) -> str:
    return '-' if value is None else f'{value:.{digits}f}'


# rows[mode][model] -> report, e.g. rows['realistic']['Baseline']
ReportRows = dict[str, dict[str, MetricReport]]


def format_table(rows: ReportRows) -> str:
    """Line-oriented table, one line per (degradation mode, model)."""
    lines = [f'{"mode":<14}{"model":<10}{"PSNR":>9}{"SSIM":>9}{"LPIPS":>9}{"latentL1":>10}{"n":>7}']
    for mode, models in rows.items():
        for name, report in models.items():
            lines.append(
                f'{mode:<14}{name:<10}{_cell(report.psnr_db, 2):>9}{_cell(report.ssim, 4):>9}'
                f'{_cell(report.lpips, 4):>9}{_cell(report.latent_l1, 4):>10}{report.n_images:>7}',
            )
    return '\n'.join(lines) + '\n'


def format_key_values(rows: ReportRows) -> str:
    """Key-value text with one `[mode.model]` section per row; absent metrics read `absent`."""
    parser = configparser.ConfigParser()
    for mode, models in rows.items():
        for name, report in models.items():
            parser[f'{mode}.{name}'] = {
                key: 'absent' if value is None else str(value) for key, value in asdict(report).items()
            }
    buffer = io.StringIO()
    parser.write(buffer)
    return buffer.getvalue()


def write_report(reports_dir: Path, rows: ReportRows, stem: str = 'table') -> tuple[Path, Path]:
    """Write `<stem>.txt` and `<stem>.ini` under `reports_dir`."""
    reports_dir = Path(reports_dir)
    reports_dir.mkdir(parents=True, exist_ok=True)
    table_path = reports_dir / f'{stem}.txt'
    key_value_path = reports_dir / f'{stem}.ini'
    table_path.write_text(format_table(rows), encoding='utf-8')
    key_value_path.write_text(format_key_values(rows), encoding='utf-8')
    logger.info('Wrote report %s', table_path)
    return table_path, key_value_path
