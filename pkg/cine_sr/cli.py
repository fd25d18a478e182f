"""Command line interface: cine-sr <command>."""
import argparse
import logging
import sys
from datetime import datetime
from pathlib import Path
from zoneinfo import ZoneInfo

from .config import ExperimentConfig, load_config
from .data_ingest import DatasetFormat, ScanLog, scan_dataset, synth_phantom_clip, write_phantom_dataset
from .errors import CineSrError, ErrorCategory
from .harness import (
    BASELINE,
    MODEL,
    ClipSource,
    JsonLinesLog,
    build_eval_set,
    default_paths,
    load_diffusion,
    optional_lpips,
    run_baseline,
    run_evaluation,
    run_inference,
)
from .metrics import format_table, write_report
from .spatial_pipeline import DegradationMode
from .training import run_training, train_autoencoder
from .vq_autoencoder import load_autoencoder

logger = logging.getLogger(__name__)

EXIT_CODES = {ErrorCategory.CONFIG: 2, ErrorCategory.DATA: 3, ErrorCategory.CHECKPOINT: 4}
EXIT_OTHER_ERROR = 1


def _with_mode(config: ExperimentConfig, mode: str) -> ExperimentConfig:
    return config.model_copy(update={'degradation': config.degradation.model_copy(update={'mode': DegradationMode(mode)})})


def command_scan(args: argparse.Namespace, config: ExperimentConfig) -> None:
    paths = default_paths(config)
    index = scan_dataset(Path(args.root), DatasetFormat(args.format), ScanLog(paths.scan_log))
    print(f'{"patient":<16}{"slice":<12}{"frames":>7}  time indices')
    for record in index.entries:
        time_range = f'{record.time_indices[0]}..{record.time_indices[-1]}'
        print(f'{record.patient_id:<16}{record.slice_id:<12}{record.frame_count:>7}  {time_range}')
    print(f'{len(index.patient_ids)} patients, {len(index.entries)} series, scan log {paths.scan_log}')


def command_synth_data(args: argparse.Namespace, config: ExperimentConfig) -> None:
    index = write_phantom_dataset(Path(args.out), config.data.phantom, args.patients, args.slices, args.frames, args.seed)
    print(f'Wrote {len(index.entries)} phantom series of {args.frames} frames to {args.out}')


def command_train_autoencoder(args: argparse.Namespace, config: ExperimentConfig) -> None:
    result = train_autoencoder(config, default_paths(config), progress=not args.no_progress)
    print(f'Autoencoder: {result.iterations} iterations, validation PSNR {result.validation_psnr:.2f} dB, {result.checkpoint}')


def command_train(args: argparse.Namespace, config: ExperimentConfig) -> None:
    result = run_training(config, resume=args.resume, paths=default_paths(config), progress=not args.no_progress)
    print(f'Diffusion: {result.iterations} iterations, effective batch {result.effective_batch}, {result.checkpoint}')
    print(f'Loss log: {result.loss_log}')


def command_evaluate(args: argparse.Namespace, config: ExperimentConfig) -> None:
    paths = default_paths(config)
    checkpoint = Path(args.checkpoint) if args.checkpoint else paths.diffusion_checkpoint
    model, _payload = load_diffusion(checkpoint, config.device)
    lpips_scorer = optional_lpips(config)
    source = ClipSource(config.data)
    JsonLinesLog(paths.eval_frames_log).clear()
    rows = {}
    for mode in args.modes:
        mode_config = _with_mode(config, mode)
        eval_set = build_eval_set(source, mode_config)
        baseline, ldm = run_evaluation(
            mode_config,
            checkpoint,
            eval_set,
            model=model,
            lpips_scorer=lpips_scorer,
            paths=paths,
            compare_dumps=args.compare_dumps,
            progress=not args.no_progress,
        )
        rows[mode] = {BASELINE: baseline, MODEL: ldm}
    table_path, _key_value_path = write_report(paths.reports, rows)
    print(format_table(rows))
    print(f'Report: {table_path}')


def command_infer(args: argparse.Namespace, config: ExperimentConfig) -> None:
    paths = default_paths(config)
    if args.phantom_seed is not None:
        clip = synth_phantom_clip(config.data.phantom, config.data.frames_per_clip, args.phantom_seed)
    else:
        source = ClipSource(config.data)
        if args.patient is not None:
            clip = source.clip(args.patient, args.slice)
        else:
            _train, held_out = source.split()
            clip = source.clip(*held_out[0])
    result = run_inference(
        config,
        Path(args.checkpoint),
        clip,
        seed=args.seed,
        paths=paths,
        dump_trajectory=args.dump_trajectory,
        dump_interpolated=args.dump_interpolated,
    )
    metadata = result.sample.metadata
    print(f'Super-resolved {clip.patient_id}/{clip.slice_id} frames {metadata.start_index} + {metadata.triplet_offsets}')
    for dump in result.dump_paths:
        print(f'Dump: {dump}')


def command_baseline(args: argparse.Namespace, config: ExperimentConfig) -> None:
    paths = default_paths(config)
    lpips_scorer = optional_lpips(config)
    autoencoder = None
    if paths.autoencoder_checkpoint.is_file():
        autoencoder = load_autoencoder(paths.autoencoder_checkpoint).to(config.device).freeze()
    source = ClipSource(config.data)
    rows = {}
    for mode in args.modes:
        mode_config = _with_mode(config, mode)
        rows[mode] = {BASELINE: run_baseline(build_eval_set(source, mode_config), lpips_scorer, autoencoder)}
    table_path, _key_value_path = write_report(paths.reports, rows, stem='baseline')
    print(format_table(rows))
    print(f'Report: {table_path}')


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='cine-sr', description='Joint temporal and spatial super-resolution of cine MRI.')
    parser.add_argument('--config', help='Bundled profile name (toy, fullscale) or YAML file. Default from settings.ini.')
    parser.add_argument(
        '--set',
        dest='overrides',
        action='append',
        default=[],
        metavar='KEY=VALUE',
        help='Override a configuration value, e.g. optimizer.learning_rate=1e-4. Repeatable.',
    )
    parser.add_argument('--run-dir', help='Output directory, overrides run_dir of the configuration.')
    parser.add_argument('--log-level', default='INFO', choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], help='Logging level.')
    parser.add_argument('--no-progress', action='store_true', help='Disable progress bars.')
    commands = parser.add_subparsers(dest='command', required=True)
    modes = [mode.value for mode in DegradationMode]
    default_modes = [DegradationMode.REALISTIC.value]

    scan = commands.add_parser('scan', help='Index a dataset and print its series.')
    scan.add_argument('--root', required=True, help='Dataset root directory.')
    scan.add_argument('--format', required=True, choices=[item.value for item in DatasetFormat], help='Dataset layout.')
    scan.set_defaults(handler=command_scan)

    synth = commands.add_parser('synth-data', help='Write a phantom dataset in pgm_tree layout.')
    synth.add_argument('--out', required=True, help='Output dataset root.')
    synth.add_argument('--patients', type=int, default=10, help='Number of patients.')
    synth.add_argument('--slices', type=int, default=2, help='Slices per patient.')
    synth.add_argument('--frames', type=int, default=30, help='Frames per clip.')
    synth.add_argument('--seed', type=int, default=0, help='Base seed of the phantom clips.')
    synth.set_defaults(handler=command_synth_data)

    autoencoder = commands.add_parser('train-autoencoder', help='Pre-train the autoencoder only.')
    autoencoder.set_defaults(handler=command_train_autoencoder)

    train = commands.add_parser('train', help='Train the diffusion model, pre-training the autoencoder if needed.')
    train.add_argument('--resume', action='store_true', help='Continue from the last diffusion checkpoint.')
    train.set_defaults(handler=command_train)

    evaluate = commands.add_parser('evaluate', help='Score baseline and model on the held-out patients.')
    evaluate.add_argument('--checkpoint', help='Diffusion checkpoint. Default: the one of the run directory.')
    evaluate.add_argument('--modes', nargs='+', choices=modes, default=default_modes, help='Degradation modes.')
    evaluate.add_argument('--compare-dumps', type=int, default=0, help='Comparison strips to write per mode.')
    evaluate.set_defaults(handler=command_evaluate)

    infer = commands.add_parser('infer', help='Super-resolve one triplet.')
    infer.add_argument('--checkpoint', required=True, help='Diffusion checkpoint.')
    infer.add_argument('--patient', help='Patient id of the clip.')
    infer.add_argument('--slice', default='00', help='Slice id of the clip.')
    infer.add_argument('--phantom-seed', type=int, help='Use a phantom clip generated with this seed.')
    infer.add_argument('--dump-trajectory', action='store_true', help='Write decoded reverse-process snapshots.')
    infer.add_argument('--dump-interpolated', action='store_true', help='Write interpolated, ground-truth and input frames.')
    infer.add_argument('--seed', type=int, default=0, help='Seed of window, degradation and sampling.')
    infer.set_defaults(handler=command_infer)

    baseline = commands.add_parser('baseline', help='Score the bicubic baseline only.')
    baseline.add_argument('--modes', nargs='+', choices=modes, default=default_modes, help='Degradation modes.')
    baseline.set_defaults(handler=command_baseline)
    return parser


def run(argv: list[str] | None = None) -> int:
    """Parse arguments and run one command.

    Returns:
        Exit code, 0 on success.

    """
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=args.log_level, format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    overrides = list(args.overrides)
    if args.run_dir:
        overrides.append(f'run_dir={args.run_dir}')
    try:
        config = load_config(args.config, overrides, check_paths=True)
        args.handler(args, config)
    except CineSrError as e:
        print(f'ERROR [{e.category}]: {e}', file=sys.stderr)
        return EXIT_CODES.get(e.category, EXIT_OTHER_ERROR)
    return 0


def main() -> None:
    """Entry point of the cine-sr script."""
    print(f'UTC time: {datetime.now(tz=ZoneInfo("UTC")).strftime("%Y-%m-%d %H:%M:%S")}')
    print(f'Python version: {sys.version_info.major}.{sys.version_info.minor}')
    print()
    sys.exit(run())


if __name__ == '__main__':
    main()
