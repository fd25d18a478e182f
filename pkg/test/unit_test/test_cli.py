"""Unit tests for the cine-sr command line."""
import sys
from pathlib import Path

import pytest
from pytest_mock import MockerFixture

from cine_sr import cli
from cine_sr.data_ingest import read_pgm

TINY = ['--set', 'autoencoder.base_channels=8', '--set', 'autoencoder.n_codes=16', '--no-progress']


def test_synth_data_then_scan(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Test writing a phantom dataset and listing its series."""
    data = tmp_path / 'data'
    run_dir = ['--run-dir', str(tmp_path / 'run')]
    assert cli.run([*run_dir, 'synth-data', '--out', str(data), '--patients', '2', '--slices', '1', '--frames', '10']) == 0
    assert read_pgm(data / 'patient_0001' / 'slice_00' / 'frame_009.pgm').shape == (64, 64)
    assert cli.run([*run_dir, 'scan', '--root', str(data), '--format', 'pgm_tree']) == 0
    output = capsys.readouterr().out
    assert '0001' in output
    assert '2 patients, 2 series' in output
    assert (tmp_path / 'run' / 'logs' / 'scan.log').is_file()


def test_baseline_report(tmp_path: Path, capsys: pytest.CaptureFixture[str]) -> None:
    """Test that the baseline command writes its report without a trained model."""
    run_dir = tmp_path / 'run'
    arguments = [*TINY, '--run-dir', str(run_dir), '--set', 'data.eval_samples=2']
    arguments += ['baseline', '--modes', 'realistic', 'bicubic_only']
    assert cli.run(arguments) == 0
    table = (run_dir / 'reports' / 'baseline.txt').read_text(encoding='utf-8')
    assert 'realistic' in table
    assert 'bicubic_only' in table
    assert (run_dir / 'reports' / 'baseline.ini').is_file()
    assert 'Report:' in capsys.readouterr().out


@pytest.mark.parametrize(
    ('arguments', 'exit_code', 'category'),
    [
        (['--set', 'no_such_key=1', 'baseline'], 2, 'config'),
        (['--config', 'no-such-profile', 'baseline'], 2, 'config'),
        (['scan', '--root', '{tmp}/absent', '--format', 'pgm_tree'], 3, 'data'),
        (['infer', '--checkpoint', '{tmp}/missing.pt', '--phantom-seed', '1'], 4, 'checkpoint'),
    ],
)
def test_error_exit_codes(
    tmp_path: Path,
    capsys: pytest.CaptureFixture[str],
    arguments: list[str],
    exit_code: int,
    category: str,
) -> None:
    """Test the categorized error line and the exit code of each error category."""
    arguments = [argument.format(tmp=tmp_path) for argument in arguments]
    assert cli.run(['--run-dir', str(tmp_path / 'run'), *arguments]) == exit_code
    error_lines = capsys.readouterr().err.strip().splitlines()
    assert error_lines[-1].startswith(f'ERROR [{category}]: ')


def test_missing_command() -> None:
    """Test that argparse rejects a call without a command."""
    with pytest.raises(SystemExit) as error:
        cli.run([])
    assert error.value.code == 2


def test_main_prints_banner_and_exits(mocker: MockerFixture, capsys: pytest.CaptureFixture[str]) -> None:
    """Test the start banner and that main exits with the code of run."""
    mocker.patch.object(sys, 'argv', ['cine-sr', 'baseline'])
    run = mocker.patch.object(cli, 'run', return_value=3)
    with pytest.raises(SystemExit) as error:
        cli.main()
    assert error.value.code == 3
    run.assert_called_once_with()
    output = capsys.readouterr().out
    assert output.startswith('UTC time: ')
    assert 'Python version: ' in output
