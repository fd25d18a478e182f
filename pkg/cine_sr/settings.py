"""Run-directory layout and file names read from settings.ini."""
import configparser
from pathlib import Path

SETTINGS_FILE = 'settings.ini'
SETTINGS_SECTION = 'settings'


class Settings:
    """Class container of settings."""

    def __init__(self, setting_path: Path | None = None) -> None:
        """Read settings file.

        Raises:
            FileNotFoundError: if settings file was not found.

        """
        setting_path = setting_path or Path(__file__).parent / SETTINGS_FILE
        if not Path(setting_path).exists():
            error = f'Settings file not found: {setting_path}'
            raise FileNotFoundError(error)
        settings = configparser.ConfigParser()
        settings.read(setting_path)

        for key, value in settings[SETTINGS_SECTION].items():
            setattr(self, key, value)
        self.checkpoint_format_version = int(self.checkpoint_format_version)

    def run_paths(self, run_dir: Path) -> 'RunPaths':
        return RunPaths(self, Path(run_dir))


class RunPaths:
    """Resolved output locations of one run directory."""

    def __init__(self, settings: Settings, run_dir: Path) -> None:
        """Derive the sub-directories and file paths from the settings."""
        self.run_dir = run_dir
        self.checkpoints = run_dir / settings.checkpoints_dir
        self.logs = run_dir / settings.logs_dir
        self.reports = run_dir / settings.reports_dir
        self.dumps = run_dir / settings.dumps_dir
        self.autoencoder_checkpoint = self.checkpoints / settings.autoencoder_checkpoint
        self.diffusion_checkpoint = self.checkpoints / settings.diffusion_checkpoint
        self.train_loss_log = self.logs / settings.train_loss_log
        self.autoencoder_loss_log = self.logs / settings.autoencoder_loss_log
        self.eval_frames_log = self.logs / settings.eval_frames_log
        self.scan_log = self.logs / settings.scan_log

    def create(self) -> 'RunPaths':
        for directory in (self.checkpoints, self.logs, self.reports, self.dumps):
            directory.mkdir(parents=True, exist_ok=True)
        return self


settings = Settings()
