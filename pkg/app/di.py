from typing import Optional

from app.cli.schemas import RunSettings

_run_settings: Optional[RunSettings] = None


def set_run_settings(settings: RunSettings) -> None:
    global _run_settings
    _run_settings = settings


def get_run_settings() -> RunSettings:
    if _run_settings is None:
        raise RuntimeError("RunSettings is not initialized (main() has not run).")
    return _run_settings


def reset_run_settings() -> None:
    global _run_settings
    _run_settings = None
