"""Cross-phase effects of inverter reactive power on unbalanced feeders."""

from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def data_path(name: str) -> Path:
    """Path of a bundled feeder or profile file."""
    return Path(str(resources.files(__package__) / "data" / name))
