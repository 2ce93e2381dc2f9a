"""Matching mechanisms with costly preference learning: DA, DoSV and Hybrid."""
from importlib import resources
from pathlib import Path

__version__ = "0.1.0"


def bundled(name: str) -> Path:
    """Path of a data file shipped with the package (configs, synthetic datasets)."""
    path = Path(str(resources.files("matchlab") / "data" / name))
    if not path.is_file():
        raise FileNotFoundError(f"no bundled file named {name!r}")
    return path
