"""Access to the packaged example graphs (fig4, fig2, bench3)."""

from importlib import resources
from pathlib import Path


def fixture_path(name: str) -> Path:
    """Filesystem path of a packaged graph file; ``name`` may omit ``.json``."""
    if not name.endswith(".json"):
        name += ".json"
    path = Path(str(resources.files("latentlab") / "fixtures" / name))
    if not path.exists():
        available = sorted(p.name for p in path.parent.glob("*.json"))
        raise FileNotFoundError(f"no packaged fixture {name!r}; available: {available}")
    return path
