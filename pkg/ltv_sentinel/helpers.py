import os
import tempfile
from pathlib import Path
from typing import Dict, List


def create_directory(path: Path | str) -> None:
    """Create a directory from a string or a Path object.

    Args:
        path (Path, str): Directory path
    """
    if isinstance(path, str):
        path = Path(path)
    path.mkdir(parents=True, exist_ok=True)


def create_file(path: Path | str) -> None:
    if isinstance(path, str):
        path = Path(path)
    path.touch()


def get_files_in_dir(path: Path | str, pattern: str = "*") -> List[Path]:
    """Get the files in a directory matching a glob pattern, sorted by name.

    Args:
        path (Path, str): Directory path
        pattern (str): Glob pattern. Defaults to '*' (optional).

    Returns:
        List[Path]: Sorted list of path objects, empty if the directory does not exist.
    """
    if isinstance(path, str):
        path = Path(path)
    if not path.is_dir():
        return []
    return sorted(item for item in path.glob(pattern) if item.is_file())


def write_atomic(path: Path | str, content: str) -> Path:
    """Write text to a file through a temporary sibling and a rename.

    Readers never observe a half-written file: either the old content or the new one.

    Args:
        path (Path, str): Destination file path.
        content (str): Text to write.

    Returns:
        Path: The destination path.
    """
    if isinstance(path, str):
        path = Path(path)
    create_directory(path.parent)
    fd, tmp_name = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as handle:
            handle.write(content)
        os.replace(tmp_name, path)
    except BaseException:
        Path(tmp_name).unlink(missing_ok=True)
        raise
    return path


def write_files_atomic(out_dir: Path | str, files: Dict[str, str]) -> List[Path]:
    """Write a batch of already-rendered files into a directory.

    Args:
        out_dir (Path, str): Output directory.
        files (Dict[str, str]): Mapping of file name to file content.

    Returns:
        List[Path]: Written paths, in name order.
    """
    out_dir = Path(out_dir)
    return [write_atomic(out_dir / name, files[name]) for name in sorted(files)]


def get_thread_cap(default: int = 1) -> int:
    """Read the worker-thread cap from LTV_SENTINEL_THREADS.

    Args:
        default (int): Value used when the variable is unset or invalid. Defaults to 1 (optional).

    Returns:
        int: A positive thread count.
    """
    raw = os.getenv("LTV_SENTINEL_THREADS")
    try:
        value = int(raw) if raw else default
    except ValueError:
        return default
    return max(value, 1)
