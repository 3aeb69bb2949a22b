from pathlib import Path

from main.exceptions import InputError

def validate_input_file(path, suffixes=None) -> Path:
    """Validate that an input file exists and, optionally, has an allowed suffix"""
    path = Path(path)
    if not path.exists():
        raise InputError("file not found", path)
    if not path.is_file():
        raise InputError("not a regular file", path)

    if suffixes is not None:
        allowed = {s.lower() for s in suffixes}
        if path.suffix.lower() not in allowed:
            raise InputError(f"unsupported file type, expected one of {', '.join(sorted(allowed))}", path)
    return path


def ensure_output_dir(path) -> Path:
    """Create an output directory (and parents) if needed"""
    path = Path(path)
    if path.exists() and not path.is_dir():
        raise InputError("output path exists and is not a directory", path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)
    return path
