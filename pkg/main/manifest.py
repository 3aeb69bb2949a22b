import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from django.utils import timezone

from main.exceptions import InputError

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def blob_hash(payload: bytes) -> str:
    """Git-style object id of a file's content."""
    return hashlib.sha1(b"blob %d\0" % len(payload) + payload).hexdigest()


def _files(paths):
    for path in paths:
        path = Path(path)
        if path.is_dir():
            yield from sorted(p for p in path.rglob("*") if p.is_file())
        elif path.is_file():
            yield path


def inputs_hash(paths) -> str:
    """One id over every input file, from ``<blob id> <name>`` lines in sorted order."""
    lines = []
    for path in _files(paths):
        try:
            lines.append(f"{blob_hash(path.read_bytes())} {path.as_posix()}")
        except OSError as exc:
            raise InputError(exc.strerror or str(exc), path)
    return blob_hash("\n".join(sorted(lines)).encode("utf-8"))


@dataclass
class RunManifest:
    command: str
    seed: int = None
    config_path: str = None
    arguments: dict = field(default_factory=dict)
    input_hash: str = None
    outputs: list = field(default_factory=list)
    started_at: str = None
    finished_at: str = None
    status: str = "running"

    @classmethod
    def start(cls, command, options, inputs=(), seed=None, config_path=None) -> "RunManifest":
        arguments = {
            key: str(value) if isinstance(value, Path) else value
            for key, value in sorted(options.items())
            if key not in {"verbosity", "settings", "pythonpath", "traceback", "no_color", "force_color", "skip_checks"}
        }
        return cls(
            command=command,
            seed=seed,
            config_path=str(config_path) if config_path is not None else None,
            arguments=arguments,
            input_hash=inputs_hash(inputs),
            started_at=timezone.now().isoformat(),
        )

    def finish(self, outputs=(), status="ok") -> "RunManifest":
        self.outputs = sorted(str(p) for p in outputs)
        self.finished_at = timezone.now().isoformat()
        self.status = status
        return self

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True, default=str) + "\n"

    def write(self, path) -> Path:
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_NAME
        try:
            path.write_text(self.to_json())
        except OSError as exc:
            raise InputError(exc.strerror or str(exc), path)
        logger.info(f"[MANIFEST] command={self.command} path={path} status={self.status}")
        return path
