"""
Checkpoint directories::

    <dir>/config.json          model config + training config + seed
    <dir>/state.json           step counter and Adam step
    <dir>/params/<name>.dtns   one DTNS tensor per parameter
    <dir>/optimizer/m|v/<name>.dtns   Adam moments (training checkpoints only)

Everything is written deterministically so two identical runs produce
byte-identical directories.
"""

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from main.exceptions import ConfigError, DimensionError, InputError
from tensor_core.io import read_tensor, write_tensor

from .network import DeCoTR
from .serializers import model_config_from

logger = logging.getLogger(__name__)

SUFFIX = ".dtns"


@dataclass
class Checkpoint:
    model: DeCoTR
    step: int = 0
    training: dict = field(default_factory=dict)
    moments: dict = field(default_factory=dict)
    adam_step: int = 0


def _write_json(path: Path, payload):
    try:
        path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc}", path)


def _write_arrays(directory: Path, arrays):
    for name, value in arrays.items():
        write_tensor(directory / f"{name}{SUFFIX}", value)


def _read_arrays(directory: Path):
    if not directory.is_dir():
        return {}
    return {path.name[: -len(SUFFIX)]: read_tensor(path).data for path in sorted(directory.glob(f"*{SUFFIX}"))}


def save_checkpoint(path, model: DeCoTR, step=0, training=None, moments=None, adam_step=0) -> Path:
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)
    _write_json(
        path / "config.json",
        {"model": model.cfg.to_dict(), "training": training or {}, "seed": model.seed},
    )
    _write_json(path / "state.json", {"step": int(step), "adam_step": int(adam_step)})
    _write_arrays(path / "params", {name: p.data for name, p in model.parameters().items()})
    for key, arrays in (moments or {}).items():
        _write_arrays(path / "optimizer" / key, arrays)
    logger.info(f"[CKPT] saved path={path} step={step} params={model.parameter_count()}")
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_dir():
        raise InputError("checkpoint directory not found", path)
    config = _read_json(path / "config.json")
    state = _read_json(path / "state.json") if (path / "state.json").exists() else {}
    cfg = model_config_from(config.get("model"))
    model = DeCoTR(cfg, seed=config.get("seed", 0))

    arrays = _read_arrays(path / "params")
    expected = set(model.parameters())
    unexpected = sorted(set(arrays) - expected)
    if unexpected:
        raise ConfigError(
            f"{path}: checkpoint holds parameters the config does not build: {', '.join(unexpected[:5])}"
        )
    try:
        model = model.load_arrays(arrays)
    except (ConfigError, DimensionError) as exc:
        raise ConfigError(f"{path}: checkpoint does not match its config: {exc}")

    moments = {}
    for key in ("m", "v"):
        loaded = _read_arrays(path / "optimizer" / key)
        if loaded:
            moments[key] = loaded
    logger.info(f"[CKPT] loaded path={path} step={state.get('step', 0)}")
    return Checkpoint(
        model,
        step=int(state.get("step", 0)),
        training=config.get("training") or {},
        moments=moments,
        adam_step=int(state.get("adam_step", 0)),
    )
