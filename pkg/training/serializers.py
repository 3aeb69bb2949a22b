import json
from pathlib import Path

from django.conf import settings
from rest_framework import serializers

from completion.network import ModelConfig
from completion.serializers import describe_errors, model_config_from, reject_unknown_keys
from main.exceptions import ConfigError, InputError

from .services import TrainingConfig


class TrainingConfigSerializer(serializers.Serializer):
    lr = serializers.FloatField(min_value=0.0, default=lambda: settings.ADAM_LR)
    beta1 = serializers.FloatField(min_value=0.0, max_value=1.0, default=lambda: settings.ADAM_BETA1)
    beta2 = serializers.FloatField(min_value=0.0, max_value=1.0, default=lambda: settings.ADAM_BETA2)
    eps = serializers.FloatField(min_value=0.0, default=lambda: settings.ADAM_EPS)
    aux_weight = serializers.FloatField(min_value=0.0, default=lambda: settings.AUX_LOSS_WEIGHT)
    sparse_samples = serializers.IntegerField(min_value=1, default=lambda: settings.DEFAULT_SPARSE_SAMPLES)
    checkpoint_every = serializers.IntegerField(min_value=0, default=lambda: settings.CHECKPOINT_EVERY)

    def to_internal_value(self, data):
        reject_unknown_keys(self, data)
        return super().to_internal_value(data)

    def validate(self, attrs):
        for name in ("beta1", "beta2"):
            if attrs[name] >= 1.0:
                raise serializers.ValidationError({name: "must be below 1"})
        if attrs["eps"] <= 0.0:
            raise serializers.ValidationError({"eps": "must be positive"})
        return attrs

    def create(self, validated_data):
        return TrainingConfig(**validated_data)


def training_config_from(payload) -> TrainingConfig:
    serializer = TrainingConfigSerializer(data=payload if payload is not None else {})
    if not serializer.is_valid():
        raise ConfigError(f"invalid training config: {describe_errors(serializer.errors)}")
    return serializer.save()


def resolve_config_path(name) -> Path:
    """A config file path, or the name of a shipped preset such as ``toy``."""
    path = Path(name)
    if path.exists():
        return path
    preset = Path(settings.PRESETS_DIR) / f"{name}.json"
    if path.suffix == "" and preset.exists():
        return preset
    raise InputError("config file not found", path)


def load_run_config(name) -> tuple[ModelConfig, TrainingConfig]:
    """
    Read a run config: model keys at the top level, training keys under
    ``training``.
    """
    path = resolve_config_path(name)
    try:
        payload = json.loads(path.read_text())
    except OSError as exc:
        raise InputError(exc.strerror or str(exc), path)
    except json.JSONDecodeError as exc:
        raise InputError(f"invalid JSON: {exc}", path)
    if not isinstance(payload, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    payload = dict(payload)
    training = payload.pop("training", None)
    return model_config_from(payload), training_config_from(training)
