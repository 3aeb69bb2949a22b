from rest_framework import serializers

from main.exceptions import ConfigError

from .network import ModelConfig


def reject_unknown_keys(serializer, data):
    if not isinstance(data, dict):
        raise serializers.ValidationError("expected a JSON object")
    unknown = sorted(set(data) - set(serializer.fields))
    if unknown:
        raise serializers.ValidationError(f"unknown key(s): {', '.join(unknown)}")


def describe_errors(errors) -> str:
    parts = []
    for key, messages in errors.items():
        if isinstance(messages, dict):
            messages = [describe_errors(messages)]
        parts.append(f"{key}: {' '.join(str(m) for m in messages)}")
    return "; ".join(parts)


class ModelConfigSerializer(serializers.Serializer):
    encoder_widths = serializers.ListField(
        child=serializers.IntegerField(min_value=1),
        min_length=5,
        max_length=5,
        default=lambda: list(ModelConfig.encoder_widths),
    )
    guidance_width = serializers.IntegerField(min_value=1, default=32)
    local_layers = serializers.IntegerField(min_value=1, default=2)
    neighbors = serializers.IntegerField(min_value=1, default=16)
    global_attention = serializers.BooleanField(default=False)
    global_points = serializers.IntegerField(min_value=2, allow_null=True, default=None)
    heads = serializers.IntegerField(min_value=1, default=2)
    normalize_points = serializers.BooleanField(default=True)
    attention_2d = serializers.BooleanField(default=True)
    attention_3d = serializers.BooleanField(default=True)
    position_in_value = serializers.BooleanField(default=True)

    def to_internal_value(self, data):
        reject_unknown_keys(self, data)
        return super().to_internal_value(data)

    def validate(self, attrs):
        widths = attrs["encoder_widths"]
        if widths[0] < 2:
            raise serializers.ValidationError(
                {"encoder_widths": "the first width must be at least 2"}
            )
        if widths[-1] % attrs["heads"]:
            raise serializers.ValidationError(
                {"heads": f"must divide the smallest-scale width {widths[-1]}"}
            )
        return attrs

    def create(self, validated_data):
        return ModelConfig(**validated_data)


def model_config_from(payload) -> ModelConfig:
    serializer = ModelConfigSerializer(data=payload if payload is not None else {})
    if not serializer.is_valid():
        raise ConfigError(f"invalid model config: {describe_errors(serializer.errors)}")
    return serializer.save()
