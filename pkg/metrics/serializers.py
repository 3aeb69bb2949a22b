from rest_framework import serializers

from completion.serializers import describe_errors, reject_unknown_keys
from main.exceptions import ConfigError

from .evaluation import MetricsReport

SIGNIFICANT_DIGITS = 6


def significant(value, digits=SIGNIFICANT_DIGITS) -> float:
    return float(f"{value:.{digits}g}")


class SignificantFloatField(serializers.FloatField):
    def to_representation(self, value):
        return significant(value)


class MetricsReportSerializer(serializers.Serializer):
    rmse = SignificantFloatField(min_value=0.0)
    mae = SignificantFloatField(min_value=0.0)
    abs_rel = SignificantFloatField(min_value=0.0)
    irmse = SignificantFloatField(min_value=0.0)
    imae = SignificantFloatField(min_value=0.0)
    delta1 = SignificantFloatField(min_value=0.0, max_value=100.0)
    delta2 = SignificantFloatField(min_value=0.0, max_value=100.0)
    delta3 = SignificantFloatField(min_value=0.0, max_value=100.0)
    valid_count = serializers.IntegerField(min_value=1)

    def to_internal_value(self, data):
        reject_unknown_keys(self, data)
        return super().to_internal_value(data)

    def validate(self, attrs):
        if not attrs["delta1"] <= attrs["delta2"] <= attrs["delta3"]:
            raise serializers.ValidationError("delta percentages must be non-decreasing")
        # a root mean square never falls below the mean of the same absolute errors
        if attrs["rmse"] < attrs["mae"]:
            raise serializers.ValidationError("rmse must be at least mae")
        if attrs["irmse"] < attrs["imae"]:
            raise serializers.ValidationError("irmse must be at least imae")
        return attrs

    def create(self, validated_data):
        return MetricsReport(**validated_data)


def report_from_dict(payload) -> MetricsReport:
    serializer = MetricsReportSerializer(data=payload)
    if not serializer.is_valid():
        raise ConfigError(f"invalid metrics report: {describe_errors(serializer.errors)}")
    return serializer.save()
