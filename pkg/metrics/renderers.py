import csv
import io
import json

from rest_framework.renderers import JSONRenderer

from main.exceptions import ConfigError

from .evaluation import MetricsReport
from .serializers import MetricsReportSerializer, report_from_dict, significant


def _serialize(data):
    if isinstance(data, MetricsReport):
        return dict(MetricsReportSerializer(data).data)
    if isinstance(data, dict):
        return {key: _serialize(value) for key, value in data.items()}
    if isinstance(data, (list, tuple)):
        return [_serialize(item) for item in data]
    return data


class ReportJSONRenderer(JSONRenderer):
    """
    Renders metrics reports, alone or nested in dicts and lists, with the
    report fields in declaration order and 6 significant digits.
    """

    def render(self, data, accepted_media_type=None, renderer_context=None):
        renderer_context = {"indent": 2, **(renderer_context or {})}
        return super().render(_serialize(data), accepted_media_type, renderer_context) + b"\n"


def report_to_json(data) -> str:
    return ReportJSONRenderer().render(data).decode("utf-8")


def report_from_json(text) -> MetricsReport:
    try:
        payload = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid report JSON: {exc}")
    return report_from_dict(payload)


def _row(report: MetricsReport):
    return [
        report.valid_count if name == "valid_count" else f"{significant(getattr(report, name)):.6g}"
        for name in MetricsReport.field_names()
    ]


def report_to_csv(report: MetricsReport) -> str:
    return reports_to_csv([(None, report)])


def reports_to_csv(labelled) -> str:
    """CSV with one row per ``(label, report)``; a ``scene`` column leads when labels are given."""
    labelled = list(labelled)
    with_labels = any(label is not None for label, _ in labelled)
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow((["scene"] if with_labels else []) + list(MetricsReport.field_names()))
    for label, report in labelled:
        writer.writerow(([label] if with_labels else []) + _row(report))
    return buffer.getvalue()
