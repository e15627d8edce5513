"""JSON TimeMap serialization (application/json).

Structure::

    {
      "original_uri": ...,
      "timegate_uri": ...,          # when known
      "timemap_uri": {"link_format": ..., "json_format": ..., "cdxj_format": ...},
      "context": [...],
      "mementos": [ {"uri": ..., "rel": ..., "datetime": ..., <enrichment>}, ... ]
    }

Unlike the link format, this one carries access attributes, so it is the
interchange shape used between aggregation tiers.
"""

from __future__ import annotations

import json
from typing import Any

from ..exceptions import DatetimeError, JsonParseError, UriParseError, ValidationError
from ..model import MementoRecord, OriginalUri, TimeMap
from .payload import record_from_payload, record_to_payload

MEDIA_TYPE = "application/json"

_SELF_FORMAT_FIELDS = (("link", "link_format"), ("json", "json_format"), ("cdxj", "cdxj_format"))


def serialize_json(timemap: TimeMap) -> str:
    """Render a TimeMap as a JSON document (two-space indent, trailing newline)."""
    doc: dict[str, Any] = {"original_uri": timemap.original.value}
    if timemap.timegate_uri:
        doc["timegate_uri"] = timemap.timegate_uri
    timemap_uri = {
        field: timemap.self_uris[name]
        for name, field in _SELF_FORMAT_FIELDS
        if name in timemap.self_uris
    }
    if timemap_uri:
        doc["timemap_uri"] = timemap_uri
    doc["context"] = list(timemap.context_uris)
    for key in sorted(timemap.meta_extensions):
        doc.setdefault(key, timemap.meta_extensions[key])
    doc["mementos"] = [record_to_payload(record) for record in timemap.mementos]
    return json.dumps(doc, indent=2, ensure_ascii=False) + "\n"


_TOP_LEVEL_KEYS = frozenset(
    ["original_uri", "timegate_uri", "timemap_uri", "context", "mementos"]
)


def parse_json(text: str, *, strict: bool = False) -> TimeMap:
    """Parse a JSON TimeMap. Document order and rel markers are preserved.

    Lenient mode (default) drops invalid memento entries with a warning;
    strict mode raises JsonParseError for any defect.
    """
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise JsonParseError(f"invalid JSON: {exc.msg} (line {exc.lineno})") from exc
    if not isinstance(doc, dict):
        raise JsonParseError(f"document must be an object, got {type(doc).__name__}")

    raw_original = doc.get("original_uri")
    if not isinstance(raw_original, str):
        raise JsonParseError("document missing original_uri")
    try:
        original = OriginalUri(raw_original)
    except UriParseError as exc:
        raise JsonParseError(f"bad original_uri: {exc}") from exc

    timegate_uri = doc.get("timegate_uri")
    if timegate_uri is not None and not isinstance(timegate_uri, str):
        raise JsonParseError("timegate_uri must be a string")

    self_uris: dict[str, str] = {}
    timemap_uri = doc.get("timemap_uri", {})
    if timemap_uri and not isinstance(timemap_uri, dict):
        raise JsonParseError("timemap_uri must be an object")
    for fmt, field in _SELF_FORMAT_FIELDS:
        uri = timemap_uri.get(field) if isinstance(timemap_uri, dict) else None
        if isinstance(uri, str):
            self_uris[fmt] = uri

    context = doc.get("context", [])
    if not isinstance(context, list) or not all(isinstance(u, str) for u in context):
        raise JsonParseError("context must be a list of URIs")

    records: list[MementoRecord] = []
    warnings: list[str] = []
    entries = doc.get("mementos", [])
    if not isinstance(entries, list):
        raise JsonParseError("mementos must be a list")
    for index, entry in enumerate(entries):
        try:
            if not isinstance(entry, dict):
                raise ValidationError(f"memento entry must be an object, got {entry!r}")
            record, record_warnings = record_from_payload(entry)
            warnings.extend(f"mementos[{index}]: {w}" for w in record_warnings)
            records.append(record)
        except (ValidationError, DatetimeError, UriParseError) as exc:
            if strict:
                raise JsonParseError(f"mementos[{index}]: {exc}") from exc
            warnings.append(f"mementos[{index}]: {exc}")

    meta_extensions = {k: v for k, v in doc.items() if k not in _TOP_LEVEL_KEYS}

    return TimeMap(
        original=original,
        timegate_uri=timegate_uri,
        self_uris=self_uris,
        context_uris=tuple(context),
        mementos=tuple(records),
        meta_extensions=meta_extensions,
        warnings=tuple(warnings),
    )


__all__ = ["MEDIA_TYPE", "parse_json", "serialize_json"]
