"""CDXJ TimeMap serialization.

A document is a block of ``!``-prefixed metadata lines followed by record
lines. Each record line is a 14-digit sort key, one space, and a JSON
object. Metadata must precede all records.

Example::

    !context ["https://oduwsdl.github.io/contexts/memento"]
    !id {"uri": "http://localhost:1208/timemap/cdxj/http://facebook.com"}
    !keys ["memento_datetime_YYYYMMDDhhmmss"]
    !meta {"original_uri": "http://facebook.com"}
    19981212013921 {"uri": "http://archive.is/19981212013921/http://facebook.com/", "rel": "first memento", "datetime": "Sat, 12 Dec 1998 01:39:21 GMT"}
"""

from __future__ import annotations

import json
import logging
from typing import Any

from ..exceptions import CdxjParseError, DatetimeError, UriParseError, ValidationError
from ..model import MementoRecord, OriginalUri, TimeMap
from .payload import record_from_payload, record_to_payload

logger = logging.getLogger(__name__)

MEDIA_TYPE = "text/x-cdxj"

# The only record key scheme this codec understands: sort keys are capture
# datetimes in 14-digit form.
SORT_KEY_SCHEME = "memento_datetime_YYYYMMDDhhmmss"

_SELF_FORMAT_FIELDS = (("link", "link_format"), ("json", "json_format"), ("cdxj", "cdxj_format"))


def _dumps(value: Any) -> str:
    return json.dumps(value, ensure_ascii=False)


def serialize_cdxj(timemap: TimeMap) -> str:
    """Render a TimeMap as CDXJ text (LF line endings, trailing newline)."""
    lines: list[str] = []
    lines.append(f"!context {_dumps(list(timemap.context_uris))}")
    cdxj_self = timemap.self_uris.get("cdxj")
    if cdxj_self:
        lines.append(f"!id {_dumps({'uri': cdxj_self})}")
    lines.append(f"!keys {_dumps([SORT_KEY_SCHEME])}")
    lines.append(f"!meta {_dumps({'original_uri': timemap.original.value})}")
    if timemap.timegate_uri:
        lines.append(f"!meta {_dumps({'timegate_uri': timemap.timegate_uri})}")
    timemap_uri = {
        field: timemap.self_uris[name]
        for name, field in _SELF_FORMAT_FIELDS
        if name in timemap.self_uris
    }
    if timemap_uri:
        lines.append(f"!meta {_dumps({'timemap_uri': timemap_uri})}")
    for key in sorted(timemap.meta_extensions):
        lines.append(f"!meta {_dumps({key: timemap.meta_extensions[key]})}")
    for record in timemap.mementos:
        lines.append(f"{record.datetime.key} {_dumps(record_to_payload(record))}")
    return "\n".join(lines) + "\n"


def _parse_bang_line(line: str, lineno: int) -> tuple[str, Any]:
    body = line[1:]
    name, sep, rest = body.partition(" ")
    if not sep or not name:
        raise CdxjParseError(f"malformed metadata line {line!r}", lineno)
    try:
        value = json.loads(rest)
    except json.JSONDecodeError as exc:
        raise CdxjParseError(f"metadata JSON invalid in !{name}: {exc.msg}", lineno) from exc
    return name, value


def _parse_record_line(line: str, lineno: int) -> tuple[MementoRecord, list[str]]:
    key, sep, rest = line.partition(" ")
    if not sep:
        raise CdxjParseError(f"record line has no payload: {line!r}", lineno)
    if len(key) != 14 or not key.isdigit():
        raise CdxjParseError(f"sort key {key!r} is not a 14-digit datetime", lineno)
    try:
        payload = json.loads(rest)
    except json.JSONDecodeError as exc:
        raise CdxjParseError(f"record JSON invalid: {exc.msg}", lineno) from exc
    if not isinstance(payload, dict):
        raise CdxjParseError(f"record payload must be an object, got {type(payload).__name__}", lineno)
    try:
        return record_from_payload(payload, sort_key=key)
    except (ValidationError, DatetimeError, UriParseError) as exc:
        raise CdxjParseError(str(exc), lineno) from exc


def parse_cdxj(text: str, *, strict: bool = False) -> TimeMap:
    """Parse CDXJ text into a TimeMap.

    Document order and explicit rel markers are preserved. In lenient mode
    (the default) invalid record lines are skipped and surfaced through
    ``TimeMap.warnings``; in strict mode any defect raises CdxjParseError.
    Metadata after the first record is an error in both modes, as is a
    ``!keys`` declaration naming an unknown sort-key scheme.
    """
    context_uris: list[str] = []
    original: OriginalUri | None = None
    timegate_uri: str | None = None
    self_uris: dict[str, str] = {}
    meta_extensions: dict[str, Any] = {}
    records: list[MementoRecord] = []
    warnings: list[str] = []
    saw_record = False

    def defect(message: str, lineno: int) -> None:
        if strict:
            raise CdxjParseError(message, lineno)
        warnings.append(f"line {lineno}: {message}")
        logger.debug("skipping cdxj line %d: %s", lineno, message)

    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("!"):
            if saw_record:
                raise CdxjParseError("metadata lines must precede all records", lineno)
            name, value = _parse_bang_line(line, lineno)
            if name == "context":
                if not isinstance(value, list) or not all(isinstance(u, str) for u in value):
                    raise CdxjParseError("!context must be a list of URIs", lineno)
                context_uris.extend(value)
            elif name == "id":
                if not isinstance(value, dict) or not isinstance(value.get("uri"), str):
                    raise CdxjParseError('!id must be {"uri": ...}', lineno)
                self_uris.setdefault("cdxj", value["uri"])
            elif name == "keys":
                if value != [SORT_KEY_SCHEME]:
                    raise CdxjParseError(
                        f"unsupported sort key scheme {value!r}; "
                        f"only {[SORT_KEY_SCHEME]!r} is understood",
                        lineno,
                    )
            elif name == "meta":
                if not isinstance(value, dict):
                    raise CdxjParseError("!meta must be an object", lineno)
                for meta_key, meta_value in value.items():
                    if meta_key == "original_uri" and isinstance(meta_value, str):
                        try:
                            original = OriginalUri(meta_value)
                        except UriParseError as exc:
                            raise CdxjParseError(f"bad original_uri: {exc}", lineno) from exc
                    elif meta_key == "timegate_uri" and isinstance(meta_value, str):
                        timegate_uri = meta_value
                    elif meta_key == "timemap_uri" and isinstance(meta_value, dict):
                        for fmt, field in _SELF_FORMAT_FIELDS:
                            uri = meta_value.get(field)
                            if isinstance(uri, str):
                                self_uris[fmt] = uri
                    else:
                        meta_extensions[meta_key] = meta_value
            else:
                meta_extensions[f"!{name}"] = value
        else:
            saw_record = True
            try:
                record, record_warnings = _parse_record_line(line, lineno)
            except CdxjParseError as exc:
                defect(exc.message, exc.line or lineno)
                continue
            warnings.extend(f"line {lineno}: {w}" for w in record_warnings)
            records.append(record)

    if original is None:
        raise CdxjParseError("document missing original_uri metadata")

    return TimeMap(
        original=original,
        timegate_uri=timegate_uri,
        self_uris=self_uris,
        context_uris=tuple(context_uris),
        mementos=tuple(records),
        meta_extensions=meta_extensions,
        warnings=tuple(warnings),
    )


__all__ = ["MEDIA_TYPE", "SORT_KEY_SCHEME", "parse_cdxj", "serialize_cdxj"]
